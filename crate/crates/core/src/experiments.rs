//! Experiment drivers shared by the command line and the acceptance suite:
//! data and ablation arms, metric evaluation on trained tokenizers, the
//! analytic check battery, loss-term experiments and swap strips.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::diagnostics::{
    avg_ig, lso_run, mc_dataset, mc_pair, path_losses, summarize_avg_ig, uniform_grid, AvgIgResult, IdentityDecoder,
    LatentDecoder, LsoConfig, McDatasetResult, RealismLoss, TokenizerDecoder,
};
use crate::error::{Error, Result};
use crate::evaluation::{proxy_fid, FeatureExtractor};
use crate::generator::{generate, GeneratorBundle};
use crate::io::fmt_f64;
use crate::oracle::{
    analytic_lso, brute_force_lmax, check_lemma_avgig, theorem_mc_bound, BarrierDecoder, LinearDecoder,
    LipschitzCertificate, MlpRealism,
};
use crate::rng::RngStream;
use crate::synthworld::{noise_images, sample_nearby_pairs, train_task_classifier, Dataset, NearbyPair, PairMode, TaskClassifier};
use crate::tensor::Tensor;
use crate::tokenizer::{
    decode, encode, realism_loss, swap_tokens, train_realism_probe, train_tokenizer_with, ModelBundle, ProbeConfig,
    StepLosses, TokenizerConfig, TrainOutcome,
};

pub struct Split {
    pub train: Dataset,
    pub held: Dataset,
}

pub fn dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    Dataset::generate(cfg.data.count, &RngStream::new(cfg.seeds.data))
}

pub fn split(cfg: &ExperimentConfig, data: &Dataset) -> Result<Split> {
    let (train, held) = data.split(cfg.data.train)?;
    Ok(Split { train, held })
}

/// Loss-term ablations; every arm shares data order and initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    Full,
    NoMi,
    NoSwap,
    NoAfm,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Full, Arm::NoMi, Arm::NoSwap, Arm::NoAfm];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoMi => "no_mi",
            Arm::NoSwap => "no_swap",
            Arm::NoAfm => "no_afm",
        }
    }

    pub fn apply(self, cfg: &TokenizerConfig) -> TokenizerConfig {
        let mut c = cfg.clone();
        match self {
            Arm::Full => {}
            Arm::NoMi => c.use_mi = false,
            Arm::NoSwap => c.use_swap = false,
            Arm::NoAfm => c.use_afm = false,
        }
        c
    }
}

pub fn tokenizer_stream(seed: u64) -> RngStream {
    RngStream::new(seed).child(7)
}

pub fn train_tokenizer_run(
    cfg: &ExperimentConfig,
    tok: &TokenizerConfig,
    train: &Dataset,
    seed: u64,
    progress: impl FnMut(usize, &StepLosses),
) -> Result<TrainOutcome> {
    let mut tok = tok.clone();
    tok.arch = cfg.tokenizer.arch;
    train_tokenizer_with(&tok, train, &tokenizer_stream(seed), progress)
}

pub fn tokenizer_checkpoint(b: &ModelBundle) -> Checkpoint {
    Checkpoint::new(b.schedule.clone(), b.arrays())
}

pub fn load_tokenizer(path: &Path) -> Result<ModelBundle> {
    let c = Checkpoint::load(path)?;
    ModelBundle::from_arrays(c.schedule, &c.arrays)
}

pub fn load_generator(path: &Path) -> Result<GeneratorBundle> {
    let c = Checkpoint::load(path)?;
    GeneratorBundle::from_arrays(c.schedule, &c.arrays)
}

/// Config keys a trained tokenizer depends on (loss flags are set per arm).
pub const TOKENIZER_KEYS: [&str; 4] = ["data.", "tokenizer.", "losses.", "seeds.data"];
pub const GENERATOR_KEYS: [&str; 6] = ["data.", "tokenizer.", "losses.", "generator.", "seeds.data", "seeds.generator"];

pub fn tokenizer_key(cfg: &ExperimentConfig) -> String {
    cfg.hash_of(&TOKENIZER_KEYS)
}

/// Trains, or reloads from `dir`, one tokenizer per `(config, arm, seed)`.
pub fn cached_tokenizer(dir: &Path, cfg: &ExperimentConfig, arm: Arm, seed: u64, train: &Dataset) -> Result<ModelBundle> {
    let path = dir.join(format!("tok-{}-{}-{seed}.tklb", &tokenizer_key(cfg)[..16], arm.name()));
    if let Ok(b) = load_tokenizer(&path) {
        return Ok(b);
    }
    std::fs::create_dir_all(dir)?;
    let out = train_tokenizer_run(cfg, &arm.apply(&cfg.tokenizer), train, seed, |_, _| {})?;
    if let Some(e) = out.diverged {
        return Err(e);
    }
    tokenizer_checkpoint(&out.bundle).save(&path)?;
    Ok(out.bundle)
}

pub fn cache_path(dir: &Path, cfg: &ExperimentConfig, what: &str, keys: &[&str]) -> PathBuf {
    dir.join(format!("{what}-{}", &cfg.hash_of(keys)[..16]))
}

/// Nearest neighbours of the first `mc_anchors` held-out images: same-class
/// within `epsilon`, cross-class within `epsilon_cross`.
pub fn mc_pairs(cfg: &ExperimentConfig, held: &Dataset) -> Result<Vec<NearbyPair>> {
    let anchors: Vec<usize> = (0..cfg.diagnostics.mc_anchors.min(held.len())).collect();
    let mut pairs = sample_nearby_pairs(held, &anchors, cfg.diagnostics.epsilon, PairMode::SameClass)?;
    pairs.extend(sample_nearby_pairs(held, &anchors, cfg.diagnostics.epsilon_cross, PairMode::CrossClass)?);
    if pairs.is_empty() {
        return Err(Error::Invalid("no nearby pairs within epsilon".into()));
    }
    Ok(pairs)
}

/// AvgIG over the first `avgig_images` held-out images, pooled over restarts.
pub fn evaluate_avgig(cfg: &ExperimentConfig, bundle: &ModelBundle, held: &Dataset) -> Result<AvgIgResult> {
    let dec = TokenizerDecoder { bundle, steps: cfg.diagnostics.decode_steps };
    let targets = held.images.slice_rows(0, cfg.diagnostics.avgig_images.min(held.len()));
    let mut trajectories = Vec::new();
    for r in 0..cfg.diagnostics.restarts {
        let rng = RngStream::new(cfg.seeds.diagnostics).at(&[0, r as u64]);
        trajectories.extend(avg_ig(&dec, &targets, &rng, &cfg.lso())?.trajectories);
    }
    summarize_avg_ig(trajectories)
}

pub fn evaluate_mc(cfg: &ExperimentConfig, bundle: &ModelBundle, realism: &dyn RealismLoss, held: &Dataset) -> Result<McDatasetResult> {
    let dec = TokenizerDecoder { bundle, steps: cfg.diagnostics.decode_steps };
    let tokens = encode(bundle, &held.images)?;
    mc_dataset(&dec, realism, &tokens, &mc_pairs(cfg, held)?, cfg.diagnostics.grid, cfg.diagnostics.delta)
}

/// Dataset MC on the configured grid and on a dense grid over the first
/// `max_pairs` pairs; returns `(coarse, dense)`.
pub fn mc_grid_adequacy(
    cfg: &ExperimentConfig,
    bundle: &ModelBundle,
    realism: &dyn RealismLoss,
    held: &Dataset,
    dense: usize,
    max_pairs: usize,
) -> Result<(f64, f64)> {
    let dec = TokenizerDecoder { bundle, steps: cfg.diagnostics.decode_steps };
    let tokens = encode(bundle, &held.images)?;
    let pairs = mc_pairs(cfg, held)?;
    let pairs = &pairs[..pairs.len().min(max_pairs)];
    let (mut coarse, mut fine) = (0.0, 0.0);
    for p in pairs {
        let (za, zb) = (tokens.row(p.anchor), tokens.row(p.neighbor));
        let rec = mc_pair(&dec, realism, za, zb, cfg.diagnostics.grid, cfg.diagnostics.delta)?;
        coarse += rec.mc;
        let lmax = brute_force_lmax(&dec, realism, za, zb, dense)?.max(rec.l_max);
        fine += rec.l_ref / (lmax + cfg.diagnostics.delta);
    }
    Ok((coarse / pairs.len() as f64, fine / pairs.len() as f64))
}

pub fn own_realism(bundle: &ModelBundle) -> impl Fn(&Tensor) -> Result<Vec<f64>> + '_ {
    move |x: &Tensor| realism_loss(bundle, x)
}

pub fn task_classifier(cfg: &ExperimentConfig, s: &Split) -> Result<TaskClassifier> {
    train_task_classifier(&s.train, &s.held, cfg.evaluation.classifier_steps, &RngStream::new(cfg.seeds.evaluation).child(1))
}

pub fn proxy_rfid(cfg: &ExperimentConfig, bundle: &ModelBundle, held: &Dataset) -> Result<f64> {
    let n = cfg.evaluation.fid_images.min(held.len());
    let x = held.images.slice_rows(0, n);
    let rec = decode(bundle, &encode(bundle, &x)?, cfg.diagnostics.decode_steps)?;
    proxy_fid(&rec, &x, &FeatureExtractor::new(cfg.evaluation.feature_seed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationReport {
    pub task_accuracy: f64,
    pub proxy_gfid: f64,
    pub noise_fid: f64,
    pub samples: Tensor,
    pub classes: Vec<usize>,
}

/// Class-balanced samples decoded through the tokenizer, scored by the
/// task classifier and by proxy-FID against held-out images.
pub fn evaluate_generator(
    cfg: &ExperimentConfig,
    tokenizer: &ModelBundle,
    gen: &GeneratorBundle,
    clf: &TaskClassifier,
    held: &Dataset,
) -> Result<GenerationReport> {
    let n = cfg.evaluation.samples;
    let classes: Vec<usize> = (0..n).map(|i| i % gen.arch.num_classes).collect();
    let g = &cfg.generator;
    let z = generate(gen, &classes, g.sample_steps, g.head_ddim_steps, g.cfg_scale, &RngStream::new(cfg.seeds.generator).child(2))?;
    let samples = decode(tokenizer, &z, cfg.diagnostics.decode_steps)?;
    let real = held.images.slice_rows(0, cfg.evaluation.fid_images.min(held.len()));
    let fx = FeatureExtractor::new(cfg.evaluation.feature_seed);
    let noise = noise_images(real.rows(), &RngStream::new(cfg.seeds.evaluation).child(3));
    Ok(GenerationReport {
        task_accuracy: clf.accuracy(&samples, &classes)?,
        proxy_gfid: proxy_fid(&samples, &real, &fx)?,
        noise_fid: proxy_fid(&noise, &real, &fx)?,
        samples,
        classes,
    })
}

/// Tokens of `za` with the first `m` positions of `order` taken from `zb`,
/// for `m = 0..=K`, renormalized like training swaps.
pub fn progressive_swaps(za: &[f64], zb: &[f64], order: &[usize], d: usize) -> Result<Tensor> {
    let k = order.len();
    if za.len() != k * d || zb.len() != k * d {
        return Err(Error::Invalid("token length does not match the swap order".into()));
    }
    let rows = k + 1;
    let a = Tensor::from_raw(vec![rows, k * d], za.repeat(rows));
    let b = Tensor::from_raw(vec![rows, k * d], zb.repeat(rows));
    let masks: Vec<Vec<bool>> = (0..rows)
        .map(|m| {
            let mut row = vec![false; k];
            order[..m].iter().for_each(|&j| row[j] = true);
            row
        })
        .collect();
    swap_tokens(&a, &b, &masks, d, true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwapStrip {
    pub anchor: usize,
    pub partner: usize,
    pub images: Tensor,
    pub losses: Vec<f64>,
}

impl SwapStrip {
    pub fn max_endpoint(&self) -> f64 {
        self.losses[0].max(*self.losses.last().expect("nonempty strip"))
    }

    /// Largest intermediate loss over the larger endpoint loss.
    pub fn barrier_ratio(&self) -> f64 {
        let inner = self.losses[1..self.losses.len() - 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        inner / self.max_endpoint()
    }
}

pub fn swap_strip(
    bundle: &ModelBundle,
    realism: &dyn RealismLoss,
    images: &Dataset,
    anchor: usize,
    partner: usize,
    steps: usize,
) -> Result<SwapStrip> {
    let x = images.batch(&[anchor, partner]);
    let z = encode(bundle, &x)?;
    let order: Vec<usize> = (0..bundle.arch.k).collect();
    let zs = progressive_swaps(z.row(0), z.row(1), &order, bundle.arch.d)?;
    let imgs = decode(bundle, &zs, steps)?;
    let losses = realism.loss(&imgs)?;
    Ok(SwapStrip { anchor, partner, images: imgs, losses })
}

/// The eight fixed strip pairs: held-out image `i` with image `i + 8`.
pub fn strip_pairs() -> Vec<(usize, usize)> {
    (0..8).map(|i| (i, i + 8)).collect()
}

pub fn write_strip(path: &Path, strip: &SwapStrip) -> Result<()> {
    let rows: Vec<&[f64]> = (0..strip.images.rows()).map(|i| strip.images.row(i)).collect();
    let mut buf = Vec::new();
    crate::synthworld::write_pgm_strip(&mut buf, &rows)?;
    crate::io::write_atomic(path, &buf)
}

/// Central-difference norm `||D(z + h e_j) - D(z - h e_j)|| / 2h` per latent
/// coordinate, averaged over the rows of `tokens`.
pub fn coordinate_sensitivity(dec: &dyn LatentDecoder, tokens: &Tensor, h: f64) -> Result<Vec<f64>> {
    let l = dec.latent_dim();
    let mut out = vec![0.0; l];
    for i in 0..tokens.rows() {
        let mut pts = Vec::with_capacity(2 * l * l);
        for j in 0..l {
            for sgn in [1.0, -1.0] {
                let mut z = tokens.row(i).to_vec();
                z[j] += sgn * h;
                pts.extend(z);
            }
        }
        let x = dec.decode(&Tensor::from_raw(vec![2 * l, l], pts))?;
        for (j, o) in out.iter_mut().enumerate() {
            let d: f64 = x.row(2 * j).iter().zip(x.row(2 * j + 1)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            *o += d / (2.0 * h) / tokens.rows() as f64;
        }
    }
    Ok(out)
}

/// Per-token sensitivity: mean over the token's coordinates.
pub fn token_sensitivity(bundle: &ModelBundle, images: &Tensor, steps: usize) -> Result<Vec<f64>> {
    let dec = TokenizerDecoder { bundle, steps };
    let tokens = encode(bundle, images)?;
    let per = coordinate_sensitivity(&dec, &tokens, 1e-4)?;
    Ok(per.chunks(bundle.arch.d).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect())
}

/// Swap probes: for each pair a Bernoulli(0.5) mask, the composition
/// `z^{A<-B}`, and the realism loss along the chord from `z_A` to it.
pub struct SwapProbe {
    pub chord_lmax: Vec<f64>,
    pub swapped_loss: Vec<f64>,
}

pub fn swap_probes(
    cfg: &ExperimentConfig,
    bundle: &ModelBundle,
    realism: &dyn RealismLoss,
    held: &Dataset,
    pairs: &[NearbyPair],
    rng: &RngStream,
) -> Result<SwapProbe> {
    let dec = TokenizerDecoder { bundle, steps: cfg.diagnostics.decode_steps };
    let tokens = encode(bundle, &held.images)?;
    let k = bundle.arch.k;
    let mut chord_lmax = Vec::with_capacity(pairs.len());
    let mut swapped_loss = Vec::with_capacity(pairs.len());
    let grid = uniform_grid(cfg.diagnostics.grid);
    for (i, p) in pairs.iter().enumerate() {
        let mut r = rng.child(i as u64).rng();
        let mut mask: Vec<bool> = (0..k).map(|_| r.gen_bool(0.5)).collect();
        if !mask.iter().any(|&m| m) {
            mask[r.gen_range(0..k)] = true;
        }
        let za = Tensor::matrix(1, k * bundle.arch.d, tokens.row(p.anchor).to_vec())?;
        let zb = Tensor::matrix(1, k * bundle.arch.d, tokens.row(p.neighbor).to_vec())?;
        let zs = swap_tokens(&za, &zb, &[mask], bundle.arch.d, true)?;
        let losses = path_losses(&dec, realism, za.data(), zs.data(), &grid)?;
        swapped_loss.push(*losses.last().expect("grid has endpoints"));
        chord_lmax.push(losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    Ok(SwapProbe { chord_lmax, swapped_loss })
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// A realism probe fitted jointly on the decodes of every given tokenizer.
pub fn joint_probe(cfg: &ExperimentConfig, bundles: &[&ModelBundle], train: &Dataset, seed: u64) -> Result<ModelBundle> {
    let probe_cfg = ProbeConfig { decode_steps: cfg.diagnostics.decode_steps, ..Default::default() };
    train_realism_probe(bundles, train, &probe_cfg, &RngStream::new(seed).child(8))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckRow {
    fn new(name: &str, passed: bool, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        CheckRow { name: name.to_string(), passed, measured, threshold, detail: detail.into() }
    }
}

pub fn checks_csv(rows: &[CheckRow]) -> crate::io::Csv {
    let mut c = crate::io::Csv::new(&["check", "passed", "measured", "threshold", "detail"]);
    for r in rows {
        c.row(&[r.name.clone(), r.passed.to_string(), fmt_f64(r.measured), fmt_f64(r.threshold), r.detail.replace(',', ";")]);
    }
    c
}

pub const IDENTITY_AVGIG: f64 = 0.36951;

/// Model-free checks of the diagnostics against the analytic oracles.
pub fn appendix_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let rng = RngStream::new(seed);
    let mut rows = Vec::new();
    let mut telescoping: f64 = 0.0;

    // LSO on random linear decoders against the closed-form recursion
    let lso = LsoConfig::default();
    let mut worst: f64 = 0.0;
    let mut linear_trajs = Vec::new();
    for i in 0..20u64 {
        let r = rng.at(&[0, i]);
        let dec = LinearDecoder::random(64, 8, 0.5, &r.child(0))?;
        let x = r.child(1).normal(&[1, 64]);
        let z0 = r.child(2).normal(&[1, 8]);
        let got = lso_run(&dec, &x, &z0, &lso)?;
        let want = analytic_lso(&dec.a, &dec.b, x.data(), z0.data(), lso.eta, lso.steps)?;
        for (g, w) in got[0].mse.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
        telescoping = telescoping.max(got[0].telescoping_gap());
        linear_trajs.push(got.into_iter().next().expect("one row"));
    }
    rows.push(CheckRow::new("lso_matches_analytic", worst <= 1e-9, worst, 1e-9, "20 random linear decoders, max per-step |MSE diff|"));

    let n = 256;
    let id = IdentityDecoder { dim: n };
    let targets = rng.child(1).normal(&[8, n]);
    let res = avg_ig(&id, &targets, &rng.child(2), &lso)?;
    let closed = -(n as f64) * (1.0 - lso.eta).log2();
    let err = (res.avg_ig - IDENTITY_AVGIG).abs().max((res.avg_ig - closed).abs());
    rows.push(CheckRow::new("identity_avgig", err <= 1e-5, res.avg_ig, IDENTITY_AVGIG, format!("closed form {closed}")));
    for t in &res.trajectories {
        telescoping = telescoping.max(t.telescoping_gap());
    }
    rows.push(CheckRow::new("telescoping_identity", telescoping <= 1e-9, telescoping, 1e-9, "max over emitted trajectories"));

    // MC range, reversal symmetry and scale invariance on random smooth pairs
    let dec = LinearDecoder::random(16, 4, 0.5, &rng.child(3))?;
    let realism = MlpRealism::random(&[16, 16, 1], &rng.child(4));
    let (mut lo, mut hi, mut asym, mut scale_excess) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for i in 0..1000u64 {
        let za = rng.at(&[5, i]).normal(&[4]).into_data();
        let zb = rng.at(&[6, i]).normal(&[4]).into_data();
        let fwd = mc_pair(&dec, &realism, &za, &zb, 17, 1e-6)?;
        let rev = mc_pair(&dec, &realism, &zb, &za, 17, 1e-6)?;
        lo = lo.min(fwd.mc);
        hi = hi.max(fwd.mc);
        asym = asym.max((fwd.mc - rev.mc).abs());
        if i < 100 {
            for c in [0.5, 2.0, 10.0] {
                let scaled = |x: &Tensor| -> Result<Vec<f64>> { Ok(realism.loss(x)?.into_iter().map(|v| c * v).collect()) };
                let rc = mc_pair(&dec, &scaled, &za, &zb, 17, 1e-6)?;
                scale_excess = scale_excess.max((rc.mc - fwd.mc).abs() - 1e-6 / fwd.l_max.min(rc.l_max));
            }
        }
    }
    rows.push(CheckRow::new("mc_unit_interval", lo >= 0.0 && hi <= 1.0, hi, 1.0, format!("1000 pairs, min {lo}")));
    rows.push(CheckRow::new("mc_reversal_symmetry", asym <= 1e-12, asym, 1e-12, "1000 pairs"));
    rows.push(CheckRow::new("mc_scale_invariance", scale_excess <= 0.0, scale_excess, 0.0, "c in {0.5, 2, 10}, excess over delta/L_max"));

    let barrier = BarrierDecoder::new(32, 4, 10.0, 1.0, &rng.child(7))?;
    let rec = mc_pair(&barrier, &barrier, &barrier.za, &barrier.zb, 17, 1e-6)?;
    let dense = brute_force_lmax(&barrier, &barrier, &barrier.za, &barrier.zb, 10_001)?;
    let oracle_mc = rec.l_ref / (dense + 1e-6);
    let ok = (rec.mc - 0.1).abs() <= 0.005 && (oracle_mc - 0.1).abs() <= 0.005;
    rows.push(CheckRow::new("barrier_mc", ok, rec.mc, 0.1, format!("dense-grid oracle MC {oracle_mc}")));

    // Lipschitz lower bound on 200 certified pairs
    let dec = LinearDecoder::random(16, 4, 0.3, &rng.child(8))?;
    let realism = MlpRealism::random(&[16, 8, 8, 1], &rng.child(9));
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for i in 0..200u64 {
        let za = rng.at(&[10, i]).normal(&[4]).into_data();
        let zb: Vec<f64> = za.iter().zip(rng.at(&[11, i]).normal(&[4]).data()).map(|(a, b)| a + 0.5 * b).collect();
        let cert = LipschitzCertificate::for_pair(&dec, &realism, &za, &zb)?;
        let rec = mc_pair(&dec, &realism, &za, &zb, 17, 1e-6)?;
        let slack = rec.mc - theorem_mc_bound(&cert, rec.l_ref, 1e-6);
        min_slack = min_slack.min(slack);
        if slack < -1e-12 {
            violations += 1;
        }
    }
    rows.push(CheckRow::new("mc_lipschitz_bound", violations == 0, min_slack, -1e-12, format!("200 certified pairs, {violations} violations")));

    let mut sign = true;
    let mut margin = f64::NEG_INFINITY;
    let mut checked = 0;
    for t in &linear_trajs {
        let rep = check_lemma_avgig(1.0, &t.mse, t.n, 1e-3);
        sign &= rep.sign_agreement;
        margin = margin.max(rep.worst_margin);
        checked += rep.checked_first_order;
    }
    rows.push(CheckRow::new("gain_sign_agreement", sign, if sign { 1.0 } else { 0.0 }, 1.0, "20 trajectories, every step"));
    rows.push(CheckRow::new(
        "gain_first_order",
        margin <= 0.0 && checked > 0,
        margin,
        0.0,
        format!("{checked} steps with relative change <= 1e-3"),
    ));
    Ok(rows)
}

/// Random order helper for tests and strips.
pub fn shuffled(n: usize, rng: &RngStream) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng.rng());
    v
}
