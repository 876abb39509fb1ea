//! Encoder, diffusion decoder, recognition head and time-conditioned
//! discriminator, with the denoising, mutual-information, swap and
//! adversarial-flow losses and the joint training loop.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::diffusion::{ddim_from, noise_rows, posterior_rows, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, Csv};
use crate::nn::{time_embedding, Mlp, ParamSet, Trainable};
use crate::optim::Adam;
use crate::rng::RngStream;
use crate::synthworld::{Dataset, NUM_PIXELS};
use crate::tensor::Tensor;

/// Variance floor inside token normalization.
pub const TOKEN_NORM_EPS: f64 = 1e-12;
/// Fixed seed of the shared decode noise `x_T`.
pub const DECODE_SEED: u64 = 0x5eed_dec0;
/// Fixed seed of the realism-loss noise draws.
pub const REALISM_SEED: u64 = 0x5eed_4ea1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenizerArch {
    pub k: usize,
    pub d: usize,
    pub width: usize,
    pub temb_dim: usize,
    pub t_max: usize,
}

impl Default for TokenizerArch {
    fn default() -> Self {
        TokenizerArch { k: 8, d: 4, width: 256, temb_dim: 32, t_max: 64 }
    }
}

impl TokenizerArch {
    pub fn token_dim(&self) -> usize {
        self.k * self.d
    }
}

/// Named parameter arrays of all four tokenizer networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub arch: TokenizerArch,
    pub schedule: DiffusionSchedule,
    /// Pixel mean and standard deviation used to precondition the decoder.
    pub data_stats: DataStats,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub recognition: Mlp,
    pub discriminator: Mlp,
}

impl ModelBundle {
    pub fn new(arch: TokenizerArch, rng: &RngStream) -> Result<Self> {
        if arch.k == 0 || arch.d == 0 || arch.width == 0 || arch.temb_dim < 2 {
            return Err(Error::Invalid(format!("bad tokenizer architecture {arch:?}")));
        }
        let (w, kd, te) = (arch.width, arch.token_dim(), arch.temb_dim);
        Ok(ModelBundle {
            arch,
            schedule: DiffusionSchedule::cosine(arch.t_max)?,
            data_stats: DataStats::default(),
            encoder: Mlp::new("enc", &[NUM_PIXELS, w, w, kd], 1.0, &rng.child(0)),
            decoder: Mlp::new("dec", &[NUM_PIXELS + te + kd, w, w, NUM_PIXELS], 1.0, &rng.child(1)),
            recognition: Mlp::new("rec", &[NUM_PIXELS, w, w, kd], 1.0, &rng.child(2)),
            discriminator: new_discriminator(&arch, &rng.child(3)),
        })
    }

    pub fn is_finite(&self) -> bool {
        [&self.encoder, &self.decoder, &self.recognition, &self.discriminator]
            .iter()
            .all(|m| m.params.is_finite())
    }

    /// All arrays in a fixed order, plus an `arch` record.
    pub fn arrays(&self) -> Vec<(String, Tensor)> {
        let a = self.arch;
        let mut out = vec![(
            "arch".to_string(),
            Tensor::vector(vec![a.k as f64, a.d as f64, a.width as f64, a.temb_dim as f64]),
        )];
        out.push(("data_stats".to_string(), Tensor::vector(vec![self.data_stats.mean, self.data_stats.std])));
        for m in [&self.encoder, &self.decoder, &self.recognition, &self.discriminator] {
            out.extend(m.params.iter().map(|(n, t)| (n.to_string(), t.clone())));
        }
        out
    }

    pub fn from_arrays(schedule: DiffusionSchedule, arrays: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let arch_t = find("arch").ok_or_else(|| Error::Format("checkpoint lacks tokenizer arch".into()))?;
        if arch_t.len() != 4 {
            return Err(Error::Format("arch record must hold 4 values".into()));
        }
        let v = arch_t.data();
        let arch = TokenizerArch {
            k: v[0] as usize,
            d: v[1] as usize,
            width: v[2] as usize,
            temb_dim: v[3] as usize,
            t_max: schedule.t_max(),
        };
        let mut b = ModelBundle::new(arch, &RngStream::new(0))?;
        b.schedule = schedule;
        let stats = find("data_stats").ok_or_else(|| Error::Format("checkpoint lacks data stats".into()))?;
        if stats.len() != 2 || !(stats.data()[1] > 0.0) {
            return Err(Error::Format("bad data stats record".into()));
        }
        b.data_stats = DataStats { mean: stats.data()[0], std: stats.data()[1] };
        for m in [&mut b.encoder, &mut b.decoder, &mut b.recognition, &mut b.discriminator] {
            m.params.load_from(find)?;
        }
        Ok(b)
    }

    /// Zero the decoder's input weights for token `k` so it cannot influence
    /// the output.
    pub fn neglect_token(&mut self, k: usize) {
        let (d, offset) = (self.arch.d, NUM_PIXELS + self.arch.temb_dim);
        let w = self.decoder.weight_mut(0);
        let cols = w.cols();
        for r in offset + k * d..offset + (k + 1) * d {
            w.data_mut()[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for DataStats {
    fn default() -> Self {
        DataStats { mean: 0.0, std: 0.5 }
    }
}

impl DataStats {
    pub fn of(images: &Tensor) -> Self {
        let n = images.len() as f64;
        let mean = images.sum() / n;
        let var = images.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        DataStats { mean, std: var.sqrt().max(1e-3) }
    }
}

pub fn new_discriminator(arch: &TokenizerArch, rng: &RngStream) -> Mlp {
    Mlp::new("disc", &[NUM_PIXELS + arch.temb_dim, arch.width, arch.width, 1], 1.0, rng)
}

/// A bundle's parameters bound into one graph.
pub struct Bound<'a> {
    pub bundle: &'a ModelBundle,
    pub enc: Vec<Var>,
    pub dec: Vec<Var>,
    pub rec: Vec<Var>,
    pub disc: Vec<Var>,
}

impl<'a> Bound<'a> {
    /// Tokenizer networks (E, decoder, Q) become leaves when `gen` is set;
    /// the discriminator when `disc` is set. Otherwise parameters are constants.
    pub fn new(g: &mut Graph, bundle: &'a ModelBundle, gen: bool, disc: bool) -> Self {
        let bind = |g: &mut Graph, p: &ParamSet, train: bool| if train { p.bind(g) } else { p.bind_frozen(g) };
        Bound {
            bundle,
            enc: bind(g, &bundle.encoder.params, gen),
            dec: bind(g, &bundle.decoder.params, gen),
            rec: bind(g, &bundle.recognition.params, gen),
            disc: bind(g, &bundle.discriminator.params, disc),
        }
    }

    pub fn gen_vars(&self) -> Vec<Var> {
        [&self.enc[..], &self.dec[..], &self.rec[..]].concat()
    }

    /// `E(x)` followed by per-sample normalization.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let raw = self.bundle.encoder.forward(g, &self.enc, x)?;
        g.layer_norm(raw, TOKEN_NORM_EPS)
    }

    /// Noise prediction of the preconditioned decoder. With `c = x_t - alpha mu`
    /// and `v = alpha^2 s^2 + sigma^2` (`mu`, `s` the data mean and std), the
    /// network sees `c / sqrt(v)` and its output `o` enters as
    /// `x0 = mu + (alpha s^2 / v) c + (sigma s / sqrt(v)) o`, giving
    /// `eps = (sigma / v) c - (alpha s / sqrt(v)) o`.
    pub fn eps(&self, g: &mut Graph, xt: Var, ts: &[usize], z: Var) -> Result<Var> {
        let sched = &self.bundle.schedule;
        let DataStats { mean, std } = self.bundle.data_stats;
        let rows = ts.len();
        let cols = g.shape(xt)[1];
        let var = |t: usize| sched.alpha_bar(t) * std * std + 1.0 - sched.alpha_bar(t);
        let shift = g.input(Tensor::from_raw(
            vec![rows, cols],
            ts.iter().flat_map(|&t| std::iter::repeat_n(sched.alpha(t) * mean, cols)).collect(),
        ));
        let c = g.sub(xt, shift)?;
        let c_in = g.input(Tensor::vector(ts.iter().map(|&t| 1.0 / var(t).sqrt()).collect()));
        let x_in = g.mul_rows(c, c_in)?;
        let temb = g.input(time_embedding(ts, sched.t_max(), self.bundle.arch.temb_dim));
        let inp = g.concat_cols(&[x_in, temb, z])?;
        let o = self.bundle.decoder.forward(g, &self.dec, inp)?;
        let c_skip = g.input(Tensor::vector(ts.iter().map(|&t| sched.sigma(t) / var(t)).collect()));
        let c_out = g.input(Tensor::vector(ts.iter().map(|&t| -sched.alpha(t) * std / var(t).sqrt()).collect()));
        let a = g.mul_rows(c, c_skip)?;
        let b = g.mul_rows(o, c_out)?;
        g.add(a, b)
    }

    pub fn recognize(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.bundle.recognition.forward(g, &self.rec, x)
    }

    /// Discriminator score `[rows, 1]` of noised images.
    pub fn score(&self, g: &mut Graph, xt: Var, ts: &[usize]) -> Result<Var> {
        let temb = g.input(time_embedding(ts, self.bundle.schedule.t_max(), self.bundle.arch.temb_dim));
        let inp = g.concat_cols(&[xt, temb])?;
        self.bundle.discriminator.forward(g, &self.disc, inp)
    }

    /// Single-step decode: noise `x_ref` to `ts`, predict, invert.
    pub fn one_step_decode(&self, g: &mut Graph, x_ref: Var, z: Var, ts: &[usize], eps: Var) -> Result<Var> {
        let sched = &self.bundle.schedule;
        let xt = noise_rows(g, x_ref, ts, eps, sched)?;
        let e = self.eps(g, xt, ts, z)?;
        posterior_rows(g, xt, ts, e, sched)
    }

    /// Deterministic DDIM decode from the shared fixed noise.
    pub fn decode(&self, g: &mut Graph, z: Var, steps: usize) -> Result<Var> {
        let rows = g.shape(z)[0];
        let noise = g.input(decode_noise());
        let x_start = g.broadcast_rows(noise, rows)?;
        let den = |g: &mut Graph, x: Var, t: usize| self.eps(g, x, &vec![t; rows], z);
        ddim_from(g, &den, x_start, steps, &self.bundle.schedule)
    }
}

/// The single `x_T` shared by every deterministic decode.
pub fn decode_noise() -> Tensor {
    RngStream::new(DECODE_SEED).normal(&[NUM_PIXELS])
}

fn detach(g: &mut Graph, v: Var) -> Var {
    let t = g.value(v).clone();
    g.input(t)
}

pub fn encode(bundle: &ModelBundle, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, bundle, false, false);
    let xi = g.input(x.clone());
    let z = b.encode(&mut g, xi)?;
    Ok(g.value(z).clone())
}

pub fn decode(bundle: &ModelBundle, z: &Tensor, steps: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(z.rows() * NUM_PIXELS);
    // bounded graph size
    for start in (0..z.rows()).step_by(256) {
        let end = (start + 256).min(z.rows());
        let mut g = Graph::new();
        let b = Bound::new(&mut g, bundle, false, false);
        let zi = g.input(z.slice_rows(start, end));
        let x = b.decode(&mut g, zi, steps)?;
        out.extend_from_slice(g.value(x).data());
    }
    Tensor::new(vec![z.rows(), NUM_PIXELS], out)
}

/// Mean squared error of the DDIM reconstruction `D(E(x))` against `x`.
pub fn reconstruction_mse(bundle: &ModelBundle, images: &Tensor, steps: usize) -> Result<f64> {
    let z = encode(bundle, images)?;
    let rec = decode(bundle, &z, steps)?;
    Ok(rec.data().iter().zip(images.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / images.len() as f64)
}

/// Denoising loss `sum_pixels (eps - eps_D)^2`, batch mean.
pub fn loss_tok(g: &mut Graph, b: &Bound, x: Var, z: Var, ts: &[usize], eps: Var) -> Result<Var> {
    let xt = noise_rows(g, x, ts, eps, &b.bundle.schedule)?;
    let pred = b.eps(g, xt, ts, z)?;
    batch_sq_norm(g, pred, eps)
}

/// `sum_cols (a - b)^2` averaged over rows.
pub fn batch_sq_norm(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let cols = g.shape(a).last().copied().unwrap_or(1);
    let m = g.mse(a, b)?;
    g.scale(m, cols as f64)
}

/// Recognition loss `sum_k ||Q(x_hat)_k - z_k||^2`, batch mean, where
/// `x_hat` is the one-step decode of `z` from `x_ref` noised to `ts`.
/// The target tokens are treated as constants.
pub fn loss_mi(g: &mut Graph, b: &Bound, z: Var, x_ref: Var, ts: &[usize], eps: Var) -> Result<(Var, Var)> {
    let target = detach(g, z);
    loss_mi_to(g, b, z, target, x_ref, ts, eps)
}

/// [`loss_mi`] with an explicit recognition target.
pub fn loss_mi_to(g: &mut Graph, b: &Bound, z: Var, target: Var, x_ref: Var, ts: &[usize], eps: Var) -> Result<(Var, Var)> {
    let x_hat = b.one_step_decode(g, x_ref, z, ts, eps)?;
    let q = b.recognize(g, x_hat)?;
    Ok((batch_sq_norm(g, q, target)?, x_hat))
}

/// Per-row token mask expanded to `[rows, K*d]` (1.0 where the token comes from B).
pub fn expand_mask(mask: &[Vec<bool>], d: usize) -> Tensor {
    let data = mask.iter().flat_map(|row| row.iter().flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, d))).collect();
    Tensor::from_raw(vec![mask.len(), mask.first().map_or(0, Vec::len) * d], data)
}

/// `z^{A<-B}` on the graph: token k from `zb` where the mask is set.
pub fn swap_tokens_var(g: &mut Graph, za: Var, zb: Var, mask: &Tensor, renormalize: bool) -> Result<Var> {
    if g.shape(za) != g.shape(zb) || g.shape(za) != mask.shape() {
        return Err(Error::shape("swap_tokens", format!("{:?}, {:?}, mask {:?}", g.shape(za), g.shape(zb), mask.shape())));
    }
    let m = g.input(mask.clone());
    let keep = g.input(mask.map(|v| 1.0 - v));
    let from_b = g.mul(zb, m)?;
    let from_a = g.mul(za, keep)?;
    let mixed = g.add(from_a, from_b)?;
    if renormalize {
        g.layer_norm(mixed, TOKEN_NORM_EPS)
    } else {
        Ok(mixed)
    }
}

/// Value-level swap of `[rows, K*d]` token matrices with per-row masks.
pub fn swap_tokens(za: &Tensor, zb: &Tensor, mask: &[Vec<bool>], d: usize, renormalize: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.input(za.clone()), g.input(zb.clone()));
    let out = swap_tokens_var(&mut g, a, b, &expand_mask(mask, d), renormalize)?;
    Ok(g.value(out).clone())
}

/// `loss_mi` at the swapped tokens, whose targets are the mixed tokens.
#[allow(clippy::too_many_arguments)]
pub fn loss_mi_swap(
    g: &mut Graph,
    b: &Bound,
    za: Var,
    zb: Var,
    mask: &Tensor,
    renormalize: bool,
    x_ref: Var,
    ts: &[usize],
    eps: Var,
) -> Result<(Var, Var)> {
    let z = swap_tokens_var(g, za, zb, mask, renormalize)?;
    loss_mi(g, b, z, x_ref, ts, eps)
}

/// Noise real and fake images to the same `ts` with independent draws and score both.
pub fn afm_scores(
    g: &mut Graph,
    b: &Bound,
    real: Var,
    fake: Var,
    ts: &[usize],
    eps_real: Var,
    eps_fake: Var,
) -> Result<(Var, Var)> {
    let sched = &b.bundle.schedule;
    let rt = noise_rows(g, real, ts, eps_real, sched)?;
    let ft = noise_rows(g, fake, ts, eps_fake, sched)?;
    Ok((b.score(g, rt, ts)?, b.score(g, ft, ts)?))
}

/// Generator side: `mean softplus(D(real_t) - D(fake_t))`, plus
/// `lambda_ot * mean ||fake - real||^2` for paired reconstructions.
pub fn loss_afm_generator(
    g: &mut Graph,
    d_real: Var,
    d_fake: Var,
    real: Var,
    fake: Var,
    lambda_ot: f64,
    paired: bool,
) -> Result<Var> {
    let diff = g.sub(d_real, d_fake)?;
    let sp = g.softplus(diff)?;
    let rel = g.mean(sp)?;
    if !paired {
        return Ok(rel);
    }
    let ot = batch_sq_norm(g, fake, real)?;
    let ot = g.scale(ot, lambda_ot)?;
    g.add(rel, ot)
}

/// Discriminator side: `mean softplus(D(fake_t) - D(real_t))`.
pub fn loss_afm_discriminator(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    let diff = g.sub(d_fake, d_real)?;
    let sp = g.softplus(diff)?;
    g.mean(sp)
}

/// Timesteps at which the realism loss probes the discriminator.
pub fn realism_timesteps(t_max: usize) -> [usize; 3] {
    [t_max / 8, t_max / 4, t_max / 2]
}

/// Per-image realism loss: mean over the fixed timestep grid of
/// `softplus(-D(x_t, t))`, each timestep with one fixed noise image.
pub fn realism_loss(bundle: &ModelBundle, x: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, bundle, false, false);
    let xi = g.input(x.clone());
    let v = realism_loss_var(&mut g, &b, xi)?;
    Ok(g.value(v).data().to_vec())
}

/// Graph form of [`realism_loss`]; returns a `[rows]` vector.
pub fn realism_loss_var(g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
    let rows = g.shape(x)[0];
    let sched = &b.bundle.schedule;
    let mut acc: Option<Var> = None;
    let grid = realism_timesteps(sched.t_max());
    for &t in &grid {
        let e = g.input(RngStream::new(REALISM_SEED).child(t as u64).normal(&[NUM_PIXELS]));
        let eb = g.broadcast_rows(e, rows)?;
        let ts = vec![t; rows];
        let xt = noise_rows(g, x, &ts, eb, sched)?;
        let s = b.score(g, xt, &ts)?;
        let neg = g.scale(s, -1.0)?;
        let l = g.softplus(neg)?;
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    let total = acc.expect("nonempty grid");
    let mean = g.scale(total, 1.0 / grid.len() as f64)?;
    g.reshape(mean, &[rows])
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerConfig {
    pub arch: TokenizerArch,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_disc: f64,
    pub lambda_ot: f64,
    pub use_mi: bool,
    pub use_swap: bool,
    pub use_afm: bool,
    pub renormalize_swap: bool,
    pub swap_density: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            arch: TokenizerArch::default(),
            steps: 20_000,
            batch: 32,
            lr: 5e-4,
            lr_disc: 2e-4,
            lambda_ot: 1.0,
            use_mi: true,
            use_swap: true,
            use_afm: true,
            renormalize_swap: true,
            swap_density: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l_tok: f64,
    pub l_mi: f64,
    pub l_mi_swap: f64,
    pub l_afm_g: f64,
    pub l_afm_d: f64,
    pub recon_mse: f64,
    /// Objective the tokenizer networks descended on this step.
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<StepLosses>,
}

impl TrainingLog {
    pub const HEADER: [&'static str; 7] = ["step", "l_tok", "l_mi", "l_mi_swap", "l_afm_g", "l_afm_d", "recon_mse"];

    pub fn to_csv(&self) -> Csv {
        let mut c = Csv::new(&Self::HEADER);
        for (i, r) in self.rows.iter().enumerate() {
            c.row(&[
                i.to_string(),
                fmt_f64(r.l_tok),
                fmt_f64(r.l_mi),
                fmt_f64(r.l_mi_swap),
                fmt_f64(r.l_afm_g),
                fmt_f64(r.l_afm_d),
                fmt_f64(r.recon_mse),
            ]);
        }
        c
    }

    /// Trailing moving average of a column.
    pub fn smoothed(&self, col: impl Fn(&StepLosses) -> f64, window: usize) -> Vec<f64> {
        let vals: Vec<f64> = self.rows.iter().map(col).collect();
        let mut out = Vec::with_capacity(vals.len());
        let mut sum = 0.0;
        for i in 0..vals.len() {
            sum += vals[i];
            if i >= window {
                sum -= vals[i - window];
            }
            out.push(sum / (i + 1).min(window) as f64);
        }
        out
    }
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: TrainingLog,
    /// Set when a non-finite value stopped training; `bundle` is then the
    /// last good state.
    pub diverged: Option<Error>,
}

/// Every random draw of one training step, taken whether or not the
/// corresponding loss is enabled.
pub struct StepDraws {
    pub idx: Vec<usize>,
    pub partner: Vec<usize>,
    pub t_tok: Vec<usize>,
    pub eps_tok: Tensor,
    pub t_mi: Vec<usize>,
    pub eps_mi: Tensor,
    pub mask: Vec<Vec<bool>>,
    pub t_afm: Vec<usize>,
    pub eps_real: Tensor,
    pub eps_fake: Tensor,
    pub eps_fake_swap: Tensor,
}

impl StepDraws {
    pub fn new(rng: &RngStream, n_train: usize, batch: usize, k: usize, t_max: usize, density: f64) -> Self {
        let ts = |s: RngStream| {
            let mut r = s.rng();
            (0..batch).map(|_| r.gen_range(1..=t_max)).collect::<Vec<_>>()
        };
        let mut r = rng.child(0).rng();
        let idx = (0..batch).map(|_| r.gen_range(0..n_train)).collect();
        let mut partner: Vec<usize> = (0..batch).collect();
        partner.shuffle(&mut rng.child(1).rng());
        let mut r = rng.child(6).rng();
        let mask = (0..batch).map(|_| (0..k).map(|_| r.gen_bool(density)).collect()).collect();
        StepDraws {
            idx,
            partner,
            t_tok: ts(rng.child(2)),
            eps_tok: rng.child(3).normal(&[batch, NUM_PIXELS]),
            t_mi: ts(rng.child(4)),
            eps_mi: rng.child(5).normal(&[batch, NUM_PIXELS]),
            mask,
            t_afm: ts(rng.child(7)),
            eps_real: rng.child(8).normal(&[batch, NUM_PIXELS]),
            eps_fake: rng.child(9).normal(&[batch, NUM_PIXELS]),
            eps_fake_swap: rng.child(10).normal(&[batch, NUM_PIXELS]),
        }
    }
}

/// Gradients of one joint step, with the logged loss values.
pub struct StepResult {
    pub losses: StepLosses,
    pub gen_grads: Vec<Tensor>,
    pub disc_grads: Option<Vec<Tensor>>,
}

/// One forward pass serving both the tokenizer-side objective and the
/// discriminator objective.
pub fn tokenizer_step(bundle: &ModelBundle, cfg: &TokenizerConfig, x: &Tensor, draws: &StepDraws) -> Result<StepResult> {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, bundle, true, cfg.use_afm);
    let batch = x.rows();
    let x = g.input(x.clone());
    let z = b.encode(&mut g, x)?;

    let eps_tok = g.input(draws.eps_tok.clone());
    let l_tok = loss_tok(&mut g, &b, x, z, &draws.t_tok, eps_tok)?;

    let eps_mi = g.input(draws.eps_mi.clone());
    let (l_mi, x_hat) = loss_mi(&mut g, &b, z, x, &draws.t_mi, eps_mi)?;
    let recon = g.mse(x_hat, x)?;

    let mut total = l_tok;
    let mut losses = StepLosses { l_tok: g.value(l_tok).item(), recon_mse: g.value(recon).item(), ..Default::default() };
    if cfg.use_mi {
        total = g.add(total, l_mi)?;
        losses.l_mi = g.value(l_mi).item();
    }

    let needs_swap_decode = cfg.use_swap || cfg.use_afm;
    let mut x_swap = None;
    if needs_swap_decode {
        let zb = g.gather_rows(z, &draws.partner)?;
        let mask = expand_mask(&draws.mask, bundle.arch.d);
        let (l_sw, xs) = loss_mi_swap(&mut g, &b, z, zb, &mask, cfg.renormalize_swap, x, &draws.t_mi, eps_mi)?;
        x_swap = Some(xs);
        if cfg.use_swap {
            total = g.add(total, l_sw)?;
            losses.l_mi_swap = g.value(l_sw).item();
        }
    }

    let mut l_d = None;
    if cfg.use_afm {
        let x_swap = x_swap.expect("swap decode built when AFM is on");
        let eps_r = g.input(draws.eps_real.clone());
        let eps_f = g.input(draws.eps_fake.clone());
        let eps_fs = g.input(draws.eps_fake_swap.clone());
        let (d_real, d_fake) = afm_scores(&mut g, &b, x, x_hat, &draws.t_afm, eps_r, eps_f)?;
        let sched = &bundle.schedule;
        let fst = noise_rows(&mut g, x_swap, &draws.t_afm, eps_fs, sched)?;
        let d_fake_swap = b.score(&mut g, fst, &draws.t_afm)?;
        let g_paired = loss_afm_generator(&mut g, d_real, d_fake, x, x_hat, cfg.lambda_ot, true)?;
        let g_swap = loss_afm_generator(&mut g, d_real, d_fake_swap, x, x_swap, cfg.lambda_ot, false)?;
        let l_g = g.add(g_paired, g_swap)?;
        let d_paired = loss_afm_discriminator(&mut g, d_real, d_fake)?;
        let d_swap = loss_afm_discriminator(&mut g, d_real, d_fake_swap)?;
        let d_sum = g.add(d_paired, d_swap)?;
        let d_mean = g.scale(d_sum, 0.5)?;
        total = g.add(total, l_g)?;
        losses.l_afm_g = g.value(l_g).item();
        losses.l_afm_d = g.value(d_mean).item();
        l_d = Some(d_mean);
    }
    losses.total = g.value(total).item();
    debug_assert_eq!(batch, draws.idx.len());

    let gen_vars = b.gen_vars();
    let gen_grads = g.backward_wrt(total, &gen_vars)?.collect(&gen_vars);
    let disc_grads = match l_d {
        Some(l) => Some(g.backward_wrt(l, &b.disc)?.collect(&b.disc)),
        None => None,
    };
    Ok(StepResult { losses, gen_grads, disc_grads })
}

/// Joint training: tokenizer networks descend the summed objective, then the
/// discriminator descends its relativistic loss, both from the same forward pass.
pub fn train_tokenizer(cfg: &TokenizerConfig, train: &Dataset, rng: &RngStream) -> Result<TrainOutcome> {
    train_tokenizer_with(cfg, train, rng, |_, _| {})
}

/// As [`train_tokenizer`], calling `progress(step, losses)` after each step.
pub fn train_tokenizer_with(
    cfg: &TokenizerConfig,
    train: &Dataset,
    rng: &RngStream,
    mut progress: impl FnMut(usize, &StepLosses),
) -> Result<TrainOutcome> {
    if cfg.batch == 0 || train.is_empty() {
        return Err(Error::Invalid("training needs a nonempty dataset and batch".into()));
    }
    let mut bundle = ModelBundle::new(cfg.arch, &rng.child(0))?;
    bundle.data_stats = DataStats::of(&train.images);
    let gen_params = |b: &ModelBundle| {
        let mut p = ParamSet::new();
        for m in [&b.encoder, &b.decoder, &b.recognition] {
            for (n, t) in m.params.iter() {
                p.push(n, t.clone());
            }
        }
        p
    };
    let mut gen = Trainable { params: gen_params(&bundle), opt: Adam::new(cfg.lr) };
    let mut disc = Trainable { params: bundle.discriminator.params.clone(), opt: Adam::new(cfg.lr_disc) };
    let mut log = TrainingLog::default();
    let steps_rng = rng.child(1);
    for step in 0..cfg.steps {
        let draws = StepDraws::new(&steps_rng.child(step as u64), train.len(), cfg.batch, cfg.arch.k, cfg.arch.t_max, cfg.swap_density);
        let x = train.batch(&draws.idx);
        let res = match tokenizer_step(&bundle, cfg, &x, &draws) {
            Ok(r) => r,
            Err(e) if e.is_numeric() => {
                return Ok(TrainOutcome { bundle, log, diverged: Some(Error::Diverged { step, reason: e.to_string() }) })
            }
            Err(e) => return Err(e),
        };
        let mut next_gen = gen.clone();
        let mut next_disc = disc.clone();
        let update = next_gen.step(&res.gen_grads).and_then(|_| match &res.disc_grads {
            Some(gr) => next_disc.step(gr),
            None => Ok(()),
        });
        if let Err(e) = update {
            return Ok(TrainOutcome { bundle, log, diverged: Some(Error::Diverged { step, reason: e.to_string() }) });
        }
        gen = next_gen;
        disc = next_disc;
        let mut off = 0;
        for m in [&mut bundle.encoder, &mut bundle.decoder, &mut bundle.recognition] {
            let n = m.params.len();
            m.params.tensors_mut().clone_from_slice(&gen.params.tensors()[off..off + n]);
            off += n;
        }
        bundle.discriminator.params = disc.params.clone();
        progress(step, &res.losses);
        log.rows.push(res.losses);
    }
    Ok(TrainOutcome { bundle, log, diverged: None })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub batch: usize,
    pub pool: usize,
    pub lr: f64,
    pub decode_steps: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { steps: 2000, batch: 64, pool: 1024, lr: 2e-4, decode_steps: 4 }
    }
}

/// Fresh discriminator trained with the relativistic objective against the
/// DDIM decodes (paired and swapped) of one or more frozen tokenizers. A
/// shared probe gives tokenizers trained with and without a discriminator
/// one realism loss fitted the same way. The returned bundle carries the
/// first tokenizer's networks and the probe as its discriminator.
pub fn train_realism_probe(bundles: &[&ModelBundle], train: &Dataset, cfg: &ProbeConfig, rng: &RngStream) -> Result<ModelBundle> {
    let bundle = *bundles.first().ok_or_else(|| Error::Invalid("probe needs at least one tokenizer".into()))?;
    let pool = cfg.pool.min(train.len());
    let idx: Vec<usize> = {
        let mut all: Vec<usize> = (0..train.len()).collect();
        all.shuffle(&mut rng.child(0).rng());
        all.truncate(pool);
        all
    };
    let real = train.batch(&idx);
    let mut partner: Vec<usize> = (0..pool).collect();
    partner.shuffle(&mut rng.child(1).rng());
    let mut r = rng.child(2).rng();
    let mask: Vec<Vec<bool>> = (0..pool).map(|_| (0..bundle.arch.k).map(|_| r.gen_bool(0.5)).collect()).collect();
    let mut parts = Vec::with_capacity(2 * bundles.len());
    for b in bundles {
        let z = encode(b, &real)?;
        let zb = Tensor::from_raw(z.shape().to_vec(), partner.iter().flat_map(|&p| z.row(p).to_vec()).collect());
        let zs = swap_tokens(&z, &zb, &mask, b.arch.d, true)?;
        parts.push(decode(b, &z, cfg.decode_steps)?);
        parts.push(decode(b, &zs, cfg.decode_steps)?);
    }
    let n_fake = parts.len() * pool;
    let fakes = Tensor::stack(&parts)?.reshape(vec![n_fake, NUM_PIXELS])?;

    let mut probe = bundle.clone();
    probe.discriminator = new_discriminator(&bundle.arch, &rng.child(3));
    let mut disc = Trainable { params: probe.discriminator.params.clone(), opt: Adam::new(cfg.lr) };
    let t_max = bundle.schedule.t_max();
    for step in 0..cfg.steps {
        let s = rng.child(4).child(step as u64);
        let mut r = s.child(0).rng();
        let ri: Vec<usize> = (0..cfg.batch).map(|_| r.gen_range(0..pool)).collect();
        let fi: Vec<usize> = (0..cfg.batch).map(|_| r.gen_range(0..n_fake)).collect();
        let ts: Vec<usize> = (0..cfg.batch).map(|_| r.gen_range(1..=t_max)).collect();
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &probe, false, true);
        let real_b = g.input(Tensor::from_raw(
            vec![cfg.batch, NUM_PIXELS],
            ri.iter().flat_map(|&i| real.row(i).to_vec()).collect(),
        ));
        let fake_b = g.input(Tensor::from_raw(
            vec![cfg.batch, NUM_PIXELS],
            fi.iter().flat_map(|&i| fakes.row(i).to_vec()).collect(),
        ));
        let er = g.input(s.child(1).normal(&[cfg.batch, NUM_PIXELS]));
        let ef = g.input(s.child(2).normal(&[cfg.batch, NUM_PIXELS]));
        let (dr, df) = afm_scores(&mut g, &b, real_b, fake_b, &ts, er, ef)?;
        let l = loss_afm_discriminator(&mut g, dr, df)?;
        let grads = g.backward_wrt(l, &b.disc)?.collect(&b.disc);
        disc.step(&grads)?;
        probe.discriminator.params = disc.params.clone();
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> TokenizerArch {
        TokenizerArch { k: 4, d: 2, width: 16, temb_dim: 8, t_max: 16 }
    }

    fn bundle() -> ModelBundle {
        let mut b = ModelBundle::new(small_arch(), &RngStream::new(1)).unwrap();
        b.data_stats = DataStats { mean: 0.1, std: 0.2 };
        b
    }

    fn images(n: usize) -> Tensor {
        Dataset::generate(n, &RngStream::new(2)).unwrap().images
    }

    #[test]
    fn encoding_is_normalized_and_deterministic() {
        let b = bundle();
        let z = encode(&b, &images(5)).unwrap();
        assert_eq!(z.shape(), &[5, 8]);
        for i in 0..5 {
            let r = z.row(i);
            let mean = r.iter().sum::<f64>() / 8.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-9 && (var - 1.0).abs() <= 1e-9);
        }
        assert_eq!(z, encode(&b, &images(5)).unwrap());
    }

    #[test]
    fn untrained_decode_is_finite_and_deterministic() {
        let b = bundle();
        let z = encode(&b, &images(3)).unwrap();
        let x = decode(&b, &z, 4).unwrap();
        assert_eq!(x.shape(), &[3, NUM_PIXELS]);
        assert!(x.is_finite());
        assert_eq!(x, decode(&b, &z, 4).unwrap());
    }

    #[test]
    fn decode_of_a_row_does_not_depend_on_batch() {
        let b = bundle();
        let z = encode(&b, &images(4)).unwrap();
        let all = decode(&b, &z, 4).unwrap();
        let one = decode(&b, &z.slice_rows(2, 3), 4).unwrap();
        assert_eq!(all.row(2), one.row(0));
    }

    #[test]
    fn swap_masks() {
        let za = RngStream::new(3).normal(&[1, 8]);
        let zb = RngStream::new(4).normal(&[1, 8]);
        let za = encode_like(&za);
        let zb = encode_like(&zb);
        let none = swap_tokens(&za, &zb, &[vec![false; 4]], 2, true).unwrap();
        assert!(none.max_abs_diff(&za) < 1e-12);
        let all = swap_tokens(&za, &zb, &[vec![true; 4]], 2, true).unwrap();
        assert!(all.max_abs_diff(&zb) < 1e-12);
        let inter = swap_tokens(&za, &zb, &[vec![false, true, false, true]], 2, false).unwrap();
        let expect: Vec<f64> = (0..8).map(|i| if (i / 2) % 2 == 1 { zb.data()[i] } else { za.data()[i] }).collect();
        assert_eq!(inter.data(), &expect[..]);
        let same = swap_tokens(&za, &za, &[vec![true, false, true, true]], 2, true).unwrap();
        assert!(same.max_abs_diff(&za) < 1e-12);
    }

    fn encode_like(z: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let v = g.input(z.clone());
        let n = g.layer_norm(v, TOKEN_NORM_EPS).unwrap();
        g.value(n).clone()
    }

    #[test]
    fn afm_reference_values() {
        let mut g = Graph::new();
        let c = g.input(Tensor::full(&[4, 1], 0.3));
        let x = g.input(Tensor::zeros(&[4, 3]));
        let l = loss_afm_generator(&mut g, c, c, x, x, 1.0, true).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let hi = g.input(Tensor::full(&[1, 1], 10.0));
        let lo = g.input(Tensor::full(&[1, 1], 0.0));
        let x1 = g.input(Tensor::zeros(&[1, 1]));
        let lg = loss_afm_generator(&mut g, hi, lo, x1, x1, 1.0, false).unwrap();
        assert!((g.value(lg).item() - 10.000045398899218).abs() < 1e-12);
        let ld = loss_afm_discriminator(&mut g, hi, lo).unwrap();
        assert!((g.value(ld).item() - 4.5398899216870535e-5).abs() < 1e-15);
        let sym = loss_afm_discriminator(&mut g, lo, lo).unwrap();
        let sym_g = loss_afm_generator(&mut g, lo, lo, x1, x1, 1.0, true).unwrap();
        assert!((g.value(sym).item() + g.value(sym_g).item() - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn realism_loss_is_nonnegative_and_fixed() {
        let b = bundle();
        let x = images(6);
        let a = realism_loss(&b, &x).unwrap();
        assert!(a.iter().all(|&v| v >= 0.0));
        assert_eq!(a, realism_loss(&b, &x).unwrap());
        let single = realism_loss(&b, &x.slice_rows(4, 5)).unwrap();
        assert_eq!(single[0], a[4]);
    }

    #[test]
    fn neglected_token_has_no_influence() {
        let mut b = bundle();
        b.neglect_token(1);
        let z = encode(&b, &images(1)).unwrap();
        let mut z2 = z.clone();
        z2.data_mut()[2] += 0.7;
        z2.data_mut()[3] -= 0.3;
        assert_eq!(decode(&b, &z, 4).unwrap(), decode(&b, &z2, 4).unwrap());
    }

    #[test]
    fn arrays_round_trip() {
        let b = bundle();
        let back = ModelBundle::from_arrays(b.schedule.clone(), &b.arrays()).unwrap();
        assert_eq!(back, b);
    }

    fn tiny_cfg() -> TokenizerConfig {
        TokenizerConfig { arch: small_arch(), steps: 6, batch: 4, ..Default::default() }
    }

    #[test]
    fn step_total_is_unweighted_sum() {
        let b = bundle();
        let ds = Dataset::generate(16, &RngStream::new(5)).unwrap();
        let draws = StepDraws::new(&RngStream::new(6), ds.len(), 4, 4, 16, 0.5);
        let r = tokenizer_step(&b, &tiny_cfg(), &ds.batch(&draws.idx), &draws).unwrap();
        let l = r.losses;
        assert!((l.total - (l.l_tok + l.l_mi + l.l_mi_swap + l.l_afm_g)).abs() <= 1e-12);
        assert!(r.gen_grads.iter().all(Tensor::is_finite));
        assert!(r.disc_grads.is_some());
    }

    #[test]
    fn ablated_training_logs_only_tok() {
        let ds = Dataset::generate(16, &RngStream::new(5)).unwrap();
        let cfg = TokenizerConfig { use_mi: false, use_swap: false, use_afm: false, ..tiny_cfg() };
        let out = train_tokenizer(&cfg, &ds, &RngStream::new(7)).unwrap();
        assert!(out.diverged.is_none());
        for r in &out.log.rows {
            assert!(r.l_tok > 0.0);
            assert_eq!((r.l_mi, r.l_mi_swap, r.l_afm_g, r.l_afm_d), (0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn training_is_reproducible() {
        let ds = Dataset::generate(16, &RngStream::new(5)).unwrap();
        let a = train_tokenizer(&tiny_cfg(), &ds, &RngStream::new(7)).unwrap();
        let b = train_tokenizer(&tiny_cfg(), &ds, &RngStream::new(7)).unwrap();
        assert_eq!(a.log.to_csv().as_str(), b.log.to_csv().as_str());
        assert_eq!(a.bundle, b.bundle);
    }

    #[test]
    fn smoothing_window() {
        let log = TrainingLog {
            rows: [1.0, 3.0, 5.0].iter().map(|&v| StepLosses { l_tok: v, ..Default::default() }).collect(),
        };
        assert_eq!(log.smoothed(|r| r.l_tok, 2), vec![1.0, 2.0, 4.0]);
    }
}
