//! Latent-space optimization with per-step information gain (AvgIG), and
//! mode connectivity of token interpolation paths (MC).

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::synthworld::{NearbyPair, PairMode};
use crate::tensor::Tensor;
use crate::tokenizer::{realism_loss, Bound, ModelBundle};

pub const MSE_FLOOR: f64 = 1e-12;
pub const DEFAULT_ETA: f64 = 0.001;
pub const DEFAULT_LSO_STEPS: usize = 100;
pub const DEFAULT_GRID: usize = 17;
pub const DEFAULT_DELTA: f64 = 1e-6;

/// Differentiable map from latents `[rows, latent_dim]` to images `[rows, output_dim]`.
/// Rows must be decoded independently of each other.
pub trait LatentDecoder {
    fn latent_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn decode_var(&self, g: &mut Graph, z: Var) -> Result<Var>;

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut out = Vec::with_capacity(z.rows() * self.output_dim());
        for start in (0..z.rows()).step_by(512) {
            let end = (start + 512).min(z.rows());
            let mut g = Graph::new();
            let zi = g.input(z.slice_rows(start, end));
            let x = self.decode_var(&mut g, zi)?;
            out.extend_from_slice(g.value(x).data());
        }
        Tensor::new(vec![z.rows(), self.output_dim()], out)
    }
}

/// Per-image nonnegative realism loss; lower is more realistic.
pub trait RealismLoss {
    fn loss(&self, x: &Tensor) -> Result<Vec<f64>>;
}

impl<F: Fn(&Tensor) -> Result<Vec<f64>>> RealismLoss for F {
    fn loss(&self, x: &Tensor) -> Result<Vec<f64>> {
        self(x)
    }
}

/// The tokenizer decoder as a deterministic fixed-seed DDIM map.
pub struct TokenizerDecoder<'a> {
    pub bundle: &'a ModelBundle,
    pub steps: usize,
}

impl LatentDecoder for TokenizerDecoder<'_> {
    fn latent_dim(&self) -> usize {
        self.bundle.arch.token_dim()
    }

    fn output_dim(&self) -> usize {
        crate::synthworld::NUM_PIXELS
    }

    fn decode_var(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let b = Bound::new(g, self.bundle, false, false);
        b.decode(g, z, self.steps)
    }
}

/// Realism loss of a tokenizer's discriminator.
pub struct TokenizerRealism<'a>(pub &'a ModelBundle);

impl RealismLoss for TokenizerRealism<'_> {
    fn loss(&self, x: &Tensor) -> Result<Vec<f64>> {
        realism_loss(self.0, x)
    }
}

pub struct IdentityDecoder {
    pub dim: usize,
}

impl LatentDecoder for IdentityDecoder {
    fn latent_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn decode_var(&self, _g: &mut Graph, z: Var) -> Result<Var> {
        Ok(z)
    }
}

/// Ignores its input.
pub struct ConstantDecoder {
    pub latent_dim: usize,
    pub value: Vec<f64>,
}

impl LatentDecoder for ConstantDecoder {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }
    fn output_dim(&self) -> usize {
        self.value.len()
    }
    fn decode_var(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let rows = g.shape(z)[0];
        let zero = g.scale(z, 0.0)?;
        let zero = g.row_sum(zero)?;
        let zero = g.reshape(zero, &[rows, 1])?;
        let c = g.input(Tensor::vector(self.value.clone()));
        let c = g.broadcast_rows(c, rows)?;
        // keeps z on the path so its gradient is an explicit zero
        let ones = g.input(Tensor::full(&[1, self.value.len()], 1.0));
        let spread = g.matmul(zero, ones)?;
        g.add(c, spread)
    }
}

/// Bits gained when the error drops from `mse_t` to `mse_t1` on `n` pixels.
pub fn info_gain(mse_t: f64, mse_t1: f64, n: usize) -> f64 {
    n as f64 / 2.0 * (mse_t / mse_t1).log2()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LsoConfig {
    pub eta: f64,
    pub steps: usize,
    pub floor: f64,
}

impl Default for LsoConfig {
    fn default() -> Self {
        LsoConfig { eta: DEFAULT_ETA, steps: DEFAULT_LSO_STEPS, floor: MSE_FLOOR }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LsoTrajectory {
    pub eta: f64,
    pub steps: usize,
    pub n: usize,
    pub mse: Vec<f64>,
    pub delta_i: Vec<f64>,
    pub error: Option<String>,
}

impl LsoTrajectory {
    /// `sum_t dI_t` minus `(N/2) log2(MSE_0 / MSE_T)`.
    pub fn telescoping_gap(&self) -> f64 {
        let (Some(first), Some(last)) = (self.mse.first(), self.mse.last()) else { return 0.0 };
        self.delta_i.iter().sum::<f64>() - info_gain(*first, *last, self.n)
    }
}

/// Standard-normal starting latents, one stream per row.
pub fn lso_init(rng: &RngStream, rows: usize, latent_dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * latent_dim);
    for i in 0..rows {
        data.extend_from_slice(rng.child(i as u64).normal(&[latent_dim]).data());
    }
    Tensor::from_raw(vec![rows, latent_dim], data)
}

/// Plain gradient descent on `1/2 ||D(z) - x||^2` for every row of `targets`
/// at once, starting from `z0`.
pub fn lso_run(decoder: &dyn LatentDecoder, targets: &Tensor, z0: &Tensor, cfg: &LsoConfig) -> Result<Vec<LsoTrajectory>> {
    let rows = targets.rows();
    let n = decoder.output_dim();
    if targets.cols() != n || z0.rows() != rows || z0.cols() != decoder.latent_dim() {
        return Err(Error::shape(
            "lso_run",
            format!("targets {:?}, z0 {:?} for decoder {}->{}", targets.shape(), z0.shape(), decoder.latent_dim(), n),
        ));
    }
    let mut trajs: Vec<LsoTrajectory> = (0..rows)
        .map(|_| LsoTrajectory { eta: cfg.eta, steps: cfg.steps, n, mse: Vec::new(), delta_i: Vec::new(), error: None })
        .collect();
    let mut z = z0.clone();
    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let zv = g.leaf(z.clone());
        let out = match decoder.decode_var(&mut g, zv) {
            Ok(v) => v,
            Err(e) => return Ok(flag(trajs, &e)),
        };
        let x = g.input(targets.clone());
        let r = match g.sub(out, x) {
            Ok(r) => r,
            Err(e) => return Ok(flag(trajs, &e)),
        };
        let sq = g.row_sum_sq(r)?;
        let per_row = g.value(sq).data().to_vec();
        for (tr, s) in trajs.iter_mut().zip(&per_row) {
            let m = (s / n as f64).max(cfg.floor);
            if let Some(&prev) = tr.mse.last() {
                tr.delta_i.push(info_gain(prev, m, n));
            }
            tr.mse.push(m);
        }
        if step == cfg.steps {
            break;
        }
        let half = g.sum(sq)?;
        let half = g.scale(half, 0.5)?;
        let grad = match g.backward_wrt(half, &[zv]) {
            Ok(gr) => gr.wrt(zv),
            Err(e) => return Ok(flag(trajs, &e)),
        };
        let next: Vec<f64> = z.data().iter().zip(grad.data()).map(|(a, b)| a - cfg.eta * b).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Ok(flag(trajs, &Error::NonFiniteGrad { node: zv.id(), op: "lso_update" }));
        }
        z = Tensor::from_raw(z.shape().to_vec(), next);
    }
    Ok(trajs)
}

fn flag(mut trajs: Vec<LsoTrajectory>, e: &Error) -> Vec<LsoTrajectory> {
    for t in &mut trajs {
        t.error = Some(e.to_string());
    }
    trajs
}

#[derive(Clone, Debug, PartialEq)]
pub struct AvgIgResult {
    pub avg_ig: f64,
    /// Mean gain at each step across images.
    pub profile: Vec<f64>,
    pub trajectories: Vec<LsoTrajectory>,
    pub excluded: usize,
}

/// Average information gain over all steps of all target images; images
/// whose run failed are excluded and counted.
pub fn avg_ig(decoder: &dyn LatentDecoder, targets: &Tensor, rng: &RngStream, cfg: &LsoConfig) -> Result<AvgIgResult> {
    if targets.rows() == 0 {
        return Err(Error::Invalid("AvgIG needs at least one image".into()));
    }
    let z0 = lso_init(rng, targets.rows(), decoder.latent_dim());
    let mut trajectories = Vec::new();
    for start in (0..targets.rows()).step_by(64) {
        let end = (start + 64).min(targets.rows());
        trajectories.extend(lso_run(decoder, &targets.slice_rows(start, end), &z0.slice_rows(start, end), cfg)?);
    }
    summarize_avg_ig(trajectories)
}

pub fn summarize_avg_ig(trajectories: Vec<LsoTrajectory>) -> Result<AvgIgResult> {
    let good: Vec<&LsoTrajectory> = trajectories.iter().filter(|t| t.error.is_none()).collect();
    let excluded = trajectories.len() - good.len();
    if good.is_empty() {
        return Err(Error::Invalid("every LSO run failed".into()));
    }
    let steps = good[0].delta_i.len();
    let profile: Vec<f64> = (0..steps).map(|s| good.iter().map(|t| t.delta_i[s]).sum::<f64>() / good.len() as f64).collect();
    let avg = if steps == 0 { 0.0 } else { profile.iter().sum::<f64>() / steps as f64 };
    Ok(AvgIgResult { avg_ig: avg, profile, trajectories, excluded })
}

#[derive(Clone, Debug, PartialEq)]
pub struct McPairRecord {
    pub za: Vec<f64>,
    pub zb: Vec<f64>,
    pub grid: Vec<f64>,
    pub losses: Vec<f64>,
    pub l_ref: f64,
    pub l_max: f64,
    pub delta: f64,
    pub mc: f64,
}

pub fn uniform_grid(n: usize) -> Vec<f64> {
    (0..n).map(|j| j as f64 / (n - 1) as f64).collect()
}

/// Points `(1-u) za + u zb` for each `u`, as rows.
pub fn path_points(za: &[f64], zb: &[f64], grid: &[f64]) -> Tensor {
    let data = grid.iter().flat_map(|&u| za.iter().zip(zb).map(move |(a, b)| (1.0 - u) * a + u * b)).collect();
    Tensor::from_raw(vec![grid.len(), za.len()], data)
}

/// Realism loss along the decoded path `D((1-u) za + u zb)` on `grid`.
pub fn path_losses(decoder: &dyn LatentDecoder, realism: &dyn RealismLoss, za: &[f64], zb: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(grid.len());
    for chunk in grid.chunks(1024) {
        let x = decoder.decode(&path_points(za, zb, chunk))?;
        let l = realism.loss(&x)?;
        if let Some(j) = l.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite realism loss at u = {}", chunk[j])));
        }
        losses.extend(l);
    }
    Ok(losses)
}

pub fn mc_pair(
    decoder: &dyn LatentDecoder,
    realism: &dyn RealismLoss,
    za: &[f64],
    zb: &[f64],
    grid_size: usize,
    delta: f64,
) -> Result<McPairRecord> {
    if grid_size < 2 || za.len() != zb.len() || za.len() != decoder.latent_dim() {
        return Err(Error::Invalid(format!("MC needs grid >= 2 and matching latents (grid {grid_size})")));
    }
    let grid = uniform_grid(grid_size);
    let losses = path_losses(decoder, realism, za, zb, &grid)?;
    Ok(mc_from_losses(za.to_vec(), zb.to_vec(), grid, losses, delta))
}

pub fn mc_from_losses(za: Vec<f64>, zb: Vec<f64>, grid: Vec<f64>, losses: Vec<f64>, delta: f64) -> McPairRecord {
    let l_ref = losses[0].min(*losses.last().unwrap());
    let l_max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    McPairRecord { za, zb, grid, losses, l_ref, l_max, delta, mc: l_ref / (l_max + delta) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McDatasetResult {
    pub mc: f64,
    pub same_class: Option<f64>,
    pub cross_class: Option<f64>,
    pub records: Vec<(NearbyPair, McPairRecord)>,
}

/// Mean pairwise MC over `pairs`, whose indices address rows of `tokens`.
pub fn mc_dataset(
    decoder: &dyn LatentDecoder,
    realism: &dyn RealismLoss,
    tokens: &Tensor,
    pairs: &[NearbyPair],
    grid_size: usize,
    delta: f64,
) -> Result<McDatasetResult> {
    if pairs.is_empty() {
        return Err(Error::Invalid("MC needs at least one pair".into()));
    }
    let mut records = Vec::with_capacity(pairs.len());
    for p in pairs {
        let rec = mc_pair(decoder, realism, tokens.row(p.anchor), tokens.row(p.neighbor), grid_size, delta)?;
        records.push((p.clone(), rec));
    }
    let mean_of = |mode: Option<PairMode>| {
        let v: Vec<f64> = records.iter().filter(|(p, _)| mode.is_none_or(|m| p.mode == m)).map(|(_, r)| r.mc).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(McDatasetResult {
        mc: mean_of(None).expect("nonempty"),
        same_class: mean_of(Some(PairMode::SameClass)),
        cross_class: mean_of(Some(PairMode::CrossClass)),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn info_gain_values() {
        assert_eq!(info_gain(4.0, 1.0, 2), 2.0);
        assert_eq!(info_gain(3.0, 3.0, 2), 0.0);
        assert_eq!(info_gain(1.0, 2.0, 2), -1.0);
    }

    #[test]
    fn identity_lso_follows_closed_form() {
        let n = 256;
        let dec = IdentityDecoder { dim: n };
        let x = RngStream::new(1).normal(&[2, n]);
        let z0 = Tensor::zeros(&[2, n]);
        let cfg = LsoConfig::default();
        let trajs = lso_run(&dec, &x, &z0, &cfg).unwrap();
        for tr in &trajs {
            for w in tr.mse.windows(2) {
                assert!((w[1] / w[0] - 0.999f64.powi(2)).abs() < 1e-12);
            }
            assert!(tr.telescoping_gap().abs() <= 1e-9);
        }
        let res = summarize_avg_ig(trajs).unwrap();
        assert!((res.avg_ig + 256.0 * 0.999f64.log2()).abs() < 1e-9);
        assert!((res.avg_ig - 0.36951).abs() < 1e-5);
    }

    #[test]
    fn constant_decoder_gains_nothing() {
        let dec = ConstantDecoder { latent_dim: 3, value: vec![0.2; 5] };
        let x = RngStream::new(2).normal(&[4, 5]);
        let res = avg_ig(&dec, &x, &RngStream::new(3), &LsoConfig { steps: 10, ..Default::default() }).unwrap();
        assert_eq!(res.avg_ig, 0.0);
        for tr in &res.trajectories {
            assert!(tr.delta_i.iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn lso_is_deterministic() {
        let dec = IdentityDecoder { dim: 8 };
        let x = RngStream::new(2).normal(&[3, 8]);
        let cfg = LsoConfig { steps: 5, ..Default::default() };
        assert_eq!(avg_ig(&dec, &x, &RngStream::new(4), &cfg).unwrap(), avg_ig(&dec, &x, &RngStream::new(4), &cfg).unwrap());
    }

    #[test]
    fn mse_floor_applies() {
        let dec = IdentityDecoder { dim: 4 };
        let x = Tensor::zeros(&[1, 4]);
        let tr = lso_run(&dec, &x, &Tensor::zeros(&[1, 4]), &LsoConfig { steps: 3, ..Default::default() }).unwrap();
        assert!(tr[0].mse.iter().all(|&m| m == MSE_FLOOR));
    }

    fn quad_realism(x: &Tensor) -> Result<Vec<f64>> {
        Ok((0..x.rows()).map(|i| 1.0 + x.row(i).iter().map(|v| v * v).sum::<f64>()).collect())
    }

    #[test]
    fn mc_constant_path_is_near_one() {
        let dec = IdentityDecoder { dim: 3 };
        let z = vec![0.3, -0.2, 0.5];
        let r = mc_pair(&dec, &quad_realism, &z, &z, 17, DEFAULT_DELTA).unwrap();
        let l = r.losses[0];
        assert!(r.losses.iter().all(|&v| v == l));
        assert!((1.0 - r.mc) <= DEFAULT_DELTA / l);
        assert_eq!(r.grid.first(), Some(&0.0));
        assert_eq!(r.grid.last(), Some(&1.0));
    }

    #[test]
    fn mc_reversal_symmetry() {
        let dec = IdentityDecoder { dim: 3 };
        let neg = |x: &Tensor| -> Result<Vec<f64>> {
            Ok((0..x.rows()).map(|i| 2.0 - (-x.row(i).iter().map(|v| v * v).sum::<f64>()).exp()).collect())
        };
        let (a, b) = (vec![1.0, 0.0, -1.0], vec![-1.0, 0.5, 1.0]);
        let f = mc_pair(&dec, &neg, &a, &b, 17, DEFAULT_DELTA).unwrap();
        let r = mc_pair(&dec, &neg, &b, &a, 17, DEFAULT_DELTA).unwrap();
        assert!((f.mc - r.mc).abs() <= 1e-12);
        assert!(f.mc > 0.0 && f.mc < 1.0);
    }

    #[test]
    fn mc_scale_invariance_up_to_delta() {
        let dec = IdentityDecoder { dim: 2 };
        let (a, b) = (vec![1.0, 0.0], vec![-1.0, 0.3]);
        let base = mc_pair(&dec, &quad_realism, &a, &b, 17, DEFAULT_DELTA).unwrap();
        for c in [0.5, 2.0, 10.0] {
            let scaled = move |x: &Tensor| -> Result<Vec<f64>> { Ok(quad_realism(x)?.into_iter().map(|v| c * v).collect()) };
            let s = mc_pair(&dec, &scaled, &a, &b, 17, DEFAULT_DELTA).unwrap();
            assert!((s.mc - base.mc).abs() <= DEFAULT_DELTA / base.l_max);
        }
    }

    #[test]
    fn dataset_mean_and_submeans() {
        let rec = |mc: f64| McPairRecord { za: vec![], zb: vec![], grid: vec![], losses: vec![], l_ref: 0.0, l_max: 0.0, delta: 0.0, mc };
        let p = |mode| NearbyPair { anchor: 0, neighbor: 1, distance: 0.0, mode };
        let records = [(p(PairMode::SameClass), rec(0.2)), (p(PairMode::CrossClass), rec(0.8))];
        let mean = records.iter().map(|(_, r)| r.mc).sum::<f64>() / 2.0;
        assert!((mean - 0.5).abs() < 1e-15);
        let dec = IdentityDecoder { dim: 2 };
        let tokens = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.1, 0.2]).unwrap();
        let res = mc_dataset(&dec, &quad_realism, &tokens, &[p(PairMode::SameClass)], 17, DEFAULT_DELTA).unwrap();
        assert!((1.0 - res.mc) < 1e-5);
        assert!(res.cross_class.is_none());
        assert!(mc_dataset(&dec, &quad_realism, &tokens, &[], 17, DEFAULT_DELTA).is_err());
    }

    #[test]
    fn non_finite_realism_reports_u() {
        let dec = IdentityDecoder { dim: 1 };
        let bad = |x: &Tensor| -> Result<Vec<f64>> {
            Ok((0..x.rows()).map(|i| if x.row(i)[0] > 0.5 { f64::NAN } else { 1.0 }).collect())
        };
        let err = mc_pair(&dec, &bad, &[0.0], &[1.0], 17, DEFAULT_DELTA).unwrap_err();
        assert!(err.to_string().contains("u = 0.5625"));
    }
}
