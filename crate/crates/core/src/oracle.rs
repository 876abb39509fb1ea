//! Analytic decoders with known behaviour and independent reference
//! computations for the diagnostics: closed-form LSO, the information-gain /
//! log-likelihood relation, the Lipschitz lower bound on MC, and dense-grid
//! barrier search.

use crate::autodiff::{Graph, Var};
use crate::diagnostics::{path_losses, uniform_grid, LatentDecoder, RealismLoss};
use crate::error::{Error, Result};
use crate::nn::{operator_norm, Mlp};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Largest slope of SiLU, `max_x d/dx [x sigmoid(x)]`.
pub const SILU_SLOPE: f64 = 1.0998;
pub const POWER_ITERS: usize = 100;
pub const POWER_TOL: f64 = 1e-8;

/// `D(z) = A z + b` with `A` of shape `[N, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDecoder {
    pub a: Tensor,
    pub b: Vec<f64>,
    pub op_norm: f64,
}

impl LinearDecoder {
    pub fn new(a: Tensor, b: Vec<f64>) -> Result<Self> {
        if a.shape().len() != 2 || a.rows() != b.len() {
            return Err(Error::shape("linear_decoder", format!("A {:?}, b {}", a.shape(), b.len())));
        }
        if !a.is_finite() || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("linear decoder entries must be finite".into()));
        }
        let op_norm = operator_norm(&a, POWER_ITERS, POWER_TOL);
        Ok(LinearDecoder { a, b, op_norm })
    }

    pub fn random(n: usize, l: usize, scale: f64, rng: &RngStream) -> Result<Self> {
        let a = rng.child(0).normal(&[n, l]).map(|v| v * scale);
        let b = rng.child(1).normal(&[n]).into_data();
        LinearDecoder::new(a, b)
    }

    fn a_transposed(&self) -> Tensor {
        let (n, l) = (self.a.rows(), self.a.cols());
        let mut t = vec![0.0; n * l];
        for i in 0..n {
            for j in 0..l {
                t[j * n + i] = self.a.data()[i * l + j];
            }
        }
        Tensor::from_raw(vec![l, n], t)
    }
}

impl LatentDecoder for LinearDecoder {
    fn latent_dim(&self) -> usize {
        self.a.cols()
    }
    fn output_dim(&self) -> usize {
        self.a.rows()
    }
    fn decode_var(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let at = g.input(self.a_transposed());
        let b = g.input(Tensor::vector(self.b.clone()));
        let y = g.matmul(z, at)?;
        g.add_row(y, b)
    }
}

/// Reference LSO on a linear decoder with plain loops:
/// `z <- z - eta A^T (A z + b - x)`, returning `MSE_0 ..= MSE_steps`.
pub fn analytic_lso(a: &Tensor, b: &[f64], x: &[f64], z0: &[f64], eta: f64, steps: usize) -> Result<Vec<f64>> {
    let (n, l) = (a.rows(), a.cols());
    if b.len() != n || x.len() != n || z0.len() != l {
        return Err(Error::shape("analytic_lso", "A, b, x, z0 dimensions disagree"));
    }
    let sigma = operator_norm(a, POWER_ITERS, POWER_TOL);
    if sigma > 0.0 && eta >= 2.0 / (sigma * sigma) {
        return Err(Error::Diverged { step: 0, reason: format!("eta {eta} >= 2 / sigma_max^2 = {}", 2.0 / (sigma * sigma)) });
    }
    let ad = a.data();
    let mut z = z0.to_vec();
    let mut out = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut r = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i] - x[i];
            for j in 0..l {
                s += ad[i * l + j] * z[j];
            }
            r[i] = s;
        }
        out.push(r.iter().map(|v| v * v).sum::<f64>() / n as f64);
        if step == steps {
            break;
        }
        for j in 0..l {
            let mut gj = 0.0;
            for i in 0..n {
                gj += ad[i * l + j] * r[i];
            }
            z[j] -= eta * gj;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainStep {
    pub delta_i: f64,
    pub delta_ll_bits: f64,
    /// `delta_ll_bits * sigma^2 / MSE_t`.
    pub scaled_ll: f64,
    pub rel_change: f64,
    pub remainder_bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainReport {
    pub steps: Vec<GainStep>,
    pub sign_agreement: bool,
    /// Largest `|dI - scaled dLL| - bound` over steps with `|r| <= max_rel`.
    pub worst_margin: f64,
    pub checked_first_order: usize,
}

/// Log-likelihood gain in bits of a Gaussian decoder with variance `sigma2`.
pub fn delta_ll_bits(mse_t: f64, mse_t1: f64, n: usize, sigma2: f64) -> f64 {
    (mse_t - mse_t1) * n as f64 / (2.0 * sigma2 * std::f64::consts::LN_2)
}

/// Bound on `|dI - scaled dLL|` from the series remainder of
/// `-ln(1 - r) - r`, `r` the relative MSE drop.
pub fn taylor_remainder_bound(r: f64, n: usize) -> f64 {
    let denom = 2.0 * if r >= 0.0 { 1.0 - r } else { 1.0 };
    n as f64 / (2.0 * std::f64::consts::LN_2) * r * r / denom
}

/// Sign agreement on every step and first-order agreement on steps whose
/// relative MSE change is at most `max_rel`. A rounding allowance of
/// `8 N eps` is added to the remainder bound.
pub fn check_lemma_avgig(sigma2: f64, mse: &[f64], n: usize, max_rel: f64) -> GainReport {
    let mut steps = Vec::new();
    let mut sign_agreement = true;
    let mut worst_margin = f64::NEG_INFINITY;
    let mut checked = 0;
    let slack = 8.0 * n as f64 * f64::EPSILON;
    for w in mse.windows(2) {
        let (m0, m1) = (w[0], w[1]);
        let di = crate::diagnostics::info_gain(m0, m1, n);
        let dll = delta_ll_bits(m0, m1, n, sigma2);
        let scaled = dll * sigma2 / m0;
        let r = 1.0 - m1 / m0;
        if di.signum() != dll.signum() && !(di == 0.0 && dll == 0.0) {
            sign_agreement = false;
        }
        let bound = taylor_remainder_bound(r, n);
        if r.abs() <= max_rel {
            checked += 1;
            worst_margin = worst_margin.max((di - scaled).abs() - bound - slack);
        }
        steps.push(GainStep { delta_i: di, delta_ll_bits: dll, scaled_ll: scaled, rel_change: r, remainder_bound: bound });
    }
    GainReport { steps, sign_agreement, worst_margin, checked_first_order: checked }
}

/// Realism loss `softplus(f(x))` with `f` a dense SiLU network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpRealism {
    pub net: Mlp,
}

impl MlpRealism {
    pub fn random(dims: &[usize], rng: &RngStream) -> Self {
        MlpRealism { net: Mlp::new("realism", dims, 1.0, rng) }
    }

    /// Product of layer operator norms times the SiLU slope per hidden layer;
    /// the softplus slope is at most 1.
    pub fn lipschitz_bound(&self) -> f64 {
        let layers = self.net.num_layers();
        let prod: f64 = (0..layers).map(|l| operator_norm(self.net.weight(l), POWER_ITERS, POWER_TOL)).product();
        prod * SILU_SLOPE.powi(layers as i32 - 1)
    }
}

impl RealismLoss for MlpRealism {
    fn loss(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.eval(x)?.data().iter().map(|&v| crate::autodiff::softplus(v)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzCertificate {
    pub k_bound: f64,
    pub delta_z: f64,
    pub d_end: f64,
}

impl LipschitzCertificate {
    /// Certificate for `realism(decoder(z))` on the chord `za -> zb`.
    pub fn for_pair(decoder: &LinearDecoder, realism: &MlpRealism, za: &[f64], zb: &[f64]) -> Result<Self> {
        let k_bound = decoder.op_norm * realism.lipschitz_bound();
        let delta_z = za.iter().zip(zb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let ends = realism.loss(&decoder.decode(&Tensor::matrix(2, za.len(), [za, zb].concat())?)?)?;
        Ok(LipschitzCertificate { k_bound, delta_z, d_end: ends[0] - ends[1] })
    }
}

pub fn theorem_mc_bound(cert: &LipschitzCertificate, l_ref: f64, delta: f64) -> f64 {
    1.0 / (1.0 + (cert.k_bound * cert.delta_z + cert.d_end.abs()) / (l_ref + delta))
}

/// Largest observed `|L(D(z1)) - L(D(z2))| / ||z1 - z2||` over random chords.
pub fn empirical_lipschitz(
    decoder: &dyn LatentDecoder,
    realism: &dyn RealismLoss,
    chords: usize,
    scale: f64,
    rng: &RngStream,
) -> Result<f64> {
    let l = decoder.latent_dim();
    let z1 = rng.child(0).normal(&[chords, l]).map(|v| v * scale);
    let dir = rng.child(1).normal(&[chords, l]);
    let len = rng.child(2).uniform(&[chords], 1e-3, 1.0);
    let mut z2 = z1.clone();
    for i in 0..chords {
        for j in 0..l {
            z2.data_mut()[i * l + j] += len.data()[i] * dir.data()[i * l + j];
        }
    }
    let l1 = realism.loss(&decoder.decode(&z1)?)?;
    let l2 = realism.loss(&decoder.decode(&z2)?)?;
    let mut best: f64 = 0.0;
    for i in 0..chords {
        let dz = z1.row(i).iter().zip(z2.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        best = best.max((l1[i] - l2[i]).abs() / dz);
    }
    Ok(best)
}

/// `D(z) = A z + b + s(z) v` where `s` is a bump along the chord from `za` to
/// `zb`: `s = h (4 u (1 - u))^2`, `u` the projection of `z` onto the chord.
/// `v` is a unit vector orthogonal to the columns of `A` and to `b`, so the
/// paired realism loss `l_end (1 + (v . x)^2)` equals `l_end` at both
/// endpoints and `beta l_end` at the midpoint when `h^2 = beta - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BarrierDecoder {
    pub base: LinearDecoder,
    pub za: Vec<f64>,
    pub zb: Vec<f64>,
    pub beta: f64,
    pub height: f64,
    pub v: Vec<f64>,
    pub l_end: f64,
}

impl BarrierDecoder {
    pub fn new(n: usize, l: usize, beta: f64, l_end: f64, rng: &RngStream) -> Result<Self> {
        if beta <= 1.0 || l_end <= 0.0 || n < l + 2 {
            return Err(Error::Invalid(format!("barrier needs beta > 1, l_end > 0, N >= L + 2 (beta {beta}, N {n}, L {l})")));
        }
        let base = LinearDecoder::random(n, l, 1.0 / (n as f64).sqrt(), &rng.child(0))?;
        let za = rng.child(1).normal(&[l]).into_data();
        let zb = rng.child(2).normal(&[l]).into_data();
        // Gram-Schmidt of a random vector against the columns of A and b.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut cols: Vec<Vec<f64>> = (0..l).map(|j| (0..n).map(|i| base.a.data()[i * l + j]).collect()).collect();
        cols.push(base.b.clone());
        cols.push(rng.child(3).normal(&[n]).into_data());
        for mut c in cols {
            for q in &basis {
                let dot: f64 = c.iter().zip(q).map(|(a, b)| a * b).sum();
                c.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = c.iter().map(|a| a * a).sum::<f64>().sqrt();
            c.iter_mut().for_each(|a| *a /= norm);
            basis.push(c);
        }
        let v = basis.pop().expect("random direction");
        let dec = BarrierDecoder { base, za, zb, beta, height: (beta - 1.0).sqrt(), v, l_end };
        let mid: Vec<f64> = dec.za.iter().zip(&dec.zb).map(|(a, b)| 0.5 * (a + b)).collect();
        let pts = Tensor::matrix(3, l, [&dec.za[..], &mid[..], &dec.zb[..]].concat())?;
        let losses = dec.realism_loss(&dec.decode(&pts)?)?;
        let ok = (losses[0] - l_end).abs() <= 1e-9 * l_end
            && (losses[2] - l_end).abs() <= 1e-9 * l_end
            && (losses[1] - beta * l_end).abs() <= 1e-9 * beta * l_end;
        if !ok {
            return Err(Error::Invalid(format!("barrier construction check failed: {losses:?}")));
        }
        Ok(dec)
    }

    pub fn realism_loss(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok((0..x.rows())
            .map(|i| {
                let p: f64 = x.row(i).iter().zip(&self.v).map(|(a, b)| a * b).sum();
                self.l_end * (1.0 + p * p)
            })
            .collect())
    }
}

impl LatentDecoder for BarrierDecoder {
    fn latent_dim(&self) -> usize {
        self.base.latent_dim()
    }
    fn output_dim(&self) -> usize {
        self.base.output_dim()
    }
    fn decode_var(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let rows = g.shape(z)[0];
        let w: Vec<f64> = self.za.iter().zip(&self.zb).map(|(a, b)| b - a).collect();
        let w2: f64 = w.iter().map(|v| v * v).sum();
        let offset: f64 = self.za.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / w2;
        let wcol = g.input(Tensor::matrix(w.len(), 1, w.iter().map(|v| v / w2).collect())?);
        let u = g.matmul(z, wcol)?;
        let u = g.add_const(u, -offset)?;
        let one_minus = g.scale(u, -1.0)?;
        let one_minus = g.add_const(one_minus, 1.0)?;
        let p = g.mul(u, one_minus)?;
        let p = g.scale(p, 4.0)?;
        let p2 = g.mul(p, p)?;
        let s = g.scale(p2, self.height)?;
        let vrow = g.input(Tensor::matrix(1, self.v.len(), self.v.clone())?);
        let bump = g.matmul(s, vrow)?;
        let base = self.base.decode_var(g, z)?;
        debug_assert_eq!(g.shape(base)[0], rows);
        g.add(base, bump)
    }
}

impl RealismLoss for BarrierDecoder {
    fn loss(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.realism_loss(x)
    }
}

/// Path maximum of the realism loss over a dense uniform grid.
pub fn brute_force_lmax(decoder: &dyn LatentDecoder, realism: &dyn RealismLoss, za: &[f64], zb: &[f64], n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Invalid("dense grid needs n >= 2".into()));
    }
    let losses = path_losses(decoder, realism, za, zb, &uniform_grid(n))?;
    Ok(losses.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{lso_run, mc_pair, summarize_avg_ig, LsoConfig, DEFAULT_DELTA};

    #[test]
    fn analytic_identity_recursion() {
        let n = 5;
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            a.data_mut()[i * n + i] = 1.0;
        }
        let x = RngStream::new(1).normal(&[n]).into_data();
        let traj = analytic_lso(&a, &vec![0.0; n], &x, &vec![0.0; n], 0.001, 20).unwrap();
        for w in traj.windows(2) {
            assert!((w[1] - 0.999f64.powi(2) * w[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn analytic_zero_matrix_is_flat() {
        let a = Tensor::zeros(&[3, 2]);
        let traj = analytic_lso(&a, &[0.1, 0.2, 0.3], &[1.0, 1.0, 1.0], &[0.5, -0.5], 0.01, 10).unwrap();
        assert!(traj.iter().all(|&m| m == traj[0]));
    }

    #[test]
    fn analytic_rejects_large_eta() {
        let a = Tensor::matrix(1, 1, vec![10.0]).unwrap();
        assert!(analytic_lso(&a, &[0.0], &[1.0], &[0.0], 0.05, 3).is_err());
    }

    #[test]
    fn partial_subspace_avgig_is_lower() {
        // diag(1, 0): only the first coordinate can be fit
        let n = 2;
        let eta = 0.001;
        let steps = 50;
        let full = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let half = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let x = [1.0, 1.0];
        let tf = analytic_lso(&full, &[0.0, 0.0], &x, &[0.0, 0.0], eta, steps).unwrap();
        let th = analytic_lso(&half, &[0.0, 0.0], &x, &[0.0, 0.0], eta, steps).unwrap();
        // closed form: error on coordinate 0 is (1-eta)^t, coordinate 1 stays 1
        for (t, m) in th.iter().enumerate() {
            let e = (1.0 - eta).powi(t as i32);
            assert!((m - (e * e + 1.0) / 2.0).abs() < 1e-14);
        }
        let avg = |tr: &[f64]| crate::diagnostics::info_gain(tr[0], tr[steps], n) / steps as f64;
        assert!(avg(&th) < avg(&tf));
        // the diagnostics path agrees
        let dec = LinearDecoder::new(half, vec![0.0, 0.0]).unwrap();
        let x_t = Tensor::matrix(1, 2, x.to_vec()).unwrap();
        let trajs = lso_run(&dec, &x_t, &Tensor::zeros(&[1, 2]), &LsoConfig { eta, steps, ..Default::default() }).unwrap();
        let res = summarize_avg_ig(trajs).unwrap();
        assert!((res.avg_ig - avg(&th)).abs() < 1e-12);
    }

    #[test]
    fn lso_matches_analytic_on_random_linear() {
        for seed in 0..5 {
            let rng = RngStream::new(seed);
            let dec = LinearDecoder::random(12, 4, 0.5, &rng).unwrap();
            let x = rng.child(5).normal(&[1, 12]);
            let z0 = rng.child(6).normal(&[1, 4]);
            let cfg = LsoConfig { steps: 30, ..Default::default() };
            let got = lso_run(&dec, &x, &z0, &cfg).unwrap();
            let want = analytic_lso(&dec.a, &dec.b, x.data(), z0.data(), cfg.eta, cfg.steps).unwrap();
            for (g, w) in got[0].mse.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn gain_check_reference_values() {
        let r = check_lemma_avgig(4.0, &[4.0, 1.0], 2, 1e-3);
        assert_eq!(r.steps[0].delta_i, 2.0);
        assert!((r.steps[0].delta_ll_bits - 3.0 * 2.0 / (2.0 * 4.0 * std::f64::consts::LN_2)).abs() < 1e-15);
        assert!((r.steps[0].delta_ll_bits - 1.0820).abs() < 1e-4);
        assert!(r.sign_agreement);
        let flat = check_lemma_avgig(1.0, &[2.0, 2.0], 2, 1e-3);
        assert_eq!((flat.steps[0].delta_i, flat.steps[0].delta_ll_bits), (0.0, 0.0));
        let n = 256;
        let small = check_lemma_avgig(0.3, &[1.0, 1.0 - 1e-4], n, 1e-3);
        assert!((small.steps[0].delta_i - small.steps[0].scaled_ll).abs() <= 1e-7 * n as f64);
        assert!(small.worst_margin <= 0.0);
        let up = check_lemma_avgig(0.3, &[1.0, 1.0 + 5e-4], n, 1e-3);
        assert!(up.sign_agreement && up.worst_margin <= 0.0);
    }

    #[test]
    fn mc_bound_algebra() {
        let c0 = LipschitzCertificate { k_bound: 0.0, delta_z: 3.0, d_end: 0.0 };
        assert!((theorem_mc_bound(&c0, 2.0, 1e-6) - 1.0).abs() < 1e-15);
        let c = LipschitzCertificate { k_bound: 1.0, delta_z: 1.5, d_end: -0.5 };
        assert!((theorem_mc_bound(&c, 2.0 - 1e-6, 1e-6) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn certificate_is_sound_and_bound_holds() {
        let rng = RngStream::new(3);
        let dec = LinearDecoder::random(16, 4, 0.3, &rng.child(0)).unwrap();
        let realism = MlpRealism::random(&[16, 8, 8, 1], &rng.child(1));
        let k = dec.op_norm * realism.lipschitz_bound();
        let emp = empirical_lipschitz(&dec, &realism, 1000, 1.0, &rng.child(2)).unwrap();
        assert!(k >= emp, "{k} < {emp}");
        for i in 0..20 {
            let za = rng.at(&[3, i]).normal(&[4]).into_data();
            let zb = rng.at(&[4, i]).normal(&[4]).into_data();
            let cert = LipschitzCertificate::for_pair(&dec, &realism, &za, &zb).unwrap();
            let rec = mc_pair(&dec, &realism, &za, &zb, 17, DEFAULT_DELTA).unwrap();
            assert!(rec.mc >= theorem_mc_bound(&cert, rec.l_ref, DEFAULT_DELTA) - 1e-12);
        }
    }

    #[test]
    fn power_iteration_matches_svd() {
        let w = RngStream::new(8).normal(&[7, 5]);
        let m = nalgebra::DMatrix::from_row_slice(7, 5, w.data());
        let exact = m.singular_values().max();
        assert!((operator_norm(&w, POWER_ITERS, POWER_TOL) - exact).abs() < 1e-6 * exact);
    }

    #[test]
    fn barrier_midpoint_and_mc() {
        let dec = BarrierDecoder::new(32, 4, 10.0, 1.0, &RngStream::new(5)).unwrap();
        let lmax = brute_force_lmax(&dec, &dec, &dec.za, &dec.zb, 10_001).unwrap();
        assert!((lmax - 10.0).abs() < 1e-9);
        let rec = mc_pair(&dec, &dec, &dec.za, &dec.zb, 17, DEFAULT_DELTA).unwrap();
        assert!((rec.mc - 1.0 / (10.0 + 1e-6)).abs() < 1e-9);
        assert!(lmax >= rec.l_max);
    }

    #[test]
    fn brute_force_on_constant_loss() {
        let dec = LinearDecoder::random(3, 2, 1.0, &RngStream::new(2)).unwrap();
        let c = |x: &Tensor| -> Result<Vec<f64>> { Ok(vec![0.7; x.rows()]) };
        assert_eq!(brute_force_lmax(&dec, &c, &[0.0, 1.0], &[1.0, 0.0], 101).unwrap(), 0.7);
    }
}
