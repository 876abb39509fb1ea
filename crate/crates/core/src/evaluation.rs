//! Proxy Fréchet distance over a fixed random feature net, task utility
//! and Pearson correlations between metrics, plus report tables.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, Csv};
use crate::nn::Mlp;
use crate::rng::RngStream;
use crate::synthworld::{TaskClassifier, NUM_PIXELS};
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 32;
pub const FEATURE_HIDDEN: usize = 64;
pub const MIN_FID_SET: usize = 64;
pub const PSD_TOL: f64 = 1e-10;

/// Untrained two-layer SiLU net, image to 32 features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub seed: u64,
    net: Mlp,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let net = Mlp::new("feat", &[NUM_PIXELS, FEATURE_HIDDEN, FEATURE_DIM], 1.0, &RngStream::new(seed).child(0));
        FeatureExtractor { seed, net }
    }

    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        if images.cols() != NUM_PIXELS {
            return Err(Error::Invalid(format!("expected {NUM_PIXELS}-pixel images, got {}", images.cols())));
        }
        self.net.eval(images)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Sample mean and unbiased covariance of the rows of `x`.
    pub fn of(x: &Tensor) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if n < 2 {
            return Err(Error::Invalid("need at least two samples".into()));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..n {
            let c: Vec<f64> = x.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
            for a in 0..d {
                for b in a..d {
                    cov[(a, b)] += c[a] * c[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / (n - 1) as f64;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        Ok(GaussianStats { mean, cov, count: n })
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOL * (1.0 + m.norm()) {
            return Err(Error::Numeric(format!("matrix not PSD: eigenvalue {v}")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians. The cross term uses
/// `tr((S_a S_b)^{1/2}) = tr((S_a^{1/2} S_b S_a^{1/2})^{1/2})`, which keeps
/// the argument symmetric.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Invalid("feature dimensions differ".into()));
    }
    let mu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let ra = psd_sqrt(&a.cov)?;
    let inner = &ra * &b.cov * &ra;
    let cross = psd_sqrt(&inner)?.trace();
    let d = mu + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Numeric("Fréchet distance".into()));
    }
    Ok(d.max(0.0))
}

pub fn proxy_fid(a: &Tensor, b: &Tensor, fx: &FeatureExtractor) -> Result<f64> {
    if a.rows() < MIN_FID_SET || b.rows() < MIN_FID_SET {
        return Err(Error::Invalid(format!("proxy-FID needs at least {MIN_FID_SET} images per set")));
    }
    let sa = GaussianStats::of(&fx.features(a)?)?;
    let sb = GaussianStats::of(&fx.features(b)?)?;
    // evaluate in a fixed argument order so the result is exactly symmetric
    let key = |t: &Tensor| t.data().iter().fold(0.0, |acc, v| acc * 0.5 + v);
    if key(a) <= key(b) {
        frechet_distance(&sa, &sb)
    } else {
        frechet_distance(&sb, &sa)
    }
}

pub fn task_utility(clf: &TaskClassifier, images: &Tensor, labels: &[usize]) -> Result<f64> {
    if images.rows() != labels.len() {
        return Err(Error::Invalid(format!("{} images but {} labels", images.rows(), labels.len())));
    }
    clf.accuracy(images, labels)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::Invalid("pearson needs equal lengths of at least 3".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Invalid("pearson of a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub const REPORT_METRICS: [&str; 5] = ["proxy_rfid", "avg_ig", "mc", "proxy_gfid", "task"];
pub const CORRELATION_TARGETS: [&str; 2] = ["proxy_gfid", "task"];

/// One variant's metrics; absent values stay empty in the tables.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub variant: String,
    pub values: [Option<f64>; 5],
}

impl RunMetrics {
    pub fn from_summary(variant: &str, summary: &std::collections::BTreeMap<String, serde_json::Value>) -> Self {
        let mut values = [None; 5];
        for (slot, key) in values.iter_mut().zip(REPORT_METRICS) {
            *slot = summary.get(key).and_then(|v| v.as_f64());
        }
        RunMetrics { variant: variant.to_string(), values }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        REPORT_METRICS.iter().position(|m| *m == metric).and_then(|i| self.values[i])
    }
}

pub struct Report {
    pub report: Csv,
    pub correlations: Csv,
    pub scatters: Vec<(String, Csv)>,
}

impl Report {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.report.save(&dir.join("report.csv"))?;
        self.correlations.save(&dir.join("correlations.csv"))?;
        for (m, c) in &self.scatters {
            c.save(&dir.join(format!("scatter_{m}.csv")))?;
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn build_report(runs: &[RunMetrics]) -> Report {
    let mut header = vec!["variant"];
    header.extend(REPORT_METRICS);
    let mut report = Csv::new(&header);
    for r in runs {
        let mut row = vec![r.variant.clone()];
        row.extend(r.values.iter().map(|v| opt(*v)));
        report.row(&row);
    }
    let mut correlations = Csv::new(&["metric", "target", "n", "r", "status"]);
    let mut scatters = Vec::new();
    for metric in REPORT_METRICS {
        for target in CORRELATION_TARGETS {
            // task vs proxy_gfid repeats proxy_gfid vs task
            if metric == target || metric == "task" {
                continue;
            }
            let pts: Vec<(&str, f64, f64)> = runs
                .iter()
                .filter_map(|r| Some((r.variant.as_str(), r.get(metric)?, r.get(target)?)))
                .collect();
            let xs: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.2).collect();
            let (r, status) = if pts.len() < 3 {
                (String::new(), "insufficient-n".to_string())
            } else {
                match pearson(&xs, &ys) {
                    Ok(r) => (fmt_f64(r), "ok".to_string()),
                    Err(_) => (String::new(), "zero-variance".to_string()),
                }
            };
            correlations.row(&[metric.to_string(), target.to_string(), pts.len().to_string(), r, status]);
            let mut sc = Csv::new(&["variant", "x", "y"]);
            for (v, x, y) in &pts {
                sc.row(&[v.to_string(), fmt_f64(*x), fmt_f64(*y)]);
            }
            scatters.push((format!("{metric}_vs_{target}"), sc));
        }
    }
    Report { report, correlations, scatters }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_closed_cases() {
        let xs = [0.3, 1.0, -2.0, 4.5];
        let lin: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &lin).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&xs, &[1.0; 4]).is_err());
        assert!(pearson(&xs[..2], &lin[..2]).is_err());
    }

    #[test]
    fn published_remote_sensing_columns() {
        let avg_ig = [0.130, 0.149, 0.147, 0.131, 0.159, 0.144, 0.154, 0.157];
        let task = [75.9, 83.4, 85.1, 79.7, 86.5, 84.2, 86.7, 88.7];
        let r = pearson(&avg_ig, &task).unwrap();
        assert!((r - 0.93).abs() <= 0.01, "r = {r}");
    }

    #[test]
    fn shifted_gaussian_clouds() {
        let rng = RngStream::new(11);
        let n = 20_000;
        let a = rng.child(0).normal(&[n, 8]);
        let shift: Vec<f64> = (0..8).map(|i| 0.5 + 0.1 * i as f64).collect();
        let mut b = rng.child(1).normal(&[n, 8]);
        for i in 0..n {
            for j in 0..8 {
                b.data_mut()[i * 8 + j] += shift[j];
            }
        }
        let expect: f64 = shift.iter().map(|s| s * s).sum();
        let d = frechet_distance(&GaussianStats::of(&a).unwrap(), &GaussianStats::of(&b).unwrap()).unwrap();
        assert!((d - expect).abs() <= 0.05 * expect, "{d} vs {expect}");
    }

    #[test]
    fn frechet_of_diagonal_gaussians() {
        // closed form for commuting covariances: sum (sqrt(a) - sqrt(b))^2
        let mk = |diag: &[f64]| GaussianStats { mean: vec![0.0; diag.len()], cov: DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(diag)), count: 10 };
        let d = frechet_distance(&mk(&[1.0, 4.0, 9.0]), &mk(&[4.0, 4.0, 1.0])).unwrap();
        assert!((d - (1.0 + 0.0 + 4.0)).abs() < 1e-10);
    }

    #[test]
    fn proxy_fid_identity_and_symmetry() {
        let fx = FeatureExtractor::new(3);
        let a = RngStream::new(1).uniform(&[100, NUM_PIXELS], 0.0, 1.0);
        let b = RngStream::new(2).uniform(&[80, NUM_PIXELS], 0.0, 0.5);
        assert!(proxy_fid(&a, &a, &fx).unwrap().abs() < 1e-8);
        assert_eq!(proxy_fid(&a, &b, &fx).unwrap(), proxy_fid(&b, &a, &fx).unwrap());
        assert!(proxy_fid(&a, &b, &fx).unwrap() > 0.0);
        assert!(proxy_fid(&a.slice_rows(0, 10), &b, &fx).is_err());
    }

    #[test]
    fn non_psd_rejected() {
        let bad = GaussianStats { mean: vec![0.0; 2], cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), count: 3 };
        assert!(frechet_distance(&bad, &bad).is_err());
    }

    #[test]
    fn report_rows_and_small_n() {
        let one = RunMetrics { variant: "full".into(), values: [Some(1.0), Some(0.2), Some(0.7), Some(3.0), Some(0.9)] };
        let rep = build_report(std::slice::from_ref(&one));
        assert_eq!(rep.report.as_str().lines().count(), 2);
        assert!(rep.correlations.as_str().lines().skip(1).all(|l| l.ends_with("insufficient-n")));
        let runs: Vec<RunMetrics> = ["full", "no_mi", "no_swap", "no_afm"]
            .iter()
            .enumerate()
            .map(|(i, v)| RunMetrics { variant: v.to_string(), values: [Some(i as f64), Some(0.1 * i as f64), None, Some(2.0 - i as f64), Some(0.5)] })
            .collect();
        let rep = build_report(&runs);
        assert_eq!(rep.report.as_str().lines().count(), 5);
        let again = build_report(&runs);
        assert_eq!(rep.correlations.as_str(), again.correlations.as_str());
        assert!(rep.correlations.as_str().contains("avg_ig,proxy_gfid,4,-0.99999"), "{}", rep.correlations.as_str());
    }
}
