//! Registry of gradient checks: every graph primitive and every training or
//! metric loss, each evaluated against central differences at seeded points.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{finite_difference_check_at, Graph, Var};
use crate::error::Result;
use crate::generator::{loss_generator, BoundGen, GeneratorArch, GeneratorBundle};
use crate::rng::RngStream;
use crate::synthworld::NUM_PIXELS;
use crate::tensor::Tensor;
use crate::tokenizer::{
    afm_scores, batch_sq_norm, expand_mask, loss_afm_discriminator, loss_afm_generator, loss_mi_to,
    swap_tokens_var,
    loss_tok, realism_loss_var, Bound, DataStats, ModelBundle, TokenizerArch,
};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;
const PROJ_SEED: u64 = 0x9e0d;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Primitive,
    Loss,
}

type Builder = Arc<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync>;
type PointGen = Arc<dyn Fn(&RngStream) -> Vec<Tensor> + Send + Sync>;

#[derive(Clone)]
pub struct GradCase {
    pub name: &'static str,
    pub family: Family,
    point: PointGen,
    build: Builder,
    /// Coordinates checked per tensor; `None` checks all of them.
    sample: Option<usize>,
}

impl GradCase {
    /// Worst relative error over `points` seeded evaluation points.
    pub fn run(&self, points: usize, seed: u64) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for p in 0..points {
            let rng = RngStream::new(seed).at(&[p as u64]);
            let pt = (self.point)(&rng.child(0));
            let coords: Vec<(usize, usize)> = match self.sample {
                None => pt.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k))).collect(),
                Some(n) => {
                    let mut r = rng.child(1).rng();
                    pt.iter().enumerate().flat_map(|(i, t)| (0..n.min(t.len())).map(|_| (i, r.gen_range(0..t.len()))).collect::<Vec<_>>()).collect()
                }
            };
            let b = self.build.clone();
            worst = worst.max(finite_difference_check_at(move |g, v| b(g, v), &pt, FD_STEP, &coords)?);
        }
        Ok(worst)
    }
}

/// `sum(w * out)` with a fixed random `w`, so every output element matters.
fn project(g: &mut Graph, out: Var) -> Result<Var> {
    let w = g.input(RngStream::new(PROJ_SEED).normal(g.shape(out)));
    let m = g.mul(out, w)?;
    g.sum(m)
}

fn prim(name: &'static str, shapes: &[&[usize]], f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync + 'static) -> GradCase {
    let shapes: Vec<Vec<usize>> = shapes.iter().map(|s| s.to_vec()).collect();
    GradCase {
        name,
        family: Family::Primitive,
        point: Arc::new(move |r: &RngStream| shapes.iter().enumerate().map(|(i, s)| r.child(i as u64).normal(s)).collect()),
        build: Arc::new(move |g: &mut Graph, v: &[Var]| {
            let out = f(g, v)?;
            project(g, out)
        }),
        sample: None,
    }
}

pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        prim("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1])),
        prim("sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1])),
        prim("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1])),
        prim("scale", &[&[3, 4]], |g, v| g.scale(v[0], -1.7)),
        prim("add_const", &[&[3, 4]], |g, v| g.add_const(v[0], 0.3)),
        prim("add_row", &[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1])),
        prim("mul_rows", &[&[3, 4], &[3]], |g, v| g.mul_rows(v[0], v[1])),
        prim("broadcast_rows", &[&[4]], |g, v| g.broadcast_rows(v[0], 3)),
        prim("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        prim("affine", &[&[3, 4], &[4, 2], &[2]], |g, v| g.affine(v[0], v[1], v[2])),
        prim("bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false)),
        prim("bmm_trans_b", &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], true)),
        prim("silu", &[&[3, 4]], |g, v| g.silu(v[0])),
        prim("softplus", &[&[3, 4]], |g, v| g.softplus(v[0])),
        prim("layer_norm", &[&[3, 5]], |g, v| g.layer_norm(v[0], 1e-12)),
        prim("softmax", &[&[3, 5]], |g, v| g.softmax(v[0])),
        prim("cross_entropy", &[&[4, 5]], |g, v| g.cross_entropy(v[0], &[0, 3, 4, 3])),
        prim("sum", &[&[3, 4]], |g, v| g.sum(v[0])),
        prim("mean", &[&[3, 4]], |g, v| g.mean(v[0])),
        prim("row_sum", &[&[3, 4]], |g, v| g.row_sum(v[0])),
        prim("mse", &[&[3, 4], &[3, 4]], |g, v| g.mse(v[0], v[1])),
        prim("row_sum_sq", &[&[3, 4]], |g, v| g.row_sum_sq(v[0])),
        prim("concat_cols", &[&[3, 2], &[3, 4]], |g, v| g.concat_cols(&[v[0], v[1], v[0]])),
        prim("slice_cols", &[&[3, 6]], |g, v| g.slice_cols(v[0], 1, 4)),
        prim("concat_rows", &[&[2, 3], &[4, 3]], |g, v| g.concat_rows(&[v[0], v[1]])),
        prim("slice_rows", &[&[5, 3]], |g, v| g.slice_rows(v[0], 1, 4)),
        prim("gather_rows", &[&[4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3, 2])),
        prim("reshape", &[&[3, 4]], |g, v| {
            let r = g.reshape(v[0], &[2, 6])?;
            g.silu(r)
        }),
        prim("permute", &[&[2, 3, 4]], |g, v| {
            let p = g.permute(v[0], &[2, 0, 1])?;
            g.softplus(p)
        }),
    ]
}

fn tiny_tokenizer(rng: &RngStream) -> ModelBundle {
    let arch = TokenizerArch { k: 2, d: 2, width: 6, temb_dim: 4, t_max: 16 };
    let mut b = ModelBundle::new(arch, rng).expect("valid tiny arch");
    b.data_stats = DataStats { mean: 0.2, std: 0.3 };
    b
}

/// Point layout: `[x, eps, target, enc.., dec.., rec.., disc..]`. The
/// recognition target is its own coordinate because the training losses
/// hold it constant.
fn tokenizer_point(r: &RngStream) -> Vec<Tensor> {
    let b = tiny_tokenizer(&r.child(0));
    let mut pt = vec![
        r.child(1).uniform(&[2, NUM_PIXELS], 0.0, 1.0),
        r.child(2).normal(&[2, NUM_PIXELS]),
        r.child(3).normal(&[2, 4]),
    ];
    for m in [&b.encoder, &b.decoder, &b.recognition, &b.discriminator] {
        pt.extend(m.params.tensors().iter().cloned());
    }
    pt
}

fn tok_loss(
    name: &'static str,
    f: impl Fn(&mut Graph, &Bound, Var, Var, Var) -> Result<Var> + Send + Sync + 'static,
) -> GradCase {
    let template = Arc::new(tiny_tokenizer(&RngStream::new(0)));
    GradCase {
        name,
        family: Family::Loss,
        point: Arc::new(tokenizer_point),
        build: Arc::new(move |g: &mut Graph, v: &[Var]| {
            let t = &*template;
            let (ne, nd, nr) = (t.encoder.params.len(), t.decoder.params.len(), t.recognition.params.len());
            let mut o = 3;
            let mut take = |n: usize| {
                let s = v[o..o + n].to_vec();
                o += n;
                s
            };
            let b = Bound { bundle: t, enc: take(ne), dec: take(nd), rec: take(nr), disc: take(t.discriminator.params.len()) };
            f(g, &b, v[0], v[1], v[2])
        }),
        sample: Some(3),
    }
}

const TS: [usize; 2] = [3, 11];

pub fn loss_cases() -> Vec<GradCase> {
    let mut cases = vec![
        tok_loss("l_tok", |g, b, x, eps, _| {
            let z = b.encode(g, x)?;
            loss_tok(g, b, x, z, &TS, eps)
        }),
        tok_loss("l_mi", |g, b, x, eps, target| {
            let z = b.encode(g, x)?;
            Ok(loss_mi_to(g, b, z, target, x, &TS, eps)?.0)
        }),
        tok_loss("l_mi_swap", |g, b, x, eps, target| {
            let z = b.encode(g, x)?;
            let zb = g.gather_rows(z, &[1, 0])?;
            let mask = expand_mask(&[vec![true, false], vec![false, true]], 2);
            let zs = swap_tokens_var(g, z, zb, &mask, true)?;
            Ok(loss_mi_to(g, b, zs, target, x, &TS, eps)?.0)
        }),
        tok_loss("l_afm_generator", |g, b, x, eps, _| {
            let z = b.encode(g, x)?;
            let x_hat = b.one_step_decode(g, x, z, &TS, eps)?;
            let ef = g.scale(eps, -0.5)?;
            let (dr, df) = afm_scores(g, b, x, x_hat, &TS, eps, ef)?;
            loss_afm_generator(g, dr, df, x, x_hat, 1.0, true)
        }),
        tok_loss("l_afm_discriminator", |g, b, x, eps, _| {
            let z = b.encode(g, x)?;
            let x_hat = b.one_step_decode(g, x, z, &TS, eps)?;
            let ef = g.scale(eps, -0.5)?;
            let (dr, df) = afm_scores(g, b, x, x_hat, &TS, eps, ef)?;
            loss_afm_discriminator(g, dr, df)
        }),
        tok_loss("tokenizer_total", |g, b, x, eps, target| {
            let z = b.encode(g, x)?;
            let lt = loss_tok(g, b, x, z, &TS, eps)?;
            let (lm, x_hat) = loss_mi_to(g, b, z, target, x, &TS, eps)?;
            let zb = g.gather_rows(z, &[1, 0])?;
            let mask = expand_mask(&[vec![false, true], vec![true, true]], 2);
            let zs = swap_tokens_var(g, z, zb, &mask, true)?;
            let (ls, xs) = loss_mi_to(g, b, zs, target, x, &TS, eps)?;
            let (dr, df) = afm_scores(g, b, x, x_hat, &TS, eps, eps)?;
            let lg = loss_afm_generator(g, dr, df, x, x_hat, 1.0, true)?;
            let (dr2, ds) = afm_scores(g, b, x, xs, &TS, eps, eps)?;
            let lg2 = loss_afm_generator(g, dr2, ds, x, xs, 1.0, false)?;
            let mut total = g.add(lt, lm)?;
            for l in [ls, lg, lg2] {
                total = g.add(total, l)?;
            }
            Ok(total)
        }),
        tok_loss("realism_of_decode", |g, b, x, _, _| {
            let z = b.encode(g, x)?;
            let d = b.decode(g, z, 2)?;
            let l = realism_loss_var(g, b, d)?;
            g.sum(l)
        }),
        tok_loss("lso_objective", |g, b, x, _, _| {
            let z = b.encode(g, x)?;
            let d = b.decode(g, z, 2)?;
            let half = batch_sq_norm(g, d, x)?;
            g.scale(half, 0.5)
        }),
    ];
    let gen_template = Arc::new(tiny_generator(&RngStream::new(0)));
    cases.push(GradCase {
        name: "l_generator",
        family: Family::Loss,
        point: Arc::new(|r: &RngStream| {
            let gb = tiny_generator(&r.child(0));
            let mut pt = vec![r.child(1).normal(&[2, 8])];
            pt.extend(gb.all_params().tensors().iter().cloned());
            pt
        }),
        build: Arc::new(move |g: &mut Graph, v: &[Var]| {
            let b = BoundGen { gen: &gen_template, vars: v[1..].to_vec() };
            let mask = [vec![true, false, true, true], vec![false, true, false, false]];
            let ts = [1, 5, 9, 16, 2, 7, 12, 3];
            let eps = RngStream::new(5).normal(&[8, 2]);
            loss_generator(g, &b, v[0], &mask, &ts, &eps, &[1, 3])
        }),
        sample: Some(3),
    });
    cases.push(GradCase {
        name: "l_classifier",
        family: Family::Loss,
        point: Arc::new(|r: &RngStream| {
            let m = crate::nn::Mlp::new("clf", &[6, 5, 3], 1.0, &r.child(0));
            let mut pt = vec![r.child(1).normal(&[4, 6])];
            pt.extend(m.params.tensors().iter().cloned());
            pt
        }),
        build: Arc::new(|g: &mut Graph, v: &[Var]| {
            let m = crate::nn::Mlp::new("clf", &[6, 5, 3], 1.0, &RngStream::new(0));
            let logits = m.forward(g, &v[1..], v[0])?;
            g.cross_entropy(logits, &[0, 2, 1, 2])
        }),
        sample: None,
    });
    cases
}

fn tiny_generator(rng: &RngStream) -> GeneratorBundle {
    let arch = GeneratorArch { k: 4, d: 2, width: 8, heads: 2, blocks: 1, mlp_hidden: 8, head_hidden: 6, temb_dim: 4, t_max: 16, num_classes: 4 };
    GeneratorBundle::new(arch, rng).expect("valid tiny arch")
}

pub fn all_cases() -> Vec<GradCase> {
    let mut c = primitive_cases();
    c.extend(loss_cases());
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_a_few_points() {
        for case in all_cases() {
            let err = case.run(3, 1).unwrap();
            assert!(err <= FD_TOLERANCE, "{}: {err}", case.name);
        }
    }

    #[test]
    fn broken_gradient_is_caught() {
        // a detached copy of the input hides half the derivative of x^2
        let pt = vec![Tensor::vector(vec![0.7, -1.3])];
        let bad = finite_difference_check_at(
            |g, v| {
                let c = g.value(v[0]).clone();
                let k = g.input(c);
                let m = g.mul(v[0], k)?;
                g.sum(m)
            },
            &pt,
            FD_STEP,
            &[(0, 0)],
        )
        .unwrap();
        assert!(bad > 0.1);
    }
}
