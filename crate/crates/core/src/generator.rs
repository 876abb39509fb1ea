//! Masked bidirectional generator over token sequences with a per-token
//! diffusion head, trained on a frozen tokenizer's tokens.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::diffusion::{ddim_from, noise_rows, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, Csv};
use crate::nn::{time_embedding, Mlp, ParamSet, Trainable};
use crate::optim::Adam;
use crate::rng::RngStream;
use crate::synthworld::Dataset;
use crate::tensor::Tensor;
use crate::tokenizer::{encode, ModelBundle, TOKEN_NORM_EPS};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorArch {
    pub k: usize,
    pub d: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
    pub temb_dim: usize,
    pub t_max: usize,
    pub num_classes: usize,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        GeneratorArch {
            k: 8,
            d: 4,
            width: 64,
            heads: 4,
            blocks: 2,
            mlp_hidden: 256,
            head_hidden: 128,
            temb_dim: 32,
            t_max: 64,
            num_classes: 8,
        }
    }
}

impl GeneratorArch {
    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    fn record(&self) -> Tensor {
        Tensor::vector(
            [self.k, self.d, self.width, self.heads, self.blocks, self.mlp_hidden, self.head_hidden, self.temb_dim, self.num_classes]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        )
    }
}

/// Backbone parameters (input projection, mask/position/class embeddings,
/// attention blocks) and the token head.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorBundle {
    pub arch: GeneratorArch,
    pub schedule: DiffusionSchedule,
    pub backbone: ParamSet,
    pub head: Mlp,
}

fn normal_scaled(rng: &RngStream, shape: &[usize], scale: f64) -> Tensor {
    rng.normal(shape).map(|v| v * scale)
}

impl GeneratorBundle {
    pub fn new(arch: GeneratorArch, rng: &RngStream) -> Result<Self> {
        if !arch.width.is_multiple_of(arch.heads) || arch.k == 0 || arch.d == 0 {
            return Err(Error::Invalid(format!("bad generator architecture {arch:?}")));
        }
        let w = arch.width;
        let mut p = ParamSet::new();
        p.push("in.w", normal_scaled(&rng.child(0), &[arch.d, w], (1.0 / arch.d as f64).sqrt()));
        p.push("in.b", Tensor::zeros(&[w]));
        p.push("mask_emb", normal_scaled(&rng.child(1), &[1, w], 1.0));
        p.push("pos_emb", normal_scaled(&rng.child(2), &[arch.k + 1, w], 0.1));
        p.push("class_emb", normal_scaled(&rng.child(3), &[arch.num_classes + 1, w], 1.0));
        let s = (1.0 / w as f64).sqrt();
        for blk in 0..arch.blocks {
            let r = rng.at(&[4, blk as u64]);
            for (i, name) in ["q", "k", "v", "o"].iter().enumerate() {
                p.push(format!("b{blk}.{name}.w"), normal_scaled(&r.child(i as u64), &[w, w], s));
                p.push(format!("b{blk}.{name}.b"), Tensor::zeros(&[w]));
            }
            p.push(format!("b{blk}.m0.w"), normal_scaled(&r.child(4), &[w, arch.mlp_hidden], (2.0 / w as f64).sqrt()));
            p.push(format!("b{blk}.m0.b"), Tensor::zeros(&[arch.mlp_hidden]));
            p.push(
                format!("b{blk}.m1.w"),
                normal_scaled(&r.child(5), &[arch.mlp_hidden, w], (1.0 / arch.mlp_hidden as f64).sqrt()),
            );
            p.push(format!("b{blk}.m1.b"), Tensor::zeros(&[w]));
        }
        let head = Mlp::new("head", &[arch.d + w + arch.temb_dim, arch.head_hidden, arch.head_hidden, arch.d], 1.0, &rng.child(5));
        Ok(GeneratorBundle { arch, schedule: DiffusionSchedule::cosine(arch.t_max)?, backbone: p, head })
    }

    pub fn arrays(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("gen_arch".to_string(), self.arch.record())];
        out.extend(self.backbone.iter().map(|(n, t)| (n.to_string(), t.clone())));
        out.extend(self.head.params.iter().map(|(n, t)| (n.to_string(), t.clone())));
        out
    }

    pub fn from_arrays(schedule: DiffusionSchedule, arrays: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let rec = find("gen_arch").ok_or_else(|| Error::Format("checkpoint lacks generator arch".into()))?;
        if rec.len() != 9 {
            return Err(Error::Format("generator arch record must hold 9 values".into()));
        }
        let v: Vec<usize> = rec.data().iter().map(|&x| x as usize).collect();
        let arch = GeneratorArch {
            k: v[0],
            d: v[1],
            width: v[2],
            heads: v[3],
            blocks: v[4],
            mlp_hidden: v[5],
            head_hidden: v[6],
            temb_dim: v[7],
            num_classes: v[8],
            t_max: schedule.t_max(),
        };
        let mut g = GeneratorBundle::new(arch, &RngStream::new(0))?;
        g.schedule = schedule;
        g.backbone.load_from(find)?;
        g.head.params.load_from(find)?;
        Ok(g)
    }

    pub fn all_params(&self) -> ParamSet {
        let mut p = self.backbone.clone();
        for (n, t) in self.head.params.iter() {
            p.push(n, t.clone());
        }
        p
    }

    fn set_all_params(&mut self, p: &ParamSet) {
        let nb = self.backbone.len();
        self.backbone.tensors_mut().clone_from_slice(&p.tensors()[..nb]);
        self.head.params.tensors_mut().clone_from_slice(&p.tensors()[nb..]);
    }
}

/// Parameters bound into a graph.
pub struct BoundGen<'a> {
    pub gen: &'a GeneratorBundle,
    pub vars: Vec<Var>,
}

impl<'a> BoundGen<'a> {
    pub fn new(g: &mut Graph, gen: &'a GeneratorBundle, trainable: bool) -> Self {
        let p = gen.all_params();
        let vars = if trainable { p.bind(g) } else { p.bind_frozen(g) };
        BoundGen { gen, vars }
    }

    fn var(&self, name: &str) -> Var {
        let i = self.gen.backbone.names().iter().position(|n| n == name).expect("known parameter");
        self.vars[i]
    }

    fn head_vars(&self) -> &[Var] {
        &self.vars[self.gen.backbone.len()..]
    }

    /// Context features `[B*K, width]`; masked positions see the mask
    /// embedding instead of their token.
    pub fn features(&self, g: &mut Graph, z: Var, mask: &[Vec<bool>], classes: &[usize]) -> Result<Var> {
        let a = &self.gen.arch;
        let (bsz, k, w) = (classes.len(), a.k, a.width);
        let s = k + 1;
        let flat = g.reshape(z, &[bsz * k, a.d])?;
        let proj = g.affine(flat, self.var("in.w"), self.var("in.b"))?;
        let m: Vec<f64> = mask.iter().flat_map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 })).collect();
        let keep = g.input(Tensor::vector(m.iter().map(|v| 1.0 - v).collect()));
        let mv = g.input(Tensor::vector(m));
        let visible = g.mul_rows(proj, keep)?;
        let memb = g.gather_rows(self.var("mask_emb"), &vec![0; bsz * k])?;
        let masked = g.mul_rows(memb, mv)?;
        let tokens = g.add(visible, masked)?;
        let cls = g.gather_rows(self.var("class_emb"), classes)?;
        let all = g.concat_rows(&[cls, tokens])?;
        let order: Vec<usize> = (0..bsz).flat_map(|b| std::iter::once(b).chain((0..k).map(move |j| bsz + b * k + j))).collect();
        let seq = g.gather_rows(all, &order)?;
        let pos_idx: Vec<usize> = (0..bsz).flat_map(|_| 0..s).collect();
        let pos = g.gather_rows(self.var("pos_emb"), &pos_idx)?;
        let mut x = g.add(seq, pos)?;
        let (h, dh) = (a.heads, w / a.heads);
        for blk in 0..a.blocks {
            let v = |n: &str| self.var(&format!("b{blk}.{n}"));
            let ln = g.layer_norm(x, LN_EPS)?;
            let split = |g: &mut Graph, t: Var| -> Result<Var> {
                let r = g.reshape(t, &[bsz, s, h, dh])?;
                let p = g.permute(r, &[0, 2, 1, 3])?;
                g.reshape(p, &[bsz * h, s, dh])
            };
            let q = g.affine(ln, v("q.w"), v("q.b"))?;
            let kk = g.affine(ln, v("k.w"), v("k.b"))?;
            let vv = g.affine(ln, v("v.w"), v("v.b"))?;
            let (q, kk, vv) = (split(g, q)?, split(g, kk)?, split(g, vv)?);
            let scores = g.bmm(q, kk, true)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let att = g.softmax(scores)?;
            let o = g.bmm(att, vv, false)?;
            let o = g.reshape(o, &[bsz, h, s, dh])?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            let o = g.reshape(o, &[bsz * s, w])?;
            let o = g.affine(o, v("o.w"), v("o.b"))?;
            x = g.add(x, o)?;
            let ln2 = g.layer_norm(x, LN_EPS)?;
            let m0 = g.affine(ln2, v("m0.w"), v("m0.b"))?;
            let m0 = g.silu(m0)?;
            let m1 = g.affine(m0, v("m1.w"), v("m1.b"))?;
            x = g.add(x, m1)?;
        }
        let token_rows: Vec<usize> = (0..bsz).flat_map(|b| (1..s).map(move |j| b * s + j)).collect();
        g.gather_rows(x, &token_rows)
    }

    /// Head noise prediction for `[rows, d]` noisy tokens with features
    /// `[rows, width]`, using unit-variance preconditioning:
    /// `eps = sigma_t z_t - alpha_t o`.
    pub fn head_eps(&self, g: &mut Graph, zt: Var, h: Var, ts: &[usize]) -> Result<Var> {
        let sched = &self.gen.schedule;
        let temb = g.input(time_embedding(ts, sched.t_max(), self.gen.arch.temb_dim));
        let inp = g.concat_cols(&[zt, h, temb])?;
        let o = self.gen.head.forward(g, self.head_vars(), inp)?;
        let sig = g.input(Tensor::vector(ts.iter().map(|&t| sched.sigma(t)).collect()));
        let alp = g.input(Tensor::vector(ts.iter().map(|&t| -sched.alpha(t)).collect()));
        let a = g.mul_rows(zt, sig)?;
        let b = g.mul_rows(o, alp)?;
        g.add(a, b)
    }
}

/// Cosine masking schedule: `max(1, ceil(K cos(pi u / 2)))` positions for
/// `u` uniform in `(0, 1]`, chosen without replacement.
pub fn sample_mask(k: usize, rng: &RngStream) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::Invalid("mask needs K >= 1".into()));
    }
    let mut r = rng.rng();
    let u: f64 = 1.0 - r.gen::<f64>();
    let count = mask_count(k, u);
    let mut pos: Vec<usize> = (0..k).collect();
    pos.shuffle(&mut r);
    let mut m = vec![false; k];
    for &p in &pos[..count] {
        m[p] = true;
    }
    Ok(m)
}

pub fn mask_count(k: usize, u: f64) -> usize {
    ((k as f64 * (std::f64::consts::FRAC_PI_2 * u).cos()).ceil() as usize).clamp(1, k)
}

/// Tokens committed after each of `steps` refinement steps (cumulative).
pub fn unmask_schedule(k: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > k {
        return Err(Error::Invalid(format!("steps must be in 1..={k}, got {steps}")));
    }
    let mut out = Vec::with_capacity(steps);
    let mut prev = 0;
    for s in 1..=steps {
        let target = (k as f64 * (1.0 - (std::f64::consts::FRAC_PI_2 * s as f64 / steps as f64).cos())).ceil() as usize;
        let n = target.clamp(prev + 1, k - (steps - s));
        out.push(n);
        prev = n;
    }
    Ok(out)
}

/// Masked-token denoising loss: `sum_{k masked} ||eps - M(z_t, h_k, t)||^2`, batch mean.
#[allow(clippy::too_many_arguments)]
pub fn loss_generator(
    g: &mut Graph,
    b: &BoundGen,
    z: Var,
    mask: &[Vec<bool>],
    ts: &[usize],
    eps: &Tensor,
    classes: &[usize],
) -> Result<Var> {
    let a = &b.gen.arch;
    let bsz = classes.len();
    let h = b.features(g, z, mask, classes)?;
    let z0 = g.reshape(z, &[bsz * a.k, a.d])?;
    let e = g.input(eps.clone());
    let zt = noise_rows(g, z0, ts, e, &b.gen.schedule)?;
    let pred = b.head_eps(g, zt, h, ts)?;
    let diff = g.sub(pred, e)?;
    let sq = g.row_sum_sq(diff)?;
    let m = g.input(Tensor::vector(mask.iter().flat_map(|r| r.iter().map(|&v| if v { 1.0 } else { 0.0 })).collect()));
    let masked = g.mul(sq, m)?;
    let total = g.sum(masked)?;
    g.scale(total, 1.0 / bsz as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub arch: GeneratorArch,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cfg_dropout: f64,
    pub sample_steps: usize,
    pub head_ddim_steps: usize,
    pub cfg_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            arch: GeneratorArch::default(),
            steps: 10_000,
            batch: 64,
            lr: 3e-4,
            cfg_dropout: 0.1,
            sample_steps: 8,
            head_ddim_steps: 8,
            cfg_scale: 2.0,
        }
    }
}

pub struct GeneratorOutcome {
    pub gen: GeneratorBundle,
    pub log: Vec<f64>,
    pub diverged: Option<Error>,
}

pub fn generator_log_csv(log: &[f64]) -> Csv {
    let mut c = Csv::new(&["step", "loss"]);
    for (i, l) in log.iter().enumerate() {
        c.row(&[i.to_string(), fmt_f64(*l)]);
    }
    c
}

pub fn train_generator(cfg: &GeneratorConfig, tokenizer: &ModelBundle, train: &Dataset, rng: &RngStream) -> Result<GeneratorOutcome> {
    let a = cfg.arch;
    if a.k != tokenizer.arch.k || a.d != tokenizer.arch.d {
        return Err(Error::Invalid("generator token shape differs from the tokenizer".into()));
    }
    let tokens = encode(tokenizer, &train.images)?;
    let labels = train.labels();
    let mut gen = GeneratorBundle::new(a, &rng.child(0))?;
    let mut model = Trainable { params: gen.all_params(), opt: Adam::new(cfg.lr) };
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let s = rng.child(1).child(step as u64);
        let mut r = s.child(0).rng();
        let idx: Vec<usize> = (0..cfg.batch).map(|_| r.gen_range(0..train.len())).collect();
        let classes: Vec<usize> =
            idx.iter().map(|&i| if r.gen_bool(cfg.cfg_dropout) { a.null_class() } else { labels[i] }).collect();
        let mask: Vec<Vec<bool>> = (0..cfg.batch).map(|b| sample_mask(a.k, &s.at(&[1, b as u64]))).collect::<Result<_>>()?;
        let mut r = s.child(2).rng();
        let ts: Vec<usize> = (0..cfg.batch * a.k).map(|_| r.gen_range(1..=a.t_max)).collect();
        let eps = s.child(3).normal(&[cfg.batch * a.k, a.d]);
        let z = Tensor::from_raw(vec![cfg.batch, a.k * a.d], idx.iter().flat_map(|&i| tokens.row(i).to_vec()).collect());
        let mut g = Graph::new();
        let b = BoundGen::new(&mut g, &gen, true);
        let zv = g.input(z);
        let loss = match loss_generator(&mut g, &b, zv, &mask, &ts, &eps, &classes) {
            Ok(l) => l,
            Err(e) if e.is_numeric() => {
                return Ok(GeneratorOutcome { gen, log, diverged: Some(Error::Diverged { step, reason: e.to_string() }) })
            }
            Err(e) => return Err(e),
        };
        let value = g.value(loss).item();
        let grads = match g.backward_wrt(loss, &b.vars) {
            Ok(gr) => gr.collect(&b.vars),
            Err(e) => return Ok(GeneratorOutcome { gen, log, diverged: Some(Error::Diverged { step, reason: e.to_string() }) }),
        };
        let mut next = model.clone();
        if let Err(e) = next.step(&grads) {
            return Ok(GeneratorOutcome { gen, log, diverged: Some(Error::Diverged { step, reason: e.to_string() }) });
        }
        model = next;
        gen.set_all_params(&model.params);
        log.push(value);
    }
    Ok(GeneratorOutcome { gen, log, diverged: None })
}

/// Iterative unmasking: each step computes context features for the
/// current partial sequence, samples every still-masked token by DDIM
/// through the head, and commits the next positions of a seeded random
/// order. The result is renormalized per sample.
pub fn generate(
    gen: &GeneratorBundle,
    classes: &[usize],
    steps: usize,
    head_ddim_steps: usize,
    cfg_scale: f64,
    rng: &RngStream,
) -> Result<Tensor> {
    let a = &gen.arch;
    let (n, k, d) = (classes.len(), a.k, a.d);
    if n == 0 {
        return Err(Error::Invalid("nothing to generate".into()));
    }
    if classes.iter().any(|&c| c > a.num_classes) {
        return Err(Error::Invalid("class id out of range".into()));
    }
    let schedule = unmask_schedule(k, steps)?;
    let orders: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut o: Vec<usize> = (0..k).collect();
            o.shuffle(&mut rng.at(&[0, i as u64]).rng());
            o
        })
        .collect();
    let mut z = vec![0.0; n * k * d];
    let mut known = vec![vec![false; k]; n];
    let mut prev = 0;
    for (s, &count) in schedule.iter().enumerate() {
        let mask: Vec<Vec<bool>> = known.iter().map(|r| r.iter().map(|&v| !v).collect()).collect();
        let mut g = Graph::new();
        let b = BoundGen::new(&mut g, gen, false);
        let zv = g.input(Tensor::from_raw(vec![n, k * d], z.clone()));
        let h_c = b.features(&mut g, zv, &mask, classes)?;
        let h_null = if cfg_scale != 1.0 {
            Some(b.features(&mut g, zv, &mask, &vec![a.null_class(); n])?)
        } else {
            None
        };
        let rows = n * k;
        let start: Tensor = {
            let mut data = Vec::with_capacity(rows * d);
            for i in 0..n {
                for j in 0..k {
                    data.extend_from_slice(rng.at(&[1, s as u64, i as u64, j as u64]).normal(&[d]).data());
                }
            }
            Tensor::from_raw(vec![rows, d], data)
        };
        let x_start = g.input(start);
        let den = |g: &mut Graph, x: Var, t: usize| -> Result<Var> {
            let ts = vec![t; rows];
            let ec = b.head_eps(g, x, h_c, &ts)?;
            match h_null {
                None => Ok(ec),
                Some(hn) => {
                    let en = b.head_eps(g, x, hn, &ts)?;
                    let diff = g.sub(ec, en)?;
                    let push = g.scale(diff, cfg_scale - 1.0)?;
                    g.add(ec, push)
                }
            }
        };
        let sample = ddim_from(&mut g, &den, x_start, head_ddim_steps, &gen.schedule)?;
        let vals = g.value(sample).data().to_vec();
        for i in 0..n {
            for &j in &orders[i][prev..count] {
                let off = (i * k + j) * d;
                z[off..off + d].copy_from_slice(&vals[off..off + d]);
                known[i][j] = true;
            }
        }
        prev = count;
    }
    let mut g = Graph::new();
    let zv = g.input(Tensor::new(vec![n, k * d], z)?);
    let out = g.layer_norm(zv, TOKEN_NORM_EPS)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorBundle {
        let arch = GeneratorArch { k: 4, d: 2, width: 8, heads: 2, blocks: 1, mlp_hidden: 16, head_hidden: 8, temb_dim: 4, t_max: 16, num_classes: 3 };
        GeneratorBundle::new(arch, &RngStream::new(1)).unwrap()
    }

    #[test]
    fn mask_count_endpoints() {
        assert_eq!(mask_count(8, 1e-12), 8);
        assert_eq!(mask_count(8, 1.0), 1);
        for seed in 0..50 {
            let m = sample_mask(8, &RngStream::new(seed)).unwrap();
            assert!(m.iter().any(|&v| v));
        }
    }

    #[test]
    fn schedule_commits_all_tokens() {
        for k in 1..=10 {
            for s in 1..=k {
                let sch = unmask_schedule(k, s).unwrap();
                assert_eq!(*sch.last().unwrap(), k);
                assert!(sch.windows(2).all(|w| w[1] > w[0]));
            }
        }
        assert_eq!(unmask_schedule(8, 8).unwrap(), (1..=8).collect::<Vec<_>>());
        assert_eq!(unmask_schedule(8, 1).unwrap(), vec![8]);
    }

    #[test]
    fn empty_mask_gives_zero_loss() {
        let gb = tiny();
        let mut g = Graph::new();
        let b = BoundGen::new(&mut g, &gb, true);
        let z = g.input(RngStream::new(2).normal(&[2, 8]));
        let l = loss_generator(&mut g, &b, z, &[vec![false; 4], vec![false; 4]], &[3; 8], &RngStream::new(3).normal(&[8, 2]), &[0, 1]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn features_permute_with_positions() {
        let mut gb = tiny();
        // identical position embeddings for slots 1 and 2 make those slots interchangeable
        let w = gb.arch.width;
        let pi = gb.backbone.names().iter().position(|n| n == "pos_emb").unwrap();
        let row1 = gb.backbone.tensors()[pi].row(1).to_vec();
        gb.backbone.tensors_mut()[pi].data_mut()[2 * w..3 * w].copy_from_slice(&row1);
        let z = RngStream::new(4).normal(&[1, 8]);
        let mut zs = z.clone();
        zs.data_mut()[0..2].copy_from_slice(&z.data()[2..4]);
        zs.data_mut()[2..4].copy_from_slice(&z.data()[0..2]);
        let feats = |zz: &Tensor| {
            let mut g = Graph::new();
            let b = BoundGen::new(&mut g, &gb, false);
            let zv = g.input(zz.clone());
            let h = b.features(&mut g, zv, &[vec![false; 4]], &[1]).unwrap();
            g.value(h).clone()
        };
        let (h, hs) = (feats(&z), feats(&zs));
        assert!(h.row(0).iter().zip(hs.row(1)).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(h.row(1).iter().zip(hs.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn all_masked_features_ignore_tokens() {
        let gb = tiny();
        let feats = |zz: Tensor| {
            let mut g = Graph::new();
            let b = BoundGen::new(&mut g, &gb, false);
            let zv = g.input(zz);
            let h = b.features(&mut g, zv, &[vec![true; 4]], &[2]).unwrap();
            g.value(h).clone()
        };
        assert_eq!(feats(RngStream::new(5).normal(&[1, 8])), feats(RngStream::new(6).normal(&[1, 8])));
    }

    #[test]
    fn cfg_scale_one_is_conditional_path() {
        let gb = tiny();
        let a = generate(&gb, &[0, 2], 2, 4, 1.0, &RngStream::new(7)).unwrap();
        let b = generate(&gb, &[0, 2], 2, 4, 1.0, &RngStream::new(7)).unwrap();
        assert_eq!(a, b);
        let c = generate(&gb, &[0, 2], 2, 4, 1.0 + 1e-9, &RngStream::new(7)).unwrap();
        assert!(a.max_abs_diff(&c) < 1e-6);
        for i in 0..2 {
            let m = a.row(i).iter().sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn arrays_round_trip() {
        let gb = tiny();
        assert_eq!(GeneratorBundle::from_arrays(gb.schedule.clone(), &gb.arrays()).unwrap(), gb);
    }
}
