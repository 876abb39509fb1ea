//! Flat `section.key = value` experiment configuration.

use std::path::Path;

use crate::diagnostics::{LsoConfig, DEFAULT_DELTA, DEFAULT_ETA, DEFAULT_GRID, DEFAULT_LSO_STEPS, MSE_FLOOR};
use crate::error::{Error, Result};
use crate::generator::{GeneratorArch, GeneratorConfig};
use crate::io::{fmt_f64, sha256_hex};
use crate::tokenizer::{TokenizerArch, TokenizerConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub count: usize,
    pub train: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsSection {
    pub eta: f64,
    pub lso_steps: usize,
    pub mse_floor: f64,
    pub restarts: usize,
    pub avgig_images: usize,
    pub decode_steps: usize,
    pub grid: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub epsilon_cross: f64,
    pub mc_anchors: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationSection {
    pub feature_seed: u64,
    pub classifier_steps: usize,
    pub fid_images: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seeds {
    pub data: u64,
    pub tokenizer: u64,
    pub generator: u64,
    pub diagnostics: u64,
    pub evaluation: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub tokenizer: TokenizerConfig,
    pub diagnostics: DiagnosticsSection,
    pub generator: GeneratorConfig,
    pub evaluation: EvaluationSection,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSection { count: 4096, train: 3584 },
            tokenizer: TokenizerConfig::default(),
            diagnostics: DiagnosticsSection {
                eta: DEFAULT_ETA,
                lso_steps: DEFAULT_LSO_STEPS,
                mse_floor: MSE_FLOOR,
                restarts: 1,
                avgig_images: 512,
                decode_steps: 4,
                grid: DEFAULT_GRID,
                delta: DEFAULT_DELTA,
                epsilon: 0.15,
                epsilon_cross: 1.0,
                mc_anchors: 128,
            },
            generator: GeneratorConfig::default(),
            evaluation: EvaluationSection { feature_seed: 0, classifier_steps: 2000, fid_images: 512, samples: 512 },
            seeds: Seeds { data: 0, tokenizer: 0, generator: 0, diagnostics: 0, evaluation: 0 },
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn float(key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse(key, v)?;
    if !x.is_finite() {
        return Err(Error::Config(format!("{key}: value must be finite")));
    }
    Ok(x)
}

macro_rules! fields {
    ($cfg:ident, $visit:ident) => {
        $visit!("data.count", $cfg.data.count, usize);
        $visit!("data.train", $cfg.data.train, usize);
        $visit!("tokenizer.k", $cfg.tokenizer.arch.k, usize);
        $visit!("tokenizer.d", $cfg.tokenizer.arch.d, usize);
        $visit!("tokenizer.width", $cfg.tokenizer.arch.width, usize);
        $visit!("tokenizer.temb_dim", $cfg.tokenizer.arch.temb_dim, usize);
        $visit!("tokenizer.t_max", $cfg.tokenizer.arch.t_max, usize);
        $visit!("tokenizer.steps", $cfg.tokenizer.steps, usize);
        $visit!("tokenizer.batch", $cfg.tokenizer.batch, usize);
        $visit!("tokenizer.lr", $cfg.tokenizer.lr, f64);
        $visit!("tokenizer.lr_disc", $cfg.tokenizer.lr_disc, f64);
        $visit!("losses.use_mi", $cfg.tokenizer.use_mi, bool);
        $visit!("losses.use_swap", $cfg.tokenizer.use_swap, bool);
        $visit!("losses.use_afm", $cfg.tokenizer.use_afm, bool);
        $visit!("losses.lambda_ot", $cfg.tokenizer.lambda_ot, f64);
        $visit!("losses.renormalize_swap", $cfg.tokenizer.renormalize_swap, bool);
        $visit!("losses.swap_density", $cfg.tokenizer.swap_density, f64);
        $visit!("diagnostics.eta", $cfg.diagnostics.eta, f64);
        $visit!("diagnostics.lso_steps", $cfg.diagnostics.lso_steps, usize);
        $visit!("diagnostics.mse_floor", $cfg.diagnostics.mse_floor, f64);
        $visit!("diagnostics.restarts", $cfg.diagnostics.restarts, usize);
        $visit!("diagnostics.avgig_images", $cfg.diagnostics.avgig_images, usize);
        $visit!("diagnostics.decode_steps", $cfg.diagnostics.decode_steps, usize);
        $visit!("diagnostics.grid", $cfg.diagnostics.grid, usize);
        $visit!("diagnostics.delta", $cfg.diagnostics.delta, f64);
        $visit!("diagnostics.epsilon", $cfg.diagnostics.epsilon, f64);
        $visit!("diagnostics.epsilon_cross", $cfg.diagnostics.epsilon_cross, f64);
        $visit!("diagnostics.mc_anchors", $cfg.diagnostics.mc_anchors, usize);
        $visit!("generator.width", $cfg.generator.arch.width, usize);
        $visit!("generator.heads", $cfg.generator.arch.heads, usize);
        $visit!("generator.blocks", $cfg.generator.arch.blocks, usize);
        $visit!("generator.mlp_hidden", $cfg.generator.arch.mlp_hidden, usize);
        $visit!("generator.head_hidden", $cfg.generator.arch.head_hidden, usize);
        $visit!("generator.temb_dim", $cfg.generator.arch.temb_dim, usize);
        $visit!("generator.steps", $cfg.generator.steps, usize);
        $visit!("generator.batch", $cfg.generator.batch, usize);
        $visit!("generator.lr", $cfg.generator.lr, f64);
        $visit!("generator.cfg_dropout", $cfg.generator.cfg_dropout, f64);
        $visit!("generator.sample_steps", $cfg.generator.sample_steps, usize);
        $visit!("generator.head_ddim_steps", $cfg.generator.head_ddim_steps, usize);
        $visit!("generator.cfg_scale", $cfg.generator.cfg_scale, f64);
        $visit!("evaluation.feature_seed", $cfg.evaluation.feature_seed, u64);
        $visit!("evaluation.classifier_steps", $cfg.evaluation.classifier_steps, usize);
        $visit!("evaluation.fid_images", $cfg.evaluation.fid_images, usize);
        $visit!("evaluation.samples", $cfg.evaluation.samples, usize);
        $visit!("seeds.data", $cfg.seeds.data, u64);
        $visit!("seeds.tokenizer", $cfg.seeds.tokenizer, u64);
        $visit!("seeds.generator", $cfg.seeds.generator, u64);
        $visit!("seeds.diagnostics", $cfg.seeds.diagnostics, u64);
        $visit!("seeds.evaluation", $cfg.seeds.evaluation, u64);
    };
}

trait FieldText: Sized {
    fn to_text(&self) -> String;
    fn from_text(key: &str, v: &str) -> Result<Self>;
}

impl FieldText for usize {
    fn to_text(&self) -> String {
        self.to_string()
    }
    fn from_text(key: &str, v: &str) -> Result<Self> {
        parse(key, v)
    }
}

impl FieldText for u64 {
    fn to_text(&self) -> String {
        self.to_string()
    }
    fn from_text(key: &str, v: &str) -> Result<Self> {
        parse(key, v)
    }
}

impl FieldText for bool {
    fn to_text(&self) -> String {
        self.to_string()
    }
    fn from_text(key: &str, v: &str) -> Result<Self> {
        parse(key, v)
    }
}

impl FieldText for f64 {
    fn to_text(&self) -> String {
        fmt_f64(*self)
    }
    fn from_text(key: &str, v: &str) -> Result<Self> {
        float(key, v)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("{key}: set twice")));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let cfg = self;
        macro_rules! visit {
            ($name:expr, $field:expr, $ty:ty) => {
                if key == $name {
                    $field = <$ty as FieldText>::from_text(key, value)?;
                    return Ok(());
                }
            };
        }
        fields!(cfg, visit);
        Err(Error::Config(format!("unknown key {key}")))
    }

    /// All keys with their values, sorted by key.
    pub fn entries(&self) -> Vec<(String, String)> {
        let cfg = self;
        let mut out = Vec::new();
        macro_rules! visit {
            ($name:expr, $field:expr, $ty:ty) => {
                out.push(($name.to_string(), FieldText::to_text(&$field)));
            };
        }
        fields!(cfg, visit);
        out.sort();
        out
    }

    pub fn canonical_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_text().as_bytes())
    }

    /// Hash of the keys under `prefixes` only; cache keys for artifacts that
    /// do not depend on the rest of the config.
    pub fn hash_of(&self, prefixes: &[&str]) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        sha256_hex(text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.data.train == 0 || self.data.train >= self.data.count {
            return bad("data.train must be in 1..data.count");
        }
        if self.tokenizer.steps == 0 || self.tokenizer.batch < 2 {
            return bad("tokenizer.steps must be positive and tokenizer.batch at least 2");
        }
        if !(self.tokenizer.lr > 0.0 && self.tokenizer.lr_disc > 0.0 && self.generator.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.tokenizer.swap_density) || !(0.0..=1.0).contains(&self.generator.cfg_dropout) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.diagnostics.grid < 2 || self.diagnostics.restarts == 0 || self.diagnostics.decode_steps == 0 {
            return bad("diagnostics.grid >= 2, restarts >= 1 and decode_steps >= 1 required");
        }
        if !(self.diagnostics.delta > 0.0 && self.diagnostics.eta > 0.0) {
            return bad("diagnostics.delta and diagnostics.eta must be positive");
        }
        if self.generator.sample_steps == 0 || self.generator.sample_steps > self.tokenizer.arch.k {
            return bad("generator.sample_steps must be in 1..=tokenizer.k");
        }
        Ok(())
    }

    pub fn tokenizer_arch(&self) -> TokenizerArch {
        self.tokenizer.arch
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let mut g = self.generator.clone();
        g.arch = GeneratorArch {
            k: self.tokenizer.arch.k,
            d: self.tokenizer.arch.d,
            t_max: self.tokenizer.arch.t_max,
            num_classes: crate::synthworld::NUM_CLASSES,
            ..g.arch
        };
        g
    }

    pub fn lso(&self) -> LsoConfig {
        LsoConfig { eta: self.diagnostics.eta, steps: self.diagnostics.lso_steps, floor: self.diagnostics.mse_floor }
    }

    pub fn seed_table(&self) -> std::collections::BTreeMap<String, u64> {
        self.entries()
            .into_iter()
            .filter_map(|(k, v)| Some((k.strip_prefix("seeds.")?.to_string(), v.parse().ok()?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&c.canonical_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(matches!(ExperimentConfig::parse("tokenizer.stepz = 3"), Err(Error::Config(_))));
        assert!(ExperimentConfig::parse("tokenizer.steps = 3\ntokenizer.steps = 4").is_err());
        assert!(ExperimentConfig::parse("tokenizer.steps 3").is_err());
        assert!(ExperimentConfig::parse("tokenizer.lr = nan").is_err());
    }

    #[test]
    fn hash_tracks_values_not_layout() {
        let a = ExperimentConfig::parse("# comment\n\nseeds.tokenizer = 3\ntokenizer.steps=10\n").unwrap();
        let b = ExperimentConfig::parse("tokenizer.steps = 10   # trailing\nseeds.tokenizer = 3").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::parse("tokenizer.steps = 11\nseeds.tokenizer = 3").unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.seed_table()["tokenizer"], 3);
    }
}
