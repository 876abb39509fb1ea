//! `tokenlab` command line: data generation, training, evaluation, oracle
//! checks and the correlation report. Every `--out` is a directory that
//! receives `manifest.json` and `summary.json` next to its artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use tokenlab::config::ExperimentConfig;
use tokenlab::diagnostics::{avg_ig, IdentityDecoder, LsoTrajectory};
use tokenlab::evaluation::{build_report, RunMetrics};
use tokenlab::experiments::{self as ex, Arm};
use tokenlab::generator::{generator_log_csv, train_generator};
use tokenlab::io::{fmt_f64, merge_summary, read_summary, sha256_hex, Csv, Manifest};
use tokenlab::synthworld::{noise_images, Dataset};
use tokenlab::tokenizer::{decode, encode, realism_loss, reconstruction_mse, ModelBundle};
use tokenlab::{Error, RngStream};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_GATE: u8 = 3;

// Training gate on held-out reconstructions.
const GATE_RECON_MSE: f64 = 0.01;

#[derive(Parser)]
#[command(name = "tokenlab", version, about = "Latent token diagnostics on a synthetic image world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `section.key = value` config file; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set tokenizer.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Dataset file or a directory holding `dataset.bin`; regenerated from
    /// the config seed when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a tokenizer, optionally with loss terms removed.
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Drop the token-recovery (mutual information) loss.
        #[arg(long)]
        no_mi: bool,
        /// Drop the recovery loss on swapped token sequences.
        #[arg(long)]
        no_swap: bool,
        /// Drop the adversarial feature-matching loss and its discriminator.
        #[arg(long)]
        no_afm: bool,
        /// Exit with code 3 when held-out reconstruction or realism
        /// separation misses its gate.
        #[arg(long)]
        gate: bool,
    },
    /// Train the masked token generator on a frozen tokenizer.
    TrainGenerator {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        tokenizer: PathBuf,
    },
    /// Metric evaluation.
    Eval {
        #[command(subcommand)]
        metric: EvalCmd,
    },
    /// Progressive token-swap strip between two held-out images.
    SwapGrid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long, default_value_t = 0)]
        image_a: usize,
        #[arg(long, default_value_t = 8)]
        image_b: usize,
    },
    /// Analytic oracle checks.
    Oracle {
        #[command(subcommand)]
        cmd: OracleCmd,
    },
    /// Correlation report over evaluated runs.
    Report {
        /// Run directories, each with `summary.json` and `manifest.json`.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Average information gain of latent-space optimization.
    Avgig {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Tokenizer checkpoint, run directory or decoder fixture.
        #[arg(long)]
        tokenizer: PathBuf,
    },
    /// Manifold consistency over nearby held-out pairs.
    Mc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        tokenizer: PathBuf,
    },
    /// Proxy-FID of reconstructions, and of samples when a generator is given.
    ProxyFid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        generator: Option<PathBuf>,
    },
    /// Task accuracy of decoded reconstructions and, optionally, samples.
    Task {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        generator: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Run every check and write `appendix_checks.csv`.
    RunAll {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure with the exit code and the module it came from.
struct Failure {
    code: u8,
    module: &'static str,
    message: String,
}

impl Failure {
    fn from_error(module: &'static str, e: Error) -> Self {
        let code = match &e {
            e if e.is_numeric() => EXIT_NUMERIC,
            Error::Gate(_) => EXIT_GATE,
            _ => EXIT_USAGE,
        };
        Failure { code, module, message: e.to_string() }
    }
}

type Outcome = std::result::Result<(), Failure>;

trait Ctx<T> {
    fn ctx(self, module: &'static str) -> std::result::Result<T, Failure>;
}

impl<T> Ctx<T> for tokenlab::Result<T> {
    fn ctx(self, module: &'static str) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure::from_error(module, e))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("tokenlab: {}: {}", f.module, f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Cmd) -> Outcome {
    match cmd {
        Cmd::GenData { common } => gen_data(&common),
        Cmd::TrainTokenizer { common, data, no_mi, no_swap, no_afm, gate } => {
            train_tok(&common, &data, [no_mi, no_swap, no_afm], gate)
        }
        Cmd::TrainGenerator { common, data, tokenizer } => train_gen(&common, &data, &tokenizer),
        Cmd::Eval { metric } => match metric {
            EvalCmd::Avgig { common, data, tokenizer } => eval_avgig(&common, &data, &tokenizer),
            EvalCmd::Mc { common, data, tokenizer } => eval_mc(&common, &data, &tokenizer),
            EvalCmd::ProxyFid { common, data, tokenizer, generator } => {
                eval_fid(&common, &data, &tokenizer, generator.as_deref())
            }
            EvalCmd::Task { common, data, tokenizer, generator } => {
                eval_task(&common, &data, &tokenizer, generator.as_deref())
            }
        },
        Cmd::SwapGrid { common, data, tokenizer, image_a, image_b } => swap_grid(&common, &data, &tokenizer, image_a, image_b),
        Cmd::Oracle { cmd: OracleCmd::RunAll { out, seed } } => oracle_run_all(&out, seed),
        Cmd::Report { runs, out } => report(&runs, &out),
    }
}

fn load_config(c: &Common) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).ctx("config")?,
        None => ExperimentConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure { code: EXIT_USAGE, module: "config", message: format!("--set {o:?}: expected KEY=VALUE") })?;
        cfg.set(k.trim(), v.trim()).ctx("config")?;
    }
    cfg.validate().ctx("config")?;
    Ok(cfg)
}

fn resolve(p: &Path, default_name: &str) -> PathBuf {
    if p.is_dir() {
        p.join(default_name)
    } else {
        p.to_path_buf()
    }
}

/// Dataset and its content hash.
fn load_data(cfg: &ExperimentConfig, d: &DataArg) -> std::result::Result<(Dataset, String), Failure> {
    let data = match &d.data {
        Some(p) => Dataset::load(&resolve(p, "dataset.bin")).ctx("synthworld")?,
        None => ex::dataset(cfg).ctx("synthworld")?,
    };
    if data.len() != cfg.data.count {
        return Err(Failure {
            code: EXIT_USAGE,
            module: "config",
            message: format!("data.count: config says {}, dataset holds {}", cfg.data.count, data.len()),
        });
    }
    let hash = sha256_hex(&data.to_bytes());
    Ok((data, hash))
}

fn prepare_out(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::from_error("io", e.into()))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    data_hash: Option<&str>,
    inputs: BTreeMap<String, String>,
) -> Outcome {
    Manifest {
        command: command.into(),
        build_id: env!("TOKENLAB_BUILD_ID").into(),
        config_hash: cfg.hash(),
        data_hash: data_hash.map(str::to_string),
        seeds: cfg.seed_table(),
        inputs,
    }
    .save(dir)
    .ctx("io")
}

fn summary(dir: &Path, v: Value) -> Outcome {
    let Value::Object(m) = v else { unreachable!("summary entries are an object") };
    merge_summary(dir, m).ctx("io")
}

fn inputs(pairs: &[(&str, &Path)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, p)| (k.to_string(), p.display().to_string())).collect()
}

fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
}

fn opt(x: Option<f64>) -> Value {
    x.map(num).unwrap_or(Value::Null)
}

fn gen_data(c: &Common) -> Outcome {
    let cfg = load_config(c)?;
    prepare_out(&c.out)?;
    let data = ex::dataset(&cfg).ctx("synthworld")?;
    let bytes = data.to_bytes();
    tokenlab::io::write_atomic(&c.out.join("dataset.bin"), &bytes).ctx("io")?;
    let hash = sha256_hex(&bytes);
    write_manifest(&c.out, "gen-data", &cfg, Some(&hash), BTreeMap::new())?;
    summary(&c.out, json!({ "images": data.len(), "data_hash": hash }))
}

fn arm_of(flags: [bool; 3]) -> std::result::Result<Arm, Failure> {
    match flags {
        [false, false, false] => Ok(Arm::Full),
        [true, false, false] => Ok(Arm::NoMi),
        [false, true, false] => Ok(Arm::NoSwap),
        [false, false, true] => Ok(Arm::NoAfm),
        _ => Err(Failure { code: EXIT_USAGE, module: "tokenizer", message: "at most one of --no-mi, --no-swap, --no-afm".into() }),
    }
}

fn train_tok(c: &Common, d: &DataArg, flags: [bool; 3], gate: bool) -> Outcome {
    let cfg = load_config(c)?;
    let arm = arm_of(flags)?;
    let (data, hash) = load_data(&cfg, d)?;
    let s = ex::split(&cfg, &data).ctx("synthworld")?;
    prepare_out(&c.out)?;
    let tcfg = arm.apply(&cfg.tokenizer);
    let out = ex::train_tokenizer_run(&cfg, &tcfg, &s.train, cfg.seeds.tokenizer, |_, _| {}).ctx("tokenizer")?;
    out.log.to_csv().save(&c.out.join("training_log.csv")).ctx("io")?;
    if let Some(e) = out.diverged {
        return Err(Failure::from_error("tokenizer", e));
    }
    ex::tokenizer_checkpoint(&out.bundle).save(&c.out.join("tokenizer.tklb")).ctx("io")?;

    let b = &out.bundle;
    let x = s.held.images.slice_rows(0, cfg.evaluation.fid_images.min(s.held.len()));
    let mse = reconstruction_mse(b, &x, cfg.diagnostics.decode_steps).ctx("tokenizer")?;
    let real = ex::mean(&realism_loss(b, &x).ctx("tokenizer")?);
    let noise = ex::mean(&realism_loss(b, &noise_images(x.rows(), &RngStream::new(cfg.seeds.evaluation).child(3))).ctx("tokenizer")?);
    let realism_ok = !tcfg.use_afm || real < noise;
    let passed = mse <= GATE_RECON_MSE && realism_ok;

    write_manifest(&c.out, "train-tokenizer", &cfg, Some(&hash), BTreeMap::from([("variant".into(), arm.name().into())]))?;
    summary(
        &c.out,
        json!({
            "variant": arm.name(),
            "recon_mse": num(mse),
            "realism_real": num(real),
            "realism_noise": num(noise),
            "gate_passed": passed,
        }),
    )?;
    if gate && !passed {
        let why = if mse > GATE_RECON_MSE {
            format!("recon_mse {mse:.5} exceeds {GATE_RECON_MSE}")
        } else {
            format!("realism on real images {real:.4} is not below noise {noise:.4}")
        };
        return Err(Failure::from_error("tokenizer", Error::Gate(why)));
    }
    Ok(())
}

fn train_gen(c: &Common, d: &DataArg, tok: &Path) -> Outcome {
    let cfg = load_config(c)?;
    let (data, hash) = load_data(&cfg, d)?;
    let s = ex::split(&cfg, &data).ctx("synthworld")?;
    let tok_path = resolve(tok, "tokenizer.tklb");
    let bundle = ex::load_tokenizer(&tok_path).ctx("checkpoint")?;
    prepare_out(&c.out)?;
    let out = train_generator(&cfg.generator_config(), &bundle, &s.train, &RngStream::new(cfg.seeds.generator)).ctx("generator")?;
    generator_log_csv(&out.log).save(&c.out.join("training_log.csv")).ctx("io")?;
    if let Some(e) = out.diverged {
        return Err(Failure::from_error("generator", e));
    }
    let ckpt = tokenlab::checkpoint::Checkpoint::new(out.gen.schedule.clone(), out.gen.arrays());
    ckpt.save(&c.out.join("generator.tklb")).ctx("io")?;
    write_manifest(&c.out, "train-generator", &cfg, Some(&hash), inputs(&[("tokenizer", &tok_path)]))?;
    let tail = &out.log[out.log.len().saturating_sub(100)..];
    summary(&c.out, json!({ "generator_final_loss": num(ex::mean(tail)) }))
}

/// Decoder fixture shipped as JSON, e.g. `{"kind": "identity", "dim": 256}`.
fn load_fixture(path: &Path) -> std::result::Result<Option<IdentityDecoder>, Failure> {
    if path.extension().and_then(|e| e.to_str()) != Some("json") {
        return Ok(None);
    }
    let bad = |m: String| Failure { code: EXIT_USAGE, module: "diagnostics", message: m };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::from_error("io", e.into()))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| bad(format!("fixture {}: {e}", path.display())))?;
    match (v.get("kind").and_then(Value::as_str), v.get("dim").and_then(Value::as_u64)) {
        (Some("identity"), Some(dim)) if dim > 0 => Ok(Some(IdentityDecoder { dim: dim as usize })),
        _ => Err(bad(format!("fixture {}: expected kind \"identity\" and a positive dim", path.display()))),
    }
}

fn profile_csv(profile: &[f64]) -> Csv {
    let mut c = Csv::new(&["step", "mean_gain_bits"]);
    for (i, g) in profile.iter().enumerate() {
        c.row(&[i.to_string(), fmt_f64(*g)]);
    }
    c
}

fn trajectory_csv(ts: &[LsoTrajectory]) -> Csv {
    let mut c = Csv::new(&["image", "step", "mse", "delta_i"]);
    for (i, t) in ts.iter().enumerate() {
        for (s, m) in t.mse.iter().enumerate() {
            let di = if s == 0 { String::new() } else { fmt_f64(t.delta_i[s - 1]) };
            c.row(&[i.to_string(), s.to_string(), fmt_f64(*m), di]);
        }
    }
    c
}

fn eval_avgig(c: &Common, d: &DataArg, tok: &Path) -> Outcome {
    let cfg = load_config(c)?;
    let (data, hash) = load_data(&cfg, d)?;
    let s = ex::split(&cfg, &data).ctx("synthworld")?;
    prepare_out(&c.out)?;
    let res = match load_fixture(tok)? {
        Some(dec) => {
            if dec.dim != s.held.images.cols() {
                return Err(Failure {
                    code: EXIT_USAGE,
                    module: "diagnostics",
                    message: format!("fixture dim {} does not match image size {}", dec.dim, s.held.images.cols()),
                });
            }
            let targets = s.held.images.slice_rows(0, cfg.diagnostics.avgig_images.min(s.held.len()));
            avg_ig(&dec, &targets, &RngStream::new(cfg.seeds.diagnostics).at(&[0, 0]), &cfg.lso()).ctx("diagnostics")?
        }
        None => {
            let b = ex::load_tokenizer(&resolve(tok, "tokenizer.tklb")).ctx("checkpoint")?;
            ex::evaluate_avgig(&cfg, &b, &s.held).ctx("diagnostics")?
        }
    };
    if !res.avg_ig.is_finite() {
        return Err(Failure::from_error("diagnostics", Error::Numeric("AvgIG is not finite".into())));
    }
    profile_csv(&res.profile).save(&c.out.join("avgig_profile.csv")).ctx("io")?;
    trajectory_csv(&res.trajectories).save(&c.out.join("avgig_trajectories.csv")).ctx("io")?;
    write_manifest(&c.out, "eval avgig", &cfg, Some(&hash), inputs(&[("tokenizer", tok)]))?;
    summary(&c.out, json!({ "avg_ig": num(res.avg_ig), "avg_ig_excluded": res.excluded }))
}

fn eval_mc(c: &Common, d: &DataArg, tok: &Path) -> Outcome {
    let cfg = load_config(c)?;
    let (data, hash) = load_data(&cfg, d)?;
    let s = ex::split(&cfg, &data).ctx("synthworld")?;
    let b = ex::load_tokenizer(&resolve(tok, "tokenizer.tklb")).ctx("checkpoint")?;
    prepare_out(&c.out)?;
    let realism = ex::own_realism(&b);
    let res = ex::evaluate_mc(&cfg, &b, &realism, &s.held).ctx("diagnostics")?;
    let mut csv = Csv::new(&["anchor", "neighbor", "mode", "distance", "l_ref", "l_max", "mc"]);
    for (p, r) in &res.records {
        csv.row(&[
            p.anchor.to_string(),
            p.neighbor.to_string(),
            format!("{:?}", p.mode),
            fmt_f64(p.distance),
            fmt_f64(r.l_ref),
            fmt_f64(r.l_max),
            fmt_f64(r.mc),
        ]);
    }
    csv.save(&c.out.join("mc_pairs.csv")).ctx("io")?;
    write_manifest(&c.out, "eval mc", &cfg, Some(&hash), inputs(&[("tokenizer", tok)]))?;
    summary(
        &c.out,
        json!({
            "mc": num(res.mc),
            "mc_same_class": opt(res.same_class),
            "mc_cross_class": opt(res.cross_class),
            "mc_pairs": res.records.len(),
        }),
    )
}

fn eval_fid(c: &Common, d: &DataArg, tok: &Path, gen: Option<&Path>) -> Outcome {
    let cfg = load_config(c)?;
    let (data, hash) = load_data(&cfg, d)?;
    let s = ex::split(&cfg, &data).ctx("synthworld")?;
    let b = ex::load_tokenizer(&resolve(tok, "tokenizer.tklb")).ctx("checkpoint")?;
    prepare_out(&c.out)?;
    let mut m = Map::new();
    m.insert("proxy_rfid".into(), num(ex::proxy_rfid(&cfg, &b, &s.held).ctx("evaluation")?));
    let mut ins = inputs(&[("tokenizer", tok)]);
    if let Some(g) = gen {
        let r = generation(&cfg, &s, &b, g)?;
        m.insert("proxy_gfid".into(), num(r.proxy_gfid));
        m.insert("proxy_gfid_noise".into(), num(r.noise_fid));
        ins.insert("generator".into(), g.display().to_string());
    }
    write_manifest(&c.out, "eval proxy-fid", &cfg, Some(&hash), ins)?;
    merge_summary(&c.out, m).ctx("io")
}

fn generation(cfg: &ExperimentConfig, s: &ex::Split, b: &ModelBundle, g: &Path) -> std::result::Result<ex::GenerationReport, Failure> {
    let gen = ex::load_generator(&resolve(g, "generator.tklb")).ctx("checkpoint")?;
    let clf = ex::task_classifier(cfg, s).ctx("evaluation")?;
    ex::evaluate_generator(cfg, b, &gen, &clf, &s.held).ctx("evaluation")
}

fn eval_task(c: &Common, d: &DataArg, tok: &Path, gen: Option<&Path>) -> Outcome {
    let cfg = load_config(c)?;
    let (data, hash) = load_data(&cfg, d)?;
    let s = ex::split(&cfg, &data).ctx("synthworld")?;
    let b = ex::load_tokenizer(&resolve(tok, "tokenizer.tklb")).ctx("checkpoint")?;
    prepare_out(&c.out)?;
    let clf = ex::task_classifier(&cfg, &s).ctx("evaluation")?;
    let n = cfg.evaluation.fid_images.min(s.held.len());
    let x = s.held.images.slice_rows(0, n);
    let labels = &s.held.labels()[..n];
    let rec = decode(&b, &encode(&b, &x).ctx("tokenizer")?, cfg.diagnostics.decode_steps).ctx("tokenizer")?;
    let mut m = Map::new();
    m.insert("task".into(), num(clf.accuracy(&rec, labels).ctx("evaluation")?));
    m.insert("task_real".into(), num(clf.accuracy(&x, labels).ctx("evaluation")?));
    let mut ins = inputs(&[("tokenizer", tok)]);
    if let Some(g) = gen {
        let gen = ex::load_generator(&resolve(g, "generator.tklb")).ctx("checkpoint")?;
        let r = ex::evaluate_generator(&cfg, &b, &gen, &clf, &s.held).ctx("evaluation")?;
        m.insert("gen_task".into(), num(r.task_accuracy));
        ins.insert("generator".into(), g.display().to_string());
    }
    write_manifest(&c.out, "eval task", &cfg, Some(&hash), ins)?;
    merge_summary(&c.out, m).ctx("io")
}

fn swap_grid(c: &Common, d: &DataArg, tok: &Path, a: usize, b_idx: usize) -> Outcome {
    let cfg = load_config(c)?;
    let (data, hash) = load_data(&cfg, d)?;
    let s = ex::split(&cfg, &data).ctx("synthworld")?;
    if a >= s.held.len() || b_idx >= s.held.len() {
        return Err(Failure { code: EXIT_USAGE, module: "diagnostics", message: format!("image index out of range (held-out has {})", s.held.len()) });
    }
    let b = ex::load_tokenizer(&resolve(tok, "tokenizer.tklb")).ctx("checkpoint")?;
    prepare_out(&c.out)?;
    let realism = ex::own_realism(&b);
    let strip = ex::swap_strip(&b, &realism, &s.held, a, b_idx, cfg.diagnostics.decode_steps).ctx("diagnostics")?;
    ex::write_strip(&c.out.join("swap_strip.pgm"), &strip).ctx("io")?;
    let mut csv = Csv::new(&["swapped_tokens", "realism_loss"]);
    for (m, l) in strip.losses.iter().enumerate() {
        csv.row(&[m.to_string(), fmt_f64(*l)]);
    }
    csv.save(&c.out.join("swap_losses.csv")).ctx("io")?;
    write_manifest(&c.out, "swap-grid", &cfg, Some(&hash), inputs(&[("tokenizer", tok)]))?;
    summary(&c.out, json!({ "swap_barrier_ratio": num(strip.barrier_ratio()), "swap_max_endpoint": num(strip.max_endpoint()) }))
}

fn oracle_run_all(out: &Path, seed: u64) -> Outcome {
    prepare_out(out)?;
    let rows = ex::appendix_checks(seed).ctx("oracle")?;
    ex::checks_csv(&rows).save(&out.join("appendix_checks.csv")).ctx("io")?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let cfg = ExperimentConfig::default();
    let mut seeds = BTreeMap::new();
    seeds.insert("oracle".to_string(), seed);
    Manifest {
        command: "oracle run-all".into(),
        build_id: env!("TOKENLAB_BUILD_ID").into(),
        config_hash: cfg.hash(),
        data_hash: None,
        seeds,
        inputs: BTreeMap::new(),
    }
    .save(out)
    .ctx("io")?;
    summary(out, json!({ "checks": rows.len(), "checks_failed": failed.len() }))?;
    if !failed.is_empty() {
        return Err(Failure::from_error("oracle", Error::Gate(format!("failed checks: {}", failed.join(", ")))));
    }
    Ok(())
}

fn report(runs: &[PathBuf], out: &Path) -> Outcome {
    let mut metrics = Vec::new();
    let mut data_hash: Option<(String, &Path)> = None;
    for dir in runs {
        let man = Manifest::load(dir).ctx("io")?;
        let sum = read_summary(dir).ctx("io")?;
        let h = man.data_hash.clone().ok_or_else(|| Failure {
            code: EXIT_USAGE,
            module: "evaluation",
            message: format!("{}: manifest has no data_hash", dir.display()),
        })?;
        match &data_hash {
            Some((first, first_dir)) if *first != h => {
                return Err(Failure {
                    code: EXIT_USAGE,
                    module: "evaluation",
                    message: format!("data_hash differs between {} and {}", first_dir.display(), dir.display()),
                })
            }
            Some(_) => {}
            None => data_hash = Some((h, dir)),
        }
        let variant = sum
            .get("variant")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        metrics.push(RunMetrics::from_summary(&variant, &sum));
    }
    let rep = build_report(&metrics);
    rep.save(out).ctx("io")?;
    let hash = data_hash.map(|(h, _)| h);
    Manifest {
        command: "report".into(),
        build_id: env!("TOKENLAB_BUILD_ID").into(),
        config_hash: String::new(),
        data_hash: hash,
        seeds: BTreeMap::new(),
        inputs: runs.iter().enumerate().map(|(i, r)| (format!("run{i}"), r.display().to_string())).collect(),
    }
    .save(out)
    .ctx("io")?;
    summary(out, json!({ "runs": runs.len() }))
}
