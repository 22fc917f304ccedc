//! Command-line front end: `generate`, `train`, `eval`, `ablate`, `gradcheck`.
//!
//! Every command writes its outputs and a `manifest.txt` (key=value) into the
//! directory given by `--out`. Errors print one line to stderr and map to exit
//! codes 1 (usage/config), 2 (data/format) and 3 (numerical).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};

use crate::data_model::{load_dataset, write_dataset, Dataset};
use crate::error::{config, Error, Result};
use crate::fusion::{FusionParams, FusionShape, FusionVariant, Modality};
use crate::retrieval_eval::{
    ablate_fusions, analyze_gates, evaluate_detail, transplant_adapters, IndexKind, ABLATION_CUTOFFS, DEFAULT_CUTOFFS,
};
use crate::synth::{generate, SyntheticSpec};
use crate::trainer::{
    gradcheck, save_checkpoint, load_checkpoint, train_stage, Checkpoint, Curriculum, GradcheckOptions, Stage,
    TrainConfig,
};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const PAIRS_FILE: &str = "pairs.bin";
pub const SPEC_FILE: &str = "spec.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GATES_FILE: &str = "gates.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "modalfuse", version, about = "Multimodal fusion retrieval: synthesis, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset.
    Generate {
        /// Spec file (key=value). Without it the named preset is used.
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "standard")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Checkpoint from an earlier stage.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: nDCG report and gate analysis.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Comma-separated nDCG cutoffs [default: 1,3,9,24].
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<usize>>,
        /// Item embedding that is indexed and scored.
        #[arg(long, value_enum, default_value_t = IndexArg::Fused)]
        index: IndexArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shared Stage II, then Stage III and evaluation for each fusion variant.
    Ablate {
        /// Stage III config; also used for Stage II unless `--stage2-config` is given.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage2_config: Option<PathBuf>,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, requires = "eval_pairs", conflicts_with = "holdout")]
        eval_embeddings: Option<PathBuf>,
        #[arg(long, requires = "eval_embeddings")]
        eval_pairs: Option<PathBuf>,
        /// Evaluate on every n-th query and train on the rest.
        #[arg(long)]
        holdout: Option<usize>,
        /// Comma-separated variant keys [default: all five].
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<FusionVariant>>,
        /// Comma-separated nDCG cutoffs [default: 1,3,9,10,24].
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<usize>>,
        /// Overrides the seed of both configs.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Central-difference gradient check of every fusion variant.
    Gradcheck {
        /// Train config supplying the loss settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, hide = true)]
        corrupt_gradient: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IndexArg {
    Fused,
    Text,
    Image,
}

impl IndexArg {
    fn kind(self) -> IndexKind {
        match self {
            IndexArg::Fused => IndexKind::Fused,
            IndexArg::Text => IndexKind::Single(Modality::Text),
            IndexArg::Image => IndexKind::Single(Modality::Image),
        }
    }
}

/// Key=value record written next to every command's outputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub configs: Vec<(String, PathBuf)>,
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<(String, PathBuf)>,
    pub seed: Option<u64>,
    pub duration: Duration,
    /// Command-specific facts (checksums, stage lists).
    pub extra: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        RunManifest { command: command.to_string(), ..Default::default() }
    }

    pub fn to_kv_text(&self) -> String {
        let mut out = format!("command={}\nengine_version={ENGINE_VERSION}\n", self.command);
        if let Some(s) = self.seed {
            let _ = writeln!(out, "seed={s}");
        }
        for (prefix, list) in [("config", &self.configs), ("input", &self.inputs), ("output", &self.outputs)] {
            for (k, p) in list {
                let _ = writeln!(out, "{prefix}.{k}={}", p.display());
            }
        }
        for (k, v) in &self.extra {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "duration_seconds={:.3}", self.duration.as_secs_f64());
        let _ = writeln!(out, "warnings={}", self.warnings.len());
        for (i, w) in self.warnings.iter().enumerate() {
            let _ = writeln!(out, "warning.{}={}", i + 1, w.replace('\n', " "));
        }
        out
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("modalfuse: {}", first.trim_start_matches("error: "));
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("modalfuse: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    let start = Instant::now();
    let (out, manifest) = match command {
        Command::Generate { spec, preset, seed, out } => (out.clone(), cmd_generate(spec, &preset, seed, &out)?),
        Command::Train { config, embeddings, pairs, checkpoint, seed, out } => {
            (out.clone(), cmd_train(&config, &embeddings, &pairs, checkpoint.as_deref(), seed, &out)?)
        }
        Command::Eval { checkpoint, embeddings, pairs, cutoffs, index, out } => {
            (out.clone(), cmd_eval(&checkpoint, &embeddings, &pairs, cutoffs, index, &out)?)
        }
        Command::Ablate {
            config,
            stage2_config,
            embeddings,
            pairs,
            eval_embeddings,
            eval_pairs,
            holdout,
            variants,
            cutoffs,
            seed,
            out,
        } => {
            let eval_data = eval_embeddings.zip(eval_pairs);
            let args = AblateArgs {
                config: &config,
                stage2_config: stage2_config.as_deref(),
                embeddings: &embeddings,
                pairs: &pairs,
                eval_data: eval_data.as_ref().map(|(e, p)| (e.as_path(), p.as_path())),
                holdout,
                variants,
                cutoffs,
                seed,
            };
            (out.clone(), cmd_ablate(&args, &out)?)
        }
        Command::Gradcheck { config, seed, seeds, out, corrupt_gradient } => {
            let (manifest, failure) = cmd_gradcheck(config.as_deref(), seed, seeds, corrupt_gradient, &out)?;
            if let Some(err) = failure {
                write_manifest(&out, manifest, start)?;
                return Err(err);
            }
            (out, manifest)
        }
    };
    write_manifest(&out, manifest, start)
}

fn write_manifest(out: &Path, mut manifest: RunManifest, start: Instant) -> Result<()> {
    manifest.duration = start.elapsed();
    fs::write(out.join(MANIFEST_FILE), manifest.to_kv_text())?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_kv_text(&read_text(path)?)
        .map_err(|e| relabel(e, &format!("{}", path.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Prefixes the message of a config error with its source.
fn relabel(e: Error, source: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{source}: {m}")),
        other => other,
    }
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn load(embeddings: &Path, pairs: &Path, manifest: &mut RunManifest, prefix: &str) -> Result<Dataset> {
    let ds = load_dataset(embeddings, pairs)?;
    manifest.inputs.push((format!("{prefix}embeddings"), embeddings.to_path_buf()));
    manifest.inputs.push((format!("{prefix}pairs"), pairs.to_path_buf()));
    Ok(ds)
}

fn cmd_generate(spec_path: Option<PathBuf>, preset: &str, seed: Option<u64>, out: &Path) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("generate");
    let mut spec = match &spec_path {
        Some(p) => {
            manifest.configs.push(("spec".into(), p.clone()));
            SyntheticSpec::from_kv_text(&read_text(p)?).map_err(|e| relabel(e, &format!("{}", p.display())))?
        }
        None => {
            manifest.extra.push(("preset".into(), preset.to_string()));
            SyntheticSpec::preset(preset)?
        }
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    manifest.seed = Some(spec.seed);
    let ds = generate(&spec)?;
    create_out(out)?;
    let (emb, pairs, spec_out) = (out.join(EMBEDDINGS_FILE), out.join(PAIRS_FILE), out.join(SPEC_FILE));
    write_dataset(&ds, &emb, &pairs)?;
    fs::write(&spec_out, spec.to_kv_text())?;
    manifest.outputs.extend([("embeddings".into(), emb), ("pairs".into(), pairs), ("spec".into(), spec_out)]);
    println!("generated {} queries, {} items, {} labeled pairs", ds.queries().len(), ds.items().len(), ds.pairs().len());
    Ok(manifest)
}

/// Adopts a checkpoint's parameters for `cfg`. A different fusion shape keeps
/// only the adapters.
fn params_from_checkpoint(ck: Checkpoint, cfg: &TrainConfig, warnings: &mut Vec<String>) -> Result<FusionParams> {
    let shape = cfg.fusion_shape(ck.params.dim());
    if ck.params.shape() == shape {
        return Ok(ck.params);
    }
    warnings.push(format!(
        "checkpoint fusion shape ({}) differs from the config ({}); fusion tensors re-initialised, adapters kept",
        ck.params.variant(),
        cfg.variant
    ));
    let mut params = FusionParams::init(shape, cfg.seed)?;
    transplant_adapters(&ck.params, &mut params);
    Ok(params)
}

fn cmd_train(
    config_path: &Path,
    embeddings: &Path,
    pairs: &Path,
    checkpoint: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("train");
    let cfg = load_config(config_path, seed)?;
    manifest.configs.push(("train".into(), config_path.to_path_buf()));
    manifest.seed = Some(cfg.seed);
    let ds = load(embeddings, pairs, &mut manifest, "")?;

    let (params, mut stages) = match checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            ck.expect_dim(ds.dim())?;
            manifest.inputs.push(("checkpoint".into(), p.to_path_buf()));
            let stages = ck.stages.clone();
            (params_from_checkpoint(ck, &cfg, &mut manifest.warnings)?, stages)
        }
        None => (FusionParams::init(cfg.fusion_shape(ds.dim()), cfg.seed)?, Vec::new()),
    };
    if cfg.stage == Stage::FusionAlign {
        let missing: Vec<&str> = [Stage::QueryTextAlign, Stage::QueryImageAlign]
            .into_iter()
            .filter(|s| !stages.contains(s))
            .map(|s| s.key())
            .collect();
        if !missing.is_empty() {
            manifest.warnings.push(format!("fusion_align started without stage II output (missing {})", missing.join(", ")));
        }
    }
    for w in &manifest.warnings {
        eprintln!("modalfuse: warning: {w}");
    }

    let outcome = train_stage(&ds, params, &cfg, |r, _| {
        println!("epoch {:>3}  loss {:.6}", r.epoch, r.loss_total);
        Ok(())
    })?;
    stages.push(cfg.stage);
    manifest.extra.push(("stages".into(), stages.iter().map(|s| s.key()).collect::<Vec<_>>().join(",")));
    let ck = Checkpoint { params: outcome.params, optimizer: outcome.optimizer, config: cfg, stages };

    create_out(out)?;
    let (ck_path, loss_path) = (out.join(CHECKPOINT_FILE), out.join(LOSS_FILE));
    save_checkpoint(&ck, &ck_path)?;
    fs::write(&loss_path, outcome.history.to_csv())?;
    manifest.outputs.extend([("checkpoint".into(), ck_path), ("loss_csv".into(), loss_path)]);
    Ok(manifest)
}

fn cutoffs_or(cutoffs: Option<Vec<usize>>, default: &[usize]) -> Vec<usize> {
    cutoffs.unwrap_or_else(|| default.to_vec())
}

fn cmd_eval(
    checkpoint: &Path,
    embeddings: &Path,
    pairs: &Path,
    cutoffs: Option<Vec<usize>>,
    index: IndexArg,
    out: &Path,
) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("eval");
    let cutoffs = cutoffs_or(cutoffs, &DEFAULT_CUTOFFS);
    let ck = load_checkpoint(checkpoint)?;
    manifest.inputs.push(("checkpoint".into(), checkpoint.to_path_buf()));
    let ds = load(embeddings, pairs, &mut manifest, "")?;
    ck.expect_dim(ds.dim())?;
    manifest.seed = Some(ck.config.seed);
    manifest.extra.push(("index".into(), format!("{index:?}").to_lowercase()));
    manifest.extra.push(("cutoffs".into(), cutoffs.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")));

    let detail = evaluate_detail(&ds, &ck.params, index.kind(), &cutoffs)?;
    let report = detail.report();
    let gates = analyze_gates(&ds, &ck.params)?;
    let mut text = format!("all queries ({})\n{}", report.query_count, report.to_table());
    for c in detail.categories() {
        let r = detail.report_for(&c);
        let _ = write!(text, "\n{c} ({} queries)\n{}", r.query_count, r.to_table());
    }
    print!("{text}");

    create_out(out)?;
    let paths = [out.join(METRICS_FILE), out.join(GATES_FILE), out.join(REPORT_FILE)];
    fs::write(&paths[0], report.to_csv())?;
    fs::write(&paths[1], gates.to_csv())?;
    fs::write(&paths[2], text)?;
    let [m, g, r] = paths;
    manifest.outputs.extend([("metrics_csv".into(), m), ("gates_csv".into(), g), ("report".into(), r)]);
    Ok(manifest)
}

struct AblateArgs<'a> {
    config: &'a Path,
    stage2_config: Option<&'a Path>,
    embeddings: &'a Path,
    pairs: &'a Path,
    eval_data: Option<(&'a Path, &'a Path)>,
    holdout: Option<usize>,
    variants: Option<Vec<FusionVariant>>,
    cutoffs: Option<Vec<usize>>,
    seed: Option<u64>,
}

fn cmd_ablate(a: &AblateArgs, out: &Path) -> Result<RunManifest> {
    let mut manifest = RunManifest::new("ablate");
    let stage3 = load_config(a.config, a.seed)?;
    manifest.configs.push(("stage3".into(), a.config.to_path_buf()));
    let stage2 = match a.stage2_config {
        Some(p) => {
            manifest.configs.push(("stage2".into(), p.to_path_buf()));
            load_config(p, Some(a.seed.unwrap_or(stage3.seed)))?
        }
        None => stage3.clone(),
    };
    manifest.seed = Some(stage3.seed);
    let plan = Curriculum { stage2, stage3 };
    let variants = a.variants.clone().unwrap_or_else(|| FusionVariant::ALL.to_vec());
    let cutoffs = cutoffs_or(a.cutoffs.clone(), &ABLATION_CUTOFFS);

    let data = load(a.embeddings, a.pairs, &mut manifest, "")?;
    let (train, eval) = match (a.eval_data, a.holdout) {
        (Some((e, p)), _) => {
            let eval = load(e, p, &mut manifest, "eval_")?;
            if eval.dim() != data.dim() {
                return Err(crate::error::structural(format!(
                    "evaluation data has dim {} but training data has dim {}",
                    eval.dim(),
                    data.dim()
                )));
            }
            (data, eval)
        }
        (None, Some(n)) => {
            manifest.extra.push(("holdout".into(), n.to_string()));
            data.split_queries(n)?
        }
        (None, None) => {
            manifest.warnings.push("no held-out data given; evaluating on the training data".into());
            (data.clone(), data)
        }
    };
    for w in &manifest.warnings {
        eprintln!("modalfuse: warning: {w}");
    }

    let table = ablate_fusions(&train, &eval, &plan, &variants, &cutoffs)?;
    create_out(out)?;
    for row in &table.rows {
        let dir = out.join(row.variant.key());
        fs::create_dir_all(&dir)?;
        let ck = Checkpoint {
            params: row.params.clone(),
            optimizer: row.optimizer.clone(),
            config: TrainConfig { stage: Stage::FusionAlign, variant: row.variant, ..plan.stage3.clone() },
            stages: vec![Stage::QueryTextAlign, Stage::QueryImageAlign, Stage::FusionAlign],
        };
        save_checkpoint(&ck, &dir.join(CHECKPOINT_FILE))?;
        fs::write(dir.join(LOSS_FILE), row.history.to_csv())?;
        fs::write(dir.join(METRICS_FILE), row.report.to_csv())?;
        fs::write(dir.join(GATES_FILE), analyze_gates(&eval, &row.params)?.to_csv())?;
        manifest.outputs.push((row.variant.key().to_string(), dir));
    }
    let (csv, txt) = (out.join(ABLATION_CSV), out.join(ABLATION_TABLE));
    let rendered = table.to_table();
    fs::write(&csv, table.to_csv())?;
    fs::write(&txt, &rendered)?;
    print!("{rendered}");
    manifest.outputs.extend([("ablation_csv".into(), csv), ("ablation_table".into(), txt)]);
    manifest.extra.push(("stage2_adapters_sha256".into(), table.stage2_checksum.clone()));
    Ok(manifest)
}

/// Returns the manifest and, when some check failed, the error to report
/// after the outputs are written.
fn cmd_gradcheck(
    config_path: Option<&Path>,
    first_seed: u64,
    seeds: u64,
    corrupt: Option<String>,
    out: &Path,
) -> Result<(RunManifest, Option<Error>)> {
    let mut manifest = RunManifest::new("gradcheck");
    let mut opts = GradcheckOptions { corrupt, ..GradcheckOptions::default() };
    if let Some(p) = config_path {
        opts.loss = load_config(p, None)?.loss;
        manifest.configs.push(("train".into(), p.to_path_buf()));
    }
    if seeds == 0 {
        return Err(config("--seeds must be at least 1"));
    }
    if let Some(t) = &opts.corrupt {
        let known = FusionVariant::ALL.into_iter().any(|v| {
            FusionParams::init(FusionShape::with_defaults(v, 4), 0).is_ok_and(|p| p.tensor(t).is_some())
        });
        if !known {
            return Err(config(format!("no fusion variant has a tensor named {t:?}")));
        }
        manifest.warnings.push(format!("gradient of {t} deliberately corrupted"));
    }
    manifest.seed = Some(first_seed);
    manifest.extra.push(("seeds".into(), seeds.to_string()));

    let mut csv = String::from("variant,seed,max_relative_error,worst_entry,passed\n");
    let mut failure = None;
    for v in FusionVariant::ALL {
        for seed in first_seed..first_seed + seeds {
            let report = gradcheck(v, seed, &opts)?;
            let worst = report.worst().map_or("-".to_string(), |e| e.name.clone());
            let _ = writeln!(csv, "{},{seed},{:e},{worst},{}", v.key(), report.max_relative_error, report.passed());
            if !report.passed() && failure.is_none() {
                failure = Some(Error::Numerical(format!(
                    "gradient check failed for {v} at seed {seed}: {worst} has relative error {:.3e} (tolerance {:.0e})",
                    report.max_relative_error, report.tolerance
                )));
            }
        }
    }
    create_out(out)?;
    let path = out.join(GRADCHECK_FILE);
    fs::write(&path, &csv)?;
    manifest.outputs.push(("gradcheck_csv".into(), path));
    if failure.is_none() {
        println!(
            "gradient check passed: {} variants, seeds {first_seed}..{}",
            FusionVariant::ALL.len(),
            first_seed + seeds - 1
        );
    }
    Ok((manifest, failure))
}
