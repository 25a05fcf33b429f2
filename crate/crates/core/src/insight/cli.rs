//! `grasp-lab` command line.
//!
//! Every run prints its resolved configuration (TOML) to stderr and writes it
//! next to its artifacts. Exit codes: 0 success, 2 configuration or usage
//! error, 1 anything else.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grouping::RowMode;
use crate::harness::{
    evaluate, metrics_csv, noise_sweep_checkpoints, sweep_csv, sweep_json, train, write_text, NoiseScope,
    NoiseSweepSpec, TrainConfig,
};
use crate::insight::{analyze_model, count_adapter_params, ArchSpec, CountMethod, DEFAULT_GRID};
use crate::micromodel::{
    attach_adapters, build_model, load_checkpoint, load_or_generate, save_checkpoint,
    AdapterSpec, Dataset, LayerSelection, Method, Model, ModelConfig, SynthTaskSpec, Task,
};
use crate::modulation::{GraspMode, NoiseAwareLossConfig};
use crate::numkit::{derive_seed, RngStream};

#[derive(Parser, Debug)]
#[command(name = "grasp-lab", version, about = "Grouped activation modulation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of groups.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// all_linear | k_v_ff2 | ff2_only
    #[arg(long, global = true)]
    layers: Option<String>,
    /// grasp | stoch | deterministic_baseline (param-count: grasp | stoch_shared | stoch_per_row | bitfit_like)
    #[arg(long, global = true)]
    method: Option<String>,
    /// both | scale_only | shift_only
    #[arg(long, global = true)]
    mode: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base model on the majority task.
    Pretrain,
    /// Attach adapters to a pretrained checkpoint and train them on the bigram task.
    Finetune(CheckpointArgs),
    /// Accuracy of a checkpoint on its task's test split.
    Eval(CheckpointArgs),
    /// Noise-injection sweep over one or more fine-tuned checkpoints.
    NoiseSweep(SweepArgs),
    /// Adapter parameter count for a published architecture.
    ParamCount(ParamArgs),
    /// Density and mode analysis of learned adapter values.
    AnalyzeDist(CheckpointArgs),
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Repeatable; overrides `checkpoints` in the config.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct ParamArgs {
    /// roberta-base | roberta-large | gpt2-medium
    #[arg(long, default_value = "roberta-base")]
    arch: String,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub balance: f64,
}

impl DataConfig {
    fn spec(&self, task: Task, model: &ModelConfig) -> SynthTaskSpec {
        SynthTaskSpec {
            task,
            seed: self.seed,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            balance: self.balance,
            seq_len: model.max_seq,
            vocab: model.vocab,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub data: DataConfig,
    /// `train.seed` is replaced by the top-level `seed`.
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub method: String,
    pub k: usize,
    pub layers: String,
    pub mode: String,
    pub row_mode: String,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            method: "grasp".into(),
            k: 8,
            layers: "ff2_only".into(),
            mode: "both".into(),
            row_mode: "per_row".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub scope: NoiseScope,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            levels: vec![0.0, 0.01, 0.02, 0.05, 0.1],
            seeds: vec![1, 2, 3, 4, 5],
            scope: NoiseScope::Modulated,
        }
    }
}

/// Everything a run reads, with defaults for every field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Dataset cache directory; defaults to `<out>/data`.
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub model: ModelConfig,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    pub adapter: AdapterConfig,
    pub loss: Option<NoiseAwareLossConfig>,
    pub sweep: SweepConfig,
    pub grid_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            data_dir: None,
            checkpoint: None,
            checkpoints: Vec::new(),
            model: ModelConfig::default(),
            pretrain: PhaseConfig {
                data: DataConfig {
                    seed: 1,
                    n_train: 4000,
                    n_val: 500,
                    n_test: 500,
                    balance: 0.5,
                },
                train: TrainConfig {
                    lr: 3e-3,
                    epochs: 2,
                    ..TrainConfig::default()
                },
            },
            finetune: PhaseConfig {
                data: DataConfig {
                    seed: 2,
                    n_train: 5000,
                    n_val: 500,
                    n_test: 1000,
                    balance: 0.5,
                },
                train: TrainConfig {
                    lr: 1e-2,
                    epochs: 15,
                    ..TrainConfig::default()
                },
            },
            adapter: AdapterConfig::default(),
            loss: None,
            sweep: SweepConfig::default(),
            grid_points: DEFAULT_GRID,
        }
    }
}

impl Default for PhaseConfig {
    fn default() -> Self {
        RunConfig::default().finetune
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        RunConfig::default().finetune.data
    }
}

/// Dotted key an error points at: a backticked name in the message, else the
/// `key = value` line under the span, qualified by its `[table]` header.
fn field_of(text: &str, message: &str, span: Option<std::ops::Range<usize>>) -> String {
    if let Some(name) = message.split('`').nth(1) {
        return name.to_string();
    }
    let Some(span) = span else {
        return "config".into();
    };
    let before = &text[..span.start.min(text.len())];
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("");
    let Some((key, _)) = line.split_once('=') else {
        return "config".into();
    };
    let table = before[..line_start]
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[').and_then(|l| l.strip_suffix(']')))
        .map(|t| format!("{}.", t.trim()))
        .unwrap_or_default();
    format!("{table}{}", key.trim())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            LabError::config(field_of(text, &msg, e.span()), msg)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn adapter_spec(&self) -> Result<AdapterSpec> {
        let a = &self.adapter;
        let method = Method::parse(&a.method).map_err(|e| rename(e, "adapter.method"))?;
        let selection = LayerSelection::parse(&a.layers).map_err(|e| rename(e, "adapter.layers"))?;
        let mode = parse_mode(&a.mode)?;
        let row_mode = match a.row_mode.as_str() {
            "per_row" => RowMode::PerRow,
            "shared" => RowMode::Shared,
            other => {
                return Err(LabError::config(
                    "adapter.row_mode",
                    format!("unknown row mode `{other}` (expected per_row, shared)"),
                ))
            }
        };
        if a.k == 0 {
            return Err(LabError::config("adapter.k", "must be >= 1"));
        }
        Ok(AdapterSpec {
            method,
            k: a.k,
            selection,
            mode,
            row_mode,
            seed: self.seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, phase) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            phase
                .train
                .validate()
                .map_err(|e| prefix(e, &format!("{name}.train")))?;
            if phase.data.n_train == 0 {
                return Err(LabError::config(format!("{name}.data.n_train"), "must be >= 1"));
            }
        }
        if let Some(l) = &self.loss {
            l.validate().map_err(|e| prefix(e, "loss"))?;
        }
        self.adapter_spec()?;
        if self.grid_points < 2 {
            return Err(LabError::config("grid_points", "must be >= 2"));
        }
        Ok(())
    }
}

fn parse_mode(s: &str) -> Result<GraspMode> {
    match s {
        "both" => Ok(GraspMode::Both),
        "scale_only" | "scale" => Ok(GraspMode::ScaleOnly),
        "shift_only" | "shift" => Ok(GraspMode::ShiftOnly),
        other => Err(LabError::config(
            "adapter.mode",
            format!("unknown mode `{other}` (expected both, scale_only, shift_only)"),
        )),
    }
}

fn rename(e: LabError, field: &str) -> LabError {
    match e {
        LabError::Config { message, .. } => LabError::config(field, message),
        other => other,
    }
}

fn prefix(e: LabError, scope: &str) -> LabError {
    match e {
        LabError::Config { field, message } => LabError::config(format!("{scope}.{field}"), message),
        other => other,
    }
}

fn resolve(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(p) = &o.out {
        cfg.out = p.clone();
    }
    if let Some(k) = o.k {
        cfg.adapter.k = k;
    }
    if let Some(l) = &o.layers {
        cfg.adapter.layers = l.clone();
    }
    if let Some(m) = &o.method {
        cfg.adapter.method = m.clone();
    }
    if let Some(m) = &o.mode {
        cfg.adapter.mode = m.clone();
    }
    cfg.pretrain.train.seed = cfg.seed;
    cfg.finetune.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn log_config(cmd: &str, cfg: &RunConfig) -> Result<()> {
    let text = cfg.to_toml();
    eprintln!("# resolved config ({cmd})\n{text}");
    write_text(&cfg.out.join(format!("{cmd}.config.toml")), &text)
}

fn dataset(cfg: &RunConfig, task: Task) -> Result<Dataset> {
    let phase = match task {
        Task::PretrainMajority => &cfg.pretrain,
        Task::FinetuneBigram => &cfg.finetune,
    };
    load_or_generate(&phase.data.spec(task, &cfg.model), &cfg.data_dir())
}

fn checkpoint_path(cli: Option<&PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    cli.or(cfg.checkpoint.as_ref())
        .cloned()
        .ok_or_else(|| LabError::config("checkpoint", "checkpoint required (--checkpoint or `checkpoint` in the config)"))
}

fn task_of(model: &Model) -> Task {
    if model.config.n_classes == Task::PretrainMajority.n_classes() {
        Task::PretrainMajority
    } else {
        Task::FinetuneBigram
    }
}

fn run_pretrain(cfg: &RunConfig) -> Result<()> {
    log_config("pretrain", cfg)?;
    let model_cfg = ModelConfig {
        n_classes: Task::PretrainMajority.n_classes(),
        ..cfg.model.clone()
    };
    let data = dataset(cfg, Task::PretrainMajority)?;
    let mut model = build_model(&model_cfg, &mut RngStream::new(cfg.seed))?;
    let report = train(&mut model, &data, &cfg.pretrain.train)?;
    let test_acc = evaluate(&model, &data.test, None)?;
    write_text(&cfg.out.join("pretrain_metrics.csv"), &metrics_csv(&report.metrics))?;
    let ckpt = cfg.out.join("pretrained.json");
    save_checkpoint(&model, &ckpt)?;
    println!("pretrained: val_acc {} test_acc {test_acc}", report.last().val_acc);
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn run_finetune(cfg: &RunConfig, ckpt: Option<&PathBuf>) -> Result<()> {
    let path = checkpoint_path(ckpt, cfg)?;
    let spec = cfg.adapter_spec()?;
    log_config("finetune", cfg)?;
    let mut model = load_checkpoint(&path)?;
    let mut head_rng = RngStream::new(derive_seed(cfg.seed, 1));
    model.reset_head(Task::FinetuneBigram.n_classes(), &mut head_rng)?;
    attach_adapters(&mut model, &spec)?;
    let data = dataset(cfg, Task::FinetuneBigram)?;
    let frozen = model.frozen_checksum();
    let mut train_cfg = cfg.finetune.train.clone();
    if spec.method == Method::Stoch {
        train_cfg.loss_cfg = cfg.loss.or(train_cfg.loss_cfg);
    }
    let report = train(&mut model, &data, &train_cfg)?;
    if model.frozen_checksum() != frozen {
        return Err(LabError::Contract("frozen base changed during fine-tuning".into()));
    }
    write_text(&cfg.out.join("finetune_metrics.csv"), &metrics_csv(&report.metrics))?;
    let out = cfg.out.join("finetuned.json");
    save_checkpoint(&model, &out)?;
    println!(
        "finetuned: adapter_params {} initial_val_acc {} final_val_acc {}",
        model.adapter_param_count(),
        report.initial().val_acc,
        report.last().val_acc
    );
    println!("frozen_checksum: {frozen}");
    println!("checkpoint: {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    task: Task,
    split: &'static str,
    n: usize,
    accuracy: f64,
    model_hash: String,
}

fn run_eval(cfg: &RunConfig, ckpt: Option<&PathBuf>) -> Result<()> {
    let path = checkpoint_path(ckpt, cfg)?;
    log_config("eval", cfg)?;
    let model = load_checkpoint(&path)?;
    let task = task_of(&model);
    let data = dataset(cfg, task)?;
    let report = EvalReport {
        task,
        split: "test",
        n: data.test.len(),
        accuracy: evaluate(&model, &data.test, None)?,
        model_hash: model.checksum(),
    };
    let text = serde_json::to_string_pretty(&report)?;
    write_text(&cfg.out.join("eval.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn run_sweep(cfg: &RunConfig, cli_paths: &[PathBuf]) -> Result<()> {
    let paths = if cli_paths.is_empty() { cfg.checkpoints.clone() } else { cli_paths.to_vec() };
    if paths.is_empty() {
        return Err(LabError::config("checkpoints", "checkpoint required: at least one checkpoint to sweep"));
    }
    let spec = NoiseSweepSpec {
        levels: cfg.sweep.levels.clone(),
        seeds: cfg.sweep.seeds.clone(),
        scope: cfg.sweep.scope,
    };
    spec.normalized().map_err(|e| prefix(e, "sweep"))?;
    log_config("noise-sweep", cfg)?;
    let data = dataset(cfg, Task::FinetuneBigram)?;
    let report = noise_sweep_checkpoints(&spec, &paths, &data.test)?;
    write_text(&cfg.out.join("noise_sweep.csv"), &sweep_csv(&report))?;
    write_text(&cfg.out.join("noise_sweep.json"), &sweep_json(&report)?)?;
    for a in &report.aggregates {
        println!("{} rho={} mean={:.4} std={:.4}", a.model, a.rho, a.mean, a.std);
    }
    Ok(())
}

fn run_param_count(cfg: &RunConfig, o: &Overrides, args: &ParamArgs) -> Result<()> {
    let arch = ArchSpec::preset(&args.arch)?;
    let method = CountMethod::parse(o.method.as_deref().unwrap_or("grasp"))?;
    let selection = LayerSelection::parse(o.layers.as_deref().unwrap_or("all_linear"))?;
    let mode = parse_mode(o.mode.as_deref().unwrap_or("both"))?;
    let k = o.k.unwrap_or(cfg.adapter.k);
    let c = count_adapter_params(&arch, method, k, selection, mode)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&c)?);
    } else {
        println!("arch: {}", c.arch);
        println!("count: {}", c.count);
        println!("percent: {:.4}%", c.percent);
        println!("percent_unrounded: {}", c.percent);
    }
    Ok(())
}

fn run_analyze(cfg: &RunConfig, ckpt: Option<&PathBuf>) -> Result<()> {
    let path = checkpoint_path(ckpt, cfg)?;
    log_config("analyze-dist", cfg)?;
    let model = load_checkpoint(&path)?;
    if model.adapters.is_empty() {
        return Err(LabError::config("checkpoint", "checkpoint has no adapters to analyze"));
    }
    let reports = analyze_model(&model, cfg.grid_points)?;
    write_text(
        &cfg.out.join("dist_report.json"),
        &serde_json::to_string_pretty(&reports)?,
    )?;
    for r in &reports {
        println!("{} {} modes={} bandwidth={}", r.layer, r.param, r.modes, r.bandwidth);
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Command::ParamCount(args) = &cli.command {
        // Pure arithmetic: a config file is optional and only supplies `k`.
        let cfg = match &cli.overrides.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        return run_param_count(&cfg, &cli.overrides, args);
    }
    let cfg = resolve(&cli.overrides)?;
    match &cli.command {
        Command::Pretrain => run_pretrain(&cfg),
        Command::Finetune(a) => run_finetune(&cfg, a.checkpoint.as_ref()),
        Command::Eval(a) => run_eval(&cfg, a.checkpoint.as_ref()),
        Command::NoiseSweep(a) => run_sweep(&cfg, &a.checkpoint),
        Command::AnalyzeDist(a) => run_analyze(&cfg, a.checkpoint.as_ref()),
        Command::ParamCount(_) => unreachable!(),
    }
}

/// Runs one command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                LabError::Config { .. } | LabError::Parameter(_) | LabError::Mode(_) => 2,
                _ => 1,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_names_field() {
        let err = RunConfig::from_toml("sede = 3").unwrap_err();
        assert!(matches!(err, LabError::Config { ref field, .. } if field == "sede"), "{err}");
    }

    #[test]
    fn bad_adapter_names_field() {
        let mut cfg = RunConfig::default();
        cfg.adapter.method = "lora".into();
        assert!(matches!(cfg.adapter_spec(), Err(LabError::Config { field, .. }) if field == "adapter.method"));
    }

    #[test]
    fn type_error_names_dotted_field() {
        let err = RunConfig::from_toml("seed = 1\n[finetune.train]\nlr = \"fast\"\n").unwrap_err();
        assert!(matches!(err, LabError::Config { ref field, .. } if field == "finetune.train.lr"), "{err}");
    }
}
