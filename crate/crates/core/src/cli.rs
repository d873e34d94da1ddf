//! `comemo` command line.
//!
//! Every subcommand takes an optional TOML run config; flags override it.
//! Artifacts are assembled in memory and written atomically at the end, so
//! a failed command leaves no partial files. Each run also writes
//! `run.json` (config, seeds, version) and `summary.json`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{bin_profile, evaluate_niah, BinQuantity};
use crate::checkpoint::{encode, load_checkpoint, write_atomic};
use crate::decay::{curves_to_csv, decay_curves};
use crate::error::{Error, Result};
use crate::model::{decode, AllocationMode, MemoryBank, ModelConfig, ModelParams, Sampling};
use crate::pos_encoding::{PositionMode, RopeConfig};
use crate::tasks::{gen_task, TaskKind, TaskSpec, TaskStream};
use crate::training::{make_stage, metrics_csv, run_stage, DataStream, Stage, StageConfig};
use crate::verify::run_suite;

pub const VERSION: &str = concat!("comemo ", env!("CARGO_PKG_VERSION"), "-", env!("COMEMO_GIT_DESCRIBE"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverride {
    pub stage: Stage,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub warmup_ratio: Option<f64>,
}

impl StageOverride {
    pub fn resolve(&self) -> Result<StageConfig> {
        let mut cfg = make_stage(&self.stage.to_string())?;
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.warmup_ratio {
            cfg.warmup_ratio = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    pub trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lengths: vec![2, 4, 6],
            depths: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            trials: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub position_mode: PositionMode,
    pub allocation: AllocationMode,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub stages: Vec<StageOverride>,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            position_mode: PositionMode::Dhr,
            allocation: AllocationMode::DhrB,
            model: ModelConfig::default(),
            task: TaskSpec {
                kind: TaskKind::VisualNeedle,
                ..TaskSpec::default()
            },
            stages: [Stage::Pretrain1, Stage::Pretrain2, Stage::Finetune]
                .into_iter()
                .map(|stage| StageOverride {
                    stage,
                    steps: None,
                    lr: None,
                    batch_size: None,
                    warmup_ratio: None,
                })
                .collect(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Model config with the allocation mode applied.
    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().with_allocation(self.allocation)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let mut task = self.task.clone();
        task.feature_dim = self.model.d_vit;
        task.validate()?;
        for s in &self.stages {
            s.resolve()?;
        }
        if self.eval.trials == 0 || self.eval.lengths.contains(&0) {
            return Err(Error::Config("eval needs trials >= 1 and lengths >= 1".into()));
        }
        if self.eval.depths.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::Config("eval depths must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Task template with the feature dim tied to the model.
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            feature_dim: self.model.d_vit,
            ..self.task.clone()
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "comemo", version = VERSION, about = "Dual-path multimodal decoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// vanilla, dhr or dhr_nc.
    #[arg(long)]
    position_mode: Option<PositionMode>,
    /// dhr-s, dhr-x or dhr-b.
    #[arg(long)]
    allocation: Option<AllocationMode>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured training stages and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Step count for every stage.
        #[arg(long)]
        steps: Option<usize>,
        /// Learning rate for every stage.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Generate a task sample and decode an answer from a checkpoint.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Sample at this temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Needle-in-a-haystack heatmap over lengths and depths.
    EvalNiah {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Rotary inner-product decay curve (and optionally its bound).
    AnalyzeDecay {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        d: usize,
        /// Distances 0..max are evaluated.
        #[arg(long, default_value_t = 4096)]
        max: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long)]
        with_bound: bool,
    },
    /// 100-bin attention or gradient profile over task samples.
    AnalyzeBins {
        #[command(flatten)]
        common: Common,
        /// Fresh initialization from the config when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "attention")]
        quantity: BinQuantity,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Run the invariant suite; nonzero exit on any failure.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Multiplies the number of random draws.
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Decode { common, .. }
            | Command::EvalNiah { common, .. }
            | Command::AnalyzeDecay { common, .. }
            | Command::AnalyzeBins { common, .. }
            | Command::Verify { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Decode { .. } => "decode",
            Command::EvalNiah { .. } => "eval-niah",
            Command::AnalyzeDecay { .. } => "analyze-decay",
            Command::AnalyzeBins { .. } => "analyze-bins",
            Command::Verify { .. } => "verify",
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_toml(
            &std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?,
        )?,
        None => RunConfig::default(),
    };
    if let Some(v) = &common.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.position_mode {
        cfg.position_mode = v;
    }
    if let Some(v) = common.allocation {
        cfg.allocation = v;
    }
    Ok(cfg)
}

/// Files produced by a command, written together once it has succeeded.
struct Artifacts {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    fn add_json(&mut self, name: &str, value: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        self.add(name, text);
        Ok(())
    }

    fn commit(self) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.dir)?;
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            write_atomic(&path, bytes)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn run_record(command: &str, cfg: &RunConfig, extra: Value) -> Value {
    json!({
        "command": command,
        "version": VERSION,
        "seed": cfg.seed,
        "config": cfg,
        "args": extra,
    })
}

/// Loads a checkpoint, letting the run config pick allocation and memory.
fn load_model(path: &Path, cfg: &RunConfig) -> Result<(ModelConfig, ModelParams)> {
    let (mut model, params) = load_checkpoint(path)?;
    model = model.with_allocation(cfg.allocation);
    Ok((model, params))
}

fn cmd_train(cfg: &RunConfig, steps: Option<usize>, lr: Option<f64>, art: &mut Artifacts) -> Result<Value> {
    let model_cfg = cfg.model_config();
    let mut stages = Vec::new();
    for s in &cfg.stages {
        let mut st = s.resolve()?;
        if let Some(n) = steps {
            st.steps = n;
        }
        if let Some(v) = lr {
            st.lr = v;
        }
        st.validate()?;
        stages.push(st);
    }
    let mut params = ModelParams::init(&model_cfg, cfg.seed);
    let mut stream = TaskStream::new(cfg.task_spec(), cfg.position_mode, model_cfg.context_detail);
    let mut all_metrics = Vec::new();
    for (i, st) in stages.iter().enumerate() {
        let stream: &mut dyn DataStream = &mut stream;
        let (p, m) = run_stage(params, &model_cfg, st, stream, cfg.seed.wrapping_add(i as u64))?;
        params = p;
        all_metrics.push(m);
    }
    art.add("metrics.csv", metrics_csv(&all_metrics));
    art.add("model.ckpt", encode(&model_cfg, &params)?);
    let per_stage: Vec<Value> = all_metrics
        .iter()
        .zip(&stages)
        .map(|(m, st)| {
            json!({
                "stage": st.stage,
                "steps": st.steps,
                "lr": st.lr,
                "first_loss": m.first_loss(),
                "last_loss": m.last_loss(),
            })
        })
        .collect();
    Ok(json!({
        "stages": per_stage,
        "average_gate": crate::analysis::average_gates(&params),
        "num_parameters": params.num_parameters(),
    }))
}

fn cmd_decode(
    cfg: &RunConfig,
    checkpoint: &Path,
    steps: usize,
    temperature: Option<f64>,
    art: &mut Artifacts,
) -> Result<Value> {
    let (model_cfg, params) = load_model(checkpoint, cfg)?;
    let spec = TaskSpec {
        feature_dim: model_cfg.d_vit,
        ..cfg.task.clone().reseeded(cfg.seed)
    };
    let sample = gen_task(&spec, cfg.position_mode, model_cfg.context_detail)?;
    let bank = MemoryBank::build(&params, &model_cfg, &sample.query, &sample.posmap)?;
    let sampling = match temperature {
        Some(t) => Sampling::Temperature {
            temperature: t,
            seed: cfg.seed,
        },
        None => Sampling::Greedy,
    };
    let out = decode(
        &params,
        &model_cfg,
        &sample.query,
        &sample.posmap,
        &bank,
        steps,
        sampling,
    )?;
    let summary = json!({
        "prompt_tokens": sample.query.token_ids,
        "position_ids": sample.posmap.ids(),
        "generated": out,
        "answer": sample.answer,
        "correct": out.first() == sample.answer.first(),
    });
    art.add_json("decode.json", &summary)?;
    Ok(summary)
}

fn cmd_eval_niah(cfg: &RunConfig, checkpoint: &Path, art: &mut Artifacts) -> Result<Value> {
    let (model_cfg, params) = load_model(checkpoint, cfg)?;
    let e = &cfg.eval;
    let heat = evaluate_niah(
        &params,
        &model_cfg,
        cfg.position_mode,
        &cfg.task_spec(),
        &e.lengths,
        &e.depths,
        e.trials,
        cfg.seed,
    )?;
    art.add("niah.csv", heat.to_csv());
    art.add("niah.pgm", heat.to_pgm(16));
    let mean = heat.accuracy.iter().flatten().sum::<f64>() / (heat.lengths.len() * heat.depths.len()) as f64;
    Ok(json!({ "mean_accuracy": mean, "accuracy": heat.accuracy, "lengths": heat.lengths, "depths": heat.depths }))
}

fn cmd_analyze_decay(
    d: usize,
    max: usize,
    trials: usize,
    with_bound: bool,
    seed: u64,
    art: &mut Artifacts,
) -> Result<Value> {
    let rope = RopeConfig::with_default_base(d)?;
    let (emp, bound) = decay_curves(&rope, max, trials, seed)?;
    let csv = if with_bound {
        curves_to_csv(&[&emp, &bound])
    } else {
        curves_to_csv(&[&emp])
    };
    art.add("decay.csv", csv);
    let head = emp.value_at(0).unwrap_or(f64::NAN);
    let tail = emp.mean_over(max / 2, max.saturating_sub(1));
    Ok(json!({ "d": d, "max": max, "trials": trials, "value_at_0": head, "tail_mean": tail }))
}

fn cmd_analyze_bins(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    quantity: BinQuantity,
    samples: usize,
    art: &mut Artifacts,
) -> Result<Value> {
    let (model_cfg, params) = match checkpoint {
        Some(p) => load_model(p, cfg)?,
        None => {
            let m = cfg.model_config();
            let p = ModelParams::init(&m, cfg.seed);
            (m, p)
        }
    };
    let mut stream = TaskStream::new(cfg.task_spec(), cfg.position_mode, model_cfg.context_detail);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let examples = stream.next_batch(&mut rng, samples)?;
    let prof = bin_profile(&params, &model_cfg, &examples, quantity)?;
    art.add("bins.csv", prof.to_csv());
    Ok(json!({
        "quantity": quantity,
        "samples": samples,
        "first_bin": prof.values[0],
        "median_bin": prof.median(),
        "total": prof.total(),
    }))
}

fn execute(cmd: &Command) -> Result<i32> {
    let cfg = load_config(cmd.common())?;
    cfg.validate()?;
    let mut art = Artifacts::new(&cfg.out_dir);
    let (summary, args, status) = match cmd {
        Command::Train { steps, lr, .. } => (
            cmd_train(&cfg, *steps, *lr, &mut art)?,
            json!({ "steps": steps, "lr": lr }),
            0,
        ),
        Command::Decode {
            checkpoint,
            steps,
            temperature,
            ..
        } => (
            cmd_decode(&cfg, checkpoint, *steps, *temperature, &mut art)?,
            json!({ "checkpoint": checkpoint, "steps": steps, "temperature": temperature }),
            0,
        ),
        Command::EvalNiah {
            checkpoint,
            lengths,
            depths,
            trials,
            ..
        } => {
            let mut cfg = cfg.clone();
            if let Some(v) = lengths {
                cfg.eval.lengths = v.clone();
            }
            if let Some(v) = depths {
                cfg.eval.depths = v.clone();
            }
            if let Some(v) = trials {
                cfg.eval.trials = *v;
            }
            cfg.validate()?;
            (
                cmd_eval_niah(&cfg, checkpoint, &mut art)?,
                json!({ "checkpoint": checkpoint }),
                0,
            )
        }
        Command::AnalyzeDecay {
            d,
            max,
            trials,
            with_bound,
            ..
        } => (
            cmd_analyze_decay(*d, *max, *trials, *with_bound, cfg.seed, &mut art)?,
            json!({ "d": d, "max": max, "trials": trials, "with_bound": with_bound }),
            0,
        ),
        Command::AnalyzeBins {
            checkpoint,
            quantity,
            samples,
            ..
        } => (
            cmd_analyze_bins(&cfg, checkpoint.as_deref(), *quantity, *samples, &mut art)?,
            json!({ "checkpoint": checkpoint, "quantity": quantity, "samples": samples }),
            0,
        ),
        Command::Verify { scale, .. } => {
            let results = run_suite(*scale, cfg.seed)?;
            let mut failed = 0;
            for r in &results {
                println!("{} {:<22} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            let checks: Vec<Value> = results
                .iter()
                .map(|r| json!({ "name": r.name, "passed": r.passed, "detail": r.detail }))
                .collect();
            (
                json!({ "checks": checks, "failed": failed }),
                json!({ "scale": scale }),
                i32::from(failed > 0),
            )
        }
    };
    art.add_json("run.json", &run_record(cmd.name(), &cfg, args))?;
    art.add_json("summary.json", &summary)?;
    for path in art.commit()? {
        eprintln!("wrote {}", path.display());
    }
    Ok(status)
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Argument(_) => 2,
                _ => 1,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
        let text = toml::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
            seed = 5
            allocation = "dhr-x"
            position_mode = "vanilla"
            [model]
            d_model = 32
            n_heads = 2
            [[stages]]
            stage = "finetune"
            steps = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.model.n_layers, 8);
        assert_eq!(cfg.stages.len(), 1);
        let st = cfg.stages[0].resolve().unwrap();
        assert_eq!((st.steps, st.lr), (3, 4e-5));
        assert_eq!(cfg.model_config().memory_detail, crate::seqplan::ImageDetail::Full);
        assert_eq!(
            cfg.model_config().context_detail,
            crate::seqplan::ImageDetail::Thumbnail
        );
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(RunConfig::from_toml("nonsense = 1").is_err());
        assert!(RunConfig::from_toml("allocation = \"dhr-q\"").is_err());
        let cfg = RunConfig::from_toml("[model]\nn_heads = 5").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_subcommand_fails() {
        assert_ne!(run_command(["comemo", "frobnicate"]), 0);
        assert_ne!(run_command(["comemo"]), 0);
    }
}
