//! Command implementations. Every command validates its whole configuration
//! before touching the filesystem.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use slick_core::blocks::{DamageHeatmap, ModelConfig, SlickModel, StructuralPriorGraph};
use slick_core::calibrate::{build_table, PartDamagePriorTable};
use slick_core::infer::{predict, PredictConfig, PredictionFile};
use slick_core::synthdata::{export_dataset, generate_dataset, import_dataset, make_graph, Dataset, Layout};
use slick_core::tensor::io as slkt;
use slick_core::train::{evaluate, train_student, train_teacher, Checkpoint, EpochLog, EvalReport, TrainReport};

use crate::bench::{bench_size, table, BenchReport};
use crate::config::{derive_seed, ConfigError, RunConfig};
use crate::verify::{run_all, PropertyReport};
use crate::{BenchArgs, CalibrateArgs, Cli, Command, DistillArgs, InferArgs, TrainArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0} properties failed")]
    Verify(usize),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Verify(_) | CliError::Other(_) => 1,
        }
    }
}

/// Seeds of every random stream, all derived from the base seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub base: u64,
    pub train_data: u64,
    pub eval_data: u64,
    pub teacher_init: u64,
    pub student_init: u64,
    pub teacher_batches: u64,
    pub student_batches: u64,
    pub projection_head: u64,
    pub bench_input: u64,
}

impl Seeds {
    pub fn new(base: u64) -> Self {
        Self {
            base,
            train_data: derive_seed(base, "train-data"),
            eval_data: derive_seed(base, "eval-data"),
            teacher_init: derive_seed(base, "teacher-init"),
            student_init: derive_seed(base, "student-init"),
            teacher_batches: derive_seed(base, "teacher-batches"),
            student_batches: derive_seed(base, "student-batches"),
            projection_head: derive_seed(base, "projection-head"),
            bench_input: derive_seed(base, "bench-input"),
        }
    }
}

/// `<out>/run.json`. Holds no timestamps, so identical runs write identical
/// manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub seeds: Seeds,
    pub threads: usize,
    /// Commands run against this directory, in first-run order.
    pub commands: Vec<String>,
    pub config: RunConfig,
}

/// Validated configuration plus the global flags.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub threads: usize,
    pub seeds: Seeds,
    pub graph: StructuralPriorGraph,
}

impl Context {
    pub fn new(cfg: RunConfig, out: PathBuf, threads: usize) -> Result<Self, ConfigError> {
        cfg.validate()?;
        if threads == 0 {
            return Err(ConfigError::Schema {
                key: "SLICK_THREADS".into(),
                reason: "must be at least 1".into(),
            });
        }
        let graph = make_graph(&cfg.data.taxonomy, &Layout::canonical()).map_err(|e| ConfigError::Schema {
            key: "data.taxonomy".into(),
            reason: e.to_string(),
        })?;
        Ok(Self {
            seeds: Seeds::new(cfg.seed),
            cfg,
            out,
            threads,
            graph,
        })
    }

    pub fn from_cli(cli: &Cli) -> Result<Self, ConfigError> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Command::Bench(b) = &cli.command {
            if !b.sizes.is_empty() {
                cfg.bench.sizes = b.sizes.clone();
            }
            if let Some(r) = b.runs {
                cfg.bench.runs = r;
            }
        }
        Self::new(cfg, cli.out.clone(), cli.threads)
    }

    fn manifest_path(&self) -> PathBuf {
        self.out.join("run.json")
    }

    /// Creates the output directory and records `command` in the run
    /// manifest. A directory holding a run with another config is refused.
    pub fn record(&self, command: &str) -> anyhow::Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.manifest_path();
        let hash = self.cfg.hash();
        let mut commands = Vec::new();
        if path.exists() {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let old: RunManifest =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if old.config_hash != hash {
                bail!(
                    "{} belongs to a run with config hash {}, this run has {}; use a fresh --out",
                    self.out.display(),
                    old.config_hash,
                    hash
                );
            }
            commands = old.commands;
        }
        if !commands.iter().any(|c| c == command) {
            commands.push(command.to_string());
        }
        let versions = [
            ("slick-cli", env!("CARGO_PKG_VERSION").to_string()),
            ("slick-core", slick_core::VERSION.to_string()),
            ("slkt-format", slkt::VERSION.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let m = RunManifest {
            config_hash: hash,
            versions,
            seeds: self.seeds.clone(),
            threads: self.threads,
            commands,
            config: self.cfg.clone(),
        };
        fs::write(&path, serde_json::to_string_pretty(&m)?).with_context(|| format!("writing {}", path.display()))
    }

    fn data_root<'a>(&'a self, flag: Option<&'a Path>) -> Option<&'a Path> {
        flag.or(self.cfg.data.path.as_deref())
    }

    /// The named split (`train` or `eval`): imported from the dataset root
    /// when one is given, generated from its derived seed otherwise.
    pub fn split(&self, root: Option<&Path>, name: &str) -> anyhow::Result<Dataset> {
        let d = &self.cfg.data;
        let ds = match self.data_root(root) {
            Some(r) => {
                let dir = r.join(name);
                import_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?
            }
            None => {
                let (seed, count) = match name {
                    "train" => (self.seeds.train_data, d.train_size),
                    "eval" => (self.seeds.eval_data, d.eval_size),
                    other => bail!("unknown split {other}"),
                };
                generate_dataset(seed, count, d.height, d.width, &d.taxonomy, d.difficulty)?
            }
        };
        if ds.taxonomy != d.taxonomy {
            bail!("dataset taxonomy {:?} differs from the configured one", ds.taxonomy);
        }
        Ok(ds)
    }

    fn check_classes(&self, what: &str, cfg: &ModelConfig) -> anyhow::Result<()> {
        let tax = &self.cfg.data.taxonomy;
        if cfg.num_part_classes != tax.parts.len() || cfg.num_damage_classes != tax.damages.len() {
            bail!(
                "{what} predicts {} parts and {} damages, the taxonomy has {} and {}",
                cfg.num_part_classes,
                cfg.num_damage_classes,
                tax.parts.len(),
                tax.damages.len()
            );
        }
        Ok(())
    }

    fn load_checkpoint(&self, what: &str, dir: &Path) -> anyhow::Result<Checkpoint> {
        let ck = Checkpoint::load(dir).with_context(|| format!("loading {what} checkpoint {}", dir.display()))?;
        self.check_classes(what, &ck.model.config)?;
        Ok(ck)
    }
}

/// Training log written next to each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub report: TrainReport,
    pub eval: Option<EvalReport>,
}

fn log_epoch(what: &str) -> impl FnMut(&EpochLog) + '_ {
    move |l: &EpochLog| {
        let terms: Vec<String> = l.terms.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        eprintln!(
            "{what} epoch {} loss={:.4} {} |g|={:.3} lr={:.2e}",
            l.epoch,
            l.loss,
            terms.join(" "),
            l.grad_norm,
            l.step_size
        );
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(ctx: &Context) -> anyhow::Result<()> {
    ctx.record("gen-data")?;
    let root = ctx.out.join("data");
    for name in ["train", "eval"] {
        let ds = ctx.split(None, name)?;
        export_dataset(&ds, root.join(name))?;
        eprintln!("{name}: {} scenes, checksum {:016x}", ds.samples.len(), ds.checksum());
    }
    Ok(())
}

/// Trains the teacher and writes `<out>/teacher`.
pub fn cmd_train_teacher(ctx: &Context, args: &TrainArgs) -> anyhow::Result<TrainLog> {
    ctx.record("train-teacher")?;
    let data = ctx.split(args.data.as_deref(), "train")?;
    let mut ck = Checkpoint::new(SlickModel::new(ctx.cfg.teacher.clone(), ctx.seeds.teacher_init)?);
    let settings = ctx.cfg.teacher_settings(ctx.threads);
    let report = train_teacher(&mut ck, &data, &ctx.graph, &settings, log_epoch("teacher"))?;
    let eval = if args.eval {
        let e = evaluate(&ck.model, &ctx.split(args.data.as_deref(), "eval")?, &ctx.graph, ctx.threads)?;
        eprintln!("teacher eval mean IoU {:.4}", e.mean_iou);
        Some(e)
    } else {
        None
    };
    let dir = ctx.out.join("teacher");
    ck.save(&dir)?;
    let log = TrainLog { report, eval };
    write_json(&dir.join("log.json"), &log)?;
    Ok(log)
}

/// Distills a student from the teacher checkpoint and writes `<out>/student`.
pub fn cmd_distill(ctx: &Context, args: &DistillArgs) -> anyhow::Result<TrainLog> {
    let teacher_dir = args.teacher.clone().unwrap_or_else(|| ctx.out.join("teacher"));
    let teacher = ctx.load_checkpoint("teacher", &teacher_dir)?;
    ctx.record("distill")?;
    let data = ctx.split(args.train.data.as_deref(), "train")?;
    let mut ck = Checkpoint::new(SlickModel::new(ctx.cfg.student.clone(), ctx.seeds.student_init)?);
    let settings = ctx.cfg.distill_settings(ctx.threads);
    let report = train_student(&mut ck, &teacher.model, &data, &ctx.graph, &settings, log_epoch("student"))?;
    let eval = if args.train.eval {
        let e = evaluate(&ck.model, &ctx.split(args.train.data.as_deref(), "eval")?, &ctx.graph, ctx.threads)?;
        eprintln!("student eval mean IoU {:.4}", e.mean_iou);
        Some(e)
    } else {
        None
    };
    let dir = ctx.out.join("student");
    ck.save(&dir)?;
    let log = TrainLog { report, eval };
    write_json(&dir.join("log.json"), &log)?;
    Ok(log)
}

/// Writes one `.slkp` per input and returns their paths.
pub fn cmd_infer(ctx: &Context, args: &InferArgs) -> anyhow::Result<Vec<PathBuf>> {
    let ck_dir = args.checkpoint.clone().unwrap_or_else(|| ctx.out.join("student"));
    let ck = ctx.load_checkpoint("model", &ck_dir)?;
    let table = match &args.table {
        Some(p) => Some(PartDamagePriorTable::load(p).with_context(|| format!("loading table {}", p.display()))?),
        None => None,
    };
    let inputs: Vec<(String, slick_core::tensor::Tensor, DamageHeatmap)> = match &args.image {
        Some(path) => {
            let image = slkt::load(path).with_context(|| format!("loading image {}", path.display()))?;
            let [h, w, 3] = *image.shape() else {
                bail!("image {} has shape {:?}, expected [H, W, 3]", path.display(), image.shape());
            };
            let heat = match &args.heatmap {
                Some(hp) => DamageHeatmap::new(slkt::load(hp).with_context(|| format!("loading {}", hp.display()))?)?,
                None => DamageHeatmap::zeros(h, w),
            };
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            vec![(stem, image, heat)]
        }
        None => {
            let ds = ctx.split(args.data.as_deref(), "eval")?;
            let n = args.limit.unwrap_or(usize::MAX).min(ds.samples.len());
            ds.samples
                .into_iter()
                .take(n)
                .enumerate()
                .map(|(i, s)| (format!("{i:06}"), s.image, s.heatmap))
                .collect()
        }
    };
    ctx.record("infer")?;
    let dir = ctx.out.join("predictions");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let pcfg = PredictConfig {
        nms: ctx.cfg.nms,
        bootstrap: ctx.cfg.bootstrap,
    };
    let tax = &ctx.cfg.data.taxonomy;
    let mut written = Vec::new();
    for (name, image, heat) in inputs {
        let instances = predict(&ck.model, &image, &heat, &ctx.graph, &pcfg, table.as_ref())?;
        let file = PredictionFile {
            parts: tax.parts.clone(),
            damages: tax.damages.clone(),
            image_size: [image.shape()[0], image.shape()[1]],
            instances,
        };
        let path = dir.join(format!("{name}.slkp"));
        file.save(&path).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    eprintln!("wrote {} prediction files to {}", written.len(), dir.display());
    Ok(written)
}

pub fn cmd_calibrate(ctx: &Context, args: &CalibrateArgs) -> anyhow::Result<PartDamagePriorTable> {
    if !(args.alpha >= 0.0 && args.alpha.is_finite()) {
        return Err(ConfigError::Schema {
            key: "--alpha".into(),
            reason: format!("must be a finite non-negative number, got {}", args.alpha),
        }
        .into());
    }
    let ds = ctx.split(args.data.as_deref(), "train")?;
    ctx.record("calibrate")?;
    let tax = &ds.taxonomy;
    let t = build_table(&ds.annotations(), tax.parts.clone(), tax.damages.clone(), args.alpha)?;
    let path = ctx.out.join("calibration.json");
    t.save(&path).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(t)
}

pub fn cmd_bench(ctx: &Context, args: &BenchArgs) -> anyhow::Result<Vec<BenchReport>> {
    let model = |what: &str, dir: &Option<PathBuf>, cfg: &ModelConfig, seed: u64| -> anyhow::Result<SlickModel> {
        match dir {
            Some(d) => Ok(ctx.load_checkpoint(what, d)?.model),
            None => Ok(SlickModel::new(cfg.clone(), seed)?),
        }
    };
    let teacher = model("teacher", &args.teacher, &ctx.cfg.teacher, ctx.seeds.teacher_init)?;
    let student = model("student", &args.student, &ctx.cfg.student, ctx.seeds.student_init)?;
    let min = teacher.config.min_input_side().max(student.config.min_input_side());
    if let Some(&s) = ctx.cfg.bench.sizes.iter().find(|&&s| s < min) {
        bail!("bench size {s} is below the models' minimum input side {min}");
    }
    ctx.record("bench")?;
    let pcfg = PredictConfig {
        nms: ctx.cfg.nms,
        bootstrap: ctx.cfg.bootstrap,
    };
    let b = &ctx.cfg.bench;
    let reports = b
        .sizes
        .iter()
        .map(|&side| bench_size(&teacher, &student, &ctx.graph, &pcfg, side, b.warmup, b.runs, ctx.seeds.bench_input))
        .collect::<Result<Vec<_>, _>>()?;
    write_json(&ctx.out.join("bench.json"), &reports)?;
    print!("{}", table(&reports));
    Ok(reports)
}

pub fn cmd_verify(ctx: &Context) -> anyhow::Result<Vec<PropertyReport>> {
    ctx.record("verify")?;
    let reports = run_all(|r| println!("{r}"));
    write_json(&ctx.out.join("verify.json"), &reports)?;
    Ok(reports)
}

/// Runs the parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let ctx = Context::from_cli(cli)?;
    match &cli.command {
        Command::GenData => gen_data(&ctx)?,
        Command::TrainTeacher(a) => {
            cmd_train_teacher(&ctx, a)?;
        }
        Command::Distill(a) => {
            cmd_distill(&ctx, a)?;
        }
        Command::Infer(a) => {
            cmd_infer(&ctx, a)?;
        }
        Command::Calibrate(a) => {
            cmd_calibrate(&ctx, a)?;
        }
        Command::Bench(a) => {
            cmd_bench(&ctx, a)?;
        }
        Command::Verify => {
            let failed = cmd_verify(&ctx)?.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::Verify(failed));
            }
        }
    }
    Ok(())
}
