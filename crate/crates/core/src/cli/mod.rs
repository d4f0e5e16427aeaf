//! Command-line front end.

mod config;

pub use config::Settings;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::AugmentConfig;
use crate::boundary::{attack_batch, AttackConfig, AttackItem, DeeperConfig, IncludeFlags, ImageKind};
use crate::curate::{self, LabelSpace};
use crate::dataset::LabeledSet;
use crate::distill::{self, mix_seed, Ablation, RunLogs, TeacherAugment, TrainConfig};
use crate::error::{Error, Result};
use crate::geoshapes::{self, TaskSpec};
use crate::gradcore::{checkpoint, small_cnn, Mode, Model};
use crate::imageio;
use crate::par;
use crate::shaderforge::{self, FilterReason};

#[derive(Parser, Debug)]
#[command(name = "bdkd", version, about = "Data-free distillation with shader images and boundary attacks")]
pub struct Cli {
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// `key=value` settings file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Start from full-scale defaults instead of the desk-scale ones.
    #[arg(long, global = true)]
    pub paper_scale: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render and filter a shader corpus.
    GenCorpus(GenCorpusArgs),
    /// Write the built-in shapes task as image directories.
    GenTask(GenTaskArgs),
    /// Train a teacher classifier.
    TrainTeacher(TrainTeacherArgs),
    /// Assign corpus images to teacher-complement targets.
    Curate(CurateArgs),
    /// Distill the teacher into fresh students.
    Distill(Box<DistillArgs>),
    /// Report a checkpoint's test accuracy.
    Eval(EvalArgs),
    /// Dump boundary pairs for a few KD examples as PNGs.
    AttackViz(AttackVizArgs),
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// Also write lossless f32 sidecars.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Args, Debug, Default)]
pub struct TaskArgs {
    /// Task directory with train/val/test subdirectories; the built-in
    /// shapes task is generated when absent.
    #[arg(long)]
    pub task: Option<PathBuf>,
    #[arg(long)]
    pub task_seed: Option<u64>,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenTaskArgs {
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub val_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainTeacherArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// Comma-separated conv widths, e.g. `16,32,64`.
    #[arg(long)]
    pub channels: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct CurateArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub examples_per_class: Option<usize>,
    #[arg(long)]
    pub allow_replacement: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub kd_manifest: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub no_border_attack: bool,
    #[arg(long)]
    pub no_deeper_attack: bool,
    #[arg(long)]
    pub no_pre_success: bool,
    #[arg(long)]
    pub no_filters: bool,
    #[arg(long)]
    pub pgd_init: bool,
    #[arg(long)]
    pub attack_eps: Option<f32>,
    #[arg(long)]
    pub softmax_threshold: Option<f32>,
    #[arg(long)]
    pub aug_level: Option<String>,
    #[arg(long)]
    pub no_mixup: bool,
    #[arg(long)]
    pub attack_include_normal_mixup: bool,
    #[arg(long)]
    pub loss_include_all: bool,
    /// Use only the first N manifest examples of each class.
    #[arg(long)]
    pub examples_per_class: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub tau: Option<f32>,
    #[arg(long)]
    pub student_channels: Option<String>,
    /// Comma-separated trial seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Write boundary-pair PNGs for the first KD examples here.
    #[arg(long)]
    pub dump_pairs: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
}

#[derive(Args, Debug)]
pub struct AttackVizArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub kd_manifest: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Every setting with its desk-scale (or full-scale) default.
pub fn defaults(paper_scale: bool) -> Vec<(&'static str, String)> {
    let aug = AugmentConfig::default();
    let atk = AttackConfig::default();
    let deep = DeeperConfig::default();
    let ab = Ablation::default();
    let (size, teacher_epochs, teacher_batch, teacher_lr, distill_epochs, distill_batch, distill_lr, pad) =
        if paper_scale {
            (32, 400, 256, 0.1, 400, 128, 0.1, 4)
        } else {
            (DESK_SIZE, 40, 128, 0.2, DESK_DISTILL_EPOCHS, DESK_DISTILL_BATCH, DESK_DISTILL_LR, 2)
        };
    let (corpus, per_class) = if paper_scale {
        (25_000, 2_500)
    } else {
        (DESK_CORPUS, DESK_EXAMPLES_PER_CLASS)
    };
    let s = |v: &dyn std::fmt::Display| v.to_string();
    vec![
        ("seed", s(&1)),
        ("task.size", s(&size)),
        ("task.seed", s(&0)),
        ("task.train_per_class", s(&500)),
        ("task.val_per_class", s(&100)),
        ("task.test_per_class", s(&200)),
        ("corpus.count", s(&corpus)),
        ("corpus.size", s(&size)),
        ("corpus.max_depth", s(&12)),
        ("corpus.raw", s(&false)),
        ("model.channels", "16,32,64".into()),
        ("teacher.epochs", s(&teacher_epochs)),
        ("teacher.batch_size", s(&teacher_batch)),
        ("teacher.lr", s(&teacher_lr)),
        ("teacher.momentum", s(&0.9)),
        ("teacher.weight_decay", s(&1e-4)),
        ("teacher.rand_n", s(&2)),
        ("teacher.rand_m", s(&14)),
        ("teacher.pad", s(&pad)),
        ("teacher.val_fraction", s(&0.1)),
        ("curate.examples_per_class", s(&per_class)),
        ("curate.allow_replacement", s(&false)),
        ("distill.epochs", s(&distill_epochs)),
        ("distill.batch_size", s(&distill_batch)),
        ("distill.lr", s(&distill_lr)),
        ("distill.momentum", s(&0.9)),
        ("distill.weight_decay", s(&1e-4)),
        ("distill.tau", s(&20)),
        ("distill.seeds", "1".into()),
        ("distill.student_channels", "16,32,64".into()),
        ("distill.examples_per_class", s(&0)),
        ("augment.level", aug.level.as_str().into()),
        ("augment.rand_n", s(&aug.rand_n)),
        ("augment.rand_m", s(&aug.rand_m)),
        ("augment.pad", s(&pad)),
        ("augment.p_flip", s(&aug.p_flip)),
        ("augment.p_invert", s(&aug.p_invert)),
        ("augment.elastic_alpha", s(&aug.elastic_alpha)),
        ("augment.elastic_sigma", s(&aug.elastic_sigma)),
        ("augment.mixup", s(&aug.mixup)),
        ("attack.eps", s(&atk.epsilon)),
        ("attack.alpha0", s(&atk.alpha0)),
        ("attack.max_iters", s(&atk.max_iters)),
        ("attack.softmax_threshold", s(&atk.softmax_threshold)),
        ("attack.bold_up", s(&atk.bold_up)),
        ("attack.bold_down", s(&atk.bold_down)),
        ("attack.alpha_min", s(&atk.alpha_min)),
        ("attack.pgd_init", s(&atk.pgd_init)),
        ("deeper.eps", s(&deep.epsilon)),
        ("deeper.alpha", s(&deep.alpha)),
        ("deeper.iters", s(&deep.iters)),
        ("ablation.border_attack", s(&ab.use_border_attack)),
        ("ablation.deeper_attack", s(&ab.use_deeper_attack)),
        ("ablation.pre_success", s(&ab.use_pre_success)),
        ("ablation.filters", s(&ab.use_filters)),
        ("ablation.attack_normal_mixup", s(&ab.attack_on_normal_and_mixup)),
        ("ablation.loss_all", s(&ab.loss_on_all_example_kinds)),
    ]
}

pub const DESK_SIZE: usize = 16;
pub const DESK_CORPUS: usize = 8000;
pub const DESK_EXAMPLES_PER_CLASS: usize = 200;
pub const DESK_DISTILL_EPOCHS: usize = 60;
pub const DESK_DISTILL_BATCH: usize = 32;
pub const DESK_DISTILL_LR: f32 = 0.03;

/// Parse arguments, run, and map the outcome to an exit code:
/// 0 success, 1 runtime failure, 2 usage error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Some(n) = std::env::var("BDKD_THREADS").ok().and_then(|v| v.parse().ok()) {
        par::init_threads(n);
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(Error::Config(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Resolve settings for the chosen command: defaults, config file, flags.
pub fn resolve(cli: &Cli) -> Result<Settings> {
    let mut s = Settings::from_defaults(&defaults(cli.paper_scale));
    if let Some(path) = &cli.config {
        s.apply_file(path)?;
    }
    let task_flags = |s: &mut Settings, t: &TaskArgs| -> Result<()> {
        s.flag("task.seed", t.task_seed)?;
        s.flag("task.size", t.size)
    };
    match &cli.command {
        Command::GenCorpus(a) => {
            s.flag("corpus.count", a.count)?;
            s.flag("corpus.size", a.size)?;
            s.flag("seed", a.seed)?;
            s.flag("corpus.max_depth", a.max_depth)?;
            s.switch_on("corpus.raw", a.raw)?;
        }
        Command::GenTask(a) => {
            s.flag("task.size", a.size)?;
            s.flag("task.seed", a.seed)?;
            s.flag("task.train_per_class", a.train_per_class)?;
            s.flag("task.val_per_class", a.val_per_class)?;
            s.flag("task.test_per_class", a.test_per_class)?;
        }
        Command::TrainTeacher(a) => {
            task_flags(&mut s, &a.task)?;
            s.flag("teacher.epochs", a.epochs)?;
            s.flag("teacher.batch_size", a.batch_size)?;
            s.flag("teacher.lr", a.lr)?;
            s.flag("model.channels", a.channels.as_ref())?;
            s.flag("seed", a.seed)?;
        }
        Command::Curate(a) => {
            s.flag("curate.examples_per_class", a.examples_per_class)?;
            s.switch_on("curate.allow_replacement", a.allow_replacement)?;
            s.flag("seed", a.seed)?;
        }
        Command::Distill(a) => {
            task_flags(&mut s, &a.task)?;
            s.switch_off("ablation.border_attack", a.no_border_attack)?;
            s.switch_off("ablation.deeper_attack", a.no_deeper_attack)?;
            s.switch_off("ablation.pre_success", a.no_pre_success)?;
            s.switch_off("ablation.filters", a.no_filters)?;
            s.switch_on("attack.pgd_init", a.pgd_init)?;
            s.flag("attack.eps", a.attack_eps)?;
            s.flag("attack.softmax_threshold", a.softmax_threshold)?;
            s.flag("augment.level", a.aug_level.as_ref())?;
            s.switch_off("augment.mixup", a.no_mixup)?;
            s.switch_on("ablation.attack_normal_mixup", a.attack_include_normal_mixup)?;
            s.switch_on("ablation.loss_all", a.loss_include_all)?;
            s.flag("distill.examples_per_class", a.examples_per_class)?;
            s.flag("distill.epochs", a.epochs)?;
            s.flag("distill.batch_size", a.batch_size)?;
            s.flag("distill.lr", a.lr)?;
            s.flag("distill.tau", a.tau)?;
            s.flag("distill.student_channels", a.student_channels.as_ref())?;
            s.flag("distill.seeds", a.seeds.as_ref())?;
        }
        Command::Eval(a) => task_flags(&mut s, &a.task)?,
        Command::AttackViz(a) => s.flag("seed", a.seed)?,
    }
    Ok(s)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenCorpus(_) => "gen-corpus",
        Command::GenTask(_) => "gen-task",
        Command::TrainTeacher(_) => "train-teacher",
        Command::Curate(_) => "curate",
        Command::Distill(_) => "distill",
        Command::Eval(_) => "eval",
        Command::AttackViz(_) => "attack-viz",
    }
}

fn write_run_summary(out: &Path, command: &str, s: &Settings) -> Result<()> {
    let config: serde_json::Map<String, serde_json::Value> = s
        .iter()
        .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.to_string())))
        .collect();
    let doc = serde_json::json!({ "command": command, "config": config });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out.join("run.json"), text + "\n")?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let s = resolve(cli)?;
    fs::create_dir_all(&cli.out)
        .map_err(|e| usage(format!("cannot create output dir {}: {e}", cli.out.display())))?;
    write_run_summary(&cli.out, command_name(&cli.command), &s)?;
    match &cli.command {
        Command::GenCorpus(_) => gen_corpus(&cli.out, &s),
        Command::GenTask(_) => gen_task(&cli.out, &s),
        Command::TrainTeacher(a) => train_teacher(&cli.out, &s, &a.task),
        Command::Curate(a) => curate_cmd(&cli.out, &s, a),
        Command::Distill(a) => distill_cmd(&cli.out, &s, a),
        Command::Eval(a) => eval_cmd(&s, a),
        Command::AttackViz(a) => attack_viz(&cli.out, &s, &a.teacher, &a.corpus, &a.kd_manifest, a.count),
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed))
}

fn gen_corpus(out: &Path, s: &Settings) -> Result<()> {
    let count: usize = s.get("corpus.count")?;
    let size: usize = s.get("corpus.size")?;
    let depth: usize = s.get("corpus.max_depth")?;
    if count == 0 || size == 0 || depth == 0 {
        return Err(usage("--count, --size and --max-depth must be at least 1"));
    }
    let mut rng = rng_for(s.get("seed")?);
    let corpus = shaderforge::build_corpus(&mut rng, count, size, size, depth)?;
    shaderforge::write_corpus(&out.join("corpus"), &corpus, s.get("corpus.raw")?)?;
    let st = corpus.stats;
    println!("kept {} of {} attempts", st.kept, st.attempted);
    for (reason, n) in [
        (FilterReason::Constant, st.constant),
        (FilterReason::TwoColor, st.two_color),
        (FilterReason::Sparse, st.sparse),
    ] {
        println!("discarded {}: {n}", reason.as_str());
    }
    Ok(())
}

fn task_spec(s: &Settings) -> Result<TaskSpec> {
    Ok(TaskSpec {
        size: s.get("task.size")?,
        train_per_class: s.get("task.train_per_class")?,
        val_per_class: s.get("task.val_per_class")?,
        test_per_class: s.get("task.test_per_class")?,
        seed: s.get("task.seed")?,
    })
}

fn gen_task(out: &Path, s: &Settings) -> Result<()> {
    let spec = task_spec(s)?;
    if spec.size == 0 {
        return Err(usage("--size must be at least 1"));
    }
    let splits = geoshapes::generate(&spec);
    for (name, set) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        set.write_dir(&out.join(name))?;
        println!("{name}: {} images", set.len());
    }
    Ok(())
}

/// Train/val/test sets from `--task DIR` or the built-in generator.
fn load_task(s: &Settings, t: &TaskArgs) -> Result<(LabeledSet, LabeledSet, LabeledSet)> {
    match &t.task {
        None => {
            let sp = geoshapes::generate(&task_spec(s)?);
            Ok((sp.train, sp.val, sp.test))
        }
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("task directory {} not found", dir.display()),
                )));
            }
            let train = LabeledSet::read_dir(&dir.join("train"))?;
            let test = LabeledSet::read_dir(&dir.join("test"))?;
            let val_dir = dir.join("val");
            let (train, val) = if val_dir.is_dir() {
                (train, LabeledSet::read_dir(&val_dir)?)
            } else {
                let mut rng = rng_for(s.get("seed")?);
                train.split_per_class(s.get("teacher.val_fraction")?, &mut rng)
            };
            Ok((train, val, test))
        }
    }
}

fn parse_channels(s: &Settings, key: &str) -> Result<Vec<usize>> {
    let ch: Vec<usize> = s.list(key)?;
    if ch.is_empty() || ch.contains(&0) {
        return Err(usage(format!("`{key}` needs positive widths")));
    }
    Ok(ch)
}

fn train_teacher(out: &Path, s: &Settings, task: &TaskArgs) -> Result<()> {
    let (train, val, test) = load_task(s, task)?;
    let classes = train.num_classes();
    let shape = train.images.first().ok_or_else(|| usage("empty training set"))?.shape().to_vec();
    let mut rng = rng_for(s.get("seed")?);
    let model = Model::new([shape[0], shape[1], shape[2]], small_cnn(&parse_channels(s, "model.channels")?, classes), &mut rng)?;
    let cfg = TrainConfig {
        epochs: s.get("teacher.epochs")?,
        batch_size: s.get("teacher.batch_size")?,
        lr0: s.get("teacher.lr")?,
        momentum: s.get("teacher.momentum")?,
        weight_decay: s.get("teacher.weight_decay")?,
        ..Default::default()
    };
    if cfg.batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    let aug = TeacherAugment {
        rand_n: s.get("teacher.rand_n")?,
        rand_m: s.get("teacher.rand_m")?,
        pad: s.get("teacher.pad")?,
    };
    let mut logs = RunLogs::create(out, false)?;
    let teacher = distill::train_teacher(&train, &val, model, &cfg, &aug, &mut rng, &mut |row| {
        log::info!(
            "epoch {} loss {:.4} val {:.4}",
            row.epoch,
            row.train_loss,
            row.eval_accuracy.unwrap_or(f64::NAN)
        );
        logs.record(row, &[])
    })?;
    checkpoint::save(&teacher, &out.join("teacher.bdkd"))?;
    println!("test accuracy {:.4}", distill::evaluate(&teacher, &test)?);
    Ok(())
}

fn load_corpus_images(dir: &Path) -> Result<Vec<crate::gradcore::Tensor>> {
    if !dir.join("manifest.tsv").is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no corpus manifest in {}", dir.display()),
        )));
    }
    Ok(shaderforge::read_corpus(dir)?.0)
}

fn curate_cmd(out: &Path, s: &Settings, a: &CurateArgs) -> Result<()> {
    let teacher = checkpoint::load(&a.teacher)?;
    let corpus = load_corpus_images(&a.corpus)?;
    let n: usize = s.get("curate.examples_per_class")?;
    let classes = teacher.num_classes();
    let preds = curate::predict_all(&teacher, &corpus, 256)?;
    let labels = LabelSpace::new(classes)?;
    let mut rng = rng_for(s.get("seed")?);
    let kd = curate::build_kd_dataset(
        &corpus,
        &preds,
        &labels,
        &vec![n; classes],
        s.get("curate.allow_replacement")?,
        &mut rng,
    )?;
    curate::write_kd_manifest(&kd, &out.join("kd_manifest.tsv"))?;
    let report = curate::verify_dataset(&teacher, &kd)?;
    for (c, count) in report.histogram.iter().enumerate() {
        println!("class {c}: {count}");
    }
    println!(
        "verification {}: {} violation(s)",
        if report.passed() { "passed" } else { "FAILED" },
        report.violations.len()
    );
    if report.passed() {
        Ok(())
    } else {
        Err(crate::error::contract("KD dataset failed verification"))
    }
}

fn augment_config(s: &Settings) -> Result<AugmentConfig> {
    let cfg = AugmentConfig {
        level: s.raw("augment.level").parse()?,
        rand_n: s.get("augment.rand_n")?,
        rand_m: s.get("augment.rand_m")?,
        pad: s.get("augment.pad")?,
        p_flip: s.get("augment.p_flip")?,
        p_invert: s.get("augment.p_invert")?,
        elastic_alpha: s.get("augment.elastic_alpha")?,
        elastic_sigma: s.get("augment.elastic_sigma")?,
        mixup: s.get("augment.mixup")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn attack_config(s: &Settings) -> Result<(AttackConfig, DeeperConfig)> {
    let atk = AttackConfig {
        epsilon: s.get("attack.eps")?,
        alpha0: s.get("attack.alpha0")?,
        max_iters: s.get("attack.max_iters")?,
        softmax_threshold: s.get("attack.softmax_threshold")?,
        bold_up: s.get("attack.bold_up")?,
        bold_down: s.get("attack.bold_down")?,
        alpha_min: s.get("attack.alpha_min")?,
        pgd_init: s.get("attack.pgd_init")?,
    };
    atk.validate()?;
    let deep = DeeperConfig {
        epsilon: s.get("deeper.eps")?,
        alpha: s.get("deeper.alpha")?,
        iters: s.get("deeper.iters")?,
    };
    if !(deep.epsilon > 0.0) {
        return Err(usage("deeper.eps must be positive"));
    }
    Ok((atk, deep))
}

fn load_kd(s: &Settings, teacher: &Model, corpus: &Path, manifest: &Path) -> Result<curate::KdDataset> {
    let images = load_corpus_images(corpus)?;
    let mut kd = curate::read_kd_manifest(manifest, &images, teacher.num_classes())?;
    let cap: usize = s.get("distill.examples_per_class")?;
    if cap > 0 {
        let mut seen = vec![0usize; kd.num_classes()];
        kd.examples.retain(|e| {
            seen[e.target] += 1;
            seen[e.target] <= cap
        });
        for c in kd.per_class_count.iter_mut() {
            *c = (*c).min(cap);
        }
    }
    Ok(kd)
}

fn distill_cmd(out: &Path, s: &Settings, a: &DistillArgs) -> Result<()> {
    let teacher = checkpoint::load(&a.teacher)?;
    let kd = load_kd(s, &teacher, &a.corpus, &a.kd_manifest)?;
    let (_, _, test) = load_task(s, &a.task)?;
    let aug = augment_config(s)?;
    let (atk, deep) = attack_config(s)?;
    let ablation = Ablation {
        use_border_attack: s.get("ablation.border_attack")?,
        use_deeper_attack: s.get("ablation.deeper_attack")?,
        use_pre_success: s.get("ablation.pre_success")?,
        use_filters: s.get("ablation.filters")?,
        attack_on_normal_and_mixup: s.get("ablation.attack_normal_mixup")?,
        loss_on_all_example_kinds: s.get("ablation.loss_all")?,
    };
    let seeds: Vec<u64> = s.list("distill.seeds")?;
    if seeds.is_empty() {
        return Err(usage("--seeds needs at least one value"));
    }
    let channels = parse_channels(s, "distill.student_channels")?;
    if let Some(dir) = &a.dump_pairs {
        dump_pairs(dir, &teacher, &kd, &atk, &deep, 8, &mut rng_for(s.get("seed")?))?;
    }
    let mut trials = fs::File::create(out.join("trials.csv"))?;
    writeln!(trials, "seed,accuracy")?;
    let (accs, mean, std) = distill::run_trials(&seeds, |eff| {
        let seed = seeds[trial_index(&seeds, eff)];
        let dir = out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(eff);
        let student = Model::new(teacher.input_shape(), small_cnn(&channels, teacher.num_classes()), &mut rng)?;
        let cfg = TrainConfig {
            epochs: s.get("distill.epochs")?,
            batch_size: s.get("distill.batch_size")?,
            lr0: s.get("distill.lr")?,
            momentum: s.get("distill.momentum")?,
            weight_decay: s.get("distill.weight_decay")?,
            tau: s.get("distill.tau")?,
            seed,
            ablation,
        };
        let mut logs = RunLogs::create(&dir, true)?;
        let (student, summary) = distill::distill(
            &teacher,
            student,
            &kd,
            &cfg,
            &aug,
            &atk,
            &deep,
            Some(&test),
            &mut rng,
            &mut |row, attacks| {
                log::info!(
                    "seed {seed} epoch {} loss {:.5} acc {:.4} attack success {:.3}",
                    row.epoch,
                    row.train_loss,
                    row.eval_accuracy.unwrap_or(f64::NAN),
                    row.attack_success_rate
                );
                logs.record(row, attacks)
            },
        )?;
        if summary.skipped_batches > 0 {
            log::warn!("seed {seed}: {} batch(es) had no surviving examples", summary.skipped_batches);
        }
        checkpoint::save(&student, &dir.join("student.bdkd"))?;
        let acc = distill::evaluate(&student, &test)?;
        writeln!(trials, "{seed},{acc:.6}")?;
        println!("seed {seed}: accuracy {acc:.4}");
        Ok(acc)
    })?;
    println!(
        "accuracy {:.4} ± {:.4} over {} seed(s)",
        mean,
        std,
        accs.len()
    );
    Ok(())
}

/// Position of the seed whose mixed value is `eff` (trials run in order).
fn trial_index(seeds: &[u64], eff: u64) -> usize {
    seeds.iter().position(|&s| mix_seed(s) == eff).unwrap_or(0)
}

fn eval_cmd(s: &Settings, a: &EvalArgs) -> Result<()> {
    let model = checkpoint::load(&a.model)?;
    let test = match &a.task {
        TaskArgs { task: Some(dir), .. } if !dir.join("test").is_dir() => LabeledSet::read_dir(dir)?,
        t => load_task(s, t)?.2,
    };
    println!("{:.4}", distill::evaluate(&model, &test)?);
    Ok(())
}

fn dump_pairs<R: rand::Rng>(
    dir: &Path,
    teacher: &Model,
    kd: &curate::KdDataset,
    atk: &AttackConfig,
    deep: &DeeperConfig,
    count: usize,
    rng: &mut R,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let items: Vec<AttackItem> = kd
        .examples
        .iter()
        .take(count)
        .map(|e| AttackItem {
            image: e.image.clone(),
            target: e.target,
            pre_mixup: None,
        })
        .collect();
    let out = attack_batch(teacher, &items, atk, deep, IncludeFlags::default(), rng)?;
    let mut tsv = fs::File::create(dir.join("pairs.tsv"))?;
    writeln!(tsv, "pair\ttarget\tpre_pred\tpost_pred\tpre_conf\tpost_conf")?;
    for (i, p) in out.pairs.iter().enumerate() {
        writeln!(
            tsv,
            "{i}\t{}\t{}\t{}\t{:.4}\t{:.4}",
            p.target, p.pre_pred, p.post_pred, p.pre_conf, p.post_conf
        )?;
        imageio::write_png(&p.origin, &dir.join(format!("{i:03}_origin.png")))?;
    }
    let mut pair = 0;
    let mut seen_post = false;
    for (img, kind) in out.images.iter().zip(&out.kinds) {
        let name = match kind {
            ImageKind::Pre => "pre",
            ImageKind::Post => "post",
            ImageKind::DeeperPre => "deeper_pre",
            ImageKind::DeeperPost => "deeper_post",
            _ => continue,
        };
        imageio::write_png(img, &dir.join(format!("{:03}_{name}.png", pair_index(&mut pair, &mut seen_post, *kind))))?;
    }
    println!("{} of {} attacks produced pairs", out.pairs.len(), items.len());
    Ok(())
}

/// Images arrive as all pre/post pairs then all deeper pairs; map each to
/// its pair number.
fn pair_index(counter: &mut usize, seen_post: &mut bool, kind: ImageKind) -> usize {
    if kind == ImageKind::DeeperPre && !*seen_post {
        *counter = 0;
        *seen_post = true;
    }
    let i = *counter;
    if matches!(kind, ImageKind::Post | ImageKind::DeeperPost) {
        *counter += 1;
    }
    i
}

fn attack_viz(out: &Path, s: &Settings, teacher: &Path, corpus: &Path, manifest: &Path, count: usize) -> Result<()> {
    let teacher = checkpoint::load(teacher)?;
    let kd = load_kd(s, &teacher, corpus, manifest)?;
    let (atk, deep) = attack_config(s)?;
    if teacher.mode() != Mode::Eval {
        return Err(crate::error::contract("teacher checkpoint must load in eval mode"));
    }
    dump_pairs(&out.join("pairs"), &teacher, &kd, &atk, &deep, count, &mut rng_for(s.get("seed")?))
}
