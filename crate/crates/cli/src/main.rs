use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use guidance_core::data::{write_csv, Split};
use guidance_core::eval::{accuracy, sweep, SweepAxis, SweepGrid};
use guidance_core::guidance::compute_teacher_soft_targets;
use guidance_core::pipeline::{
    finetune_clean, run_variant, train_student_with_cache, train_teacher, DataRecipe, RunReport, SourceKind,
    TrainConfig, Variant,
};
use guidance_core::{Dataset, GuidanceCache, Model};

const THREADS_VAR: &str = "GUIDANCE_LEARN_THREADS";
const MARKER: &str = ".incomplete";

/// Two-stage guidance learning on noisy labels.
#[derive(Debug, Parser)]
#[command(name = "guidance-learn", version)]
struct Cli {
    /// Log more (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Flat JSON config of training and data keys, or a previous report.json.
    #[arg(long)]
    config: PathBuf,
    /// Run directory, created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite an existing report in the run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the configured dataset and export it with its split manifest.
    MakeData(RunArgs),
    /// Split and corrupt an existing CSV dataset.
    InjectNoise {
        #[command(flatten)]
        run: RunArgs,
        /// CSV with clean labels (or a true_label column).
        #[arg(long)]
        data: PathBuf,
    },
    /// Stage 1: cross-entropy on all training data.
    TrainTeacher(RunArgs),
    /// Stage 2: guidance student initialized from the teacher.
    TrainStudent {
        #[command(flatten)]
        run: RunArgs,
        /// Teacher checkpoint; defaults to teacher.ckpt in the run directory.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Cross-entropy on the clean subset from a trained model.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Model to fine-tune; defaults to student.ckpt in the run directory.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train one supervision variant end to end.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        variant: VariantArg,
    },
    /// Vary one hyperparameter over a grid of values and seeds.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Comma-separated replicate seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Print the accuracy of a checkpoint on one split of the configured dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    #[value(name = "noisy_only")]
    NoisyOnly,
    #[value(name = "clean_only")]
    CleanOnly,
    #[value(name = "mixed")]
    Mixed,
    #[value(name = "guidance")]
    Guidance,
    #[value(name = "guidance_finetuned")]
    GuidanceFinetuned,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::NoisyOnly => Variant::NoisyOnly,
            VariantArg::CleanOnly => Variant::CleanOnly,
            VariantArg::Mixed => Variant::Mixed,
            VariantArg::Guidance => Variant::Guidance,
            VariantArg::GuidanceFinetuned => Variant::GuidanceFinetuned,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    #[value(name = "alpha")]
    Alpha,
    #[value(name = "beta")]
    Beta,
    #[value(name = "T")]
    T,
    #[value(name = "clean_fraction")]
    CleanFraction,
    #[value(name = "noise_rate")]
    NoiseRate,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Alpha => SweepAxis::Alpha,
            AxisArg::Beta => SweepAxis::Beta,
            AxisArg::T => SweepAxis::Temperature,
            AxisArg::CleanFraction => SweepAxis::CleanFraction,
            AxisArg::NoiseRate => SweepAxis::NoiseRate,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    #[value(name = "clean_train")]
    CleanTrain,
    #[value(name = "noisy_train")]
    NoisyTrain,
    #[value(name = "test")]
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::CleanTrain => Split::CleanTrain,
            SplitArg::NoisyTrain => Split::NoisyTrain,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Training and data settings read from one flat JSON object.
#[derive(Debug, Clone)]
struct Settings {
    train: TrainConfig,
    data: DataRecipe,
}

fn known_keys() -> Vec<String> {
    let mut keys = Vec::new();
    for v in [
        serde_json::to_value(TrainConfig::default()).expect("config serializes"),
        serde_json::to_value(DataRecipe::default()).expect("recipe serializes"),
    ] {
        if let Value::Object(map) = v {
            keys.extend(map.into_iter().map(|(k, _)| k));
        }
    }
    keys
}

fn load_settings(path: &Path, seed: Option<u64>) -> Result<Settings> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let value: Value =
        serde_json::from_str(&text).with_context(|| format!("malformed config {}", path.display()))?;
    let Value::Object(map) = &value else {
        bail!("config {} must be a JSON object", path.display());
    };
    let mut settings = if map.contains_key("stage") && map.contains_key("config") {
        // A report.json replays the run it describes.
        let report: RunReport = serde_json::from_value(value.clone())
            .with_context(|| format!("malformed report {}", path.display()))?;
        Settings { train: report.config, data: report.data.unwrap_or_default() }
    } else {
        let known = known_keys();
        let unknown: Vec<&str> = map.keys().filter(|k| !known.contains(k)).map(String::as_str).collect();
        if !unknown.is_empty() {
            bail!(
                "unknown config key(s) {} in {}; valid keys: {}",
                unknown.join(", "),
                path.display(),
                known.join(", ")
            );
        }
        Settings {
            train: serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?,
            data: serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?,
        }
    };
    if let Some(seed) = seed {
        settings.train.seed = seed;
    }
    settings.train.validate()?;
    settings.data.validate()?;
    Ok(settings)
}

impl Settings {
    fn seed(&self) -> u64 {
        self.train.seed
    }

    fn dataset(&self) -> Result<Dataset> {
        Ok(self.data.build::<f64>(self.seed())?)
    }

    fn flat_json(&self) -> Vec<u8> {
        let mut map = Map::new();
        for v in [
            serde_json::to_value(&self.train).expect("config serializes"),
            serde_json::to_value(&self.data).expect("recipe serializes"),
        ] {
            if let Value::Object(m) = v {
                map.extend(m);
            }
        }
        let mut bytes = serde_json::to_vec_pretty(&Value::Object(map)).expect("config serializes");
        bytes.push(b'\n');
        bytes
    }

    fn report(&self, mut report: RunReport) -> RunReport {
        report.data = Some(self.data.clone());
        report
    }
}

/// Run directory with an `.incomplete` marker held until the work succeeds.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn open(path: &Path, primary: &str, force: bool) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))?;
        let existing = path.join(primary);
        if existing.exists() {
            if !force {
                bail!("{} already exists; pass --force to overwrite", existing.display());
            }
            fs::remove_file(&existing).with_context(|| format!("cannot remove {}", existing.display()))?;
        }
        let marker = path.join(MARKER);
        fs::write(&marker, b"").with_context(|| format!("cannot write {}", marker.display()))?;
        Ok(Self { path: path.to_owned() })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, bytes).with_context(|| format!("cannot write {}", p.display()))
    }

    fn finish(self) -> Result<()> {
        let marker = self.file(MARKER);
        fs::remove_file(&marker).with_context(|| format!("cannot remove {}", marker.display()))
    }
}

fn start(run: &RunArgs, primary: &str) -> Result<(Settings, RunDir)> {
    let settings = load_settings(&run.config, run.seed)?;
    let dir = RunDir::open(&run.out, primary, run.force)?;
    dir.write("config.json", &settings.flat_json())?;
    Ok((settings, dir))
}

fn percent(acc: Option<f64>) -> String {
    acc.map_or_else(|| "n/a (no test split)".to_owned(), |a| format!("{:.2}%", 100.0 * a))
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("{THREADS_VAR} must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(1),
    }
}

fn export_data(settings: &Settings, dir: &RunDir, stage: &str) -> Result<String> {
    let ds = settings.dataset()?;
    write_csv(&ds, dir.file("dataset.csv"))?;
    settings.data.manifest(&ds, settings.seed()).save(dir.file("manifest.json"))?;
    settings.report(RunReport::new(stage, &settings.train)).save(dir.file("report.json"))?;
    let flips = ds.labels().iter().zip(ds.true_labels().unwrap_or(ds.labels())).filter(|(a, b)| a != b).count();
    Ok(format!(
        "{stage}: {} samples, {} clean / {} noisy / {} test, {flips} corrupted labels",
        ds.len(),
        ds.indices(Split::CleanTrain).len(),
        ds.indices(Split::NoisyTrain).len(),
        ds.indices(Split::Test).len()
    ))
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::MakeData(run) => {
            let (settings, dir) = start(&run, "report.json")?;
            let line = export_data(&settings, &dir, "make-data")?;
            dir.finish()?;
            Ok(line)
        }
        Command::InjectNoise { run, data } => {
            let (mut settings, dir) = start(&run, "report.json")?;
            settings.data.source = SourceKind::Csv;
            settings.data.data_path = Some(data.to_string_lossy().into_owned());
            dir.write("config.json", &settings.flat_json())?;
            let line = export_data(&settings, &dir, "inject-noise")?;
            dir.finish()?;
            Ok(line)
        }
        Command::TrainTeacher(run) => {
            let (settings, dir) = start(&run, "report.json")?;
            let ds = settings.dataset()?;
            settings.data.manifest(&ds, settings.seed()).save(dir.file("manifest.json"))?;
            let (teacher, report) = train_teacher(&ds, &settings.train)?;
            teacher.save(dir.file("teacher.ckpt"))?;
            let report = settings.report(report);
            report.save(dir.file("report.json"))?;
            dir.finish()?;
            Ok(format!("train-teacher: test accuracy {}", percent(report.final_test_accuracy)))
        }
        Command::TrainStudent { run, teacher } => {
            let (settings, dir) = start(&run, "report.json")?;
            let teacher_path = teacher.unwrap_or_else(|| dir.file("teacher.ckpt"));
            let teacher = Model::load(&teacher_path)
                .with_context(|| format!("no usable teacher at {}; run train-teacher first", teacher_path.display()))?;
            let ds = settings.dataset()?;
            settings.data.manifest(&ds, settings.seed()).save(dir.file("manifest.json"))?;
            let t = settings.train.temperature;
            let cache_path = dir.file("guidance_cache.bin");
            let cache = match GuidanceCache::load(&cache_path, &teacher.fingerprint(), t) {
                Ok(cache) => {
                    log::info!("reusing {}", cache_path.display());
                    cache
                }
                Err(e) => {
                    if cache_path.exists() {
                        log::info!("rebuilding guidance cache: {e}");
                    }
                    let cache = compute_teacher_soft_targets(&teacher, &ds, t)?;
                    cache.save(&cache_path)?;
                    cache
                }
            };
            let (student, report) = train_student_with_cache(&teacher, &ds, &settings.train, &cache, |_| {})?;
            student.save(dir.file("student.ckpt"))?;
            let report = settings.report(report);
            report.save(dir.file("report.json"))?;
            dir.finish()?;
            Ok(format!(
                "train-student: test accuracy {} (teacher {})",
                percent(report.final_test_accuracy),
                percent(report.stage_accuracies.get("teacher").copied())
            ))
        }
        Command::Finetune { run, model } => {
            let (settings, dir) = start(&run, "report.json")?;
            let model_path = model.unwrap_or_else(|| dir.file("student.ckpt"));
            let model = Model::load(&model_path)
                .with_context(|| format!("no usable model at {}", model_path.display()))?;
            let ds = settings.dataset()?;
            let (tuned, report) = finetune_clean(&model, &ds, &settings.train)?;
            tuned.save(dir.file("finetuned.ckpt"))?;
            let report = settings.report(report);
            report.save(dir.file("report.json"))?;
            dir.finish()?;
            Ok(format!("finetune: test accuracy {}", percent(report.final_test_accuracy)))
        }
        Command::Baseline { run, variant } => {
            let variant = Variant::from(variant);
            let (settings, dir) = start(&run, "report.json")?;
            let ds = settings.dataset()?;
            settings.data.manifest(&ds, settings.seed()).save(dir.file("manifest.json"))?;
            let outcome = run_variant(variant, &ds, &settings.train)?;
            if let Some(teacher) = &outcome.teacher {
                teacher.save(dir.file("teacher.ckpt"))?;
            }
            if let Some(student) = &outcome.student {
                student.save(dir.file("student.ckpt"))?;
            }
            if let Some(cache) = &outcome.cache {
                cache.save(dir.file("guidance_cache.bin"))?;
            }
            outcome.model.save(dir.file("model.ckpt"))?;
            let report = settings.report(outcome.report);
            report.save(dir.file("report.json"))?;
            dir.finish()?;
            Ok(format!("baseline {}: test accuracy {}", variant.name(), percent(report.final_test_accuracy)))
        }
        Command::Sweep { run, axis, values, seeds } => {
            let (settings, dir) = start(&run, "results.json")?;
            let seeds = if seeds.is_empty() { vec![settings.seed()] } else { seeds };
            let grid = SweepGrid { axis: axis.into(), values, base: settings.train.clone(), seeds };
            let result = sweep::<f64>(&grid, &settings.data, threads()?)?;
            result.write_to(&dir.path)?;
            dir.finish()?;
            let best = result
                .summary
                .iter()
                .max_by(|a, b| a.mean.total_cmp(&b.mean))
                .expect("nonempty grid");
            Ok(format!(
                "sweep {}: {} cells, best mean student accuracy {:.2}% at {}",
                grid.axis.name(),
                result.rows.len(),
                100.0 * best.mean,
                best.value
            ))
        }
        Command::Eval { model, config, seed, split } => {
            let settings = load_settings(&config, seed)?;
            let model = Model::load(&model).with_context(|| format!("cannot load {}", model.display()))?;
            let ds = settings.dataset()?;
            let split = Split::from(split);
            let acc = accuracy(&model, &ds, split)?;
            Ok(format!("{} accuracy {acc}", split_name(split)))
        }
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::CleanTrain => "clean_train",
        Split::NoisyTrain => "noisy_train",
        Split::Test => "test",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("guidance-learn").chain(args.iter().copied()))
    }

    #[test]
    fn parses_train_teacher() {
        let cli = parse(&["train-teacher", "--config", "c.json", "--out", "run1"]).unwrap();
        let Command::TrainTeacher(run) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(run.config, PathBuf::from("c.json"));
        assert_eq!(run.out, PathBuf::from("run1"));
        assert_eq!(run.seed, None);
        assert!(!run.force);
    }

    #[test]
    fn parses_sweep_lists() {
        let cli = parse(&[
            "sweep", "--config", "c.json", "--out", "s", "--axis", "T", "--values", "1,5,10", "--seeds", "0,1", "-vv",
        ])
        .unwrap();
        assert_eq!(cli.verbose, 2);
        let Command::Sweep { axis, values, seeds, .. } = cli.command else { panic!("wrong subcommand") };
        assert!(matches!(axis, AxisArg::T));
        assert_eq!(values, vec![1.0, 5.0, 10.0]);
        assert_eq!(seeds, vec![0, 1]);
    }

    #[test]
    fn rejects_bad_input() {
        let err = parse(&["baseline", "--variant", "bogus", "--config", "c", "--out", "o"]).unwrap_err();
        let text = err.to_string();
        for v in Variant::ALL {
            assert!(text.contains(v.name()), "{text}");
        }
        assert!(parse(&["train-teacher", "--config", "c.json"]).is_err());
        assert!(parse(&["train-teacher", "--config", "c", "--out", "o", "--bogus"]).is_err());
        assert!(parse(&["frobnicate"]).is_err());
        assert_eq!(parse(&["--help"]).unwrap_err().kind(), clap::error::ErrorKind::DisplayHelp);
    }

    #[test]
    fn every_config_key_is_known() {
        let keys = known_keys();
        for k in ["alpha", "beta", "temperature", "finetune_lr", "seed", "sigma", "pair_map", "data_path", "clean_fraction"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
    }
}
