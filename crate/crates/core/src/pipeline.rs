//! Training recipes: teacher, guidance student, clean fine-tuning and the
//! baseline variants that differ from them only in supervision.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    inject_noise, load_dataset, make_blobs, mixed_batch_iterator, shuffled_batches, split,
    DataManifest, DataSource, Dataset, NoiseModel, NoiseSpec, Split,
};
use crate::error::{Error, Result};
use crate::eval::accuracy_on;
use crate::guidance::{compute_teacher_soft_targets, GuidanceCache, StudentBatch, StudentObjective};
use crate::nn::{backward, sgd_step, LossSpec, LossTerms, ModelParams, OptState};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;

/// Hyperparameters of every training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    /// `(epoch, lr)` pairs; the rate at epoch `e` is the last entry with epoch <= e.
    pub teacher_lr_schedule: Vec<(usize, f64)>,
    pub student_lr_schedule: Vec<(usize, f64)>,
    /// Defaults to the first student rate divided by 10.
    pub finetune_lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub finetune_epochs: usize,
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.3,
            temperature: 5.0,
            teacher_lr_schedule: vec![(0, 1e-3), (10, 1e-4), (15, 1e-5), (20, 1e-6)],
            student_lr_schedule: vec![(0, 1e-4), (5, 1e-5), (8, 1e-6)],
            finetune_lr: None,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 64,
            teacher_epochs: 25,
            student_epochs: 11,
            finetune_epochs: 5,
            hidden_dims: vec![64],
            seed: 0,
        }
    }
}

/// Learning rate at `epoch` under a piecewise-constant schedule.
pub fn lr_at(schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule
        .iter()
        .take_while(|(e, _)| *e <= epoch)
        .last()
        .map_or(0.0, |&(_, lr)| lr)
}

fn check_schedule(name: &str, schedule: &[(usize, f64)]) -> Result<()> {
    match schedule.first() {
        Some((0, _)) => {}
        _ => {
            return Err(Error::Parameter(format!(
                "{name} must start at epoch 0"
            )))
        }
    }
    if schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Parameter(format!(
            "{name} epochs must be strictly increasing"
        )));
    }
    if schedule.iter().any(|&(_, lr)| !(lr >= 0.0) || !lr.is_finite()) {
        return Err(Error::Parameter(format!("{name} has a negative or non-finite rate")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        finite_nonneg("alpha", self.alpha)?;
        finite_nonneg("beta", self.beta)?;
        finite_nonneg("weight_decay", self.weight_decay)?;
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if let Some(lr) = self.finetune_lr {
            finite_nonneg("finetune_lr", lr)?;
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Parameter("hidden layer widths must be positive".into()));
        }
        check_schedule("teacher_lr_schedule", &self.teacher_lr_schedule)?;
        check_schedule("student_lr_schedule", &self.student_lr_schedule)
    }

    pub fn finetune_rate(&self) -> f64 {
        self.finetune_lr
            .unwrap_or_else(|| self.student_lr_schedule.first().map_or(0.0, |&(_, lr)| lr) / 10.0)
    }

    fn objective<S: Scalar>(&self) -> StudentObjective<S> {
        StudentObjective {
            alpha: S::lit(self.alpha),
            beta: S::lit(self.beta),
            temperature: S::lit(self.temperature),
        }
    }
}

/// Losses and evaluation after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_guidance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_clean: Option<f64>,
    /// `None` when the dataset has no test split.
    pub test_accuracy: Option<f64>,
}

/// Outcome of one training stage or baseline variant.
///
/// Wall time is reported but never serialized, so `report.json` depends only
/// on the configuration and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub variant: Option<Variant>,
    pub epochs: Vec<EpochRecord>,
    pub final_test_accuracy: Option<f64>,
    /// Test accuracy of intermediate models, e.g. the teacher of a student run.
    #[serde(default)]
    pub stage_accuracies: BTreeMap<String, f64>,
    pub config: TrainConfig,
    /// Dataset recipe, recorded by callers that build data from one.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub data: Option<DataRecipe>,
    pub checkpoints: BTreeMap<String, String>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn new(stage: &str, config: &TrainConfig) -> Self {
        Self {
            stage: stage.to_owned(),
            variant: None,
            epochs: Vec::new(),
            final_test_accuracy: None,
            stage_accuracies: BTreeMap::new(),
            config: config.clone(),
            data: None,
            checkpoints: BTreeMap::new(),
            wall_time_secs: 0.0,
        }
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("report serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn test_accuracy<S: Scalar>(model: &ModelParams<S>, dataset: &Dataset<S>) -> Result<Option<f64>> {
    let test = dataset.indices(Split::Test);
    if test.is_empty() {
        return Ok(None);
    }
    accuracy_on(model, dataset, &test).map(Some)
}

fn network_dims<S: Scalar>(dataset: &Dataset<S>, config: &TrainConfig) -> Vec<usize> {
    std::iter::once(dataset.dim())
        .chain(config.hidden_dims.iter().copied())
        .chain(std::iter::once(dataset.num_classes()))
        .collect()
}

/// Fresh network for `dataset` seeded from the run seed.
pub fn init_model<S: Scalar>(dataset: &Dataset<S>, config: &TrainConfig) -> Result<ModelParams<S>> {
    ModelParams::init(
        &network_dims(dataset, config),
        derive_seed(config.seed, &[stream::INIT]),
    )
}

/// Plain cross-entropy training on `indices` with their given labels.
fn train_cross_entropy<S: Scalar>(
    mut model: ModelParams<S>,
    dataset: &Dataset<S>,
    indices: &[usize],
    schedule: impl Fn(usize) -> f64,
    epochs: usize,
    config: &TrainConfig,
    stage: &str,
) -> Result<(ModelParams<S>, RunReport)> {
    let start = Instant::now();
    let mut report = RunReport::new(stage, config);
    let mut state = OptState::new(&model, S::lit(schedule(0)));
    let (momentum, decay) = (S::lit(config.momentum), S::lit(config.weight_decay));
    for epoch in 0..epochs {
        let lr = schedule(epoch);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in shuffled_batches(indices, config.batch_size, config.seed, epoch as u64) {
            let inputs = dataset.features().select_rows(&batch);
            let targets = dataset.one_hot_labels(&batch);
            let (terms, grads) = backward(&model, &inputs, &LossSpec::CrossEntropy { targets: &targets })?;
            sgd_step(&mut model, &grads, &mut state, S::lit(lr), momentum, decay)?;
            loss_sum += terms.total.as_f64();
            steps += 1;
        }
        let record = EpochRecord {
            epoch,
            lr,
            loss_total: loss_sum / steps.max(1) as f64,
            loss_guidance: None,
            loss_clean: None,
            test_accuracy: test_accuracy(&model, dataset)?,
        };
        log::debug!("{stage} epoch {epoch}: loss {:.5} acc {:?}", record.loss_total, record.test_accuracy);
        report.epochs.push(record);
    }
    report.final_test_accuracy = test_accuracy(&model, dataset)?;
    report.checkpoints.insert(stage.to_owned(), model.fingerprint());
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Cross-entropy training on all clean and noisy training samples.
pub fn train_teacher<S: Scalar>(dataset: &Dataset<S>, config: &TrainConfig) -> Result<(ModelParams<S>, RunReport)> {
    config.validate()?;
    let train = dataset.train_indices();
    if train.is_empty() {
        return Err(Error::Configuration("no training samples (clean or noisy)".into()));
    }
    let init = init_model(dataset, config)?;
    train_cross_entropy(
        init,
        dataset,
        &train,
        |e| lr_at(&config.teacher_lr_schedule, e),
        config.teacher_epochs,
        config,
        "teacher",
    )
}

/// Per-step trace handed to an observer of student training.
#[derive(Debug)]
pub struct StudentStep<'a, S> {
    pub epoch: usize,
    pub step: usize,
    pub terms: LossTerms<S>,
    pub params: &'a ModelParams<S>,
}

/// Multi-task student training from a copy of the teacher.
pub fn train_student<S: Scalar>(
    teacher: &ModelParams<S>,
    dataset: &Dataset<S>,
    config: &TrainConfig,
) -> Result<(ModelParams<S>, RunReport)> {
    config.validate()?;
    let cache = compute_teacher_soft_targets(teacher, dataset, S::lit(config.temperature))?;
    train_student_with_cache(teacher, dataset, config, &cache, |_| {})
}

/// [`train_student`] with a prebuilt guidance cache and a per-step observer.
pub fn train_student_with_cache<S: Scalar>(
    teacher: &ModelParams<S>,
    dataset: &Dataset<S>,
    config: &TrainConfig,
    cache: &GuidanceCache<S>,
    mut observe: impl FnMut(&StudentStep<'_, S>),
) -> Result<(ModelParams<S>, RunReport)> {
    config.validate()?;
    if teacher.input_dim() != dataset.dim() || teacher.num_classes() != dataset.num_classes() {
        return Err(Error::Shape(format!(
            "teacher maps {} -> {} but the dataset has {} features and {} classes",
            teacher.input_dim(),
            teacher.num_classes(),
            dataset.dim(),
            dataset.num_classes()
        )));
    }
    if dataset.indices(Split::CleanTrain).is_empty() {
        return Err(Error::Configuration(
            "student training needs a clean subset; use the noisy_only baseline instead".into(),
        ));
    }
    let teacher_fp = teacher.fingerprint();
    if cache.teacher_fingerprint() != teacher_fp {
        return Err(Error::Consistency(
            "guidance cache was built from a different teacher".into(),
        ));
    }
    let objective = config.objective::<S>();
    let start = Instant::now();
    let mut report = RunReport::new("student", config);
    report.checkpoints.insert("teacher".into(), teacher_fp);
    if let Some(acc) = test_accuracy(teacher, dataset)? {
        report.stage_accuracies.insert("teacher".into(), acc);
    }

    let mut student = teacher.clone();
    let mut state = OptState::new(&student, S::lit(lr_at(&config.student_lr_schedule, 0)));
    let (momentum, decay) = (S::lit(config.momentum), S::lit(config.weight_decay));
    let mut step = 0usize;
    for epoch in 0..config.student_epochs {
        let lr = lr_at(&config.student_lr_schedule, epoch);
        let (mut total, mut lg, mut lc, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for indices in mixed_batch_iterator(dataset, config.batch_size, config.seed, epoch as u64)? {
            let batch = StudentBatch::assemble(dataset, cache, &indices, &objective)?;
            let (terms, grads) = backward(&student, &batch.noisy_inputs, &batch.loss_spec(&objective))?;
            sgd_step(&mut student, &grads, &mut state, S::lit(lr), momentum, decay)?;
            observe(&StudentStep {
                epoch,
                step,
                terms,
                params: &student,
            });
            total += terms.total.as_f64();
            lg += terms.guidance.as_f64();
            lc += terms.clean.as_f64();
            steps += 1;
            step += 1;
        }
        let n = steps.max(1) as f64;
        let record = EpochRecord {
            epoch,
            lr,
            loss_total: total / n,
            loss_guidance: Some(lg / n),
            loss_clean: Some(lc / n),
            test_accuracy: test_accuracy(&student, dataset)?,
        };
        log::debug!("student epoch {epoch}: loss {:.5} acc {:?}", record.loss_total, record.test_accuracy);
        report.epochs.push(record);
    }
    report.final_test_accuracy = test_accuracy(&student, dataset)?;
    report.checkpoints.insert("student".into(), student.fingerprint());
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((student, report))
}

/// Cross-entropy training on the clean subset alone, starting from `model`,
/// at a constant reduced rate.
pub fn finetune_clean<S: Scalar>(
    model: &ModelParams<S>,
    dataset: &Dataset<S>,
    config: &TrainConfig,
) -> Result<(ModelParams<S>, RunReport)> {
    config.validate()?;
    let clean = dataset.indices(Split::CleanTrain);
    if clean.is_empty() {
        return Err(Error::Configuration("fine-tuning needs a clean subset".into()));
    }
    let lr = config.finetune_rate();
    train_cross_entropy(
        model.clone(),
        dataset,
        &clean,
        |_| lr,
        config.finetune_epochs,
        config,
        "finetune",
    )
}

/// Supervision variants compared against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoisyOnly,
    CleanOnly,
    Mixed,
    Guidance,
    GuidanceFinetuned,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::NoisyOnly,
        Variant::CleanOnly,
        Variant::Mixed,
        Variant::Guidance,
        Variant::GuidanceFinetuned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoisyOnly => "noisy_only",
            Variant::CleanOnly => "clean_only",
            Variant::Mixed => "mixed",
            Variant::Guidance => "guidance",
            Variant::GuidanceFinetuned => "guidance_finetuned",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Parameter(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Models produced by a baseline run alongside its report.
#[derive(Debug, Clone)]
pub struct VariantOutcome<S> {
    pub report: RunReport,
    pub model: ModelParams<S>,
    pub teacher: Option<ModelParams<S>>,
    pub student: Option<ModelParams<S>>,
    pub cache: Option<GuidanceCache<S>>,
}

/// Runs one supervision variant with a shared architecture and seed.
pub fn run_variant<S: Scalar>(variant: Variant, dataset: &Dataset<S>, config: &TrainConfig) -> Result<VariantOutcome<S>> {
    config.validate()?;
    let single_set = |split: Split| -> Result<VariantOutcome<S>> {
        let indices = dataset.indices(split);
        if indices.is_empty() {
            return Err(Error::Configuration(format!(
                "variant {} needs a nonempty {split:?} subset",
                variant.name()
            )));
        }
        let (model, report) = train_cross_entropy(
            init_model(dataset, config)?,
            dataset,
            &indices,
            |e| lr_at(&config.teacher_lr_schedule, e),
            config.teacher_epochs,
            config,
            variant.name(),
        )?;
        Ok(VariantOutcome { report, model, teacher: None, student: None, cache: None })
    };
    let mut outcome = match variant {
        Variant::NoisyOnly => single_set(Split::NoisyTrain)?,
        Variant::CleanOnly => single_set(Split::CleanTrain)?,
        Variant::Mixed => {
            let (model, report) = train_teacher(dataset, config)?;
            VariantOutcome { report, teacher: Some(model.clone()), model, student: None, cache: None }
        }
        Variant::Guidance | Variant::GuidanceFinetuned => {
            let (teacher, teacher_report) = train_teacher(dataset, config)?;
            let cache = compute_teacher_soft_targets(&teacher, dataset, S::lit(config.temperature))?;
            let (student, mut report) = train_student_with_cache(&teacher, dataset, config, &cache, |_| {})?;
            report.wall_time_secs += teacher_report.wall_time_secs;
            if variant == Variant::GuidanceFinetuned {
                let (tuned, tuned_report) = finetune_clean(&student, dataset, config)?;
                if let Some(acc) = report.final_test_accuracy {
                    report.stage_accuracies.insert("student".into(), acc);
                }
                report.stage = tuned_report.stage.clone();
                report.epochs.extend(tuned_report.epochs);
                report.final_test_accuracy = tuned_report.final_test_accuracy;
                report.checkpoints.extend(tuned_report.checkpoints);
                report.wall_time_secs += tuned_report.wall_time_secs;
                VariantOutcome { report, model: tuned, teacher: Some(teacher), student: Some(student), cache: Some(cache) }
            } else {
                VariantOutcome { report, model: student.clone(), teacher: Some(teacher), student: Some(student), cache: Some(cache) }
            }
        }
    };
    outcome.report.variant = Some(variant);
    Ok(outcome)
}

pub fn run_baseline<S: Scalar>(variant: Variant, dataset: &Dataset<S>, config: &TrainConfig) -> Result<RunReport> {
    run_variant(variant, dataset, config).map(|o| o.report)
}

/// Where the samples of an experiment come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Blobs,
    Csv,
    Idx,
}

/// Reproducible dataset construction: source, split, then noise on the noisy subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataRecipe {
    pub source: SourceKind,
    /// CSV file, or IDX image file.
    pub data_path: Option<String>,
    /// IDX label file.
    pub labels_path: Option<String>,
    /// Class count; required for blobs, inferred from labels for files when absent.
    pub classes: Option<usize>,
    pub per_class: usize,
    pub dim: usize,
    pub sigma: f64,
    pub noise_model: NoiseModel,
    pub noise_rate: f64,
    pub pair_map: Option<Vec<usize>>,
    pub clean_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataRecipe {
    fn default() -> Self {
        Self {
            source: SourceKind::Blobs,
            data_path: None,
            labels_path: None,
            classes: Some(10),
            per_class: 500,
            dim: 20,
            sigma: 0.5,
            noise_model: NoiseModel::Symmetric,
            noise_rate: 0.4,
            pair_map: None,
            clean_fraction: 0.05,
            test_fraction: 0.2,
        }
    }
}

impl DataRecipe {
    pub fn noise_spec(&self, seed: u64) -> NoiseSpec {
        NoiseSpec {
            model: self.noise_model,
            rate: self.noise_rate,
            seed: derive_seed(seed, &[stream::NOISE]),
            pair_map: self.pair_map.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("clean_fraction", self.clean_fraction), ("test_fraction", self.test_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Parameter(format!("{name} must lie in [0, 1), got {f}")));
            }
        }
        if self.clean_fraction + self.test_fraction >= 1.0 {
            return Err(Error::Parameter("clean_fraction + test_fraction must be < 1".into()));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Parameter(format!(
                "noise_rate must lie in [0, 1), got {}",
                self.noise_rate
            )));
        }
        if self.source == SourceKind::Blobs && !(self.sigma > 0.0) {
            return Err(Error::Parameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    fn load_source<S: Scalar>(&self, seed: u64) -> Result<Dataset<S>> {
        let path = |p: &Option<String>, what: &str| {
            p.clone()
                .ok_or_else(|| Error::Configuration(format!("source {:?} needs {what}", self.source)))
        };
        match self.source {
            SourceKind::Blobs => make_blobs(
                self.classes.unwrap_or(10),
                self.per_class,
                self.dim,
                self.sigma,
                seed,
            ),
            SourceKind::Csv => load_dataset(&DataSource::Csv(path(&self.data_path, "data_path")?.into()), self.classes),
            SourceKind::Idx => load_dataset(
                &DataSource::Idx {
                    images: path(&self.data_path, "data_path")?.into(),
                    labels: path(&self.labels_path, "labels_path")?.into(),
                },
                self.classes,
            ),
        }
    }

    /// Replay record of a dataset built by [`DataRecipe::build`] with `seed`.
    pub fn manifest<S: Scalar>(&self, dataset: &Dataset<S>, seed: u64) -> DataManifest {
        DataManifest::describe(
            dataset,
            seed,
            self.clean_fraction,
            self.test_fraction,
            Some(self.noise_spec(seed)),
        )
    }

    /// Loads or generates the samples, splits them and corrupts the noisy subset.
    pub fn build<S: Scalar>(&self, seed: u64) -> Result<Dataset<S>> {
        self.validate()?;
        let raw = self.load_source::<S>(seed)?;
        let tagged = split(&raw, self.clean_fraction, self.test_fraction, seed)?;
        let (noisy, _) = inject_noise(&tagged, &self.noise_spec(seed))?;
        Ok(noisy)
    }
}
