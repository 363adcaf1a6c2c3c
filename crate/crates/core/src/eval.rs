//! Accuracy metrics and one-axis hyperparameter sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::guidance::compute_teacher_soft_targets;
use crate::nn::{argmax, ModelParams};
use crate::pipeline::{finetune_clean, train_student_with_cache, train_teacher, DataRecipe, TrainConfig};
use crate::scalar::Scalar;

/// Argmax class per sample, lowest index on ties.
pub fn predict<S: Scalar>(model: &ModelParams<S>, dataset: &Dataset<S>, indices: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(512) {
        let logits = model.forward(&dataset.features().select_rows(chunk))?;
        out.extend(logits.iter_rows().map(argmax));
    }
    Ok(out)
}

pub(crate) fn accuracy_on<S: Scalar>(model: &ModelParams<S>, dataset: &Dataset<S>, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Input("cannot score an empty split".into()));
    }
    let predictions = predict(model, dataset, indices)?;
    let correct = predictions
        .iter()
        .zip(indices)
        .filter(|(&p, &i)| p == dataset.reference_label(i))
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

/// Fraction of `split` whose prediction equals the true label (the given
/// label when true labels are unknown).
pub fn accuracy<S: Scalar>(model: &ModelParams<S>, dataset: &Dataset<S>, split: Split) -> Result<f64> {
    accuracy_on(model, dataset, &dataset.indices(split))
}

/// Counts indexed by `(true class, predicted class)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

pub fn confusion_matrix<S: Scalar>(model: &ModelParams<S>, dataset: &Dataset<S>, split: Split) -> Result<ConfusionMatrix> {
    let indices = dataset.indices(split);
    if indices.is_empty() {
        return Err(Error::Input("cannot score an empty split".into()));
    }
    let c = dataset.num_classes();
    let mut counts = vec![vec![0usize; c]; c];
    for (p, &i) in predict(model, dataset, &indices)?.into_iter().zip(&indices) {
        counts[dataset.reference_label(i)][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Hyperparameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Beta,
    #[serde(rename = "T")]
    Temperature,
    CleanFraction,
    NoiseRate,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
            SweepAxis::Temperature => "T",
            SweepAxis::CleanFraction => "clean_fraction",
            SweepAxis::NoiseRate => "noise_rate",
        }
    }

    /// Whether the axis changes the teacher's training data.
    pub fn affects_teacher(self) -> bool {
        matches!(self, SweepAxis::CleanFraction | SweepAxis::NoiseRate)
    }

    fn apply(self, value: f64, config: &TrainConfig, recipe: &DataRecipe) -> (TrainConfig, DataRecipe) {
        let (mut c, mut r) = (config.clone(), recipe.clone());
        match self {
            SweepAxis::Alpha => c.alpha = value,
            SweepAxis::Beta => c.beta = value,
            SweepAxis::Temperature => c.temperature = value,
            SweepAxis::CleanFraction => r.clean_fraction = value,
            SweepAxis::NoiseRate => r.noise_rate = value,
        }
        (c, r)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "beta" => Ok(SweepAxis::Beta),
            "T" | "t" | "temperature" => Ok(SweepAxis::Temperature),
            "clean_fraction" => Ok(SweepAxis::CleanFraction),
            "noise_rate" => Ok(SweepAxis::NoiseRate),
            other => Err(Error::Parameter(format!(
                "unknown sweep axis {other:?}; expected alpha, beta, T, clean_fraction or noise_rate"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
}

/// One `(value, seed)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    pub acc_teacher: f64,
    pub acc_student: f64,
    pub acc_finetuned: f64,
}

/// Student accuracy aggregated over seeds for one axis value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

fn validate_grid(grid: &SweepGrid, recipe: &DataRecipe) -> Result<()> {
    if grid.values.is_empty() {
        return Err(Error::Parameter("sweep needs at least one value".into()));
    }
    if grid.seeds.is_empty() {
        return Err(Error::Parameter("sweep needs at least one seed".into()));
    }
    if recipe.test_fraction <= 0.0 {
        return Err(Error::Parameter("sweeps are scored on the test split; test_fraction must be > 0".into()));
    }
    for &v in &grid.values {
        if !v.is_finite() {
            return Err(Error::Parameter(format!("{} value {v} is not finite", grid.axis.name())));
        }
        let (c, r) = grid.axis.apply(v, &grid.base, recipe);
        c.validate()?;
        r.validate()?;
        if r.clean_fraction <= 0.0 {
            return Err(Error::Parameter(format!(
                "{} value {v} leaves no clean subset for the student",
                grid.axis.name()
            )));
        }
    }
    Ok(())
}

struct Job {
    seed_index: usize,
    value_indices: Vec<usize>,
}

/// Runs the two-stage pipeline for every `(value, seed)` cell.
///
/// Stage-2-only axes (alpha, beta, T) train one teacher per seed and reuse it
/// for every value. Up to `threads` cells run concurrently; results do not
/// depend on the thread count.
pub fn sweep<S: Scalar>(grid: &SweepGrid, recipe: &DataRecipe, threads: usize) -> Result<SweepResult> {
    validate_grid(grid, recipe)?;
    let jobs: Vec<Job> = if grid.axis.affects_teacher() {
        (0..grid.seeds.len())
            .flat_map(|s| (0..grid.values.len()).map(move |v| Job { seed_index: s, value_indices: vec![v] }))
            .collect()
    } else {
        (0..grid.seeds.len())
            .map(|s| Job { seed_index: s, value_indices: (0..grid.values.len()).collect() })
            .collect()
    };
    let run = |job: &Job| -> Result<Vec<(usize, usize, SweepRow)>> {
        let seed = grid.seeds[job.seed_index];
        let mut teacher_cache = None;
        let mut rows = Vec::with_capacity(job.value_indices.len());
        for &vi in &job.value_indices {
            let value = grid.values[vi];
            let (mut config, recipe) = grid.axis.apply(value, &grid.base, recipe);
            config.seed = seed;
            let dataset: Dataset<S> = recipe.build(seed)?;
            if teacher_cache.is_none() || grid.axis.affects_teacher() {
                let (teacher, _) = train_teacher(&dataset, &config)?;
                let acc = accuracy(&teacher, &dataset, Split::Test)?;
                teacher_cache = Some((teacher, acc));
            }
            let (teacher, acc_teacher) = teacher_cache.as_ref().expect("teacher trained");
            let cache = compute_teacher_soft_targets(teacher, &dataset, S::lit(config.temperature))?;
            let (student, _) = train_student_with_cache(teacher, &dataset, &config, &cache, |_| {})?;
            let (tuned, _) = finetune_clean(&student, &dataset, &config)?;
            log::info!("sweep {}={value} seed={seed} done", grid.axis.name());
            rows.push((
                vi,
                job.seed_index,
                SweepRow {
                    axis: grid.axis.name().to_owned(),
                    value,
                    seed,
                    acc_teacher: *acc_teacher,
                    acc_student: accuracy(&student, &dataset, Split::Test)?,
                    acc_finetuned: accuracy(&tuned, &dataset, Split::Test)?,
                },
            ));
        }
        Ok(rows)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Configuration(format!("thread pool: {e}")))?;
    let results: Vec<Vec<(usize, usize, SweepRow)>> =
        pool.install(|| jobs.par_iter().map(run).collect::<Result<_>>())?;
    let mut keyed: Vec<(usize, usize, SweepRow)> = results.into_iter().flatten().collect();
    keyed.sort_by_key(|(v, s, _)| (*v, *s));
    let rows: Vec<SweepRow> = keyed.into_iter().map(|(_, _, r)| r).collect();

    let summary = grid
        .values
        .iter()
        .enumerate()
        .map(|(vi, &value)| {
            let accs: Vec<f64> = rows[vi * grid.seeds.len()..(vi + 1) * grid.seeds.len()]
                .iter()
                .map(|r| r.acc_student)
                .collect();
            SweepSummary {
                value,
                mean: accs.iter().sum::<f64>() / accs.len() as f64,
                min: accs.iter().copied().fold(f64::INFINITY, f64::min),
                max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(SweepResult { axis: grid.axis, rows, summary })
}

/// Median of a nonempty list; mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl SweepResult {
    pub fn rows_for(&self, value: f64) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.value == value)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("axis,value,seed,acc_teacher,acc_student,acc_finetuned\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.axis, r.value, r.seed, r.acc_teacher, r.acc_student, r.acc_finetuned
            )
            .unwrap();
        }
        out
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("sweep serializes");
        bytes.push(b'\n');
        bytes
    }

    /// Whitespace-separated `x mean min max` rows of student accuracy.
    pub fn plot_data(&self) -> String {
        let mut out = format!("# x={} y=student test accuracy\n# x mean min max\n", self.axis.name());
        for s in &self.summary {
            writeln!(out, "{} {} {} {}", s.value, s.mean, s.min, s.max).unwrap();
        }
        out
    }

    /// Writes `results.csv`, `results.json` and `plotdata.txt` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let files: [(&str, Vec<u8>); 3] = [
            ("results.csv", self.to_csv_string().into_bytes()),
            ("results.json", self.to_json_bytes()),
            ("plotdata.txt", self.plot_data().into_bytes()),
        ];
        for (name, bytes) in files {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}
