//! Teacher soft targets, their fusion with noisy labels, and the student's
//! multi-task objective.
//!
//! The frozen teacher's temperature-softened predictions `p` are computed once
//! per noisy sample and cached. Each noisy label `y` is fused into a target
//! `g = (p + beta * y) / (1 + beta)` and the student minimizes
//! `alpha * T^2 * KL(g || q_T) + CE(y_clean, q_1)` over paired batches.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::data::{Dataset, Split, StepIndices};
use crate::error::{Error, Result};
use crate::nn::{loss_value, softmax_t_into, LossSpec, LossTerms, Matrix, ModelParams, ProbVector};
use crate::scalar::Scalar;

const CACHE_MAGIC: &[u8; 8] = b"GLCACHE\0";
const CACHE_VERSION: u32 = 1;

/// Teacher soft targets for every noisy training sample, keyed by dataset index.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceCache<S> {
    temperature: S,
    teacher_fingerprint: String,
    num_classes: usize,
    entries: BTreeMap<usize, ProbVector<S>>,
}

/// A fused target together with the sample it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceTarget<S> {
    pub g: ProbVector<S>,
    pub index: usize,
}

/// Weights of the student objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentObjective<S> {
    pub alpha: S,
    pub beta: S,
    pub temperature: S,
}

/// Runs the frozen teacher over the noisy subset and softens its logits at `t`.
pub fn compute_teacher_soft_targets<S: Scalar>(
    teacher: &ModelParams<S>,
    dataset: &Dataset<S>,
    t: S,
) -> Result<GuidanceCache<S>> {
    if !(t > S::zero()) || !t.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    if teacher.num_classes() != dataset.num_classes() {
        return Err(Error::Shape(format!(
            "teacher predicts {} classes, dataset has {}",
            teacher.num_classes(),
            dataset.num_classes()
        )));
    }
    let noisy = dataset.indices(Split::NoisyTrain);
    if noisy.is_empty() {
        return Err(Error::Input("the noisy subset is empty".into()));
    }
    let mut entries = BTreeMap::new();
    for chunk in noisy.chunks(256) {
        let logits = teacher.forward(&dataset.features().select_rows(chunk))?;
        for (r, &i) in chunk.iter().enumerate() {
            let mut p = vec![S::zero(); logits.cols()];
            softmax_t_into(logits.row(r), t, &mut p);
            entries.insert(i, ProbVector::from_vec_unchecked(p));
        }
    }
    Ok(GuidanceCache {
        temperature: t,
        teacher_fingerprint: teacher.fingerprint(),
        num_classes: teacher.num_classes(),
        entries,
    })
}

/// `g = (p + beta * y) / (1 + beta)` for a one-hot `y`.
pub fn fuse_guidance<S: Scalar>(p: &ProbVector<S>, y: &ProbVector<S>, beta: S) -> Result<ProbVector<S>> {
    if !(beta >= S::zero()) || !beta.is_finite() {
        return Err(Error::Parameter(format!("beta must be nonnegative, got {beta}")));
    }
    if p.len() != y.len() {
        return Err(Error::Shape(format!("length mismatch: {} vs {}", p.len(), y.len())));
    }
    let hot = y
        .hot_class()
        .ok_or_else(|| Error::Input("noisy label is not one-hot".into()))?;
    Ok(ProbVector::from_vec_unchecked(fuse_one_hot(p.as_slice(), hot, beta)))
}

fn fuse_one_hot<S: Scalar>(p: &[S], hot: usize, beta: S) -> Vec<S> {
    let denom = S::one() + beta;
    p.iter()
        .enumerate()
        .map(|(i, &pi)| if i == hot { (pi + beta) / denom } else { pi / denom })
        .collect()
}

/// `alpha * T^2 * l_g + l_c`.
pub fn total_loss<S: Scalar>(l_g: S, l_c: S, alpha: S, t: S) -> Result<S> {
    if !(alpha >= S::zero()) {
        return Err(Error::Parameter(format!("alpha must be nonnegative, got {alpha}")));
    }
    if !(t > S::zero()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    if !(l_g >= S::zero() && l_c >= S::zero()) || !l_g.is_finite() || !l_c.is_finite() {
        return Err(Error::Input(format!("losses must be finite and nonnegative, got {l_g}, {l_c}")));
    }
    Ok(alpha * t * t * l_g + l_c)
}

impl<S: Scalar> GuidanceCache<S> {
    pub fn temperature(&self) -> S {
        self.temperature
    }

    pub fn teacher_fingerprint(&self) -> &str {
        &self.teacher_fingerprint
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&ProbVector<S>> {
        self.entries.get(&index)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ProbVector<S>)> {
        self.entries.iter().map(|(&i, p)| (i, p))
    }

    /// Fused target for sample `index` carrying noisy label `label`.
    pub fn target(&self, index: usize, label: usize, beta: S) -> Result<GuidanceTarget<S>> {
        let p = self.get(index).ok_or_else(|| {
            Error::Consistency(format!("guidance cache has no entry for sample {index}"))
        })?;
        let y = ProbVector::one_hot(label, self.num_classes)?;
        Ok(GuidanceTarget {
            g: fuse_guidance(p, &y, beta)?,
            index,
        })
    }

    pub fn check_temperature(&self, t: S) -> Result<()> {
        if self.temperature != t {
            return Err(Error::Consistency(format!(
                "guidance cache was built at T={} but the run uses T={t}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.write_u32::<LittleEndian>(CACHE_VERSION).unwrap();
        out.write_f64::<LittleEndian>(self.temperature.as_f64()).unwrap();
        let fp = self.teacher_fingerprint.as_bytes();
        out.write_u32::<LittleEndian>(fp.len() as u32).unwrap();
        out.extend_from_slice(fp);
        out.write_u32::<LittleEndian>(self.num_classes as u32).unwrap();
        out.write_u64::<LittleEndian>(self.entries.len() as u64).unwrap();
        for (&i, p) in &self.entries {
            out.write_u64::<LittleEndian>(i as u64).unwrap();
            for &v in p.as_slice() {
                out.write_f64::<LittleEndian>(v.as_f64()).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let truncated = |cur: &Cursor<&[u8]>| Error::Format {
            offset: cur.position(),
            message: "guidance cache is truncated".into(),
        };
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| truncated(&cur))?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not a guidance cache file".into(),
            });
        }
        let version = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur))?;
        if version != CACHE_VERSION {
            return Err(Error::Format {
                offset: 8,
                message: format!("unsupported cache version {version}"),
            });
        }
        let temperature = S::lit(cur.read_f64::<LittleEndian>().map_err(|_| truncated(&cur))?);
        let fp_len = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur))? as usize;
        let mut fp = vec![0u8; fp_len];
        cur.read_exact(&mut fp).map_err(|_| truncated(&cur))?;
        let teacher_fingerprint = String::from_utf8(fp).map_err(|_| Error::Format {
            offset: 24,
            message: "fingerprint is not UTF-8".into(),
        })?;
        let num_classes = cur.read_u32::<LittleEndian>().map_err(|_| truncated(&cur))? as usize;
        let count = cur.read_u64::<LittleEndian>().map_err(|_| truncated(&cur))?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let offset = cur.position();
            let index = cur.read_u64::<LittleEndian>().map_err(|_| truncated(&cur))? as usize;
            let mut p = Vec::with_capacity(num_classes);
            for _ in 0..num_classes {
                p.push(S::lit(cur.read_f64::<LittleEndian>().map_err(|_| truncated(&cur))?));
            }
            let p = ProbVector::new(p).map_err(|e| Error::Format {
                offset,
                message: format!("entry for sample {index}: {e}"),
            })?;
            entries.insert(index, p);
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(Error::Format {
                offset: cur.position(),
                message: "trailing bytes after last entry".into(),
            });
        }
        Ok(Self {
            temperature,
            teacher_fingerprint,
            num_classes,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a cache and verifies it belongs to `teacher_fingerprint` at temperature `t`.
    pub fn load(path: impl AsRef<Path>, teacher_fingerprint: &str, t: S) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let cache = Self::from_bytes(&bytes)?;
        if cache.teacher_fingerprint != teacher_fingerprint {
            return Err(Error::Consistency(format!(
                "guidance cache {} was built from teacher {} but the run uses {}",
                path.display(),
                cache.teacher_fingerprint,
                teacher_fingerprint
            )));
        }
        cache.check_temperature(t)?;
        Ok(cache)
    }
}

/// Inputs and targets of one paired student step.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentBatch<S> {
    pub noisy_inputs: Matrix<S>,
    pub guidance: Matrix<S>,
    pub clean_inputs: Matrix<S>,
    pub clean_targets: Matrix<S>,
}

impl<S: Scalar> StudentBatch<S> {
    pub fn assemble(
        dataset: &Dataset<S>,
        cache: &GuidanceCache<S>,
        step: &StepIndices,
        objective: &StudentObjective<S>,
    ) -> Result<Self> {
        cache.check_temperature(objective.temperature)?;
        if cache.num_classes() != dataset.num_classes() {
            return Err(Error::Shape(format!(
                "cache holds {} classes, dataset has {}",
                cache.num_classes(),
                dataset.num_classes()
            )));
        }
        if !(objective.beta >= S::zero()) {
            return Err(Error::Parameter(format!(
                "beta must be nonnegative, got {}",
                objective.beta
            )));
        }
        let mut guidance = Matrix::zeros(step.noisy.len(), dataset.num_classes());
        for (r, &i) in step.noisy.iter().enumerate() {
            let p = cache.get(i).ok_or_else(|| {
                Error::Consistency(format!("guidance cache has no entry for sample {i}"))
            })?;
            let g = fuse_one_hot(p.as_slice(), dataset.labels()[i], objective.beta);
            guidance.row_mut(r).copy_from_slice(&g);
        }
        Ok(Self {
            noisy_inputs: dataset.features().select_rows(&step.noisy),
            guidance,
            clean_inputs: dataset.features().select_rows(&step.clean),
            clean_targets: dataset.one_hot_labels(&step.clean),
        })
    }

    pub fn loss_spec(&self, objective: &StudentObjective<S>) -> LossSpec<'_, S> {
        LossSpec::Total {
            guidance: &self.guidance,
            clean_inputs: &self.clean_inputs,
            clean_targets: &self.clean_targets,
            alpha: objective.alpha,
            temperature: objective.temperature,
        }
    }
}

/// `(L_total, L_g, L_c)` of the student on one paired batch.
pub fn student_batch_loss<S: Scalar>(
    student: &ModelParams<S>,
    batch: &StudentBatch<S>,
    objective: &StudentObjective<S>,
) -> Result<LossTerms<S>> {
    loss_value(student, &batch.noisy_inputs, &batch.loss_spec(objective))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, split};
    use crate::nn::{cross_entropy, kl_div, softmax_t, Activation, Layer};

    fn pv(v: &[f64]) -> ProbVector<f64> {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn split_blobs() -> Dataset<f64> {
        let ds = make_blobs(3, 40, 4, 0.8, 5).unwrap();
        split(&ds, 0.1, 0.2, 5).unwrap()
    }

    #[test]
    fn fuse_examples() {
        let p = pv(&[0.6, 0.4]);
        let y = pv(&[0.0, 1.0]);
        assert_eq!(fuse_guidance(&p, &y, 0.0).unwrap(), p);
        let g = fuse_guidance(&p, &y, 0.3).unwrap();
        assert!((g.as_slice()[0] - 0.6 / 1.3).abs() < 1e-15);
        assert!((g.as_slice()[1] - 0.7 / 1.3).abs() < 1e-15);
        assert!((g.as_slice()[0] - 0.461_538_461_538_461_5).abs() < 1e-15);
        for beta in [0.0, 0.3, 1.0, 10.0] {
            assert_eq!(fuse_guidance(&y, &y, beta).unwrap(), y);
        }
    }

    #[test]
    fn fuse_rejects_bad_inputs() {
        let p = pv(&[0.6, 0.4]);
        assert!(matches!(fuse_guidance(&p, &pv(&[0.0, 1.0]), -0.1), Err(Error::Parameter(_))));
        assert!(matches!(fuse_guidance(&p, &pv(&[0.5, 0.5]), 0.3), Err(Error::Input(_))));
    }

    #[test]
    fn large_beta_approaches_label() {
        let g = fuse_guidance(&pv(&[0.7, 0.2, 0.1]), &pv(&[0.0, 0.0, 1.0]), 1e4).unwrap();
        assert!((g.as_slice()[2] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(0.7, 1.25, 0.0, 5.0).unwrap(), 1.25);
        assert!((total_loss(0.2f64, 1.0, 0.1, 5.0).unwrap() - 1.5).abs() < 1e-12);
        assert!(matches!(total_loss(0.2, 1.0, -0.1, 5.0), Err(Error::Parameter(_))));
        assert!(matches!(total_loss(0.2, 1.0, 0.1, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_teacher_gives_uniform_targets() {
        let ds = split_blobs();
        let teacher = ModelParams::zeros(&[4, 5, 3]).unwrap();
        let cache = compute_teacher_soft_targets(&teacher, &ds, 3.0).unwrap();
        assert_eq!(cache.len(), ds.indices(Split::NoisyTrain).len());
        for (_, p) in cache.iter() {
            for &v in p.as_slice() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cache_matches_forward_then_softmax() {
        let w = Matrix::from_rows(&[[1.0, -0.5], [0.25, 2.0]]).unwrap();
        let teacher = ModelParams::from_layers(
            vec![Layer::new(w, vec![0.1, -0.2]).unwrap()],
            Activation::Relu,
            0,
        )
        .unwrap();
        let ds = Dataset::new(Matrix::from_rows(&[[0.3, 0.9]]).unwrap(), vec![1], 2, "one").unwrap();
        let cache = compute_teacher_soft_targets(&teacher, &ds, 4.0).unwrap();
        let z = [1.0 * 0.3 - 0.5 * 0.9 + 0.1, 0.25 * 0.3 + 2.0 * 0.9 - 0.2];
        let e: Vec<f64> = z.iter().map(|v| (v / 4.0f64).exp()).collect();
        let s = e[0] + e[1];
        let got = cache.get(0).unwrap().as_slice();
        assert!((got[0] - e[0] / s).abs() < 1e-15);
        assert!((got[1] - e[1] / s).abs() < 1e-15);
    }

    #[test]
    fn cache_counts_every_noisy_sample() {
        let ds: Dataset<f64> = make_blobs(4, 250, 3, 1.0, 2).unwrap();
        let teacher = ModelParams::init(&[3, 8, 4], 1).unwrap();
        let cache = compute_teacher_soft_targets(&teacher, &ds, 5.0).unwrap();
        assert_eq!(cache.len(), 1000);
        let again = compute_teacher_soft_targets(&teacher, &ds, 5.0).unwrap();
        assert_eq!(cache.to_bytes(), again.to_bytes());
    }

    #[test]
    fn cache_errors() {
        let ds = split_blobs();
        let wrong = ModelParams::<f64>::init(&[5, 3], 1).unwrap();
        assert!(matches!(compute_teacher_soft_targets(&wrong, &ds, 5.0), Err(Error::Shape(_))));
        let teacher = ModelParams::<f64>::init(&[4, 3], 1).unwrap();
        let none = ds.clone().with_tags(vec![Split::Test; ds.len()]).unwrap();
        assert!(matches!(compute_teacher_soft_targets(&teacher, &none, 5.0), Err(Error::Input(_))));
    }

    #[test]
    fn cache_file_checks_fingerprint_and_temperature() {
        let ds = split_blobs();
        let teacher = ModelParams::<f64>::init(&[4, 6, 3], 2).unwrap();
        let cache = compute_teacher_soft_targets(&teacher, &ds, 5.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("guidance_cache.bin");
        cache.save(&path).unwrap();
        let back = GuidanceCache::<f64>::load(&path, &teacher.fingerprint(), 5.0).unwrap();
        assert_eq!(back, cache);
        let other = ModelParams::<f64>::init(&[4, 6, 3], 3).unwrap();
        assert!(matches!(
            GuidanceCache::<f64>::load(&path, &other.fingerprint(), 5.0),
            Err(Error::Consistency(_))
        ));
        assert!(matches!(
            GuidanceCache::<f64>::load(&path, &teacher.fingerprint(), 4.0),
            Err(Error::Consistency(_))
        ));
        let bytes = cache.to_bytes();
        assert!(matches!(
            GuidanceCache::<f64>::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn self_distillation_has_zero_guidance_loss() {
        let ds = split_blobs();
        let teacher = ModelParams::<f64>::init(&[4, 6, 3], 4).unwrap();
        let cache = compute_teacher_soft_targets(&teacher, &ds, 5.0).unwrap();
        let objective = StudentObjective { alpha: 0.1, beta: 0.0, temperature: 5.0 };
        let step = StepIndices {
            noisy: ds.indices(Split::NoisyTrain)[..6].to_vec(),
            clean: ds.indices(Split::CleanTrain)[..6].to_vec(),
        };
        let batch = StudentBatch::assemble(&ds, &cache, &step, &objective).unwrap();
        let terms = student_batch_loss(&teacher, &batch, &objective).unwrap();
        assert!(terms.guidance.abs() < 1e-15);
        let isolated = StudentObjective { alpha: 0.0, ..objective };
        let terms = student_batch_loss(&teacher, &batch, &isolated).unwrap();
        assert_eq!(terms.total, terms.clean);
    }

    #[test]
    fn batch_loss_matches_composed_oracles() {
        let ds = split_blobs();
        let teacher = ModelParams::<f64>::init(&[4, 6, 3], 6).unwrap();
        let student = ModelParams::<f64>::init(&[4, 6, 3], 7).unwrap();
        let cache = compute_teacher_soft_targets(&teacher, &ds, 5.0).unwrap();
        let objective = StudentObjective { alpha: 0.1, beta: 0.3, temperature: 5.0 };
        let step = StepIndices {
            noisy: ds.indices(Split::NoisyTrain)[3..8].to_vec(),
            clean: ds.indices(Split::CleanTrain)[..4].to_vec(),
        };
        let batch = StudentBatch::assemble(&ds, &cache, &step, &objective).unwrap();
        let terms = student_batch_loss(&student, &batch, &objective).unwrap();

        let mut lg = 0.0;
        for &i in &step.noisy {
            let logits = student.forward(&ds.features().select_rows(&[i])).unwrap();
            let q = softmax_t(logits.row(0), 5.0).unwrap();
            let g = fuse_guidance(
                cache.get(i).unwrap(),
                &ProbVector::one_hot(ds.labels()[i], 3).unwrap(),
                0.3,
            )
            .unwrap();
            lg += kl_div(&g, &q).unwrap() / step.noisy.len() as f64;
        }
        let mut lc = 0.0;
        for &i in &step.clean {
            let logits = student.forward(&ds.features().select_rows(&[i])).unwrap();
            let q = softmax_t(logits.row(0), 1.0).unwrap();
            lc += cross_entropy(&q, &ProbVector::one_hot(ds.labels()[i], 3).unwrap()).unwrap()
                / step.clean.len() as f64;
        }
        assert!((terms.guidance - lg).abs() < 1e-12);
        assert!((terms.clean - lc).abs() < 1e-12);
        assert!((terms.total - total_loss(lg, lc, 0.1, 5.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cache_miss_names_the_sample() {
        let ds = split_blobs();
        let teacher = ModelParams::<f64>::init(&[4, 6, 3], 4).unwrap();
        let cache = compute_teacher_soft_targets(&teacher, &ds, 5.0).unwrap();
        let clean = ds.indices(Split::CleanTrain);
        let objective = StudentObjective { alpha: 0.1, beta: 0.3, temperature: 5.0 };
        let step = StepIndices { noisy: vec![clean[0]], clean: clean.clone() };
        let err = StudentBatch::assemble(&ds, &cache, &step, &objective).unwrap_err();
        assert!(matches!(err, Error::Consistency(ref m) if m.contains(&clean[0].to_string())));
        let hot = StudentObjective { temperature: 4.0, ..objective };
        let step = StepIndices { noisy: ds.indices(Split::NoisyTrain)[..1].to_vec(), clean };
        assert!(matches!(StudentBatch::assemble(&ds, &cache, &step, &hot), Err(Error::Consistency(_))));
    }
}
