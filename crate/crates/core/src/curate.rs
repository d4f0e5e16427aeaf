//! Teacher-complement dataset construction.
//!
//! Each class `i` receives corpus images the teacher assigns to *other*
//! classes: an equal quota from every complement class, then a remainder
//! drawn from whatever complement examples are left.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::dataset::stack_images;
use crate::error::{contract, Error, Result};
use crate::gradcore::{Mode, Model, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    classes: usize,
    names: Option<Vec<String>>,
}

impl LabelSpace {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(contract("a label space needs at least 2 classes"));
        }
        Ok(Self { classes, names: None })
    }

    pub fn with_names(names: Vec<String>) -> Result<Self> {
        let mut ls = Self::new(names.len())?;
        ls.names = Some(names);
        Ok(ls)
    }

    pub fn len(&self) -> usize {
        self.classes
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self, class: usize) -> String {
        match &self.names {
            Some(n) => n[class].clone(),
            None => class.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: Tensor,
    pub target: usize,
    /// Index into the corpus the image came from.
    pub provenance: usize,
    /// Teacher prediction when the dataset was built.
    pub teacher_pred: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdDataset {
    pub examples: Vec<Example>,
    pub per_class_count: Vec<usize>,
}

impl KdDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.per_class_count.len()
    }
}

/// Clean-image teacher predictions, `batch_size` images at a time.
pub fn predict_all(teacher: &Model, corpus: &[Tensor], batch_size: usize) -> Result<Vec<usize>> {
    if teacher.mode() != Mode::Eval {
        return Err(contract("teacher must be in eval mode"));
    }
    if batch_size == 0 {
        return Err(contract("batch size must be positive"));
    }
    let mut preds = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(batch_size) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let logits = teacher.infer(&stack_images(&refs)?)?;
        preds.extend(logits.argmax_rows());
    }
    Ok(preds)
}

/// Draw `k` of `pool` uniformly without replacement, returned in pool order.
fn draw<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut picked = vec![false; pool.len()];
    for i in index::sample(rng, pool.len(), k) {
        picked[i] = true;
    }
    let mut taken = Vec::with_capacity(k);
    let mut rest = Vec::with_capacity(pool.len() - k);
    for (&p, hit) in pool.iter().zip(picked) {
        if hit {
            taken.push(p);
        } else {
            rest.push(p);
        }
    }
    (taken, rest)
}

/// Assemble the KD dataset; `per_class[i]` examples get target `i`.
///
/// With `allow_replacement`, a complement class smaller than its quota gives
/// everything it has and the deficit moves to the remainder; if the leftover
/// pool runs dry too, the rest is drawn with replacement.
pub fn build_kd_dataset<R: Rng + ?Sized>(
    corpus: &[Tensor],
    preds: &[usize],
    labels: &LabelSpace,
    per_class: &[usize],
    allow_replacement: bool,
    rng: &mut R,
) -> Result<KdDataset> {
    let r = labels.len();
    if preds.len() != corpus.len() {
        return Err(contract("one prediction per corpus image is required"));
    }
    if per_class.len() != r {
        return Err(contract(format!("expected {r} per-class counts, got {}", per_class.len())));
    }
    if let Some(&p) = preds.iter().find(|&&p| p >= r) {
        return Err(contract(format!("prediction {p} outside {r} classes")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); r];
    for (i, &p) in preds.iter().enumerate() {
        by_class[p].push(i);
    }

    let mut examples = Vec::with_capacity(per_class.iter().sum());
    for (target, &n) in per_class.iter().enumerate() {
        let quota = n / (r - 1);
        let mut chosen = Vec::with_capacity(n);
        let mut leftover = Vec::new();
        for (j, pool) in by_class.iter().enumerate() {
            if j == target {
                continue;
            }
            if pool.len() < quota {
                if !allow_replacement {
                    return Err(Error::StarvedClass {
                        class: j,
                        available: pool.len(),
                        needed: quota,
                    });
                }
                log::warn!("class {j} has {} example(s) for a quota of {quota}", pool.len());
                chosen.extend_from_slice(pool);
                continue;
            }
            let (taken, rest) = draw(rng, pool, quota);
            chosen.extend(taken);
            leftover.extend(rest);
        }
        leftover.sort_unstable();
        let remainder = n - chosen.len();
        if leftover.len() >= remainder {
            chosen.extend(draw(rng, &leftover, remainder).0);
        } else {
            if !allow_replacement {
                return Err(Error::StarvedClass {
                    class: target,
                    available: leftover.len(),
                    needed: remainder,
                });
            }
            let complement: Vec<usize> = (0..corpus.len()).filter(|&i| preds[i] != target).collect();
            if complement.is_empty() {
                return Err(Error::StarvedClass {
                    class: target,
                    available: 0,
                    needed: remainder,
                });
            }
            log::warn!("target {target}: complement exhausted, sampling with replacement");
            let short = remainder - leftover.len();
            chosen.extend(leftover);
            chosen.extend((0..short).map(|_| complement[rng.gen_range(0..complement.len())]));
        }
        examples.extend(chosen.into_iter().map(|i| Example {
            image: corpus[i].clone(),
            target,
            provenance: i,
            teacher_pred: preds[i],
        }));
    }
    Ok(KdDataset {
        examples,
        per_class_count: per_class.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyReport {
    /// Example indices whose teacher prediction equals their target.
    pub violations: Vec<usize>,
    pub histogram: Vec<usize>,
    /// Classes whose count differs from the requested one.
    pub count_mismatches: Vec<usize>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.count_mismatches.is_empty()
    }
}

/// Recheck the teacher-disagreement invariant and the per-class counts.
pub fn verify_dataset(teacher: &Model, dataset: &KdDataset) -> Result<VerifyReport> {
    let images: Vec<Tensor> = dataset.examples.iter().map(|e| e.image.clone()).collect();
    let preds = predict_all(teacher, &images, 256)?;
    let violations = dataset
        .examples
        .iter()
        .zip(&preds)
        .enumerate()
        .filter(|(_, (e, &p))| e.target == p)
        .map(|(i, _)| i)
        .collect();
    let r = dataset.num_classes().max(teacher.num_classes());
    let mut histogram = vec![0; r];
    for e in &dataset.examples {
        if e.target < r {
            histogram[e.target] += 1;
        }
    }
    let count_mismatches = (0..r)
        .filter(|&c| dataset.per_class_count.get(c).copied().unwrap_or(0) != histogram[c])
        .collect();
    Ok(VerifyReport {
        violations,
        histogram,
        count_mismatches,
    })
}

pub fn write_kd_manifest(dataset: &KdDataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "example_id\tcorpus_index\ttarget\tteacher_pred_at_build")?;
    for (i, e) in dataset.examples.iter().enumerate() {
        writeln!(out, "{i}\t{}\t{}\t{}", e.provenance, e.target, e.teacher_pred)?;
    }
    out.flush()?;
    Ok(())
}

/// Rebuild a dataset from `kd_manifest.tsv` and the corpus it indexes.
pub fn read_kd_manifest(path: &Path, corpus: &[Tensor], classes: usize) -> Result<KdDataset> {
    let text = fs::read_to_string(path)?;
    let mut examples = Vec::new();
    let mut per_class_count = vec![0; classes];
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Parse(format!("kd_manifest.tsv line {}", n + 1));
        let cols: Vec<usize> = line
            .split('\t')
            .map(|c| c.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [id, provenance, target, teacher_pred] = cols[..] else {
            return Err(bad());
        };
        if id != examples.len() || provenance >= corpus.len() || target >= classes {
            return Err(bad());
        }
        per_class_count[target] += 1;
        examples.push(Example {
            image: corpus[provenance].clone(),
            target,
            provenance,
            teacher_pred,
        });
    }
    Ok(KdDataset {
        examples,
        per_class_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(n: usize) -> Vec<Tensor> {
        (0..n).map(|i| Tensor::full(vec![3, 1, 1], i as f32 / n as f32)).collect()
    }

    #[test]
    fn even_quota() {
        let preds = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
        let ls = LabelSpace::new(3).unwrap();
        let ds = build_kd_dataset(&corpus(9), &preds, &ls, &[4, 4, 4], false, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        for t in 0..3 {
            for src in 0..3 {
                let k = ds
                    .examples
                    .iter()
                    .filter(|e| e.target == t && preds[e.provenance] == src)
                    .count();
                assert_eq!(k, if src == t { 0 } else { 2 });
            }
        }
    }

    #[test]
    fn starved_class_named() {
        let preds = vec![0, 0, 0, 1, 2, 2, 2];
        let ls = LabelSpace::new(3).unwrap();
        let err = build_kd_dataset(&corpus(7), &preds, &ls, &[4, 4, 4], false, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(matches!(err, Error::StarvedClass { class: 1, available: 1, needed: 2 }));
    }

    #[test]
    fn replacement_fallback_fills_counts() {
        let preds = vec![0, 0, 0, 1, 2, 2, 2];
        let ls = LabelSpace::new(3).unwrap();
        let ds = build_kd_dataset(&corpus(7), &preds, &ls, &[6, 6, 6], true, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(ds.len(), 18);
        assert!(ds.examples.iter().all(|e| preds[e.provenance] != e.target));
    }

    #[test]
    fn manifest_round_trip() {
        let preds = vec![0, 1, 2, 0, 1, 2];
        let c = corpus(6);
        let ls = LabelSpace::new(3).unwrap();
        let ds = build_kd_dataset(&c, &preds, &ls, &[3, 2, 2], false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kd_manifest.tsv");
        write_kd_manifest(&ds, &path).unwrap();
        assert_eq!(read_kd_manifest(&path, &c, 3).unwrap(), ds);
    }

    #[test]
    fn rejects_tiny_label_space() {
        assert!(LabelSpace::new(1).is_err());
    }
}
