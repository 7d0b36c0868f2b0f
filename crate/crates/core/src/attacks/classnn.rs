//! Class-NN: one small membership classifier per class, trained on shadow
//! prediction vectors.

use rand::seq::SliceRandom;

use super::{AttackScores, EvalSet};
use crate::data::LabeledDataset;
use crate::error::{MistError, Result};
use crate::nn::{self, Batch, ModelParams};
use crate::rng::{derive_seed, domain, name_tag, stream};
use crate::shadow::ShadowEnsemble;

/// Classes with fewer rows than this are scored by the global classifier.
pub const MIN_CLASS_ROWS: usize = 8;

/// One shadow model's prediction on one pool instance.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub instance_id: usize,
    pub label: usize,
    pub member: bool,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShadowPredictions {
    pub rows: Vec<PredictionRow>,
}

impl ShadowPredictions {
    /// Query every shadow on every pool instance.
    pub fn from_ensemble(ensemble: &ShadowEnsemble, pool: &LabeledDataset) -> Result<Self> {
        let k = pool.num_classes();
        let mut rows = Vec::with_capacity(ensemble.shadows() * pool.len());
        for (s, model) in ensemble.models.iter().enumerate() {
            let probs = nn::predict_batch(model, pool.features())?;
            for (i, p) in probs.chunks(k).enumerate() {
                let id = pool.id(i);
                rows.push(PredictionRow {
                    instance_id: id,
                    label: pool.label(i),
                    member: ensemble.is_member(s, id),
                    probs: p.to_vec(),
                });
            }
        }
        Ok(Self { rows })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassNnSpec {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassNnSpec {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 30,
            lr: 0.1,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// `[p_y, sorted-descending p]`. Sorting removes the label permutation; the
/// leading `p_y` keeps the true-class confidence that sorting would hide.
fn features(probs: &[f64], label: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(probs.len() + 1);
    v.push(probs[label]);
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    v.extend(sorted);
    v
}

fn train_classifier(rows: &[&PredictionRow], spec: &ClassNnSpec, tag: u64) -> Result<ModelParams> {
    let dim = rows[0].probs.len() + 1;
    let mut x = Vec::with_capacity(rows.len() * dim);
    let mut y = Vec::with_capacity(rows.len());
    for r in rows {
        x.extend(features(&r.probs, r.label));
        y.push(usize::from(r.member));
    }
    let dims = vec![dim, spec.hidden, 2];
    let mut model = ModelParams::init(dims, &mut stream(spec.seed, &[domain::ATTACK, tag, 0]))?;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let b = spec.batch_size.max(1);
    for epoch in 0..spec.epochs {
        order.shuffle(&mut stream(spec.seed, &[domain::ATTACK, tag, 1, epoch as u64]));
        for chunk in order.chunks(b) {
            let mut feats = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                feats.extend_from_slice(&x[i * dim..(i + 1) * dim]);
            }
            let labels = chunk.iter().map(|&i| y[i]).collect();
            let (_, grad) = nn::ce_loss_and_grad(&model, &Batch::hard(feats, dim, labels)?)?;
            model = nn::sgd_step(&model, &grad, spec.lr)?;
        }
    }
    Ok(model)
}

/// Train one IN/OUT classifier per class on `shadow` rows and score each
/// evaluation instance by its class classifier's member probability on the
/// target model's prediction. Classes with fewer than [`MIN_CLASS_ROWS`]
/// rows, or rows of only one membership, use a classifier trained on all
/// rows; their ids are listed in `fallback_ids`.
pub fn classnn_attack(
    shadow: &ShadowPredictions,
    target: &ModelParams,
    eval: &EvalSet,
    spec: &ClassNnSpec,
) -> Result<AttackScores> {
    if shadow.rows.is_empty() {
        return Err(MistError::InvalidDataset("no shadow predictions".into()));
    }
    if spec.hidden == 0 || !(spec.lr > 0.0) {
        return Err(MistError::InvalidConfig("class-nn needs hidden ≥ 1 and lr > 0".into()));
    }
    let k = target.num_classes();
    if let Some(r) = shadow.rows.iter().find(|r| r.probs.len() != k) {
        return Err(MistError::DimensionMismatch {
            expected: k,
            actual: r.probs.len(),
        });
    }
    let tag = name_tag("classnn");
    let all: Vec<&PredictionRow> = shadow.rows.iter().collect();
    let global = train_classifier(&all, spec, derive_seed(tag, &[u64::MAX]))?;

    let mut per_class: Vec<Option<ModelParams>> = vec![None; k];
    for (class, slot) in per_class.iter_mut().enumerate() {
        let rows: Vec<&PredictionRow> = all.iter().copied().filter(|r| r.label == class).collect();
        let ins = rows.iter().filter(|r| r.member).count();
        if rows.len() >= MIN_CLASS_ROWS && ins > 0 && ins < rows.len() {
            *slot = Some(train_classifier(&rows, spec, derive_seed(tag, &[class as u64]))?);
        }
    }

    let probs = nn::predict_batch(target, eval.data.features())?;
    let mut scores = Vec::with_capacity(eval.len());
    let mut fallback_ids = Vec::new();
    for (i, p) in probs.chunks(k).enumerate() {
        let y = eval.data.label(i);
        let clf = match &per_class[y] {
            Some(m) => m,
            None => {
                fallback_ids.push(eval.data.id(i));
                &global
            }
        };
        let out = nn::forward(clf, &features(p, y))?;
        scores.push(out.prob(1));
    }
    let mut out = AttackScores::from_eval("classnn", eval, scores)?;
    out.fallback_ids = fallback_ids;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_lead_with_true_class() {
        assert_eq!(features(&[0.2, 0.7, 0.1], 0), vec![0.2, 0.7, 0.2, 0.1]);
    }
}
