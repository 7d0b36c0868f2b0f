//! Brute-force leave-one-out check of membership invariance at micro scale.
//!
//! Trains on `D` and on `D` minus one instance under identical seeds and
//! measures the largest change of the true-class probability over a probe
//! set.

use rand::seq::index::sample;

use crate::data::LabeledDataset;
use crate::error::{MistError, Result};
use crate::nn::{self, ModelParams};
use crate::rng::{derive_seed, domain, stream};
use crate::train::Recipe;

/// Larger micro datasets are rejected to keep the retraining bounded.
pub const MAX_ORACLE_ROWS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LooRemoval {
    pub removed_id: usize,
    pub sup_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LooReport {
    pub removals: Vec<LooRemoval>,
    pub mean_gap: f64,
}

/// The training set as a set: identical `(x, y)` rows collapse to one, the
/// survivors are ordered by `(y, x)` and each id becomes a hash of its row,
/// so the training run depends only on the set's contents and a row keeps
/// its id when another row is removed.
pub fn canonicalize(data: &LabeledDataset) -> Result<LabeledDataset> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let key_cmp = |&a: &usize, &b: &usize| {
        data.label(a).cmp(&data.label(b)).then_with(|| {
            data.row(a)
                .iter()
                .zip(data.row(b))
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    };
    order.sort_by(key_cmp);
    order.dedup_by(|a, b| key_cmp(a, b).is_eq());
    let mut features = Vec::with_capacity(order.len() * data.dim());
    let mut labels = Vec::with_capacity(order.len());
    for &i in &order {
        features.extend_from_slice(data.row(i));
        labels.push(data.label(i));
    }
    let ids = order.iter().map(|&i| content_id(data.row(i), data.label(i))).collect();
    LabeledDataset::new(features, data.dim(), labels, ids, data.num_classes())
}

fn content_id(x: &[f64], y: usize) -> usize {
    let bits: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
    derive_seed(y as u64, &bits) as usize
}

fn train_canonical(data: &LabeledDataset, layer_dims: &[usize], recipe: &Recipe) -> Result<ModelParams> {
    let mut recipe = recipe.clone();
    let cfg = recipe.config_mut();
    cfg.track_metrics = false;
    cfg.parallel = false;
    Ok(recipe.train(&canonicalize(data)?, None, layer_dims)?.model)
}

/// `max_probe |F(x; a)_y − F(x; b)_y|`.
pub fn sup_gap(a: &ModelParams, b: &ModelParams, probes: &LabeledDataset) -> Result<f64> {
    let k = a.num_classes();
    let pa = nn::predict_batch(a, probes.features())?;
    let pb = nn::predict_batch(b, probes.features())?;
    Ok((0..probes.len())
        .map(|i| {
            let y = probes.label(i);
            (pa[i * k + y] - pb[i * k + y]).abs()
        })
        .fold(0.0, f64::max))
}

/// Leave-one-out gaps for the given removed ids.
pub fn loo_gaps(
    data: &LabeledDataset,
    layer_dims: &[usize],
    recipe: &Recipe,
    probes: &LabeledDataset,
    removed_ids: &[usize],
) -> Result<LooReport> {
    if data.len() > MAX_ORACLE_ROWS {
        return Err(MistError::InvalidDataset(format!(
            "oracle data has {} rows, limit is {MAX_ORACLE_ROWS}",
            data.len()
        )));
    }
    if probes.is_empty() {
        return Err(MistError::InvalidConfig("probe set is empty".into()));
    }
    if removed_ids.is_empty() {
        return Err(MistError::InvalidConfig("need at least one removal".into()));
    }
    let full = train_canonical(data, layer_dims, recipe)?;
    let pos = data.positions();
    let mut removals = Vec::with_capacity(removed_ids.len());
    for &id in removed_ids {
        let drop = *pos.get(&id).ok_or(MistError::MissingRecord(id))?;
        let keep: Vec<usize> = (0..data.len()).filter(|&i| i != drop).collect();
        let reduced = train_canonical(&data.select(&keep)?, layer_dims, recipe)?;
        removals.push(LooRemoval {
            removed_id: id,
            sup_gap: sup_gap(&full, &reduced, probes)?,
        });
    }
    let mean_gap = removals.iter().map(|r| r.sup_gap).sum::<f64>() / removals.len() as f64;
    Ok(LooReport { removals, mean_gap })
}

/// Sample `trials` distinct instances of `data` (seeded) and report their
/// leave-one-out gaps.
pub fn loo_invariance_oracle(
    data: &LabeledDataset,
    layer_dims: &[usize],
    recipe: &Recipe,
    probes: &LabeledDataset,
    trials: usize,
    seed: u64,
) -> Result<LooReport> {
    if trials == 0 || trials > data.len() {
        return Err(MistError::InvalidConfig(format!(
            "trials must be in 1..={}, got {trials}",
            data.len()
        )));
    }
    let picks = sample(&mut stream(seed, &[domain::ORACLE]), data.len(), trials);
    let ids: Vec<usize> = picks.iter().map(|i| data.id(i)).collect();
    loo_gaps(data, layer_dims, recipe, probes, &ids)
}
