//! Membership-invariant subspace training and the plain SGD baseline.
//!
//! Each epoch: partition the training set into `C` subsets, run local SGD
//! from the current global model on every subset (phase 1), pull each
//! submodel's true-class confidence on its own subset toward the mean of
//! the frozen peer submodels (phase 2), then average the submodels.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{mixup_batch, partition, LabeledDataset, PartitionPlan};
use crate::error::{MistError, Result};
use crate::nn::{
    self, accuracy, average_params, ce_loss_and_grad, forward_trace, log_softmax, sgd_step,
    softmax_in_place, Batch, Gradient, ModelParams,
};
use crate::rng::{domain, stream};

/// Distance used by the cross-difference penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum XdiffVariant {
    /// `|F(x;w)_y − m_y(x)|`
    L1,
    /// `(F(x;w)_y − m_y(x))²`
    L2,
    /// `KL(m(x) ‖ F(x;w))` over the full prediction vector.
    Kl,
}

impl XdiffVariant {
    pub const ALL: [XdiffVariant; 3] = [XdiffVariant::L1, XdiffVariant::L2, XdiffVariant::Kl];
}

impl fmt::Display for XdiffVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            XdiffVariant::L1 => "L1",
            XdiffVariant::L2 => "L2",
            XdiffVariant::Kl => "KL",
        })
    }
}

impl FromStr for XdiffVariant {
    type Err = MistError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L1" => Ok(XdiffVariant::L1),
            "L2" => Ok(XdiffVariant::L2),
            "KL" => Ok(XdiffVariant::Kl),
            _ => Err(MistError::InvalidConfig(format!(
                "unknown xdiff variant {s:?} (expected L1, L2 or KL)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MistConfig {
    /// Number of submodels `C`.
    pub submodels: usize,
    pub epochs: usize,
    /// Phase-1 steps per epoch; `None` visits each subset instance once.
    pub t1: Option<usize>,
    /// Phase-2 steps per epoch; `None` uses the same rule as `t1`.
    pub t2: Option<usize>,
    /// Cross-difference weight `λ`.
    pub lambda: f64,
    pub variant: XdiffVariant,
    pub batch_size: usize,
    pub lr: f64,
    /// Phase-2 learning rate; defaults to `lr`.
    pub phase2_lr: Option<f64>,
    /// Epochs at which the learning rate is multiplied by 0.1.
    pub lr_decay_epochs: Vec<usize>,
    /// Mixup `α` for phase 1.
    pub mixup_alpha: Option<f64>,
    /// Add the mean CE loss to the phase-2 objective.
    pub phase2_include_ce: bool,
    pub seed: u64,
    /// Run the per-submodel phases on the rayon pool.
    pub parallel: bool,
    /// Record accuracies and the post-phase-2 cross difference every epoch.
    pub track_metrics: bool,
}

impl Default for MistConfig {
    fn default() -> Self {
        Self {
            submodels: 1,
            epochs: 10,
            t1: None,
            t2: None,
            lambda: 0.0,
            variant: XdiffVariant::L1,
            batch_size: 100,
            lr: 0.1,
            phase2_lr: None,
            lr_decay_epochs: Vec::new(),
            mixup_alpha: None,
            phase2_include_ce: false,
            seed: 0,
            parallel: false,
            track_metrics: true,
        }
    }
}

impl MistConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MistError::InvalidConfig(m));
        if self.submodels == 0 {
            return bad("submodels must be >= 1".into());
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.lambda > 0.0 && self.submodels < 2 {
            return bad("lambda > 0 needs at least 2 submodels".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if let Some(lr2) = self.phase2_lr {
            if !(lr2 > 0.0 && lr2.is_finite()) {
                return bad(format!("phase2_lr must be > 0, got {lr2}"));
            }
        }
        if let Some(a) = self.mixup_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return bad(format!("mixup alpha must be > 0, got {a}"));
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&m| m <= epoch).count();
        self.lr * 0.1f64.powi(decays as i32)
    }

    fn phase2_active(&self) -> bool {
        self.submodels >= 2 && (self.lambda > 0.0 || self.phase2_include_ce)
    }
}

/// Steps needed to visit every instance of a subset once.
pub fn default_t1(subset_size: usize, batch_size: usize) -> usize {
    subset_size.div_ceil(batch_size.max(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    /// Mean phase-1 minibatch CE loss.
    pub ce_loss: f64,
    /// Mean per-instance cross difference of the final submodels against
    /// their peers (`None` when not tracked or `C = 1`).
    pub xdiff_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub model: ModelParams,
}

/// Mean of the peers' prediction vectors, `p_1 + Σ_{i>1}(p_i − p_1)/n`.
/// Identical peers give back `p_1` bit for bit.
pub fn peer_mean_predictions(peers: &[&ModelParams], inputs: &[f64]) -> Result<Vec<f64>> {
    let (first, rest) = peers
        .split_first()
        .ok_or_else(|| MistError::InvalidConfig("cross difference needs at least one peer".into()))?;
    for p in rest {
        first.same_shape(p)?;
    }
    let base = nn::predict_batch(first, inputs)?;
    if rest.is_empty() {
        return Ok(base);
    }
    let mut diff = vec![0.0; base.len()];
    for p in rest {
        let probs = nn::predict_batch(p, inputs)?;
        for ((d, q), b) in diff.iter_mut().zip(&probs).zip(&base) {
            *d += q - b;
        }
    }
    let n = peers.len() as f64;
    Ok(base.iter().zip(&diff).map(|(b, d)| b + d / n).collect())
}

/// Summed cross difference of `w` against per-row reference prediction
/// vectors, and its gradient (unscaled).
pub fn xdiff_against_reference(
    w: &ModelParams,
    inputs: &[f64],
    labels: &[usize],
    reference: &[f64],
    variant: XdiffVariant,
) -> Result<(f64, Gradient)> {
    let k = w.num_classes();
    if labels.is_empty() {
        return Err(MistError::EmptyBatch);
    }
    if reference.len() != labels.len() * k {
        return Err(MistError::DimensionMismatch {
            expected: labels.len() * k,
            actual: reference.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(MistError::LabelOutOfRange { label, classes: k });
    }
    let trace = forward_trace(w, inputs)?;
    if trace.rows != labels.len() {
        return Err(MistError::DimensionMismatch {
            expected: labels.len(),
            actual: trace.rows,
        });
    }
    let mut dlogits = vec![0.0; labels.len() * k];
    let mut loss = 0.0;
    for (r, ((z, m), dz)) in trace
        .logits()
        .chunks(k)
        .zip(reference.chunks(k))
        .zip(dlogits.chunks_mut(k))
        .enumerate()
    {
        let y = labels[r];
        match variant {
            XdiffVariant::L1 | XdiffVariant::L2 => {
                let mut p = z.to_vec();
                softmax_in_place(&mut p);
                let diff = p[y] - m[y];
                let outer = if variant == XdiffVariant::L1 {
                    loss += diff.abs();
                    if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                } else {
                    loss += diff * diff;
                    2.0 * diff
                };
                if outer != 0.0 {
                    // ∂p_y/∂z_j = p_y (δ_yj − p_j)
                    let py = p[y];
                    for (j, d) in dz.iter_mut().enumerate() {
                        *d = -outer * py * p[j];
                    }
                    dz[y] += outer * py;
                }
            }
            XdiffVariant::Kl => {
                let logp = log_softmax(z);
                let mut mass = 0.0;
                for (&mj, &lp) in m.iter().zip(&logp) {
                    if mj > 0.0 {
                        loss += mj * (mj.ln() - lp);
                    }
                    mass += mj;
                }
                for ((d, &mj), &lp) in dz.iter_mut().zip(m).zip(&logp) {
                    *d = mass * lp.exp() - mj;
                }
            }
        }
    }
    let (grad, _) = nn::backprop(w, &trace, &dlogits, false);
    Ok((loss, grad))
}

/// Cross-difference loss of `w` on its own subset against frozen peers,
/// summed over the subset, with its gradient w.r.t. `w` only.
pub fn xdiff_loss_and_grad(
    w: &ModelParams,
    own_subset: &Batch,
    frozen_peers: &[ModelParams],
    variant: XdiffVariant,
) -> Result<(f64, Gradient)> {
    if own_subset.is_empty() {
        return Err(MistError::EmptyBatch);
    }
    for p in frozen_peers {
        w.same_shape(p)?;
    }
    let peers: Vec<&ModelParams> = frozen_peers.iter().collect();
    let reference = peer_mean_predictions(&peers, own_subset.features())?;
    xdiff_against_reference(
        w,
        own_subset.features(),
        &own_subset.labels(),
        &reference,
        variant,
    )
}

/// Phase 1: `steps` minibatch CE updates over `subset` (positions into
/// `data`), cycling through consecutive chunks in subset order.
fn local_training(
    start: &ModelParams,
    data: &LabeledDataset,
    subset: &[usize],
    steps: usize,
    cfg: &MistConfig,
    lr: f64,
    epoch: usize,
    c: usize,
) -> Result<(ModelParams, f64)> {
    let mut rng = stream(cfg.seed, &[domain::LOCAL, epoch as u64, c as u64]);
    let chunks: Vec<&[usize]> = subset.chunks(cfg.batch_size).collect();
    let mut w = start.clone();
    let mut loss_sum = 0.0;
    for t in 0..steps {
        let mut batch = data.batch(chunks[t % chunks.len()]);
        if let Some(alpha) = cfg.mixup_alpha {
            if batch.len() >= 2 {
                batch = mixup_batch(&batch, data.num_classes(), alpha, &mut rng)?;
            }
        }
        let (loss, grad) = ce_loss_and_grad(&w, &batch)?;
        loss_sum += loss;
        w = sgd_step(&w, &grad, lr)?;
    }
    Ok((w, if steps > 0 { loss_sum / steps as f64 } else { 0.0 }))
}

/// Phase 2: `steps` updates minimizing `(λ/|B|)·xdiff` on minibatches of
/// the unmixed subset, against fixed reference predictions.
fn xdifference_update(
    start: &ModelParams,
    data: &LabeledDataset,
    subset: &[usize],
    reference: &[f64],
    steps: usize,
    cfg: &MistConfig,
    lr: f64,
) -> Result<ModelParams> {
    let k = data.num_classes();
    let chunks: Vec<(usize, &[usize])> = subset
        .chunks(cfg.batch_size)
        .scan(0, |off, ch| {
            let start = *off;
            *off += ch.len();
            Some((start, ch))
        })
        .collect();
    let mut w = start.clone();
    for t in 0..steps {
        let (off, chunk) = chunks[t % chunks.len()];
        let batch = data.batch(chunk);
        let refs = &reference[off * k..(off + chunk.len()) * k];
        let (_, mut grad) = xdiff_against_reference(
            &w,
            batch.features(),
            &batch.labels(),
            refs,
            cfg.variant,
        )?;
        grad.scale(cfg.lambda / chunk.len() as f64);
        if cfg.phase2_include_ce {
            let (_, ce_grad) = ce_loss_and_grad(&w, &batch)?;
            grad.add_assign(&ce_grad);
        }
        w = sgd_step(&w, &grad, lr)?;
    }
    Ok(w)
}

fn check_arch(data: &LabeledDataset, layer_dims: &[usize]) -> Result<()> {
    let ok = layer_dims.len() >= 2
        && layer_dims[0] == data.dim()
        && *layer_dims.last().unwrap() == data.num_classes();
    if !ok {
        return Err(MistError::InvalidConfig(format!(
            "layer dims {layer_dims:?} do not match data (dim {}, {} classes)",
            data.dim(),
            data.num_classes()
        )));
    }
    Ok(())
}

pub fn init_model(layer_dims: &[usize], seed: u64) -> Result<ModelParams> {
    ModelParams::init(layer_dims.to_vec(), &mut stream(seed, &[domain::INIT]))
}

fn epoch_accuracy(
    model: &ModelParams,
    data: &LabeledDataset,
    val: Option<&LabeledDataset>,
    track: bool,
) -> Result<(Option<f64>, Option<f64>)> {
    if !track {
        return Ok((None, None));
    }
    let train = accuracy(model, data.features(), data.labels())?;
    let val = match val {
        Some(v) if !v.is_empty() => Some(accuracy(model, v.features(), v.labels())?),
        _ => None,
    };
    Ok((Some(train), val))
}

fn map_submodels<T: Send>(
    parallel: bool,
    count: usize,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if parallel {
        (0..count).into_par_iter().map(f).collect()
    } else {
        (0..count).map(f).collect()
    }
}

/// [`partition`] of the dataset's ids, returned as row positions.
fn partition_positions(data: &LabeledDataset, parts: usize, epoch: usize, seed: u64) -> Result<PartitionPlan> {
    let plan = partition(data.ids(), parts, epoch, seed)?;
    let pos = data.positions();
    Ok(PartitionPlan {
        epoch,
        subsets: plan
            .subsets
            .into_iter()
            .map(|s| s.into_iter().map(|id| pos[&id]).collect())
            .collect(),
    })
}

/// Membership-invariant subspace training of an MLP with `layer_dims`.
pub fn mist_train(
    data: &LabeledDataset,
    val: Option<&LabeledDataset>,
    layer_dims: &[usize],
    cfg: &MistConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_arch(data, layer_dims)?;
    if cfg.submodels > data.len() {
        return Err(MistError::TooManySubsets {
            parts: cfg.submodels,
            items: data.len(),
        });
    }
    let mut global = init_model(layer_dims, cfg.seed)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let lr2_base = cfg.phase2_lr.unwrap_or(cfg.lr);

    for e in 1..=cfg.epochs {
        let lr = cfg.lr_at(e);
        let lr2 = lr2_base * (lr / cfg.lr);
        let plan = partition_positions(data, cfg.submodels, e, cfg.seed)?;

        let phase1 = map_submodels(cfg.parallel, cfg.submodels, |c| {
            let subset = &plan.subsets[c];
            let steps = cfg.t1.unwrap_or_else(|| default_t1(subset.len(), cfg.batch_size));
            local_training(&global, data, subset, steps, cfg, lr, e, c)
        })?;
        let ce_loss = phase1.iter().map(|(_, l)| l).sum::<f64>() / phase1.len() as f64;
        let snapshots: Vec<ModelParams> = phase1.into_iter().map(|(m, _)| m).collect();

        let need_refs = cfg.submodels >= 2 && (cfg.phase2_active() || cfg.track_metrics);
        let references = if need_refs {
            map_submodels(cfg.parallel, cfg.submodels, |c| {
                let peers: Vec<&ModelParams> = snapshots
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != c)
                    .map(|(_, m)| m)
                    .collect();
                peer_mean_predictions(&peers, data.batch(&plan.subsets[c]).features())
            })?
        } else {
            Vec::new()
        };

        let models = if cfg.phase2_active() {
            map_submodels(cfg.parallel, cfg.submodels, |c| {
                let subset = &plan.subsets[c];
                let steps = cfg.t2.unwrap_or_else(|| default_t1(subset.len(), cfg.batch_size));
                xdifference_update(&snapshots[c], data, subset, &references[c], steps, cfg, lr2)
            })?
        } else {
            snapshots
        };

        let xdiff_loss = if need_refs && cfg.track_metrics {
            let mut total = 0.0;
            for (c, m) in models.iter().enumerate() {
                let own = data.batch(&plan.subsets[c]);
                let (loss, _) = xdiff_against_reference(
                    m,
                    own.features(),
                    &own.labels(),
                    &references[c],
                    cfg.variant,
                )?;
                total += loss;
            }
            Some(total / data.len() as f64)
        } else {
            None
        };

        global = average_params(&models)?;
        let (train_acc, val_acc) = epoch_accuracy(&global, data, val, cfg.track_metrics)?;
        epochs.push(EpochLog {
            epoch: e,
            train_acc,
            val_acc,
            ce_loss,
            xdiff_loss,
        });
    }
    Ok(TrainLog {
        epochs,
        model: global,
    })
}

/// Plain minibatch SGD: each epoch reshuffles the data and visits every
/// instance once. Uses the `(seed, epoch)` partition order and `(seed,
/// epoch, 0)` mixup streams, so it coincides with a single-submodel, `λ = 0` run.
pub fn baseline_train(
    data: &LabeledDataset,
    val: Option<&LabeledDataset>,
    layer_dims: &[usize],
    cfg: &MistConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_arch(data, layer_dims)?;
    let mut model = init_model(layer_dims, cfg.seed)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for e in 1..=cfg.epochs {
        let lr = cfg.lr_at(e);
        let order = partition_positions(data, 1, e, cfg.seed)?
            .subsets
            .pop()
            .expect("one subset");
        let mut rng = stream(cfg.seed, &[domain::LOCAL, e as u64, 0]);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = data.batch(chunk);
            if let (Some(alpha), true) = (cfg.mixup_alpha, batch.len() >= 2) {
                batch = mixup_batch(&batch, data.num_classes(), alpha, &mut rng)?;
            }
            let (loss, grad) = ce_loss_and_grad(&model, &batch)?;
            model = sgd_step(&model, &grad, lr)?;
            loss_sum += loss;
            steps += 1;
        }
        let (train_acc, val_acc) = epoch_accuracy(&model, data, val, cfg.track_metrics)?;
        epochs.push(EpochLog {
            epoch: e,
            train_acc,
            val_acc,
            ce_loss: loss_sum / steps as f64,
            xdiff_loss: None,
        });
    }
    Ok(TrainLog { epochs, model })
}

/// A complete training procedure: plain SGD or subspace training.
#[derive(Clone, Debug, PartialEq)]
pub enum Recipe {
    Sgd(MistConfig),
    Mist(MistConfig),
}

impl Recipe {
    pub fn config(&self) -> &MistConfig {
        match self {
            Recipe::Sgd(c) | Recipe::Mist(c) => c,
        }
    }

    pub fn config_mut(&mut self) -> &mut MistConfig {
        match self {
            Recipe::Sgd(c) | Recipe::Mist(c) => c,
        }
    }

    pub fn train(
        &self,
        data: &LabeledDataset,
        val: Option<&LabeledDataset>,
        layer_dims: &[usize],
    ) -> Result<TrainLog> {
        match self {
            Recipe::Sgd(c) => baseline_train(data, val, layer_dims, c),
            Recipe::Mist(c) => mist_train(data, val, layer_dims, c),
        }
    }
}
