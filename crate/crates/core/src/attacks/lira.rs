//! Online likelihood-ratio attack and its canary-query variant.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{AttackScores, EvalSet};
use crate::data::LabeledDataset;
use crate::error::{MistError, Result};
use crate::nn::{self, ModelParams};
use crate::rng::{domain, name_tag, stream};
use crate::shadow::{
    fit_gaussians, instance_scores, score_from_logits, GaussianPair, ScoreKind, ShadowEnsemble,
    ShadowRecord, MIN_COVERAGE, SIGMA_FLOOR,
};

/// `log N(s; μ_in, σ_in) − log N(s; μ_out, σ_out)`.
pub fn lira_log_ratio(s: f64, g: &GaussianPair) -> f64 {
    let zin = (s - g.mu_in) / g.sigma_in;
    let zout = (s - g.mu_out) / g.sigma_out;
    0.5 * (zout * zout - zin * zin) + (g.sigma_out.ln() - g.sigma_in.ln())
}

/// Online LIRA: fit IN/OUT Gaussians per instance from shadow records and
/// score the target's observation by its log likelihood ratio.
pub fn lira_attack(
    records: &BTreeMap<usize, ShadowRecord>,
    target: &ModelParams,
    eval: &EvalSet,
    kind: ScoreKind,
) -> Result<AttackScores> {
    let observed = instance_scores(target, &eval.data)?;
    let mut scores = Vec::with_capacity(eval.len());
    for (i, obs) in observed.iter().enumerate() {
        let id = eval.data.id(i);
        let record = records.get(&id).ok_or(MistError::MissingRecord(id))?;
        if record.score_kind != kind {
            return Err(MistError::InvalidConfig(format!(
                "record for {id} holds {} scores, attack uses {kind}",
                record.score_kind
            )));
        }
        let g = fit_gaussians(record)?;
        scores.push(lira_log_ratio(obs.get(kind), &g));
    }
    AttackScores::from_eval("lira", eval, scores)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanaryConfig {
    pub n_canaries: usize,
    pub opt_steps: usize,
    /// Ascent step length in feature units.
    pub step_size: f64,
    /// Std of the Gaussian start perturbation in feature units.
    pub init_noise: f64,
    pub seed: u64,
}

impl CanaryConfig {
    /// 4 canaries, 20 steps, step `0.05·scale`, start noise `0.01·scale`.
    pub fn defaults_for(data: &LabeledDataset, seed: u64) -> Self {
        let scale = data.feature_scale();
        Self {
            n_canaries: 4,
            opt_steps: 20,
            step_size: 0.05 * scale,
            init_noise: 0.01 * scale,
            seed,
        }
    }
}

fn mean_loss_and_grad(models: &[&ModelParams], x: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; x.len()];
    for m in models {
        let (l, g) = nn::ce_input_grad(m, x, y)?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let n = models.len() as f64;
    for v in &mut grad {
        *v /= n;
    }
    Ok((loss / n, grad))
}

/// `J(x′) = mean_OUT loss(x′) − mean_IN loss(x′)` and its input gradient.
pub fn canary_objective(
    in_models: &[&ModelParams],
    out_models: &[&ModelParams],
    x: &[f64],
    label: usize,
) -> Result<(f64, Vec<f64>)> {
    let (lo, go) = mean_loss_and_grad(out_models, x, label)?;
    let (li, gi) = mean_loss_and_grad(in_models, x, label)?;
    Ok((lo - li, go.iter().zip(&gi).map(|(a, b)| a - b).collect()))
}

/// Normalized gradient ascent on `J` from `start`; a step is taken only if
/// it does not lower `J` (the step length halves up to 8 times otherwise).
fn ascend(
    in_models: &[&ModelParams],
    out_models: &[&ModelParams],
    start: Vec<f64>,
    label: usize,
    cfg: &CanaryConfig,
) -> Result<Vec<f64>> {
    let mut x = start;
    if cfg.opt_steps == 0 {
        return Ok(x);
    }
    let (mut j, mut g) = canary_objective(in_models, out_models, &x, label)?;
    for _ in 0..cfg.opt_steps {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        let mut eta = cfg.step_size;
        let mut accepted = false;
        for _ in 0..8 {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + eta * b / norm).collect();
            let (jc, gc) = canary_objective(in_models, out_models, &cand, label)?;
            if jc >= j {
                x = cand;
                j = jc;
                g = gc;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(x)
}

/// `first + Σ (v − first) / n`, exact for identical inputs.
fn stable_mean(xs: &[f64]) -> f64 {
    let first = xs[0];
    first + xs.iter().map(|v| v - first).sum::<f64>() / xs.len() as f64
}

fn point_score(model: &ModelParams, x: &[f64], label: usize, kind: ScoreKind) -> Result<f64> {
    let logits = nn::logits_batch(model, x)?;
    Ok(score_from_logits(&logits, label).get(kind))
}

fn lira_at_point(
    ensemble: &ShadowEnsemble,
    in_idx: &[usize],
    out_idx: &[usize],
    target: &ModelParams,
    x: &[f64],
    label: usize,
    id: usize,
    kind: ScoreKind,
) -> Result<f64> {
    let score_of = |idx: &[usize]| -> Result<Vec<f64>> {
        idx.iter()
            .map(|&s| point_score(&ensemble.models[s], x, label, kind))
            .collect()
    };
    let record = ShadowRecord {
        instance_id: id,
        in_scores: score_of(in_idx)?,
        out_scores: score_of(out_idx)?,
        score_kind: kind,
    };
    let g = fit_gaussians(&record)?;
    Ok(lira_log_ratio(point_score(target, x, label, kind)?, &g))
}

/// Mean and std of every observation on one side, for instances whose own
/// shadows are too few to fit that side.
fn global_stats(ensemble: &ShadowEnsemble, in_side: bool, kind: ScoreKind) -> (f64, f64) {
    let v: Vec<f64> = ensemble
        .observations
        .iter()
        .filter(|o| o.in_flag == in_side)
        .map(|o| o.score(kind))
        .collect();
    if v.len() < 2 {
        return (0.0, 1.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt().max(SIGMA_FLOOR))
}

/// CANARY: per instance, craft canaries near `x` that maximize the OUT−IN
/// loss gap of the shadow models, then average the LIRA log ratio measured
/// at the canaries. Instances with fewer than two IN or OUT shadows fall
/// back to plain LIRA at `x`, borrowing the ensemble-wide statistics for
/// the under-populated side, and are listed in `fallback_ids`.
pub fn canary_attack(
    ensemble: &ShadowEnsemble,
    target: &ModelParams,
    eval: &EvalSet,
    cfg: &CanaryConfig,
    kind: ScoreKind,
) -> Result<AttackScores> {
    if cfg.n_canaries == 0 {
        return Err(MistError::InvalidConfig("need at least one canary".into()));
    }
    let tag = name_tag("canary");
    let global_in = global_stats(ensemble, true, kind);
    let global_out = global_stats(ensemble, false, kind);
    let mut scores = Vec::with_capacity(eval.len());
    let mut fallback_ids = Vec::new();
    for i in 0..eval.len() {
        let id = eval.data.id(i);
        let y = eval.data.label(i);
        let x = eval.data.row(i);
        let (in_idx, out_idx): (Vec<usize>, Vec<usize>) =
            (0..ensemble.shadows()).partition(|&s| ensemble.is_member(s, id));
        if in_idx.len() < MIN_COVERAGE || out_idx.len() < MIN_COVERAGE {
            fallback_ids.push(id);
            let side = |idx: &[usize], global: (f64, f64)| -> Result<(f64, f64)> {
                let v: Vec<f64> = idx
                    .iter()
                    .map(|&s| point_score(&ensemble.models[s], x, y, kind))
                    .collect::<Result<_>>()?;
                Ok(match v.len() {
                    0 => global,
                    1 => (v[0], global.1),
                    _ => {
                        let m = v.iter().sum::<f64>() / v.len() as f64;
                        let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
                        (m, var.sqrt().max(SIGMA_FLOOR))
                    }
                })
            };
            let (mu_in, sigma_in) = side(&in_idx, global_in)?;
            let (mu_out, sigma_out) = side(&out_idx, global_out)?;
            let pair = GaussianPair {
                mu_in,
                sigma_in,
                mu_out,
                sigma_out,
            };
            scores.push(lira_log_ratio(point_score(target, x, y, kind)?, &pair));
            continue;
        }
        let in_models: Vec<&ModelParams> = in_idx.iter().map(|&s| &ensemble.models[s]).collect();
        let out_models: Vec<&ModelParams> = out_idx.iter().map(|&s| &ensemble.models[s]).collect();
        let mut ratios = Vec::with_capacity(cfg.n_canaries);
        for j in 0..cfg.n_canaries {
            let mut start = x.to_vec();
            if cfg.init_noise > 0.0 {
                let mut rng = stream(cfg.seed, &[domain::ATTACK, tag, id as u64, j as u64]);
                for v in &mut start {
                    *v += cfg.init_noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let canary = ascend(&in_models, &out_models, start, y, cfg)?;
            ratios.push(lira_at_point(ensemble, &in_idx, &out_idx, target, &canary, y, id, kind)?);
        }
        scores.push(stable_mean(&ratios));
    }
    let mut out = AttackScores::from_eval("canary", eval, scores)?;
    out.fallback_ids = fallback_ids;
    Ok(out)
}
