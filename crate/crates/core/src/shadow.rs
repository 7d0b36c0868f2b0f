//! Shadow-model ensembles with IN/OUT bookkeeping, the per-instance scores
//! file, and per-instance Gaussian fits used by likelihood-ratio attacks.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{coverage_gaps, shadow_membership, LabeledDataset, ShadowScheme};
use crate::error::{MistError, Result};
use crate::nn::{self, max_nll, ModelParams, PROB_FLOOR};
use crate::rng::{derive_seed, domain};
use crate::train::Recipe;

/// Lower bound on fitted standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Minimum IN and OUT observations per evaluated instance.
pub const MIN_COVERAGE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ScoreKind {
    /// Cross-entropy loss of the true class.
    Loss,
    /// `log(p_y / (1 − p_y))` with `p_y` clamped to `[1e-12, 1 − 1e-12]`.
    #[default]
    LogitConfidence,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Loss => "loss",
            ScoreKind::LogitConfidence => "logit",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = MistError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(ScoreKind::Loss),
            "logit" | "logit_confidence" => Ok(ScoreKind::LogitConfidence),
            _ => Err(MistError::InvalidConfig(format!(
                "unknown score kind {s:?} (expected loss or logit)"
            ))),
        }
    }
}

/// Loss and logit-scaled confidence of one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceScore {
    pub loss: f64,
    pub logit_confidence: f64,
}

impl InstanceScore {
    pub fn get(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Loss => self.loss,
            ScoreKind::LogitConfidence => self.logit_confidence,
        }
    }
}

fn logsumexp<'a>(xs: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let max = xs.clone().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Scores from raw logits: loss `= lse(z) − z_y` and
/// `φ = z_y − lse_{k≠y}(z_k)`, both clamped to the probability floor.
pub fn score_from_logits(logits: &[f64], label: usize) -> InstanceScore {
    let cap = max_nll();
    let lse = logsumexp(logits.iter());
    let loss = (lse - logits[label]).min(cap);
    let others = logsumexp(
        logits
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != label)
            .map(|(_, v)| v),
    );
    let phi_cap = ((1.0 - PROB_FLOOR) / PROB_FLOOR).ln();
    let phi = (logits[label] - others).clamp(-phi_cap, phi_cap);
    InstanceScore {
        loss,
        logit_confidence: phi,
    }
}

/// Scores of every row of `data` under `model`.
pub fn instance_scores(model: &ModelParams, data: &LabeledDataset) -> Result<Vec<InstanceScore>> {
    let logits = nn::logits_batch(model, data.features())?;
    let k = model.num_classes();
    Ok(logits
        .chunks(k)
        .zip(data.labels())
        .map(|(z, &y)| score_from_logits(z, y))
        .collect())
}

/// One scores-file line: a pool instance scored by one shadow model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadowObservation {
    pub instance_id: usize,
    pub shadow_index: usize,
    pub in_flag: bool,
    pub loss: f64,
    pub logit_confidence: f64,
}

impl ShadowObservation {
    pub fn score(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Loss => self.loss,
            ScoreKind::LogitConfidence => self.logit_confidence,
        }
    }
}

/// Per-instance IN and OUT scores gathered across shadow models.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowRecord {
    pub instance_id: usize,
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
    pub score_kind: ScoreKind,
}

/// Gaussian fits of the IN and OUT score distributions of one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPair {
    pub mu_in: f64,
    pub sigma_in: f64,
    pub mu_out: f64,
    pub sigma_out: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn fit_gaussians_with_floor(record: &ShadowRecord, sigma_floor: f64) -> Result<GaussianPair> {
    for (side, scores) in [("IN", &record.in_scores), ("OUT", &record.out_scores)] {
        if scores.len() < MIN_COVERAGE {
            return Err(MistError::TooFewScores {
                side,
                required: MIN_COVERAGE,
                actual: scores.len(),
            });
        }
    }
    let (mu_in, s_in) = mean_std(&record.in_scores);
    let (mu_out, s_out) = mean_std(&record.out_scores);
    Ok(GaussianPair {
        mu_in,
        sigma_in: s_in.max(sigma_floor),
        mu_out,
        sigma_out: s_out.max(sigma_floor),
    })
}

/// Sample mean and unbiased standard deviation per side, floored at
/// [`SIGMA_FLOOR`].
pub fn fit_gaussians(record: &ShadowRecord) -> Result<GaussianPair> {
    fit_gaussians_with_floor(record, SIGMA_FLOOR)
}

/// Group observations into per-instance records, scores in shadow order.
pub fn records_from_observations(
    observations: &[ShadowObservation],
    kind: ScoreKind,
) -> BTreeMap<usize, ShadowRecord> {
    let mut sorted: Vec<&ShadowObservation> = observations.iter().collect();
    sorted.sort_by_key(|o| (o.instance_id, o.shadow_index));
    let mut out: BTreeMap<usize, ShadowRecord> = BTreeMap::new();
    for o in sorted {
        let rec = out.entry(o.instance_id).or_insert_with(|| ShadowRecord {
            instance_id: o.instance_id,
            in_scores: Vec::new(),
            out_scores: Vec::new(),
            score_kind: kind,
        });
        if o.in_flag {
            rec.in_scores.push(o.score(kind));
        } else {
            rec.out_scores.push(o.score(kind));
        }
    }
    out
}

/// Shadow models trained on known member sets of a shared pool.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowEnsemble {
    pub models: Vec<ModelParams>,
    /// Sorted member ids of each shadow model.
    pub membership: Vec<Vec<usize>>,
    /// Shadow-major, pool-order observations.
    pub observations: Vec<ShadowObservation>,
}

impl ShadowEnsemble {
    /// Assemble an ensemble from trained models and their member sets,
    /// scoring every `pool` row under every model.
    pub fn from_models(
        models: Vec<ModelParams>,
        mut membership: Vec<Vec<usize>>,
        pool: &LabeledDataset,
    ) -> Result<Self> {
        if models.len() != membership.len() {
            return Err(MistError::DimensionMismatch {
                expected: models.len(),
                actual: membership.len(),
            });
        }
        for m in &mut membership {
            m.sort_unstable();
        }
        let mut observations = Vec::with_capacity(models.len() * pool.len());
        for (s, model) in models.iter().enumerate() {
            let members: HashSet<usize> = membership[s].iter().copied().collect();
            for (i, sc) in instance_scores(model, pool)?.iter().enumerate() {
                let id = pool.id(i);
                observations.push(ShadowObservation {
                    instance_id: id,
                    shadow_index: s,
                    in_flag: members.contains(&id),
                    loss: sc.loss,
                    logit_confidence: sc.logit_confidence,
                });
            }
        }
        Ok(Self {
            models,
            membership,
            observations,
        })
    }

    pub fn shadows(&self) -> usize {
        self.models.len()
    }

    pub fn records(&self, kind: ScoreKind) -> BTreeMap<usize, ShadowRecord> {
        records_from_observations(&self.observations, kind)
    }

    /// Whether `id` was a training member of shadow `s`.
    pub fn is_member(&self, s: usize, id: usize) -> bool {
        self.membership[s].binary_search(&id).is_ok()
    }
}

/// Options for [`train_shadow_ensemble`].
#[derive(Clone, Debug)]
pub struct ShadowConfig {
    pub shadows: usize,
    pub scheme: ShadowScheme,
    pub seed: u64,
    pub parallel: bool,
}

/// Train `S` shadow models with `recipe` on member sets drawn from `pool`,
/// and score every pool instance under every shadow.
pub fn train_shadow_ensemble(
    pool: &LabeledDataset,
    layer_dims: &[usize],
    recipe: &Recipe,
    cfg: &ShadowConfig,
) -> Result<ShadowEnsemble> {
    if cfg.shadows == 0 {
        return Err(MistError::InvalidConfig("need at least one shadow model".into()));
    }
    let membership = shadow_membership(pool.ids(), cfg.shadows, cfg.scheme, cfg.seed);
    let uncovered = coverage_gaps(pool.ids(), &membership, MIN_COVERAGE);
    if !uncovered.is_empty() {
        return Err(MistError::InsufficientCoverage {
            required: MIN_COVERAGE,
            ids: uncovered,
        });
    }
    let train_one = |s: usize| -> Result<ModelParams> {
        let members = pool.select_ids(&membership[s])?;
        let mut recipe = recipe.clone();
        let shadow_cfg = recipe.config_mut();
        shadow_cfg.seed = derive_seed(cfg.seed, &[domain::SHADOW_TRAIN, s as u64]);
        shadow_cfg.track_metrics = false;
        // The rayon pool is already busy with one task per shadow.
        shadow_cfg.parallel = false;
        Ok(recipe.train(&members, None, layer_dims)?.model)
    };
    let models: Vec<ModelParams> = if cfg.parallel {
        (0..cfg.shadows).into_par_iter().map(train_one).collect::<Result<_>>()?
    } else {
        (0..cfg.shadows).map(train_one).collect::<Result<_>>()?
    };
    ShadowEnsemble::from_models(models, membership, pool)
}

const SCORES_MAGIC: &str = "#mistlab-scores v1";

/// Write the tab-separated scores file.
pub fn write_scores(
    path: impl AsRef<Path>,
    shadows: usize,
    observations: &[ShadowObservation],
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| MistError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "{SCORES_MAGIC} S={shadows} kind=both")?;
        for o in observations {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                o.instance_id,
                o.shadow_index,
                u8::from(o.in_flag),
                o.loss,
                o.logit_confidence
            )?;
        }
        w.flush()
    };
    body().map_err(|e| MistError::io(path, e))
}

/// Read a scores file; returns the declared shadow count and observations.
pub fn read_scores(path: impl AsRef<Path>) -> Result<(usize, Vec<ShadowObservation>)> {
    let path = path.as_ref();
    let err = |line: usize, message: String| MistError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| MistError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| err(1, "empty scores file".into()))?
        .map_err(|e| MistError::io(path, e))?;
    let rest = header
        .strip_prefix(SCORES_MAGIC)
        .ok_or_else(|| err(1, format!("bad header {header:?}")))?;
    let shadows = rest
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("S="))
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| err(1, format!("header lacks S=<count>: {header:?}")))?;
    let mut observations = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| MistError::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != 5 {
            return Err(err(lineno, format!("expected 5 fields, found {}", cells.len())));
        }
        let int = |c: &str, what: &str| {
            c.parse::<usize>()
                .map_err(|_| err(lineno, format!("bad {what} {c:?}")))
        };
        let real = |c: &str, what: &str| {
            c.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(lineno, format!("bad {what} {c:?}")))
        };
        let in_flag = match cells[2] {
            "0" => false,
            "1" => true,
            other => return Err(err(lineno, format!("bad in_flag {other:?}"))),
        };
        observations.push(ShadowObservation {
            instance_id: int(cells[0], "instance_id")?,
            shadow_index: int(cells[1], "shadow_index")?,
            in_flag,
            loss: real(cells[3], "loss")?,
            logit_confidence: real(cells[4], "logit_confidence")?,
        });
    }
    Ok((shadows, observations))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ins: &[f64], outs: &[f64]) -> ShadowRecord {
        ShadowRecord {
            instance_id: 0,
            in_scores: ins.to_vec(),
            out_scores: outs.to_vec(),
            score_kind: ScoreKind::LogitConfidence,
        }
    }

    #[test]
    fn zero_variance_is_floored() {
        let g = fit_gaussians(&rec(&[1.0, 1.0, 1.0], &[3.0, 3.0, 3.0])).unwrap();
        assert_eq!((g.mu_in, g.mu_out), (1.0, 3.0));
        assert_eq!((g.sigma_in, g.sigma_out), (SIGMA_FLOOR, SIGMA_FLOOR));
    }

    #[test]
    fn unbiased_std() {
        let g = fit_gaussians(&rec(&[0.0, 2.0], &[5.0, 5.0])).unwrap();
        assert_eq!(g.mu_in, 1.0);
        assert!((g.sigma_in - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn too_few_scores() {
        assert!(matches!(
            fit_gaussians(&rec(&[0.0, 2.0], &[5.0])),
            Err(MistError::TooFewScores { side: "OUT", .. })
        ));
    }

    #[test]
    fn logit_score_matches_probability_form() {
        let z = [0.3, -1.2, 2.0];
        let s = score_from_logits(&z, 0);
        let mut p = z.to_vec();
        crate::nn::softmax_in_place(&mut p);
        assert!((s.logit_confidence - (p[0] / (1.0 - p[0])).ln()).abs() < 1e-12);
        assert!((s.loss + p[0].ln()).abs() < 1e-12);
        let sat = score_from_logits(&[1000.0, 0.0], 0);
        assert!((sat.logit_confidence - ((1.0 - 1e-12) / 1e-12f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn scores_file_roundtrip() {
        let obs = vec![
            ShadowObservation {
                instance_id: 3,
                shadow_index: 0,
                in_flag: true,
                loss: 0.1 + 0.2,
                logit_confidence: -1.0 / 3.0,
            },
            ShadowObservation {
                instance_id: 4,
                shadow_index: 1,
                in_flag: false,
                loss: 1e-300,
                logit_confidence: 27.631021115928547,
            },
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_scores(f.path(), 2, &obs).unwrap();
        let (s, back) = read_scores(f.path()).unwrap();
        assert_eq!(s, 2);
        assert_eq!(back, obs);
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.starts_with("#mistlab-scores v1 S=2 kind=both\n"));
    }

    #[test]
    fn scores_file_rejects_garbage() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "#mistlab-scores v1 S=2 kind=both\n1\t0\t2\t0.1\t0.2\n").unwrap();
        assert!(matches!(read_scores(f.path()), Err(MistError::Parse { line: 2, .. })));
        std::fs::write(f.path(), "hello\n").unwrap();
        assert!(read_scores(f.path()).is_err());
    }
}
