//! Black-box membership inference attacks. Each maps evaluation instances
//! to a real score, higher meaning more member-like.

mod classnn;
mod lira;

pub use classnn::{classnn_attack, ClassNnSpec, PredictionRow, ShadowPredictions, MIN_CLASS_ROWS};
pub use lira::{canary_attack, canary_objective, lira_attack, lira_log_ratio, CanaryConfig};

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::LabeledDataset;
use crate::error::{MistError, Result};
use crate::nn::{self, Batch, ModelParams, PROB_FLOOR};
use crate::rng::{domain, name_tag, stream};

/// Evaluation instances with ground-truth membership.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub data: LabeledDataset,
    pub members: Vec<bool>,
}

impl EvalSet {
    pub fn new(data: LabeledDataset, members: Vec<bool>) -> Result<Self> {
        if members.len() != data.len() {
            return Err(MistError::DimensionMismatch {
                expected: data.len(),
                actual: members.len(),
            });
        }
        Ok(Self { data, members })
    }

    /// Members first, then non-members, looked up by id in `pool`.
    pub fn from_ids(pool: &LabeledDataset, members: &[usize], nonmembers: &[usize]) -> Result<Self> {
        let mut ids = members.to_vec();
        ids.extend_from_slice(nonmembers);
        let data = pool.select_ids(&ids)?;
        let flags = (0..ids.len()).map(|i| i < members.len()).collect();
        Self::new(data, flags)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredInstance {
    pub id: usize,
    pub member: bool,
    /// True label, for class-conditional evaluation.
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackScores {
    name: String,
    entries: Vec<ScoredInstance>,
    /// The attack's canonical fixed threshold, when it has one.
    pub threshold: Option<f64>,
    /// Ids scored by a fallback path (e.g. CANARY reverting to LIRA).
    pub fallback_ids: Vec<usize>,
}

impl AttackScores {
    pub fn new(name: impl Into<String>, entries: Vec<ScoredInstance>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| !e.score.is_finite()) {
            return Err(MistError::InvalidDataset(format!(
                "non-finite attack score for instance {}",
                e.id
            )));
        }
        Ok(Self {
            name: name.into(),
            entries,
            threshold: None,
            fallback_ids: Vec::new(),
        })
    }

    fn from_eval(name: &str, eval: &EvalSet, scores: Vec<f64>) -> Result<Self> {
        let entries = scores
            .into_iter()
            .enumerate()
            .map(|(i, score)| ScoredInstance {
                id: eval.data.id(i),
                member: eval.members[i],
                class: eval.data.label(i),
                score,
            })
            .collect();
        Self::new(name, entries)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn entries(&self) -> &[ScoredInstance] {
        &self.entries
    }

    pub fn member_scores(&self) -> Vec<f64> {
        self.entries.iter().filter(|e| e.member).map(|e| e.score).collect()
    }

    pub fn nonmember_scores(&self) -> Vec<f64> {
        self.entries.iter().filter(|e| !e.member).map(|e| e.score).collect()
    }

    /// Same scores with member/non-member truth swapped.
    pub fn with_flipped_truth(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            e.member = !e.member;
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| MistError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut body = || -> std::io::Result<()> {
            writeln!(w, "#mistlab-attack v1 name={}", self.name)?;
            for e in &self.entries {
                writeln!(w, "{}\t{}\t{}", e.id, u8::from(e.member), e.score)?;
            }
            w.flush()
        };
        body().map_err(|e| MistError::io(path, e))
    }

    /// Read an attack file. Class tags are not stored and come back as 0.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
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
            .ok_or_else(|| err(1, "empty attack file".into()))?
            .map_err(|e| MistError::io(path, e))?;
        let name = header
            .strip_prefix("#mistlab-attack v1 name=")
            .ok_or_else(|| err(1, format!("bad header {header:?}")))?
            .to_string();
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| MistError::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split('\t').collect();
            let parsed = (|| {
                if cells.len() != 3 {
                    return None;
                }
                Some(ScoredInstance {
                    id: cells[0].parse().ok()?,
                    member: match cells[1] {
                        "1" => true,
                        "0" => false,
                        _ => return None,
                    },
                    class: 0,
                    score: cells[2].parse().ok()?,
                })
            })();
            entries.push(parsed.ok_or_else(|| err(i + 2, format!("malformed row {line:?}")))?);
        }
        Self::new(name, entries)
    }
}

/// Per-row CE losses of `model` on `data`.
fn losses(model: &ModelParams, data: &LabeledDataset) -> Result<Vec<f64>> {
    nn::ce_losses(model, &data.as_batch())
}

/// LOSS attack: score `= −loss(x)`; the canonical decision threshold
/// `−avg_train_loss` is kept as metadata.
pub fn loss_attack(target: &ModelParams, eval: &EvalSet, avg_train_loss: f64) -> Result<AttackScores> {
    if !avg_train_loss.is_finite() {
        return Err(MistError::InvalidConfig("average training loss must be finite".into()));
    }
    let scores = losses(target, &eval.data)?.into_iter().map(|l| -l).collect();
    let mut out = AttackScores::from_eval("loss", eval, scores)?;
    out.threshold = Some(-avg_train_loss);
    Ok(out)
}

/// Modified entropy `−(1−p_y) log p_y − Σ_{i≠y} p_i log(1−p_i)`.
pub fn modified_entropy(probs: &[f64], label: usize) -> f64 {
    let clamp = |p: f64| p.clamp(PROB_FLOOR, 1.0);
    let mut m = -(1.0 - probs[label]) * clamp(probs[label]).ln();
    for (i, &p) in probs.iter().enumerate() {
        if i != label {
            m -= p * clamp(1.0 - p).ln();
        }
    }
    m
}

/// Modified-entropy attack: score `= −Mentr`, tagged with the true class.
pub fn mentr_attack(target: &ModelParams, eval: &EvalSet) -> Result<AttackScores> {
    let k = target.num_classes();
    let probs = nn::predict_batch(target, eval.data.features())?;
    let scores = probs
        .chunks(k)
        .zip(eval.data.labels())
        .map(|(p, &y)| -modified_entropy(p, y))
        .collect();
    AttackScores::from_eval("mentr", eval, scores)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbConfig {
    /// Noise std in feature units.
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
}

impl PerturbConfig {
    /// `σ = 0.05 · feature scale`, 50 trials.
    pub fn defaults_for(data: &LabeledDataset, seed: u64) -> Self {
        Self {
            sigma: 0.05 * data.feature_scale(),
            trials: 50,
            seed,
        }
    }
}

/// Random-perturbation attack: the fraction of Gaussian perturbations of
/// `x` whose loss is strictly higher than the loss of `x`.
pub fn perturb_attack(target: &ModelParams, eval: &EvalSet, cfg: &PerturbConfig) -> Result<AttackScores> {
    if !(cfg.sigma > 0.0) || cfg.trials == 0 {
        return Err(MistError::InvalidConfig(
            "perturbation attack needs sigma > 0 and at least one trial".into(),
        ));
    }
    let base = losses(target, &eval.data)?;
    let d = eval.data.dim();
    let tag = name_tag("perturb");
    let mut scores = Vec::with_capacity(eval.len());
    for i in 0..eval.len() {
        let mut rng = stream(cfg.seed, &[domain::ATTACK, tag, eval.data.id(i) as u64]);
        let x = eval.data.row(i);
        let mut noisy = Vec::with_capacity(cfg.trials * d);
        for _ in 0..cfg.trials {
            noisy.extend(x.iter().map(|v| v + cfg.sigma * rng.sample::<f64, _>(StandardNormal)));
        }
        let batch = Batch::hard(noisy, d, vec![eval.data.label(i); cfg.trials])?;
        let higher = nn::ce_losses(target, &batch)?
            .into_iter()
            .filter(|&l| l > base[i])
            .count();
        scores.push(higher as f64 / cfg.trials as f64);
    }
    AttackScores::from_eval("perturb", eval, scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};

    fn eval_set() -> EvalSet {
        let data = gen_synthetic(&SyntheticSpec {
            classes: 3,
            dim: 4,
            per_class: 4,
            cluster_spread: 0.5,
            center_scale: 1.0,
            seed: 2,
        })
        .unwrap();
        let n = data.len();
        EvalSet::new(data, (0..n).map(|i| i % 2 == 0).collect()).unwrap()
    }

    #[test]
    fn loss_attack_examples() {
        let eval = eval_set();
        let uniform = ModelParams::zeros(vec![4, 3]).unwrap();
        let s = loss_attack(&uniform, &eval, 0.5).unwrap();
        assert!(s.entries().iter().all(|e| (e.score + 3f64.ln()).abs() < 1e-12));
        assert_eq!(s.threshold, Some(-0.5));
    }

    #[test]
    fn mentr_examples() {
        assert_eq!(modified_entropy(&[0.0, 1.0, 0.0], 1), 0.0);
        assert!((modified_entropy(&[0.5, 0.5], 0) - 2f64.ln()).abs() < 1e-15);
        let eval = eval_set();
        let m = mentr_attack(&ModelParams::zeros(vec![4, 3]).unwrap(), &eval).unwrap();
        assert!(m.entries().iter().all(|e| e.score <= 0.0));
    }

    #[test]
    fn perturb_degenerate_cases() {
        let eval = eval_set();
        let constant = ModelParams::zeros(vec![4, 3]).unwrap();
        let cfg = PerturbConfig {
            sigma: 0.5,
            trials: 20,
            seed: 1,
        };
        let s = perturb_attack(&constant, &eval, &cfg).unwrap();
        assert!(s.entries().iter().all(|e| e.score == 0.0));

        let mut rng = stream(4, &[]);
        let net = ModelParams::init(vec![4, 6, 3], &mut rng).unwrap();
        let tiny = PerturbConfig {
            sigma: 1e-300,
            ..cfg
        };
        let s = perturb_attack(&net, &eval, &tiny).unwrap();
        assert!(s.entries().iter().all(|e| e.score == 0.0));
        let s = perturb_attack(&net, &eval, &cfg).unwrap();
        for e in s.entries() {
            assert!((0.0..=1.0).contains(&e.score));
            assert_eq!((e.score * 20.0).fract(), 0.0);
        }
    }

    #[test]
    fn attack_file_roundtrip() {
        let eval = eval_set();
        let s = mentr_attack(&ModelParams::zeros(vec![4, 3]).unwrap(), &eval).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        s.write(f.path()).unwrap();
        let back = AttackScores::read(f.path()).unwrap();
        assert_eq!(back.name(), "mentr");
        for (a, b) in back.entries().iter().zip(s.entries()) {
            assert_eq!((a.id, a.member, a.score), (b.id, b.member, b.score));
        }
    }
}
