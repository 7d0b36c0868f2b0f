//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected so
//! typos surface immediately. See `configs/benchmark.cfg` for every key.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mistlab::data::{CsvSchema, ShadowScheme, SyntheticSpec};
use mistlab::shadow::ScoreKind;
use mistlab::train::{MistConfig, Recipe, XdiffVariant};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Defense {
    None,
    Mist,
    Mixup,
    MistMixup,
}

impl Defense {
    pub fn uses_mist(self) -> bool {
        matches!(self, Defense::Mist | Defense::MistMixup)
    }

    pub fn uses_mixup(self) -> bool {
        matches!(self, Defense::Mixup | Defense::MistMixup)
    }
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Defense::None => "none",
            Defense::Mist => "mist",
            Defense::Mixup => "mixup",
            Defense::MistMixup => "mist+mixup",
        })
    }
}

impl FromStr for Defense {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Defense::None),
            "mist" => Ok(Defense::Mist),
            "mixup" => Ok(Defense::Mixup),
            "mist+mixup" => Ok(Defense::MistMixup),
            _ => Err(format!("unknown defense {s:?} (none, mist, mixup, mist+mixup)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AttackKind {
    Loss,
    Mentr,
    Perturb,
    Lira,
    Canary,
    ClassNn,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::Loss,
        AttackKind::ClassNn,
        AttackKind::Mentr,
        AttackKind::Lira,
        AttackKind::Perturb,
        AttackKind::Canary,
    ];

    pub fn needs_shadows(self) -> bool {
        matches!(self, AttackKind::Lira | AttackKind::Canary | AttackKind::ClassNn)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Loss => "loss",
            AttackKind::Mentr => "mentr",
            AttackKind::Perturb => "perturb",
            AttackKind::Lira => "lira",
            AttackKind::Canary => "canary",
            AttackKind::ClassNn => "classnn",
        })
    }
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        AttackKind::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| format!("unknown attack {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv { path: PathBuf, schema: CsvSchema },
}

/// Whether CANARY may run on datasets whose features are all 0/1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeaturePolicy {
    Lenient,
    Strict,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSpec {
    pub classes: usize,
    pub dim: usize,
    /// Training instances per class; the micro dataset has `classes·per_class` rows.
    pub per_class: usize,
    pub spread: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub submodels: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub phase2_lr: f64,
    pub variant: XdiffVariant,
    pub trials: usize,
    pub lambdas: Vec<f64>,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 8,
            per_class: 16,
            spread: 1.5,
            hidden: 16,
            epochs: 40,
            submodels: 4,
            batch_size: 8,
            lr: 0.1,
            phase2_lr: 0.01,
            variant: XdiffVariant::L1,
            trials: 8,
            lambdas: vec![0.0, 8.0],
        }
    }
}

impl OracleSpec {
    /// Step decay at half and three quarters of the run, so both trained
    /// models settle before they are compared.
    pub fn recipe(&self, lambda: f64, seed: u64) -> Recipe {
        Recipe::Mist(MistConfig {
            submodels: self.submodels,
            epochs: self.epochs,
            lambda,
            variant: self.variant,
            batch_size: self.batch_size,
            lr: self.lr,
            phase2_lr: Some(self.phase2_lr),
            lr_decay_epochs: vec![self.epochs / 2, 3 * self.epochs / 4],
            seed,
            track_metrics: false,
            ..MistConfig::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: u64,
    pub data: DataSource,
    /// Fixed data seed; `None` follows `seed`.
    pub data_seed: Option<u64>,
    pub integer_features: FeaturePolicy,
    pub members: usize,
    pub validation: usize,
    pub test: usize,
    pub hidden: Vec<usize>,
    pub defense: Defense,
    /// Training fields; `seed`, `parallel` and `mixup_alpha` are filled in
    /// by [`ExperimentConfig::recipe`].
    pub training: MistConfig,
    pub mixup_alpha: f64,
    pub shadows: usize,
    pub shadow_scheme: ShadowScheme,
    pub score_kind: ScoreKind,
    pub attacks: Vec<AttackKind>,
    pub fpr_targets: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub ablate_variants: Vec<XdiffVariant>,
    pub canaries: usize,
    pub canary_steps: usize,
    pub perturb_trials: usize,
    pub classnn_hidden: usize,
    pub classnn_epochs: usize,
    pub oracle: OracleSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: "default".into(),
            seed: 0,
            data: DataSource::Synthetic(SyntheticSpec {
                classes: 30,
                dim: 64,
                per_class: 240,
                cluster_spread: 3.0,
                center_scale: 1.0,
                seed: 0,
            }),
            data_seed: None,
            integer_features: FeaturePolicy::Lenient,
            members: 3000,
            validation: 600,
            test: 600,
            hidden: vec![128],
            defense: Defense::None,
            training: MistConfig {
                submodels: 1,
                epochs: 30,
                track_metrics: true,
                ..MistConfig::default()
            },
            mixup_alpha: 1.0,
            shadows: 16,
            shadow_scheme: ShadowScheme::Balanced,
            score_kind: ScoreKind::LogitConfidence,
            attacks: vec![AttackKind::Loss, AttackKind::Mentr, AttackKind::Lira],
            fpr_targets: mistlab::metrics::DEFAULT_FPR_TARGETS.to_vec(),
            lambda_grid: vec![0.0, 1.0, 2.0, 4.0, 8.0],
            ablate_variants: vec![XdiffVariant::L1],
            canaries: 4,
            canary_steps: 20,
            perturb_trials: 50,
            classnn_hidden: 32,
            classnn_epochs: 30,
            oracle: OracleSpec::default(),
        }
    }
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

fn parse_one<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true/false, got {v:?}")),
    }
}

fn parse_opt<T: FromStr>(v: &str) -> Result<Option<T>, String>
where
    T::Err: fmt::Display,
{
    if v.is_empty() || v == "auto" || v == "none" {
        Ok(None)
    } else {
        parse_one(v).map(Some)
    }
}

impl ExperimentConfig {
    /// Parse config text. `base_dir` resolves a relative `data` path.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply(text, base_dir)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str, base_dir: &Path) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            self.set(key, value, base_dir)
                .map_err(|m| CliError::Config(format!("line {}: {key}: {m}", n + 1)))?;
        }
        Ok(())
    }

    fn synthetic_mut(&mut self) -> Result<&mut SyntheticSpec, String> {
        match &mut self.data {
            DataSource::Synthetic(s) => Ok(s),
            DataSource::Csv { .. } => Err("only valid with `data = synthetic`".into()),
        }
    }

    fn set(&mut self, key: &str, v: &str, base_dir: &Path) -> Result<(), String> {
        let t = &mut self.training;
        let o = &mut self.oracle;
        match key {
            "experiment" => {
                if v.is_empty() || v.contains(['/', '\\']) {
                    return Err("must be a plain, non-empty name".into());
                }
                self.experiment = v.to_string();
            }
            "seed" => self.seed = parse_one(v)?,
            "data" => {
                self.data = if v == "synthetic" {
                    DataSource::Synthetic(SyntheticSpec {
                        classes: 30,
                        dim: 64,
                        per_class: 240,
                        cluster_spread: 3.0,
                        center_scale: 1.0,
                        seed: 0,
                    })
                } else {
                    DataSource::Csv {
                        path: base_dir.join(v),
                        schema: CsvSchema::default(),
                    }
                }
            }
            "data_seed" => self.data_seed = parse_opt(v)?,
            "label_column" | "num_classes" => match &mut self.data {
                DataSource::Csv { schema, .. } => {
                    if key == "label_column" {
                        schema.label_column = parse_one(v)?;
                    } else {
                        schema.num_classes = parse_opt(v)?;
                    }
                }
                DataSource::Synthetic(_) => return Err("only valid for CSV data".into()),
            },
            "classes" => self.synthetic_mut()?.classes = parse_one(v)?,
            "dim" => self.synthetic_mut()?.dim = parse_one(v)?,
            "per_class" => self.synthetic_mut()?.per_class = parse_one(v)?,
            "cluster_spread" => self.synthetic_mut()?.cluster_spread = parse_one(v)?,
            "center_scale" => self.synthetic_mut()?.center_scale = parse_one(v)?,
            "integer_features" => {
                self.integer_features = match v {
                    "strict" => FeaturePolicy::Strict,
                    "lenient" => FeaturePolicy::Lenient,
                    _ => return Err("expected strict or lenient".into()),
                }
            }
            "members" => self.members = parse_one(v)?,
            "validation" => self.validation = parse_one(v)?,
            "test" => self.test = parse_one(v)?,
            "hidden" => self.hidden = parse_list(v)?,
            "defense" => self.defense = parse_one(v)?,
            "submodels" => t.submodels = parse_one(v)?,
            "epochs" => t.epochs = parse_one(v)?,
            "t1" => t.t1 = parse_opt(v)?,
            "t2" => t.t2 = parse_opt(v)?,
            "lambda" => t.lambda = parse_one(v)?,
            "variant" => t.variant = parse_one(v).map_err(|e| e.to_string())?,
            "batch_size" => t.batch_size = parse_one(v)?,
            "lr" => t.lr = parse_one(v)?,
            "phase2_lr" => t.phase2_lr = parse_opt(v)?,
            "lr_decay_epochs" => t.lr_decay_epochs = parse_list(v)?,
            "phase2_include_ce" => t.phase2_include_ce = parse_bool(v)?,
            "track_metrics" => t.track_metrics = parse_bool(v)?,
            "mixup_alpha" => self.mixup_alpha = parse_one(v)?,
            "shadows" => self.shadows = parse_one(v)?,
            "shadow_scheme" => {
                self.shadow_scheme = match v {
                    "balanced" => ShadowScheme::Balanced,
                    "independent" => ShadowScheme::IndependentHalves,
                    _ => return Err("expected balanced or independent".into()),
                }
            }
            "score_kind" => self.score_kind = parse_one(v).map_err(|e| e.to_string())?,
            "attacks" => self.attacks = parse_list(v)?,
            "fpr_targets" => self.fpr_targets = parse_list(v)?,
            "lambda_grid" => self.lambda_grid = parse_list(v)?,
            "ablate_variants" => self.ablate_variants = parse_list(v)?,
            "canaries" => self.canaries = parse_one(v)?,
            "canary_steps" => self.canary_steps = parse_one(v)?,
            "perturb_trials" => self.perturb_trials = parse_one(v)?,
            "classnn_hidden" => self.classnn_hidden = parse_one(v)?,
            "classnn_epochs" => self.classnn_epochs = parse_one(v)?,
            "oracle_classes" => o.classes = parse_one(v)?,
            "oracle_dim" => o.dim = parse_one(v)?,
            "oracle_per_class" => o.per_class = parse_one(v)?,
            "oracle_spread" => o.spread = parse_one(v)?,
            "oracle_hidden" => o.hidden = parse_one(v)?,
            "oracle_epochs" => o.epochs = parse_one(v)?,
            "oracle_submodels" => o.submodels = parse_one(v)?,
            "oracle_batch_size" => o.batch_size = parse_one(v)?,
            "oracle_lr" => o.lr = parse_one(v)?,
            "oracle_phase2_lr" => o.phase2_lr = parse_one(v)?,
            "oracle_variant" => o.variant = parse_one(v).map_err(|e| e.to_string())?,
            "oracle_trials" => o.trials = parse_one(v)?,
            "oracle_lambdas" => o.lambdas = parse_list(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if let DataSource::Csv { path, .. } = &self.data {
            if !path.is_file() {
                return bad(format!("data: {} does not exist", path.display()));
            }
        }
        if self.hidden.contains(&0) {
            return bad("hidden: layer widths must be positive".into());
        }
        if self.members == 0 {
            return bad("members: must be positive".into());
        }
        if self.defense.uses_mist() && self.training.submodels < 2 {
            return bad("submodels: defense mist needs at least 2".into());
        }
        if !self.defense.uses_mist() && self.training.lambda > 0.0 {
            return bad(format!("lambda: only meaningful with a mist defense, got defense {}", self.defense));
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return bad("mixup_alpha: must be > 0".into());
        }
        if self.fpr_targets.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return bad("fpr_targets: each must lie in (0, 1)".into());
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("lambda_grid: entries must be finite and >= 0".into());
        }
        if self.oracle.lambdas.is_empty() || self.oracle.trials == 0 {
            return bad("oracle_lambdas/oracle_trials: must be non-empty / positive".into());
        }
        self.recipe(false)
            .config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    /// Seed used to generate synthetic data.
    pub fn effective_data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// Training recipe for the configured defense.
    pub fn recipe(&self, parallel: bool) -> Recipe {
        let mut cfg = self.training.clone();
        cfg.seed = self.seed;
        cfg.parallel = parallel;
        cfg.mixup_alpha = self.defense.uses_mixup().then_some(self.mixup_alpha);
        if self.defense.uses_mist() {
            Recipe::Mist(cfg)
        } else {
            cfg.submodels = 1;
            cfg.lambda = 0.0;
            Recipe::Sgd(cfg)
        }
    }

    /// Short label used in report rows, free of commas.
    pub fn defense_label(&self) -> String {
        if self.defense.uses_mist() {
            format!(
                "{} C={} lambda={} {}",
                self.defense, self.training.submodels, self.training.lambda, self.training.variant
            )
        } else {
            self.defense.to_string()
        }
    }

    pub fn layer_dims(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }
}
