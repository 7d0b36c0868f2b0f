//! Experiment commands. Each reads the config, recomputes the deterministic
//! data split, and writes its outputs under `<out>/<experiment>/`.

use std::fmt::Write as _;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use mistlab::attacks::{
    canary_attack, classnn_attack, lira_attack, loss_attack, mentr_attack, perturb_attack,
    AttackScores, CanaryConfig, ClassNnSpec, EvalSet, PerturbConfig, ShadowPredictions,
};
use mistlab::data::{gen_synthetic, load_csv, write_csv, LabeledDataset, SplitSpec, SyntheticSpec};
use mistlab::metrics::{evaluate, MetricsReport};
use mistlab::nn::{self, ModelParams};
use mistlab::oracle::{loo_gaps, loo_invariance_oracle, LooReport};
use mistlab::rng::{derive_seed, domain, name_tag};
use mistlab::shadow::{
    read_scores, train_shadow_ensemble, write_scores, ShadowConfig, ShadowEnsemble,
};
use mistlab::train::{Recipe, TrainLog, XdiffVariant};

use crate::config::{AttackKind, DataSource, Defense, ExperimentConfig, FeaturePolicy};
use crate::error::{CliError, CliResult};
use crate::snapshot::{self, quantize, FloatWidth};

pub const SNAPSHOT: &str = "snapshot.bin";
pub const TRAINLOG: &str = "trainlog.csv";
pub const SCORES: &str = "scores.tsv";
pub const REPORT: &str = "report.csv";
pub const SELECTION: &str = "selection.cfg";
pub const SHADOW_DIR: &str = "shadows";

/// Execution switches shared by every command.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub parallel: bool,
    pub width: FloatWidth,
}

/// The loaded dataset and its member / non-member / validation / test split.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub data: LabeledDataset,
    pub split: SplitSpec,
    pub members: LabeledDataset,
    pub validation: Option<LabeledDataset>,
    pub test: Option<LabeledDataset>,
    /// Members and non-members: the shadow pool and evaluation set.
    pub pool: LabeledDataset,
    pub eval: EvalSet,
    pub layer_dims: Vec<usize>,
}

impl Experiment {
    pub fn load(cfg: &ExperimentConfig) -> CliResult<Self> {
        let data = load_data(cfg)?;
        let split = SplitSpec::random(data.ids(), cfg.members, cfg.validation, cfg.test, cfg.seed)?;
        let nonempty = |ids: &[usize]| -> CliResult<Option<LabeledDataset>> {
            Ok(if ids.is_empty() { None } else { Some(data.select_ids(ids)?) })
        };
        let members = data.select_ids(&split.member_ids)?;
        let validation = nonempty(&split.validation_ids)?;
        let test = nonempty(&split.test_ids)?;
        let pool = data.select_ids(&split.evaluation_ids())?;
        let eval = EvalSet::from_ids(&data, &split.member_ids, &split.nonmember_ids)?;
        let layer_dims = cfg.layer_dims(data.dim(), data.num_classes());
        Ok(Self {
            cfg: cfg.clone(),
            data,
            split,
            members,
            validation,
            test,
            pool,
            eval,
            layer_dims,
        })
    }

    pub fn test_accuracy(&self, model: &ModelParams) -> CliResult<Option<f64>> {
        self.test
            .as_ref()
            .map(|t| nn::accuracy(model, t.features(), t.labels()).map_err(CliError::from))
            .transpose()
    }

    pub fn validation_accuracy(&self, model: &ModelParams) -> CliResult<f64> {
        let v = self
            .validation
            .as_ref()
            .ok_or_else(|| CliError::Config("validation: this command needs a validation split".into()))?;
        Ok(nn::accuracy(model, v.features(), v.labels())?)
    }

    /// Train the target model on the member split, quantized to `width`.
    pub fn train_target(&self, recipe: &Recipe, width: FloatWidth) -> CliResult<(ModelParams, TrainLog)> {
        let log = recipe.train(&self.members, self.validation.as_ref(), &self.layer_dims)?;
        Ok((quantize(&log.model, width), log))
    }

    /// Shadow models trained with `recipe` on halves of the pool.
    pub fn train_shadows(&self, recipe: &Recipe, run: &RunOptions) -> CliResult<ShadowEnsemble> {
        let cfg = ShadowConfig {
            shadows: self.cfg.shadows,
            scheme: self.cfg.shadow_scheme,
            seed: derive_seed(self.cfg.seed, &[domain::SHADOW_SPLIT]),
            parallel: run.parallel,
        };
        let ens = train_shadow_ensemble(&self.pool, &self.layer_dims, recipe, &cfg)?;
        let models = ens.models.iter().map(|m| quantize(m, run.width)).collect();
        Ok(ShadowEnsemble::from_models(models, ens.membership, &self.pool)?)
    }
}

fn load_data(cfg: &ExperimentConfig) -> CliResult<LabeledDataset> {
    match &cfg.data {
        DataSource::Synthetic(spec) => Ok(gen_synthetic(&SyntheticSpec {
            seed: cfg.effective_data_seed(),
            ..spec.clone()
        })?),
        DataSource::Csv { path, schema } => Ok(load_csv(path, schema)?),
    }
}

pub fn experiment_dir(cfg: &ExperimentConfig, out: &Path) -> CliResult<PathBuf> {
    let dir = out.join(&cfg.experiment);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// `cfg` with the choices recorded by an earlier `train --sweep-C` or
/// `--tune-lambda` applied on top.
pub fn resolved(cfg: &ExperimentConfig, out: &Path) -> CliResult<ExperimentConfig> {
    let path = out.join(&cfg.experiment).join(SELECTION);
    let mut cfg = cfg.clone();
    if let Ok(text) = fs::read_to_string(&path) {
        cfg.apply(&text, Path::new("."))?;
        cfg.validate()?;
    }
    Ok(cfg)
}

/// Write the dataset as CSV and the split as `id,role` rows.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> CliResult<(PathBuf, PathBuf)> {
    let exp = Experiment::load(cfg)?;
    let dir = experiment_dir(cfg, out)?;
    let data_path = dir.join("data.csv");
    write_csv(&data_path, &exp.data)?;
    let mut text = String::from("id,role\n");
    let roles = [
        ("member", &exp.split.member_ids),
        ("nonmember", &exp.split.nonmember_ids),
        ("validation", &exp.split.validation_ids),
        ("test", &exp.split.test_ids),
    ];
    for (role, ids) in roles {
        for id in ids {
            let _ = writeln!(text, "{id},{role}");
        }
    }
    let split_path = dir.join("split.csv");
    write_text(&split_path, &text)?;
    Ok((data_path, split_path))
}

/// `cfg` with C submodels, λ = 0 and the mixup choice kept; C = 1 is the
/// plain (or mixup) baseline.
fn phase1_variant(cfg: &ExperimentConfig, c: usize) -> ExperimentConfig {
    let mut out = cfg.clone();
    let mixup = cfg.defense.uses_mixup();
    out.training.submodels = c;
    out.training.lambda = 0.0;
    out.defense = match (c > 1, mixup) {
        (true, true) => Defense::MistMixup,
        (true, false) => Defense::Mist,
        (false, true) => Defense::Mixup,
        (false, false) => Defense::None,
    };
    out
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub sweep_c: Option<RangeInclusive<usize>>,
    pub tune_lambda: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub log: TrainLog,
    pub test_accuracy: Option<f64>,
    /// `(C, validation accuracy)` per swept C.
    pub sweep: Vec<(usize, f64)>,
    /// `(λ, validation accuracy)` per grid point.
    pub tuning: Vec<(f64, f64)>,
    pub selected_c: Option<usize>,
    pub selected_lambda: Option<f64>,
}

/// Largest λ whose accuracy is less than one point below the λ = 0 entry.
pub fn select_lambda(results: &[(f64, f64)]) -> Option<f64> {
    let base = results.iter().find(|(l, _)| *l == 0.0)?.1;
    results
        .iter()
        .filter(|(_, acc)| base - acc < 0.01)
        .map(|(l, _)| *l)
        .fold(None, |best: Option<f64>, l| Some(best.map_or(l, |b| b.max(l))))
}

fn tuning_grid(grid: &[f64]) -> Vec<f64> {
    let mut g = grid.to_vec();
    g.push(0.0);
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Validation accuracy of λ = grid[i] MIST models at the configured C, the
/// selected λ, and the model trained with it.
pub fn tune_lambda(
    exp: &Experiment,
    cfg: &ExperimentConfig,
    run: &RunOptions,
) -> CliResult<(Vec<(f64, f64)>, f64, ModelParams, TrainLog)> {
    if !cfg.defense.uses_mist() {
        return Err(CliError::Config("--tune-lambda needs a mist defense".into()));
    }
    let mut results = Vec::new();
    let mut trained = Vec::new();
    for lambda in tuning_grid(&cfg.lambda_grid) {
        let mut c = cfg.clone();
        c.training.lambda = lambda;
        let (model, log) = exp.train_target(&c.recipe(run.parallel), run.width)?;
        results.push((lambda, exp.validation_accuracy(&model)?));
        trained.push((model, log));
    }
    let chosen = select_lambda(&results).unwrap_or(0.0);
    let i = results.iter().position(|(l, _)| *l == chosen).unwrap_or(0);
    let (model, log) = trained.swap_remove(i);
    Ok((results, chosen, model, log))
}

fn trainlog_csv(log: &TrainLog) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("epoch,train_acc,val_acc,ce_loss,xdiff\n");
    for e in &log.epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            e.epoch,
            opt(e.train_acc),
            opt(e.val_acc),
            e.ce_loss,
            opt(e.xdiff_loss)
        );
    }
    s
}

/// Train the target model, optionally sweeping C and tuning λ first, and
/// write the snapshot, training log and selection file.
pub fn train(
    cfg: &ExperimentConfig,
    out: &Path,
    opts: &TrainOptions,
    run: &RunOptions,
) -> CliResult<TrainOutcome> {
    let exp = Experiment::load(cfg)?;
    let dir = experiment_dir(cfg, out)?;
    let mut cfg = cfg.clone();
    let mut selection = String::from("# choices made by `mistlab train`\n");
    let mut sweep = Vec::new();
    let mut selected_c = None;

    if let Some(range) = &opts.sweep_c {
        if range.is_empty() || *range.start() == 0 {
            return Err(CliError::Config(format!("--sweep-C: bad range {range:?}")));
        }
        let mut csv = String::from("submodels,val_acc\n");
        for c in range.clone() {
            let swept = phase1_variant(&cfg, c);
            let (model, _) = exp.train_target(&swept.recipe(run.parallel), run.width)?;
            let acc = exp.validation_accuracy(&model)?;
            let _ = writeln!(csv, "{c},{acc}");
            sweep.push((c, acc));
        }
        write_text(&dir.join("sweep_c.csv"), &csv)?;
        // The cross difference needs two submodels, so C = 1 is never chosen
        // for a mist defense.
        let floor = if cfg.defense.uses_mist() { 2 } else { 1 };
        let best = sweep
            .iter()
            .filter(|(c, _)| *c >= floor)
            .fold(None::<(usize, f64)>, |b, &(c, a)| match b {
                Some((_, ba)) if ba >= a => b,
                _ => Some((c, a)),
            });
        if let Some((c, _)) = best {
            if cfg.defense.uses_mist() {
                cfg.training.submodels = c;
                let _ = writeln!(selection, "submodels = {c}");
            }
            selected_c = Some(c);
        }
    }

    let (model, log, tuning, selected_lambda) = if opts.tune_lambda {
        let (results, chosen, model, log) = tune_lambda(&exp, &cfg, run)?;
        let mut csv = String::from("lambda,val_acc,selected\n");
        for (l, a) in &results {
            let _ = writeln!(csv, "{l},{a},{}", u8::from(*l == chosen));
        }
        write_text(&dir.join("lambda_tuning.csv"), &csv)?;
        let _ = writeln!(selection, "lambda = {chosen}");
        (model, log, results, Some(chosen))
    } else {
        let (model, log) = exp.train_target(&cfg.recipe(run.parallel), run.width)?;
        (model, log, Vec::new(), None)
    };

    snapshot::save(&dir.join(SNAPSHOT), &model, run.width)?;
    write_text(&dir.join(TRAINLOG), &trainlog_csv(&log))?;
    write_text(&dir.join(SELECTION), &selection)?;
    Ok(TrainOutcome {
        test_accuracy: exp.test_accuracy(&model)?,
        model,
        log,
        sweep,
        tuning,
        selected_c,
        selected_lambda,
    })
}

/// Train the shadow ensemble with the (resolved) target recipe and write
/// the scores file plus one snapshot per shadow.
pub fn shadow(cfg: &ExperimentConfig, out: &Path, run: &RunOptions) -> CliResult<ShadowEnsemble> {
    let cfg = resolved(cfg, out)?;
    let exp = Experiment::load(&cfg)?;
    let dir = experiment_dir(&cfg, out)?;
    let ens = exp.train_shadows(&cfg.recipe(run.parallel), run)?;
    let sdir = dir.join(SHADOW_DIR);
    fs::create_dir_all(&sdir).map_err(|e| CliError::io(&sdir, e))?;
    for (s, m) in ens.models.iter().enumerate() {
        snapshot::save(&sdir.join(format!("shadow_{s:03}.bin")), m, run.width)?;
    }
    write_scores(dir.join(SCORES), ens.shadows(), &ens.observations)?;
    Ok(ens)
}

/// Rebuild the ensemble from the scores file and shadow snapshots.
pub fn load_ensemble(dir: &Path, pool: &LabeledDataset) -> CliResult<ShadowEnsemble> {
    let (shadows, observations) = read_scores(dir.join(SCORES))?;
    let mut membership = vec![Vec::new(); shadows];
    for o in &observations {
        if o.shadow_index >= shadows {
            return Err(CliError::Data(format!("shadow index {} out of range", o.shadow_index)));
        }
        if o.in_flag {
            membership[o.shadow_index].push(o.instance_id);
        }
    }
    let models = (0..shadows)
        .map(|s| snapshot::load(&dir.join(SHADOW_DIR).join(format!("shadow_{s:03}.bin"))))
        .collect::<CliResult<Vec<_>>>()?;
    let ens = ShadowEnsemble::from_models(models, membership, pool)?;
    if ens.observations.len() != observations.len() {
        return Err(CliError::Data(format!(
            "scores file covers {} observations, shadows over this pool give {}",
            observations.len(),
            ens.observations.len()
        )));
    }
    Ok(ShadowEnsemble { observations, ..ens })
}

/// Run one attack against `target`.
pub fn run_attack(
    kind: AttackKind,
    exp: &Experiment,
    target: &ModelParams,
    ensemble: Option<&ShadowEnsemble>,
) -> CliResult<AttackScores> {
    let cfg = &exp.cfg;
    let seed = derive_seed(cfg.seed, &[domain::ATTACK, name_tag(&kind.to_string())]);
    let need = || {
        ensemble.ok_or_else(|| {
            CliError::Config(format!(
                "attack {kind} needs {SCORES} and shadow snapshots; run `mistlab shadow` first"
            ))
        })
    };
    Ok(match kind {
        AttackKind::Loss => {
            let avg = nn::ce_losses(target, &exp.members.as_batch())?;
            let avg = avg.iter().sum::<f64>() / avg.len() as f64;
            loss_attack(target, &exp.eval, avg)?
        }
        AttackKind::Mentr => mentr_attack(target, &exp.eval)?,
        AttackKind::Perturb => {
            let mut p = PerturbConfig::defaults_for(&exp.members, seed);
            p.trials = cfg.perturb_trials;
            perturb_attack(target, &exp.eval, &p)?
        }
        AttackKind::Lira => {
            let ens = need()?;
            lira_attack(&ens.records(cfg.score_kind), target, &exp.eval, cfg.score_kind)?
        }
        AttackKind::Canary => {
            let ens = need()?;
            let mut c = CanaryConfig::defaults_for(&exp.members, seed);
            c.n_canaries = cfg.canaries;
            c.opt_steps = cfg.canary_steps;
            canary_attack(ens, target, &exp.eval, &c, cfg.score_kind)?
        }
        AttackKind::ClassNn => {
            let ens = need()?;
            let preds = ShadowPredictions::from_ensemble(ens, &exp.pool)?;
            let spec = ClassNnSpec {
                hidden: cfg.classnn_hidden,
                epochs: cfg.classnn_epochs,
                seed,
                ..ClassNnSpec::default()
            };
            classnn_attack(&preds, target, &exp.eval, &spec)?
        }
    })
}

fn dataset_label(cfg: &ExperimentConfig) -> String {
    match &cfg.data {
        DataSource::Synthetic(_) => "synthetic".into(),
        DataSource::Csv { path, .. } => path
            .file_stem()
            .map(|s| s.to_string_lossy().replace(',', "_"))
            .unwrap_or_else(|| "csv".into()),
    }
}

/// Whether CANARY is skipped for this dataset.
pub fn canary_disabled(cfg: &ExperimentConfig, data: &LabeledDataset) -> bool {
    cfg.integer_features == FeaturePolicy::Strict && data.is_binary()
}

/// Run every configured attack against the saved target snapshot, write
/// `attack_<name>.tsv` files and `report.csv`.
pub fn attack(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<MetricsReport>> {
    let cfg = resolved(cfg, out)?;
    let exp = Experiment::load(&cfg)?;
    let dir = experiment_dir(&cfg, out)?;
    let target = snapshot::load(&dir.join(SNAPSHOT)).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{m} (run `mistlab train` first)")),
        other => other,
    })?;
    let ensemble = if cfg.attacks.iter().any(|a| a.needs_shadows()) {
        if !dir.join(SCORES).is_file() {
            let names: Vec<String> = cfg
                .attacks
                .iter()
                .filter(|a| a.needs_shadows())
                .map(|a| a.to_string())
                .collect();
            return Err(CliError::Config(format!(
                "attacks {} need {}; run `mistlab shadow` first",
                names.join(", "),
                dir.join(SCORES).display()
            )));
        }
        Some(load_ensemble(&dir, &exp.pool)?)
    } else {
        None
    };
    let mut reports = Vec::new();
    let mut csv = MetricsReport::csv_header(&cfg.fpr_targets);
    csv.push('\n');
    for &kind in &cfg.attacks {
        if kind == AttackKind::Canary && canary_disabled(&cfg, &exp.data) {
            eprintln!("skipping canary: features are binary and integer_features = strict");
            continue;
        }
        let scores = run_attack(kind, &exp, &target, ensemble.as_ref())?;
        if !scores.fallback_ids.is_empty() {
            eprintln!(
                "{kind}: {} instances scored by the fallback path",
                scores.fallback_ids.len()
            );
        }
        scores.write(dir.join(format!("attack_{kind}.tsv")))?;
        let report = evaluate(&scores, &dataset_label(&cfg), &cfg.defense_label(), &cfg.fpr_targets)?;
        csv.push_str(&report.csv_row());
        csv.push('\n');
        reports.push(report);
    }
    write_text(&dir.join(REPORT), &csv)?;
    Ok(reports)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    NoDefense,
    Phase1Only,
    Phase1And2,
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arm::NoDefense => "no-defense",
            Arm::Phase1Only => "phase1-only",
            Arm::Phase1And2 => "phase1+2",
        })
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub arm: Arm,
    pub variant: XdiffVariant,
    pub submodels: usize,
    pub lambda: f64,
    pub test_accuracy: Option<f64>,
    pub lira: MetricsReport,
}

#[derive(Clone, Debug, Default)]
pub struct AblateOptions {
    pub tune_lambda: bool,
}

struct ArmResult {
    submodels: usize,
    lambda: f64,
    test_accuracy: Option<f64>,
    lira: MetricsReport,
}

fn evaluate_arm(
    exp: &Experiment,
    cfg: &ExperimentConfig,
    trained: Option<ModelParams>,
    run: &RunOptions,
) -> CliResult<ArmResult> {
    let recipe = cfg.recipe(run.parallel);
    let target = match trained {
        Some(m) => m,
        None => exp.train_target(&recipe, run.width)?.0,
    };
    let ens = exp.train_shadows(&recipe, run)?;
    let scores = lira_attack(&ens.records(cfg.score_kind), &target, &exp.eval, cfg.score_kind)?;
    let rc = recipe.config();
    Ok(ArmResult {
        submodels: rc.submodels,
        lambda: rc.lambda,
        test_accuracy: exp.test_accuracy(&target)?,
        lira: evaluate(&scores, &dataset_label(cfg), &cfg.defense_label(), &cfg.fpr_targets)?,
    })
}

/// No defense, phase 1 only (λ = 0) and phase 1 + 2 for each configured
/// cross-difference variant, each scored by LIRA with freshly trained
/// shadows. Writes `ablation.csv`.
pub fn ablate(
    cfg: &ExperimentConfig,
    out: &Path,
    opts: &AblateOptions,
    run: &RunOptions,
) -> CliResult<Vec<AblationRow>> {
    let cfg = resolved(cfg, out)?;
    let exp = Experiment::load(&cfg)?;
    let dir = experiment_dir(&cfg, out)?;
    if cfg.training.submodels < 2 {
        return Err(CliError::Config("submodels: ablation needs C >= 2".into()));
    }
    let base = phase1_variant(&cfg, 1);
    let phase1 = phase1_variant(&cfg, cfg.training.submodels);

    let no_def = evaluate_arm(&exp, &base, None, run)?;
    let p1 = evaluate_arm(&exp, &phase1, None, run)?;
    let mut rows = Vec::new();
    let mut tuning_csv = String::from("variant,lambda,val_acc,selected\n");
    for &variant in &cfg.ablate_variants {
        let mut full = phase1.clone();
        full.training.variant = variant;
        full.training.lambda = cfg.training.lambda;
        let mut trained = None;
        if opts.tune_lambda {
            let (results, chosen, model, _) = tune_lambda(&exp, &full, run)?;
            for (l, a) in &results {
                let _ = writeln!(tuning_csv, "{variant},{l},{a},{}", u8::from(*l == chosen));
            }
            full.training.lambda = chosen;
            trained = Some(model);
        }
        let p12 = evaluate_arm(&exp, &full, trained, run)?;
        for (arm, r) in [(Arm::NoDefense, &no_def), (Arm::Phase1Only, &p1), (Arm::Phase1And2, &p12)] {
            rows.push(AblationRow {
                arm,
                variant,
                submodels: r.submodels,
                lambda: r.lambda,
                test_accuracy: r.test_accuracy,
                lira: r.lira.clone(),
            });
        }
    }
    let mut csv = String::from("arm,variant,submodels,lambda,test_acc,auc");
    for f in &cfg.fpr_targets {
        let _ = write!(csv, ",tpr@{f},plr@{f}");
    }
    csv.push('\n');
    for r in &rows {
        let acc = r.test_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        let _ = write!(
            csv,
            "{},{},{},{},{},{:.6}",
            r.arm, r.variant, r.submodels, r.lambda, acc, r.lira.auc
        );
        for e in &r.lira.at {
            let _ = write!(csv, ",{:.6},{:.4}", e.tpr, e.plr);
        }
        csv.push('\n');
    }
    write_text(&dir.join("ablation.csv"), &csv)?;
    if opts.tune_lambda {
        write_text(&dir.join("ablation_tuning.csv"), &tuning_csv)?;
    }
    Ok(rows)
}

/// Micro datasets for the leave-one-out oracle: the training set (first
/// `classes·per_class` rows), a copy whose last row duplicates its first,
/// and a probe set holding the training rows plus as many fresh draws.
pub fn oracle_data(cfg: &ExperimentConfig) -> CliResult<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let o = &cfg.oracle;
    let probes = gen_synthetic(&SyntheticSpec {
        classes: o.classes,
        dim: o.dim,
        per_class: 2 * o.per_class,
        cluster_spread: o.spread,
        center_scale: 1.0,
        seed: derive_seed(cfg.seed, &[domain::ORACLE]),
    })?;
    let n = o.classes * o.per_class;
    let train = probes.select(&(0..n).collect::<Vec<_>>())?;
    let mut features = train.features().to_vec();
    let mut labels = train.labels().to_vec();
    let d = train.dim();
    features[(n - 1) * d..].copy_from_slice(train.row(0));
    labels[n - 1] = labels[0];
    let dup = LabeledDataset::new(features, d, labels, train.ids().to_vec(), train.num_classes())?;
    Ok((train, dup, probes))
}

#[derive(Clone, Debug)]
pub struct OracleRun {
    pub lambda: f64,
    pub report: LooReport,
    /// Gap after removing the duplicated row.
    pub duplicate_gap: f64,
}

/// Leave-one-out gaps for each configured λ. Writes `oracle.csv` and
/// `oracle_summary.csv`.
pub fn oracle(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<OracleRun>> {
    let o = &cfg.oracle;
    let (train, dup, probes) = oracle_data(cfg)?;
    let dims = vec![o.dim, o.hidden, o.classes];
    let mut runs = Vec::new();
    for &lambda in &o.lambdas {
        let recipe = o.recipe(lambda, cfg.seed);
        let report = loo_invariance_oracle(&train, &dims, &recipe, &probes, o.trials, cfg.seed)?;
        let last = dup.id(dup.len() - 1);
        let duplicate_gap = loo_gaps(&dup, &dims, &recipe, &probes, &[last])?.mean_gap;
        runs.push(OracleRun {
            lambda,
            report,
            duplicate_gap,
        });
    }
    let dir = experiment_dir(cfg, out)?;
    let mut detail = String::from("lambda,removed_id,sup_gap\n");
    let mut summary = String::from("lambda,mean_gap,duplicate_gap\n");
    for r in &runs {
        for g in &r.report.removals {
            let _ = writeln!(detail, "{},{},{}", r.lambda, g.removed_id, g.sup_gap);
        }
        let _ = writeln!(summary, "{},{},{}", r.lambda, r.report.mean_gap, r.duplicate_gap);
    }
    write_text(&dir.join("oracle.csv"), &detail)?;
    write_text(&dir.join("oracle_summary.csv"), &summary)?;
    Ok(runs)
}

/// Concatenate `<out>/*/report.csv` into `<out>/report.csv`, prefixing each
/// row with its experiment name. Returns the written path.
pub fn report(out: &Path) -> CliResult<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)
        .map_err(|e| CliError::io(out, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(REPORT).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Data(format!("no */{REPORT} under {}", out.display())));
    }
    let mut header: Option<String> = None;
    let mut body = String::new();
    for d in &dirs {
        let path = d.join(REPORT);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let mut lines = text.lines();
        let h = lines.next().unwrap_or_default().to_string();
        match &header {
            None => header = Some(h),
            Some(prev) if *prev != h => {
                return Err(CliError::Data(format!(
                    "{}: header differs from the other reports",
                    path.display()
                )))
            }
            Some(_) => {}
        }
        let name = d.file_name().unwrap_or_default().to_string_lossy();
        for line in lines.filter(|l| !l.is_empty()) {
            let _ = writeln!(body, "{name},{line}");
        }
    }
    let merged = out.join(REPORT);
    write_text(&merged, &format!("experiment,{}\n{body}", header.unwrap_or_default()))?;
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_rule() {
        let r = [(0.0, 0.80), (4.0, 0.795), (8.0, 0.79), (12.0, 0.805)];
        assert_eq!(select_lambda(&r), Some(12.0));
        let r = [(0.0, 0.80), (4.0, 0.795), (8.0, 0.785)];
        assert_eq!(select_lambda(&r), Some(4.0));
        assert_eq!(select_lambda(&[(1.0, 0.5)]), None);
        assert_eq!(tuning_grid(&[8.0, 4.0, 4.0]), vec![0.0, 4.0, 8.0]);
    }
}
