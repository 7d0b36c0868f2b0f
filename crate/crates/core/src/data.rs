//! Labeled datasets, synthetic benchmarks, evaluation splits, per-epoch
//! partitioning and mixup.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{MistError, Result};
use crate::nn::{Batch, Targets};
use crate::rng::{derive_seed, domain, stream};

/// Feature matrix with integer labels and stable instance ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    ids: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        ids: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(MistError::InvalidDataset(format!(
                "dim={dim}, classes={num_classes}"
            )));
        }
        if labels.is_empty() {
            return Err(MistError::InvalidDataset("no rows".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(MistError::DimensionMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if ids.len() != labels.len() {
            return Err(MistError::DimensionMismatch {
                expected: labels.len(),
                actual: ids.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(MistError::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(MistError::InvalidDataset("non-finite feature".into()));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(MistError::InvalidDataset(format!("duplicate id {dup}")));
        }
        Ok(Self {
            features,
            dim,
            labels,
            ids,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn id(&self, i: usize) -> usize {
        self.ids[i]
    }

    /// Map from instance id to row position.
    pub fn positions(&self) -> HashMap<usize, usize> {
        self.ids.iter().enumerate().map(|(pos, &id)| (id, pos)).collect()
    }

    /// Rows at the given positions, keeping their ids.
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(positions.len() * self.dim);
        for &p in positions {
            features.extend_from_slice(self.row(p));
        }
        Self::new(
            features,
            self.dim,
            positions.iter().map(|&p| self.labels[p]).collect(),
            positions.iter().map(|&p| self.ids[p]).collect(),
            self.num_classes,
        )
    }

    /// Rows with the given ids, in the order given.
    pub fn select_ids(&self, ids: &[usize]) -> Result<Self> {
        let pos = self.positions();
        let positions = ids
            .iter()
            .map(|id| {
                pos.get(id)
                    .copied()
                    .ok_or_else(|| MistError::InvalidDataset(format!("unknown id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.select(&positions)
    }

    /// Hard-label batch of the rows at `positions`.
    pub fn batch(&self, positions: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(positions.len() * self.dim);
        for &p in positions {
            features.extend_from_slice(self.row(p));
        }
        let labels = positions.iter().map(|&p| self.labels[p]).collect();
        Batch::hard(features, self.dim, labels).expect("rows have dataset dim")
    }

    pub fn as_batch(&self) -> Batch {
        Batch::hard(self.features.clone(), self.dim, self.labels.clone())
            .expect("dataset is rectangular")
    }

    /// Standard deviation over all feature cells; the scale used by
    /// perturbation-based attacks.
    pub fn feature_scale(&self) -> f64 {
        let n = self.features.len() as f64;
        let mean = self.features.iter().sum::<f64>() / n;
        let var = self.features.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        var.sqrt()
    }

    /// True when every feature is 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.features.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Column layout of an input CSV.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub label_column: String,
    /// Class count; inferred as `max label + 1` when absent.
    pub num_classes: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".into(),
            num_classes: None,
        }
    }
}

/// Read a header-first CSV with one integer label column and numeric
/// feature columns. Instance ids are row ordinals.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let parse_err = |line: usize, message: String| MistError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| MistError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| parse_err(1, format!("no `{}` column", schema.label_column)))?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != label_col).collect();
    if feature_cols.is_empty() {
        return Err(parse_err(1, "no feature columns".into()));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(parse_err(
                line,
                format!("expected {} cells, found {}", headers.len(), record.len()),
            ));
        }
        let raw_label = &record[label_col];
        let label: usize = raw_label.parse().map_err(|_| {
            parse_err(
                line,
                format!("column `{}`: invalid label {raw_label:?}", schema.label_column),
            )
        })?;
        if let Some(k) = schema.num_classes {
            if label >= k {
                return Err(parse_err(line, format!("label {label} outside [0, {k})")));
            }
        }
        for &c in &feature_cols {
            let cell = &record[c];
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(line, format!("column `{}`: non-numeric value {cell:?}", &headers[c]))
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("column `{}`: non-finite value {cell:?}", &headers[c]),
                ));
            }
            features.push(v);
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let num_classes = schema
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let ids = (0..labels.len()).collect();
    LabeledDataset::new(features, feature_cols.len(), labels, ids, num_classes)
}

/// Write a dataset in the `label,f0,...` CSV layout accepted by [`load_csv`].
pub fn write_csv(path: impl AsRef<Path>, data: &LabeledDataset) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| MistError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..data.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(io)?;
    for i in 0..data.len() {
        let mut rec = vec![data.label(i).to_string()];
        rec.extend(data.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| MistError::io(path, e))
}

/// Gaussian class clusters around seeded means.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Per-coordinate std of points around their class mean.
    pub cluster_spread: f64,
    /// Per-coordinate std of the class means themselves.
    pub center_scale: f64,
    pub seed: u64,
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    if spec.classes < 2 || spec.dim == 0 || spec.per_class == 0 {
        return Err(MistError::InvalidConfig(format!(
            "degenerate synthetic spec: classes={}, dim={}, per_class={}",
            spec.classes, spec.dim, spec.per_class
        )));
    }
    if !(spec.cluster_spread >= 0.0 && spec.cluster_spread.is_finite())
        || !(spec.center_scale > 0.0 && spec.center_scale.is_finite())
    {
        return Err(MistError::InvalidConfig(
            "cluster_spread must be >= 0 and center_scale > 0".into(),
        ));
    }
    let mut rng = stream(spec.seed, &[domain::DATA]);
    let means: Vec<f64> = (0..spec.classes * spec.dim)
        .map(|_| spec.center_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = spec.classes * spec.per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..spec.per_class {
        for k in 0..spec.classes {
            let mean = &means[k * spec.dim..(k + 1) * spec.dim];
            for &m in mean {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(m + spec.cluster_spread * noise);
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(features, spec.dim, labels, (0..n).collect(), spec.classes)
}

/// One epoch's split of the training ids into `C` disjoint subsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    pub epoch: usize,
    pub subsets: Vec<Vec<usize>>,
}

/// Order `ids` by random keys drawn per `(seed, epoch, id)` and cut the
/// order into `parts` contiguous runs (sizes differ by at most one). An
/// id's key does not depend on the other ids, so removing one id moves at
/// most `parts − 1` others to a different subset.
pub fn partition(ids: &[usize], parts: usize, epoch: usize, seed: u64) -> Result<PartitionPlan> {
    if parts == 0 || parts > ids.len() {
        return Err(MistError::TooManySubsets {
            parts,
            items: ids.len(),
        });
    }
    let mut keyed: Vec<(u64, usize)> = ids
        .iter()
        .map(|&id| (derive_seed(seed, &[domain::PARTITION, epoch as u64, id as u64]), id))
        .collect();
    keyed.sort_unstable();
    let (base, extra) = (ids.len() / parts, ids.len() % parts);
    let mut order = keyed.into_iter().map(|(_, id)| id);
    let subsets = (0..parts)
        .map(|c| order.by_ref().take(base + usize::from(c < extra)).collect())
        .collect();
    Ok(PartitionPlan { epoch, subsets })
}

/// Mix each row with a partner row using the given mixing weights:
/// `x̃ = β x_i + (1 − β) x_j`, `ỹ = β e_{y_i} + (1 − β) e_{y_j}`.
pub fn mixup_with(batch: &Batch, classes: usize, partners: &[usize], betas: &[f64]) -> Result<Batch> {
    let labels = match batch.targets() {
        Targets::Hard(l) => l,
        Targets::Soft { .. } => {
            return Err(MistError::InvalidDataset("mixup expects hard labels".into()))
        }
    };
    let n = batch.len();
    if partners.len() != n || betas.len() != n {
        return Err(MistError::DimensionMismatch {
            expected: n,
            actual: partners.len().min(betas.len()),
        });
    }
    let d = batch.dim();
    let mut features = Vec::with_capacity(n * d);
    let mut soft = vec![0.0; n * classes];
    for i in 0..n {
        let (j, b) = (partners[i], betas[i]);
        let (xi, xj) = (batch.row(i), batch.row(j));
        features.extend(xi.iter().zip(xj).map(|(a, c)| b * a + (1.0 - b) * c));
        let row = &mut soft[i * classes..(i + 1) * classes];
        row[labels[i]] += b;
        row[labels[j]] += 1.0 - b;
    }
    Batch::new(features, d, Targets::Soft { probs: soft, classes })
}

/// Mixup with partners drawn uniformly from the batch and one
/// `β ~ Beta(α, α)` per output row.
pub fn mixup_batch<R: Rng + ?Sized>(
    batch: &Batch,
    classes: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Batch> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(MistError::InvalidConfig(format!("mixup alpha must be > 0, got {alpha}")));
    }
    let n = batch.len();
    if n < 2 {
        return Err(MistError::InvalidDataset("mixup needs at least 2 rows".into()));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| MistError::InvalidConfig(e.to_string()))?;
    let mut partners = Vec::with_capacity(n);
    let mut betas = Vec::with_capacity(n);
    for _ in 0..n {
        partners.push(rng.random_range(0..n));
        betas.push(beta.sample(rng));
    }
    mixup_with(batch, classes, &partners, &betas)
}

/// How shadow member sets are drawn from the shadow pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ShadowScheme {
    /// Each instance is IN for exactly `S/2` shadow models chosen uniformly,
    /// so every model trains on about half the pool.
    #[default]
    Balanced,
    /// Each shadow model keeps an independent uniform half of the pool.
    IndependentHalves,
}

/// Member ids for each of `shadows` models over `pool`.
pub fn shadow_membership(
    pool: &[usize],
    shadows: usize,
    scheme: ShadowScheme,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = stream(seed, &[domain::SHADOW_SPLIT]);
    let mut members = vec![Vec::new(); shadows];
    match scheme {
        ShadowScheme::Balanced => {
            let mut order: Vec<usize> = (0..shadows).collect();
            for &id in pool {
                order.shuffle(&mut rng);
                for &s in &order[..shadows / 2] {
                    members[s].push(id);
                }
            }
            for m in &mut members {
                m.sort_unstable();
            }
        }
        ShadowScheme::IndependentHalves => {
            for m in &mut members {
                let mut order = pool.to_vec();
                order.shuffle(&mut rng);
                order.truncate(pool.len() / 2);
                order.sort_unstable();
                *m = order;
            }
        }
    }
    members
}

/// Member / non-member / validation / test ids plus shadow member sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub member_ids: Vec<usize>,
    pub nonmember_ids: Vec<usize>,
    pub validation_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    /// For each shadow model, the sorted ids it trains on.
    pub shadow_in_matrix: Vec<Vec<usize>>,
}

impl SplitSpec {
    /// Shuffle all ids under `seed` and carve out a balanced evaluation set
    /// (`members` members and as many non-members), then validation and test.
    pub fn random(
        ids: &[usize],
        members: usize,
        validation: usize,
        test: usize,
        seed: u64,
    ) -> Result<Self> {
        let need = 2 * members + validation + test;
        if members == 0 || need > ids.len() {
            return Err(MistError::InvalidConfig(format!(
                "split needs {need} instances (2x{members} members + {validation} validation + {test} test), have {}",
                ids.len()
            )));
        }
        let mut order = ids.to_vec();
        order.shuffle(&mut stream(seed, &[domain::SPLIT]));
        let mut rest = order.into_iter();
        let mut take = |n: usize| -> Vec<usize> { rest.by_ref().take(n).collect() };
        Ok(Self {
            member_ids: take(members),
            nonmember_ids: take(members),
            validation_ids: take(validation),
            test_ids: take(test),
            shadow_in_matrix: Vec::new(),
        })
    }

    /// The balanced evaluation pool: members then non-members.
    pub fn evaluation_ids(&self) -> Vec<usize> {
        let mut v = self.member_ids.clone();
        v.extend_from_slice(&self.nonmember_ids);
        v
    }

    pub fn with_shadows(mut self, shadows: usize, scheme: ShadowScheme, seed: u64) -> Self {
        self.shadow_in_matrix = shadow_membership(&self.evaluation_ids(), shadows, scheme, seed);
        self
    }

    /// Check disjointness, balance, and that every evaluation id is IN for
    /// at least `min_each` shadows and OUT for at least `min_each`.
    pub fn validate(&self, min_each: usize) -> Result<()> {
        if self.member_ids.len() != self.nonmember_ids.len() {
            return Err(MistError::InvalidConfig(format!(
                "unbalanced evaluation set: {} members vs {} non-members",
                self.member_ids.len(),
                self.nonmember_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in self
            .member_ids
            .iter()
            .chain(&self.nonmember_ids)
            .chain(&self.validation_ids)
            .chain(&self.test_ids)
        {
            if !seen.insert(*id) {
                return Err(MistError::InvalidConfig(format!("id {id} in two splits")));
            }
        }
        let uncovered = coverage_gaps(&self.evaluation_ids(), &self.shadow_in_matrix, min_each);
        if !uncovered.is_empty() {
            return Err(MistError::InsufficientCoverage {
                required: min_each,
                ids: uncovered,
            });
        }
        Ok(())
    }
}

/// Ids that are IN for fewer than `min_each` shadows or OUT for fewer than
/// `min_each`.
pub fn coverage_gaps(pool: &[usize], in_matrix: &[Vec<usize>], min_each: usize) -> Vec<usize> {
    let mut in_counts: HashMap<usize, usize> = HashMap::new();
    for members in in_matrix {
        for id in members {
            *in_counts.entry(*id).or_default() += 1;
        }
    }
    let s = in_matrix.len();
    pool.iter()
        .copied()
        .filter(|id| {
            let ins = in_counts.get(id).copied().unwrap_or(0);
            ins < min_each || s - ins < min_each
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_three_rows() {
        let f = write_tmp("label,f0,f1\n0,1.0,2.0\n1,0.5,-1\n2,3,4\n");
        let d = load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!((d.len(), d.dim(), d.num_classes()), (3, 2, 3));
        assert_eq!(d.ids(), &[0, 1, 2]);
        assert_eq!(d.row(1), &[0.5, -1.0]);
    }

    #[test]
    fn csv_non_numeric_cell_names_line_and_column() {
        let f = write_tmp("label,f0,f1\n0,1.0,2.0\n1,abc,2\n");
        let err = load_csv(f.path(), &CsvSchema::default()).unwrap_err();
        match &err {
            MistError::Parse { line, message, .. } => {
                assert_eq!(*line, 3);
                assert!(message.contains("f0"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_bad_label_nan_and_missing_file() {
        let f = write_tmp("label,f0\n0,1\n5,1\n");
        let schema = CsvSchema {
            num_classes: Some(3),
            ..Default::default()
        };
        assert!(matches!(
            load_csv(f.path(), &schema),
            Err(MistError::Parse { line: 3, .. })
        ));
        let f = write_tmp("label,f0\n0,NaN\n");
        assert!(matches!(
            load_csv(f.path(), &CsvSchema::default()),
            Err(MistError::Parse { line: 2, .. })
        ));
        let f = write_tmp("label,f0,f1\n0,1\n");
        assert!(matches!(
            load_csv(f.path(), &CsvSchema::default()),
            Err(MistError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            load_csv("/nonexistent/x.csv", &CsvSchema::default()),
            Err(MistError::Io { .. })
        ));
    }

    #[test]
    fn csv_location_shape() {
        // 446 binary features, 30 classes.
        let mut s = String::from("label");
        for j in 0..446 {
            s.push_str(&format!(",f{j}"));
        }
        s.push('\n');
        for k in 0..30 {
            s.push_str(&k.to_string());
            for j in 0..446 {
                s.push_str(if (j + k) % 3 == 0 { ",1" } else { ",0" });
            }
            s.push('\n');
        }
        let f = write_tmp(&s);
        let d = load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!((d.dim(), d.num_classes()), (446, 30));
        assert!(d.is_binary());
    }

    #[test]
    fn csv_write_read_roundtrip() {
        let d = gen_synthetic(&spec(3, 4, 5, 0.7, 1)).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(f.path(), &d).unwrap();
        let back = load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(back, d);
    }

    fn spec(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            classes,
            dim,
            per_class,
            cluster_spread: spread,
            center_scale: 1.0,
            seed,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(&spec(2, 3, 5, 0.5, 7)).unwrap();
        let b = gen_synthetic(&spec(2, 3, 5, 0.5, 7)).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&spec(2, 3, 5, 0.5, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_spread_collapses_classes() {
        let d = gen_synthetic(&spec(3, 4, 6, 0.0, 2)).unwrap();
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d.label(i) == d.label(j) {
                    assert_eq!(d.row(i), d.row(j));
                }
            }
        }
    }

    #[test]
    fn synthetic_rejects_degenerate() {
        assert!(gen_synthetic(&spec(2, 0, 5, 0.5, 1)).is_err());
        assert!(gen_synthetic(&spec(1, 3, 5, 0.5, 1)).is_err());
        assert!(gen_synthetic(&spec(2, 3, 0, 0.5, 1)).is_err());
    }

    #[test]
    fn partition_sizes_and_degenerate() {
        let ids: Vec<usize> = (0..10).collect();
        let plan = partition(&ids, 3, 1, 9).unwrap();
        let mut sizes: Vec<usize> = plan.subsets.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        let one = partition(&ids, 1, 1, 9).unwrap();
        let mut all = one.subsets[0].clone();
        all.sort_unstable();
        assert_eq!(all, ids);
        assert!(matches!(
            partition(&ids, 11, 1, 9),
            Err(MistError::TooManySubsets { .. })
        ));
    }

    #[test]
    fn partition_is_seeded() {
        let ids: Vec<usize> = (0..32).collect();
        assert_eq!(partition(&ids, 4, 3, 1).unwrap(), partition(&ids, 4, 3, 1).unwrap());
        assert_ne!(partition(&ids, 4, 3, 1).unwrap(), partition(&ids, 4, 4, 1).unwrap());
        assert_ne!(partition(&ids, 4, 3, 1).unwrap(), partition(&ids, 4, 3, 2).unwrap());
    }

    fn two_rows() -> Batch {
        Batch::hard(vec![0.0, 1.0, 1.0, 0.0], 2, vec![0, 1]).unwrap()
    }

    #[test]
    fn mixup_endpoint_and_midpoint() {
        let b = two_rows();
        let m = mixup_with(&b, 2, &[1, 0], &[1.0, 0.5]).unwrap();
        assert_eq!(m.row(0), &[0.0, 1.0]);
        assert_eq!(m.row(1), &[0.5, 0.5]);
        match m.targets() {
            Targets::Soft { probs, .. } => assert_eq!(probs, &vec![1.0, 0.0, 0.5, 0.5]),
            _ => panic!("soft expected"),
        }
    }

    #[test]
    fn mixup_rejects_bad_alpha_and_tiny_batch() {
        let mut rng = stream(1, &[]);
        assert!(mixup_batch(&two_rows(), 2, 0.0, &mut rng).is_err());
        assert!(mixup_batch(&two_rows(), 2, -1.0, &mut rng).is_err());
        let one = Batch::hard(vec![1.0], 1, vec![0]).unwrap();
        assert!(mixup_batch(&one, 2, 1.0, &mut rng).is_err());
    }

    #[test]
    fn beta_concentrates_at_large_alpha() {
        let beta = Beta::new(100.0, 100.0).unwrap();
        let mut rng = stream(3, &[]);
        let mean: f64 = (0..10_000).map(|_| beta.sample(&mut rng)).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn split_is_balanced_and_covered() {
        let ids: Vec<usize> = (0..100).collect();
        let split = SplitSpec::random(&ids, 30, 20, 20, 5)
            .unwrap()
            .with_shadows(4, ShadowScheme::Balanced, 5);
        split.validate(2).unwrap();
        assert_eq!(split.member_ids.len(), split.nonmember_ids.len());
        assert!(SplitSpec::random(&ids, 45, 10, 10, 5).is_err());
    }

    #[test]
    fn two_shadows_cannot_cover() {
        let ids: Vec<usize> = (0..20).collect();
        let split = SplitSpec::random(&ids, 10, 0, 0, 5)
            .unwrap()
            .with_shadows(2, ShadowScheme::Balanced, 5);
        assert!(matches!(
            split.validate(2),
            Err(MistError::InsufficientCoverage { .. })
        ));
    }

    #[test]
    fn independent_halves_are_halves() {
        let pool: Vec<usize> = (0..40).collect();
        let m = shadow_membership(&pool, 6, ShadowScheme::IndependentHalves, 1);
        assert!(m.iter().all(|s| s.len() == 20));
    }
}
