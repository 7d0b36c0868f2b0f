//! Threshold-swept attack evaluation: ROC, AUC, TPR at fixed FPR, PLR,
//! and ranking of instances by IN/OUT Gaussian separation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use statrs::function::erf::erfc;

use crate::attacks::AttackScores;
use crate::error::{MistError, Result};
use crate::shadow::GaussianPair;

/// FPR targets reported by default.
pub const DEFAULT_FPR_TARGETS: [f64; 3] = [0.001, 0.005, 0.01];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called members; `+inf` for the origin.
    pub threshold: f64,
    pub false_positives: usize,
    pub true_positives: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    points: Vec<RocPoint>,
    positives: usize,
    negatives: usize,
    /// `2·P·N·AUC`, kept integral so ties get exactly half credit.
    auc_twice_pairs: u128,
}

impl RocCurve {
    pub fn points(&self) -> &[RocPoint] {
        &self.points
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn negatives(&self) -> usize {
        self.negatives
    }

    pub fn auc(&self) -> f64 {
        self.auc_twice_pairs as f64 / (2 * self.positives as u128 * self.negatives as u128) as f64
    }
}

/// Exact ROC over all distinct thresholds, equal scores crossing together.
pub fn roc_from_scores(members: &[f64], nonmembers: &[f64]) -> Result<RocCurve> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(MistError::EmptySide);
    }
    let mut all: Vec<(f64, bool)> = members
        .iter()
        .map(|&s| (s, true))
        .chain(nonmembers.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (members.len(), nonmembers.len());
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
        false_positives: 0,
        true_positives: 0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut twice = 0u128;
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        let (mut gp, mut gn) = (0usize, 0usize);
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        // Trapezoid under this step: each new negative beats `tp` members
        // outright and ties with the `gp` members of the group.
        twice += gn as u128 * (2 * tp as u128 + gp as u128);
        tp += gp;
        fp += gn;
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold: s,
            false_positives: fp,
            true_positives: tp,
        });
    }
    Ok(RocCurve {
        points,
        positives: p,
        negatives: n,
        auc_twice_pairs: twice,
    })
}

pub fn roc(scores: &AttackScores) -> Result<RocCurve> {
    roc_from_scores(&scores.member_scores(), &scores.nonmember_scores())
}

/// One ROC per class tag, for classes that have both members and
/// non-members.
pub fn roc_by_class(scores: &AttackScores) -> BTreeMap<usize, RocCurve> {
    let mut by_class: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for e in scores.entries() {
        let slot = by_class.entry(e.class).or_default();
        if e.member {
            slot.0.push(e.score);
        } else {
            slot.1.push(e.score);
        }
    }
    by_class
        .into_iter()
        .filter_map(|(k, (m, n))| roc_from_scores(&m, &n).ok().map(|c| (k, c)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TprAtFpr {
    pub target_fpr: f64,
    pub tpr: f64,
    /// Largest achievable FPR not above the target (a multiple of `1/N`).
    pub realized_fpr: f64,
    pub threshold: f64,
}

/// TPR at the largest achievable FPR `<= fpr_target` on the step curve.
pub fn tpr_at_fpr(curve: &RocCurve, fpr_target: f64) -> TprAtFpr {
    let best = curve
        .points
        .iter()
        .take_while(|pt| pt.fpr <= fpr_target)
        .last()
        .copied()
        .unwrap_or(curve.points[0]);
    TprAtFpr {
        target_fpr: fpr_target,
        tpr: best.tpr,
        realized_fpr: best.fpr,
        threshold: best.threshold,
    }
}

/// Positive likelihood ratio `TPR / FPR`.
pub fn plr(tpr: f64, fpr: f64) -> f64 {
    tpr / fpr
}

/// Metrics at one FPR target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FprEntry {
    pub target_fpr: f64,
    pub tpr: f64,
    /// `TPR / target`.
    pub plr: f64,
    pub realized_fpr: f64,
    /// `TPR / realized`, undefined when no false positive was admitted.
    pub plr_realized: Option<f64>,
}

impl FprEntry {
    /// The target FPR was below the curve's granularity.
    pub fn zero_fp(&self) -> bool {
        self.realized_fpr == 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dataset: String,
    pub defense: String,
    pub attack_name: String,
    pub auc: f64,
    pub at: Vec<FprEntry>,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

pub fn evaluate(
    scores: &AttackScores,
    dataset: &str,
    defense: &str,
    fpr_targets: &[f64],
) -> Result<MetricsReport> {
    let curve = roc(scores)?;
    let at = fpr_targets
        .iter()
        .map(|&f| {
            let t = tpr_at_fpr(&curve, f);
            FprEntry {
                target_fpr: f,
                tpr: t.tpr,
                plr: plr(t.tpr, f),
                realized_fpr: t.realized_fpr,
                plr_realized: (t.realized_fpr > 0.0).then(|| plr(t.tpr, t.realized_fpr)),
            }
        })
        .collect();
    Ok(MetricsReport {
        dataset: dataset.to_string(),
        defense: defense.to_string(),
        attack_name: scores.name().to_string(),
        auc: curve.auc(),
        at,
        n_members: curve.positives(),
        n_nonmembers: curve.negatives(),
    })
}

impl MetricsReport {
    pub fn at_target(&self, fpr: f64) -> Option<&FprEntry> {
        self.at.iter().find(|e| e.target_fpr == fpr)
    }

    pub fn csv_header(fpr_targets: &[f64]) -> String {
        let mut h = String::from("dataset,defense,attack,auc");
        for f in fpr_targets {
            let _ = write!(h, ",tpr@{f},plr@{f}");
        }
        h.push_str(",realized_fprs");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{},{},{:.6}", self.dataset, self.defense, self.attack_name, self.auc);
        for e in &self.at {
            let _ = write!(row, ",{:.6},{:.4}", e.tpr, e.plr);
        }
        let realized: Vec<String> = self.at.iter().map(|e| format!("{:.6}", e.realized_fpr)).collect();
        let _ = write!(row, ",{}", realized.join(";"));
        row
    }

    /// Flat `key = value` rendering.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "defense = {}", self.defense);
        let _ = writeln!(s, "attack = {}", self.attack_name);
        let _ = writeln!(s, "auc = {}", self.auc);
        let _ = writeln!(s, "n_members = {}", self.n_members);
        let _ = writeln!(s, "n_nonmembers = {}", self.n_nonmembers);
        for e in &self.at {
            let f = e.target_fpr;
            let _ = writeln!(s, "tpr@{f} = {}", e.tpr);
            let _ = writeln!(s, "plr@{f} = {}", e.plr);
            let _ = writeln!(s, "realized_fpr@{f} = {}", e.realized_fpr);
            match e.plr_realized {
                Some(v) => {
                    let _ = writeln!(s, "plr_realized@{f} = {v}");
                }
                None => {
                    let _ = writeln!(s, "plr_realized@{f} = undefined");
                }
            }
        }
        s
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Mass of `N(mu, sigma)` on `[lo, hi]`, using the tail that keeps precision.
fn normal_mass(lo: f64, hi: f64, mu: f64, sigma: f64) -> f64 {
    let a = (lo - mu) / sigma;
    let b = (hi - mu) / sigma;
    if a > 0.0 {
        std_normal_cdf(-a) - std_normal_cdf(-b)
    } else {
        std_normal_cdf(b) - std_normal_cdf(a)
    }
}

/// Points where the two densities are equal, ascending.
fn crossings(g: &GaussianPair) -> Option<Vec<f64>> {
    let (m1, s1, m2, s2) = (g.mu_in, g.sigma_in, g.mu_out, g.sigma_out);
    let a = 0.5 / (s2 * s2) - 0.5 / (s1 * s1);
    let b = m1 / (s1 * s1) - m2 / (s2 * s2);
    let c = 0.5 * m2 * m2 / (s2 * s2) - 0.5 * m1 * m1 / (s1 * s1) + (s2 / s1).ln();
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 {
        return Some(Vec::new());
    }
    if a.abs() <= 1e-12 * scale {
        if b == 0.0 {
            return Some(Vec::new());
        }
        return Some(vec![-c / b]);
    }
    let disc = b * b - 4.0 * a * c;
    if !(disc >= 0.0) {
        return None;
    }
    // Cancellation-free quadratic roots.
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let mut roots = vec![q / a, if q != 0.0 { c / q } else { 0.0 }];
    roots.sort_by(f64::total_cmp);
    if roots.iter().any(|r| !r.is_finite()) {
        return None;
    }
    Some(roots)
}

/// `1 − ∫ min(N_in, N_out)` from the density crossing points.
pub fn non_overlap(g: &GaussianPair) -> f64 {
    let Some(roots) = crossings(g) else {
        return non_overlap_simpson(g, 1e-9);
    };
    if roots.is_empty() {
        return 0.0;
    }
    let mut edges = vec![f64::NEG_INFINITY];
    edges.extend(roots);
    edges.push(f64::INFINITY);
    let mut overlap = 0.0;
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let probe = match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (false, true) => hi - 1.0 - g.sigma_in.max(g.sigma_out),
            (true, false) => lo + 1.0 + g.sigma_in.max(g.sigma_out),
            (false, false) => unreachable!("at least one root"),
        };
        // Compare in log space so far-tail probes do not underflow to a tie.
        let lin = -0.5 * ((probe - g.mu_in) / g.sigma_in).powi(2) - g.sigma_in.ln();
        let lout = -0.5 * ((probe - g.mu_out) / g.sigma_out).powi(2) - g.sigma_out.ln();
        overlap += if lin <= lout {
            normal_mass(lo, hi, g.mu_in, g.sigma_in)
        } else {
            normal_mass(lo, hi, g.mu_out, g.sigma_out)
        };
    }
    (1.0 - overlap).clamp(0.0, 1.0)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
            + recurse(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, m, fm, whole, tol, depth)
}

/// Numerical `1 − ∫ min(N_in, N_out)` by adaptive Simpson over a window
/// of ±12σ around both means.
pub fn non_overlap_simpson(g: &GaussianPair, tol: f64) -> f64 {
    let span = 12.0 * g.sigma_in.max(g.sigma_out);
    let lo = g.mu_in.min(g.mu_out) - span;
    let hi = g.mu_in.max(g.mu_out) + span;
    let f = |x: f64| normal_pdf(x, g.mu_in, g.sigma_in).min(normal_pdf(x, g.mu_out, g.sigma_out));
    // Split at a fine grid first so narrow peaks are never stepped over.
    let pieces = 256;
    let h = (hi - lo) / pieces as f64;
    let overlap: f64 = (0..pieces)
        .map(|i| {
            let a = lo + i as f64 * h;
            adaptive_simpson(&f, a, a + h, tol / pieces as f64, 30)
        })
        .sum();
    (1.0 - overlap).clamp(0.0, 1.0)
}

/// Instances ranked by IN/OUT non-overlap, largest first (ties by id).
pub fn vulnerability_rank(
    gaussians: &BTreeMap<usize, GaussianPair>,
    top_k: usize,
) -> Result<Vec<(usize, f64)>> {
    if top_k > gaussians.len() {
        return Err(MistError::TopKTooLarge {
            requested: top_k,
            available: gaussians.len(),
        });
    }
    let mut ranked: Vec<(usize, f64)> = gaussians.iter().map(|(&id, g)| (id, non_overlap(g))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_k);
    Ok(ranked)
}
