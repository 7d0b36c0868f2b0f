//! Analytic gradients against central finite differences.

use mistlab::nn::{ce_loss_and_grad, param_count, Batch, ModelParams, Targets};
use mistlab::rng::stream;
use mistlab::train::{peer_mean_predictions, xdiff_loss_and_grad, XdiffVariant};
use rand::Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn random_net(rng: &mut impl Rng, dims: &[usize]) -> ModelParams {
    let values = (0..param_count(dims)).map(|_| rng.random_range(-1.0..1.0)).collect();
    ModelParams::new(dims.to_vec(), values).unwrap()
}

fn random_dims(rng: &mut impl Rng) -> Vec<usize> {
    loop {
        let depth = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(2..=12)];
        for _ in 0..depth - 1 {
            dims.push(rng.random_range(2..=24));
        }
        dims.push(rng.random_range(2..=6));
        if param_count(&dims) <= 5000 {
            return dims;
        }
    }
}

fn random_batch(rng: &mut impl Rng, dim: usize, classes: usize, rows: usize) -> (Vec<f64>, Vec<usize>) {
    let x = (0..rows * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

/// Central differences of `f` at every coordinate of `m`.
fn numeric_grad(m: &ModelParams, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let base = m.values().to_vec();
    (0..base.len())
        .map(|i| {
            let mut v = base.clone();
            v[i] = base[i] + STEP;
            let up = f(&ModelParams::new(m.layer_dims().to_vec(), v.clone()).unwrap());
            v[i] = base[i] - STEP;
            let down = f(&ModelParams::new(m.layer_dims().to_vec(), v).unwrap());
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` with a floor for all-zero gradients.
fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(1e-8)
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    for trial in 0..20u64 {
        let mut rng = stream(100 + trial, &[]);
        let dims = random_dims(&mut rng);
        let net = random_net(&mut rng, &dims);
        let (x, y) = random_batch(&mut rng, dims[0], *dims.last().unwrap(), 6);
        let batch = Batch::hard(x, dims[0], y).unwrap();
        let (_, g) = ce_loss_and_grad(&net, &batch).unwrap();
        let n = numeric_grad(&net, |m| ce_loss_and_grad(m, &batch).unwrap().0);
        let err = relative_error(g.values(), &n);
        assert!(err < REL_TOL, "trial {trial} dims {dims:?}: rel err {err:e}");
    }
}

#[test]
fn soft_target_gradient_matches_finite_differences() {
    let mut rng = stream(7, &[]);
    let dims = [5, 9, 4];
    let net = random_net(&mut rng, &dims);
    let (x, _) = random_batch(&mut rng, 5, 4, 3);
    let mut probs: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
    for row in probs.chunks_mut(4) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    let batch = Batch::new(x, 5, Targets::Soft { probs, classes: 4 }).unwrap();
    let (_, g) = ce_loss_and_grad(&net, &batch).unwrap();
    let n = numeric_grad(&net, |m| ce_loss_and_grad(m, &batch).unwrap().0);
    assert!(relative_error(g.values(), &n) < REL_TOL);
}

#[test]
fn xdiff_gradients_match_finite_differences() {
    for variant in XdiffVariant::ALL {
        for trial in 0..20u64 {
            let mut rng = stream(500 + trial, &[variant as u64]);
            let dims = random_dims(&mut rng);
            let k = *dims.last().unwrap();
            let w = random_net(&mut rng, &dims);
            let peers: Vec<ModelParams> = (0..rng.random_range(1..=3))
                .map(|_| random_net(&mut rng, &dims))
                .collect();
            let (mut x, mut y) = random_batch(&mut rng, dims[0], k, 8);
            if variant == XdiffVariant::L1 {
                // Keep rows whose true-class gap is clear of the |·| kink.
                let refs: Vec<&ModelParams> = peers.iter().collect();
                let m = peer_mean_predictions(&refs, &x).unwrap();
                let p = mistlab::nn::predict_batch(&w, &x).unwrap();
                let keep: Vec<usize> = (0..y.len())
                    .filter(|&r| (p[r * k + y[r]] - m[r * k + y[r]]).abs() >= 1e-3)
                    .collect();
                if keep.is_empty() {
                    continue;
                }
                let d = dims[0];
                x = keep.iter().flat_map(|&r| x[r * d..(r + 1) * d].to_vec()).collect();
                y = keep.iter().map(|&r| y[r]).collect();
            }
            let batch = Batch::hard(x, dims[0], y).unwrap();
            let (_, g) = xdiff_loss_and_grad(&w, &batch, &peers, variant).unwrap();
            let n = numeric_grad(&w, |m| xdiff_loss_and_grad(m, &batch, &peers, variant).unwrap().0);
            let err = relative_error(g.values(), &n);
            assert!(err < REL_TOL, "{variant} trial {trial} dims {dims:?}: rel err {err:e}");
        }
    }
}
