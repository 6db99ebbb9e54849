//! Closed-form ridge weights against plain gradient descent on the same objective.

use mzimesh::dataset::{Record, Split};
use mzimesh::ensemble::{fit_weights, LambdaSelection, RidgeConfig};
use mzimesh::mesh::{VoltageVector, WeightMatrixDb, N_WEIGHTS};
use mzimesh::rng::stream;
use rand::Rng as _;

/// Minimize ‖Xc − y‖² + λ‖c‖² by gradient descent with a fixed 1/L step.
fn descend(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let k = x.len();
    let lip = 2.0 * (x.iter().map(|col| col.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() + lambda);
    let mut c = vec![0.0; k];
    for _ in 0..2_000_000 {
        let resid: Vec<f64> = (0..y.len()).map(|r| (0..k).map(|j| x[j][r] * c[j]).sum::<f64>() - y[r]).collect();
        let g: Vec<f64> = (0..k).map(|j| 2.0 * x[j].iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>() + 2.0 * lambda * c[j]).collect();
        if g.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-10 {
            break;
        }
        c.iter_mut().zip(&g).for_each(|(c, g)| *c -= g / lip);
    }
    c
}

#[test]
fn closed_form_matches_descent() {
    for trial in 0..10u64 {
        let mut rng = stream(trial, 0);
        let n = 12;
        let preds: Vec<Vec<[f64; N_WEIGHTS]>> =
            (0..3).map(|_| (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-30.0..-1.0))).collect()).collect();
        let truth: Vec<Record> = (0..n)
            .map(|l| {
                let w = std::array::from_fn(|e| 0.5 * preds[0][l][e] + 0.3 * preds[1][l][e] + 0.2 * preds[2][l][e] + rng.random_range(-1.0..1.0));
                Record { v: VoltageVector::splat(1.0).unwrap(), w: WeightMatrixDb::new(w).unwrap(), split: Split::Validation }
            })
            .collect();
        let x: Vec<Vec<f64>> = preds.iter().map(|p| p.iter().flatten().copied().collect()).collect();
        let y: Vec<f64> = truth.iter().flat_map(|r| *r.w.as_array()).collect();
        for lambda in [0.0, 0.1, 10.0] {
            let cfg = RidgeConfig { grid: vec![lambda], per_entry: false, selection: LambdaSelection::InSample };
            let fit = fit_weights(&preds, &truth, &cfg).unwrap();
            let reference = descend(&x, &y, lambda);
            for (a, b) in fit.coefficients.values.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-8, "trial {trial} lambda {lambda}: {a} vs {b}");
            }
        }
    }
}
