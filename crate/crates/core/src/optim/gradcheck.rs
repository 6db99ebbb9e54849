//! Central finite-difference verification of analytic gradients.

use super::lbfgs::{Objective, ObjectiveError};
use crate::rng::{stream, tags};
use rand_distr::{Distribution, StandardNormal};

/// Above this dimension the check probes random directions instead of coordinates.
pub const COORDINATE_LIMIT: usize = 512;
const RANDOM_DIRECTIONS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Worst `|fd − analytic| / max(|fd|, |analytic|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate (or direction) index of the worst relative error.
    pub worst: usize,
}

/// Relative error with a floor on the denominator so that exactly-zero partials compare absolutely.
pub fn rel_error(fd: f64, analytic: f64, floor: f64) -> f64 {
    let diff = (fd - analytic).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / fd.abs().max(analytic.abs()).max(floor)
}

/// Compare the analytic gradient at `x` with central differences using a step of
/// `step · max(1, |x_i|)` per coordinate, or per random unit direction when the
/// dimension exceeds [`COORDINATE_LIMIT`].
pub fn check_gradient<O: Objective + ?Sized>(obj: &O, x: &[f64], step: f64, floor: f64) -> Result<GradCheck, ObjectiveError> {
    let n = obj.dim();
    let mut grad = vec![0.0; n];
    obj.eval(x, &mut grad)?;
    let mut scratch = vec![0.0; n];
    let mut xp = x.to_vec();
    let mut out = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, worst: 0 };
    let mut record = |idx: usize, fd: f64, an: f64| {
        let rel = rel_error(fd, an, floor);
        out.max_abs_error = out.max_abs_error.max((fd - an).abs());
        if rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst = idx;
        }
    };
    if n <= COORDINATE_LIMIT {
        for i in 0..n {
            let h = step * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let fp = obj.eval(&xp, &mut scratch)?;
            xp[i] = x[i] - h;
            let fm = obj.eval(&xp, &mut scratch)?;
            xp[i] = x[i];
            record(i, (fp - fm) / (2.0 * h), grad[i]);
        }
    } else {
        let mut rng = stream(n as u64, tags::GRADCHECK);
        for k in 0..RANDOM_DIRECTIONS {
            let mut d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = d.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
            d.iter_mut().for_each(|v| *v /= norm);
            let an: f64 = d.iter().zip(&grad).map(|(a, b)| a * b).sum();
            for ((p, x0), di) in xp.iter_mut().zip(x).zip(&d) {
                *p = x0 + step * di;
            }
            let fp = obj.eval(&xp, &mut scratch)?;
            for ((p, x0), di) in xp.iter_mut().zip(x).zip(&d) {
                *p = x0 - step * di;
            }
            let fm = obj.eval(&xp, &mut scratch)?;
            record(k, (fp - fm) / (2.0 * step), an);
        }
    }
    Ok(out)
}
