use nalgebra::DMatrix;

use super::augmented::AugmentedSystem;
use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 200_000;
const TOLERANCE: f64 = 1e-13;

/// Stationary Riccati solution and the corresponding dense feedback `w = K x`.
#[derive(Debug, Clone)]
pub struct StationaryGain {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub iterations: usize,
    /// Max-abs residual of the algebraic Riccati equation at `p`.
    pub residual: f64,
}

/// `(R + B'PB)^{-1} B'PA`
fn feedback(sys: &AugmentedSystem, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let bt_p = sys.b.transpose() * p;
    let lhs = &sys.r + &bt_p * &sys.b;
    lhs.lu().solve(&(bt_p * &sys.a)).ok_or(Error::Singular {
        context: "Riccati feedback",
    })
}

fn riccati_map(sys: &AugmentedSystem, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gain = feedback(sys, p)?;
    let at_p = sys.a.transpose() * p;
    let next = &sys.q + &at_p * &sys.a - &at_p * &sys.b * gain;
    // keep exact symmetry so the iteration cannot drift
    Ok((&next + next.transpose()) * 0.5)
}

/// Value iteration on the discrete algebraic Riccati equation, started from
/// `P = Q`. The input weight is singular on the (unpenalised) flows but
/// `R + B'QB` is positive definite, so every iterate is well defined.
pub fn stationary_gain(sys: &AugmentedSystem) -> Result<StationaryGain> {
    let mut p = sys.q.clone();
    let mut change = f64::INFINITY;
    for it in 1..=MAX_ITERATIONS {
        let next = riccati_map(sys, &p)?;
        change = (&next - &p).amax();
        let scale = next.amax().max(1.0);
        p = next;
        if change <= TOLERANCE * scale {
            let k = -feedback(sys, &p)?;
            let residual = (riccati_map(sys, &p)? - &p).amax();
            return Ok(StationaryGain {
                p,
                k,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::RiccatiNonConvergence {
        iterations: MAX_ITERATIONS,
        residual: change,
    })
}
