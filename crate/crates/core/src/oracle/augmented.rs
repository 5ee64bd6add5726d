use nalgebra::{DMatrix, DVector};

use crate::model::GraphSpec;

/// Conventional state-space form of the transport dynamics.
///
/// State: node levels followed by each edge's in-transit flows, oldest
/// first. Inputs: flows `u_0..u_{N-2}` followed by productions `v_0..v_{N-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl AugmentedSystem {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    /// `A x + B w + E d`.
    pub fn step(&self, x: &DVector<f64>, w: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * w + &self.e * d
    }
}

pub fn build_augmented_system(spec: &GraphSpec) -> AugmentedSystem {
    let n = spec.n();
    let dim = n + spec.pipeline_slots();
    let m = 2 * n - 1;
    let mut a = DMatrix::zeros(dim, dim);
    let mut b = DMatrix::zeros(dim, m);
    let mut e = DMatrix::zeros(dim, n);
    let mut q = DMatrix::zeros(dim, dim);
    let mut r = DMatrix::zeros(m, m);

    let mut offset = n;
    for i in 0..n {
        a[(i, i)] = 1.0;
        e[(i, i)] = 1.0;
        q[(i, i)] = spec.q()[i];
        let v_col = n - 1 + i;
        b[(i, v_col)] = 1.0;
        r[(v_col, v_col)] = spec.r()[i];
        if i + 1 < n {
            let tau = spec.tau()[i];
            // oldest slot drains into node i
            a[(i, offset)] = 1.0;
            for k in 0..tau - 1 {
                a[(offset + k, offset + k + 1)] = 1.0;
            }
            b[(offset + tau - 1, i)] = 1.0;
            b[(i + 1, i)] = -1.0;
            offset += tau;
        }
    }
    AugmentedSystem { a, b, e, q, r }
}
