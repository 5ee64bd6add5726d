//! Offline computation of the controller parameters.
//!
//! Three sweeps over the path: harmonic weight aggregation from node 0 up,
//! cost-to-go coefficients from the top node down, and the `h` coupling
//! terms from node 0 up again. A final purely local pass turns the tables
//! into the feedback coefficients consumed by [`crate::controller`].
//!
//! Indices follow the math where that keeps the formulas legible: `X_i(j)`
//! is stored at `x[j - 1]`, `P_i(l, m)` at `p[l - 1][m - 1]`.

use serde::Serialize;

use crate::model::GraphSpec;

/// Which upper product limit to use inside `phi_i(delta)`.
///
/// The two candidate forms of the coefficient differ only in whether the
/// running `g` product stops at `delta` or `delta + 1`. The dense oracle
/// selects [`PhiProduct::ThroughDelta`]; the other form is kept so the
/// differential suite can demonstrate that it is not optimal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum PhiProduct {
    /// `prod_{j=2}^{delta} g_i(j)`.
    #[default]
    ThroughDelta,
    /// `prod_{j=2}^{delta+1} g_i(j)`.
    ThroughDeltaPlusOne,
}

/// Everything one node needs to run its part of the online sweeps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeParams {
    pub q: f64,
    pub r: f64,
    pub gamma: f64,
    pub rho: f64,
    /// Look-ahead span: `tau_i`, or `H + 1` on the top node.
    pub span: usize,
    /// `X_i(1..=span)`; the top node also carries the terminal `X_N(H+2)`.
    pub x: Vec<f64>,
    /// `g_i(j)` for `j = 2..=span` (top node: `j = 2..=span+1`).
    pub g: Vec<f64>,
    /// `g_{i+1}(1)`, computed with this node's `gamma_i`. `None` on the top node.
    pub g_next: Option<f64>,
    /// `g_{i+1}(1) * prod_{j=2}^{tau_i} g_i(j)`; zero on the top node.
    pub b: f64,
    /// `P_i(l, m)` for `1 <= l, m <= span`.
    pub p: Vec<Vec<f64>>,
    /// `h_{i-1}`; zero on node 0.
    pub h_prev: f64,
    /// `h_i`; `None` on the top node.
    pub h: Option<f64>,
    /// `phi_i(1..=span)`.
    pub phi: Vec<f64>,
    /// `prod_{j=2}^{delta+1} g_i(j)` for `delta = 0..span`.
    pub pi_weights: Vec<f64>,
    pub a: f64,
    pub c: f64,
}

impl NodeParams {
    /// `g_i(j)` for `2 <= j <= span + 1`, where `j = span + 1` continues into
    /// the upstream edge (`g_{i+1}(1)`) or the terminal coefficient.
    pub fn g_at(&self, j: usize) -> f64 {
        debug_assert!(j >= 2);
        match self.g.get(j - 2) {
            Some(&g) => g,
            None => {
                debug_assert_eq!(j, self.span + 1);
                self.g_next
                    .expect("g beyond span only exists for the top node")
            }
        }
    }

    /// `1 - P_i(span, 1)`, the weight carried into `delta_i`.
    pub fn delta_carry(&self) -> f64 {
        1.0 - self.p[self.span - 1][0]
    }

    pub fn x1(&self) -> f64 {
        self.x[0]
    }
}

/// Complete parameter set for a [`GraphSpec`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControllerParams {
    pub nodes: Vec<NodeParams>,
    pub sigma: Vec<usize>,
    pub horizon: usize,
    pub phi_product: PhiProduct,
}

impl ControllerParams {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    /// `X_N(H+2)`.
    pub fn terminal(&self) -> f64 {
        *self.nodes.last().unwrap().x.last().unwrap()
    }
}

/// Harmonic aggregation `gamma_i = gamma_{i-1} q_i / (gamma_{i-1} + q_i)`,
/// likewise for `rho`.
pub fn sweep_gamma_rho(q: &[f64], r: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let combine = |w: &[f64]| {
        let mut out: Vec<f64> = Vec::with_capacity(w.len());
        for &wi in w {
            let next = match out.last() {
                None => wi,
                Some(&prev) => prev * wi / (prev + wi),
            };
            out.push(next);
        }
        out
    };
    (combine(q), combine(r))
}

/// Stationary scalar cost-to-go beyond the horizon, less `gamma`:
/// `-gamma/2 + sqrt(gamma*rho + gamma^2/4)`.
pub fn terminal_riccati(gamma: f64, rho: f64) -> f64 {
    -gamma / 2.0 + (gamma * rho + gamma * gamma / 4.0).sqrt()
}

/// One backward step of the scalar cost-to-go recursion.
fn riccati_step(x_next: f64, gamma: f64, rho: f64) -> f64 {
    rho * (x_next + gamma) / (x_next + gamma + rho)
}

/// Output of the downward sweep for one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTables {
    pub x: Vec<f64>,
    pub g: Vec<f64>,
    pub g_next: Option<f64>,
    pub b: f64,
    pub p: Vec<Vec<f64>>,
}

/// Downward sweep: cost-to-go `X`, the `g` ratios, `b`, and the `P` tables.
pub fn sweep_x_g_b_p(
    spec: &GraphSpec,
    gamma: &[f64],
    rho: &[f64],
    x_terminal: f64,
) -> Vec<NodeTables> {
    let n = spec.n();
    let mut tables: Vec<Option<NodeTables>> = vec![None; n];
    // X_{i+1}(1) handed down from the upstream neighbour.
    let mut upstream_x1 = f64::NAN;
    for i in (0..n).rev() {
        let span = spec.span(i);
        let top = i + 1 == n;
        let (g_i, r_i) = (gamma[i], rho[i]);

        // x[j-1] = X_i(j)
        let mut x = vec![0.0; if top { span + 1 } else { span }];
        if top {
            x[span] = x_terminal;
            for j in (1..=span).rev() {
                x[j - 1] = riccati_step(x[j], g_i, r_i);
            }
        } else {
            x[span - 1] = riccati_step(upstream_x1, g_i, r_i);
            for j in (1..span).rev() {
                x[j - 1] = riccati_step(x[j], g_i, r_i);
            }
        }

        let g_hi = if top { span + 1 } else { span };
        let g: Vec<f64> = (2..=g_hi).map(|j| x[j - 1] / (x[j - 1] + g_i)).collect();
        let (g_next, b) = if top {
            (None, 0.0)
        } else {
            let gn = upstream_x1 / (upstream_x1 + g_i);
            (Some(gn), gn * g[..span - 1].iter().product::<f64>())
        };

        // P(1, m) = X(1)/rho; for l >= 2 the g factor applies only while l <= m.
        let mut p = vec![vec![0.0; span]; span];
        for m in 1..=span {
            p[0][m - 1] = x[0] / r_i;
        }
        for l in 2..=span {
            let k = x[l - 1] / r_i;
            for m in 1..=span {
                let prev = p[l - 2][m - 1];
                p[l - 1][m - 1] = if l <= m {
                    (1.0 - k) * g[l - 2] * prev + k
                } else {
                    (1.0 - k) * prev + k
                };
            }
        }

        upstream_x1 = x[0];
        tables[i] = Some(NodeTables { x, g, g_next, b, p });
    }
    tables.into_iter().map(Option::unwrap).collect()
}

/// Upward `h` sweep followed by the local `phi`, `a`, `c` block.
pub fn sweep_h_and_finalize(
    spec: &GraphSpec,
    gamma: &[f64],
    rho: &[f64],
    tables: Vec<NodeTables>,
    phi_product: PhiProduct,
) -> Vec<NodeParams> {
    let n = spec.n();
    let mut nodes = Vec::with_capacity(n);
    let mut h_prev = 0.0;
    for (i, t) in tables.into_iter().enumerate() {
        let span = spec.span(i);
        let (q, r) = (spec.q()[i], spec.r()[i]);
        let (gam, rh) = (gamma[i], rho[i]);
        let p_last = &t.p[span - 1];

        let h = t
            .g_next
            .map(|gn| (1.0 - p_last[0]) * t.b * h_prev + p_last[span - 1] * gn);

        let g_at = |j: usize| -> f64 {
            match t.g.get(j - 2) {
                Some(&g) => g,
                None => t.g_next.expect("product limit beyond the top node's table"),
            }
        };
        let prod_to = |hi: usize| -> f64 { (2..=hi).map(g_at).product() };

        let phi = (1..=span)
            .map(|delta| {
                let hi = match phi_product {
                    PhiProduct::ThroughDelta => delta,
                    PhiProduct::ThroughDeltaPlusOne => delta + 1,
                };
                1.0 - p_last[delta - 1] - (1.0 - p_last[0]) * h_prev * prod_to(hi)
            })
            .collect();
        let pi_weights = (0..span).map(|delta| prod_to(delta + 1)).collect();

        let x1 = t.x[0];
        let a = x1 / r + gam / q * (1.0 - x1 / rh);
        let c = -(x1 / r - gam * x1 / (q * rh)) * (1.0 - h_prev) + gam / q * h_prev;

        nodes.push(NodeParams {
            q,
            r,
            gamma: gam,
            rho: rh,
            span,
            x: t.x,
            g: t.g,
            g_next: t.g_next,
            b: t.b,
            p: t.p,
            h_prev,
            h,
            phi,
            pi_weights,
            a,
            c,
        });
        h_prev = h.unwrap_or(f64::NAN);
    }
    nodes
}

/// Full parameter synthesis with the default `phi` product limit.
pub fn synthesize(spec: &GraphSpec) -> ControllerParams {
    synthesize_with(spec, PhiProduct::default())
}

pub fn synthesize_with(spec: &GraphSpec, phi_product: PhiProduct) -> ControllerParams {
    let (gamma, rho) = sweep_gamma_rho(spec.q(), spec.r());
    let n = spec.n();
    let x_terminal = terminal_riccati(gamma[n - 1], rho[n - 1]);
    let tables = sweep_x_g_b_p(spec, &gamma, &rho, x_terminal);
    let nodes = sweep_h_and_finalize(spec, &gamma, &rho, tables, phi_product);
    ControllerParams {
        nodes,
        sigma: spec.sigma().to_vec(),
        horizon: spec.horizon(),
        phi_product,
    }
}

/// One row of the flat parameter listing: `(name, node, index1, index2, value)`
/// with one-based node and table indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRow {
    pub param: &'static str,
    pub node: usize,
    pub index1: Option<usize>,
    pub index2: Option<usize>,
    pub value: f64,
}

impl ControllerParams {
    /// Flattens every table into explicitly indexed rows.
    pub fn rows(&self) -> Vec<ParamRow> {
        let mut rows = Vec::new();
        let mut push = |param, node: usize, i1, i2, value| {
            rows.push(ParamRow {
                param,
                node: node + 1,
                index1: i1,
                index2: i2,
                value,
            })
        };
        for (i, np) in self.nodes.iter().enumerate() {
            push("gamma", i, None, None, np.gamma);
            push("rho", i, None, None, np.rho);
            for (j, &x) in np.x.iter().enumerate() {
                push("X", i, Some(j + 1), None, x);
            }
            for (k, &g) in np.g.iter().enumerate() {
                push("g", i, Some(k + 2), None, g);
            }
            if let Some(gn) = np.g_next {
                // stored at node i, indexes node i+1's table
                push("g_next", i, Some(1), None, gn);
            }
            if np.g_next.is_some() {
                push("b", i, None, None, np.b);
            }
            for (l, row) in np.p.iter().enumerate() {
                for (m, &p) in row.iter().enumerate() {
                    push("P", i, Some(l + 1), Some(m + 1), p);
                }
            }
            push("h_prev", i, None, None, np.h_prev);
            if let Some(h) = np.h {
                push("h", i, None, None, h);
            }
            for (k, &phi) in np.phi.iter().enumerate() {
                push("phi", i, Some(k + 1), None, phi);
            }
            push("a", i, None, None, np.a);
            push("c", i, None, None, np.c);
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gamma_rho_examples() {
        let (g, _) = sweep_gamma_rho(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]);
        assert_relative_eq!(g[0], 1.0);
        assert_relative_eq!(g[1], 0.5);
        assert_relative_eq!(g[2], 1.0 / 3.0, epsilon = 1e-15);
        let (g, r) = sweep_gamma_rho(&[2.0, 2.0], &[3.0, 5.0]);
        assert_eq!(g, vec![2.0, 1.0]);
        assert_eq!(r[0], 3.0);
    }

    #[test]
    fn terminal_examples() {
        assert_relative_eq!(
            terminal_riccati(1.0, 1.0),
            (5f64.sqrt() - 1.0) / 2.0,
            epsilon = 1e-15
        );
        assert_eq!(terminal_riccati(1.0, 2.0), 1.0);
    }

    #[test]
    fn riccati_step_example() {
        assert_relative_eq!(riccati_step(1.0, 1.0, 1.0), 2.0 / 3.0);
    }

    #[test]
    fn single_node_degenerate() {
        let spec = GraphSpec::new(vec![], vec![2.0], vec![3.0], 0).unwrap();
        let p = synthesize(&spec);
        let np = &p.nodes[0];
        assert_eq!(np.gamma, 2.0);
        assert_eq!(np.rho, 3.0);
        assert_eq!(np.x.len(), 2);
        assert!(np.g.len() == 1 && np.g_next.is_none() && np.h.is_none());
        assert_eq!(np.b, 0.0);
        assert_eq!(np.h_prev, 0.0);
        assert_eq!(np.p, vec![vec![np.x[0] / 3.0]]);
    }

    #[test]
    fn unit_delay_p_table_is_single_entry() {
        let spec = GraphSpec::uniform(vec![1, 3], 1.0, 2.0, 2).unwrap();
        let p = synthesize(&spec);
        let np = &p.nodes[0];
        assert_eq!(np.p.len(), 1);
        assert_eq!(np.p[0][0], np.x[0] / np.rho);
    }

    #[test]
    fn h_base_cases() {
        let spec = GraphSpec::new(vec![2], vec![1.0, 3.0], vec![2.0, 0.5], 1).unwrap();
        let p = synthesize(&spec);
        assert_eq!(p.nodes[0].h_prev, 0.0);
        let n0 = &p.nodes[0];
        let expect = n0.p[1][1] * n0.g_next.unwrap();
        assert_eq!(n0.h.unwrap(), expect);
        assert_eq!(p.nodes[1].h_prev, expect);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let spec = GraphSpec::new(
            vec![3, 2, 5, 4],
            vec![1.0, 2.0, 0.5, 1.5, 3.0],
            vec![4.0, 0.2, 1.0, 7.0, 2.0],
            6,
        )
        .unwrap();
        let a = synthesize(&spec);
        let b = synthesize(&spec);
        let bits = |p: &ControllerParams| -> Vec<u64> {
            p.rows().iter().map(|r| r.value.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn top_node_cost_to_go_sits_at_fixed_point() {
        // X_N(H+2) is already the stationary value, so the in-node recursion
        // leaves it (numerically) unchanged.
        let spec = GraphSpec::new(vec![2], vec![1.0, 4.0], vec![2.0, 1.0], 5).unwrap();
        let p = synthesize(&spec);
        let x = &p.nodes[1].x;
        for w in x.windows(2) {
            assert_relative_eq!(w[0], w[1], max_relative = 1e-14);
        }
    }
}
