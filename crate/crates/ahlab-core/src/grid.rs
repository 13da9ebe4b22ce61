//! Radial discretisation: node layouts, Fornberg finite-difference stencils
//! with even/odd parity closure across the origin, and positive panel
//! quadrature for the weighted integrals.

use crate::{AhError, Result};
use serde::{Deserialize, Serialize};

/// Node layout on [x_min, x_max].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Clustering {
    /// Endpoints included, equal spacing (x_max - x_min)/(N-1).
    Uniform,
    /// Cell-centred: x_j = x_min + (j + 1/2) h, last node exactly x_max.
    /// The physics default: the origin is not a node, regularity enters
    /// through parity ghost nodes.
    Staggered,
    /// Smooth sinh map concentrating nodes near x_min; the value is the
    /// clustering strength (0 recovers Uniform).
    Clustered(f64),
}

/// Parity of a field under reflection across x = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

/// Precomputed differentiation stencils, one sparse row per node.
#[derive(Debug, Clone)]
pub struct DiffOp {
    rows: Vec<Vec<(usize, f64)>>,
}

impl DiffOp {
    pub fn apply(&self, field: &[f64]) -> Vec<f64> {
        assert_eq!(field.len(), self.rows.len());
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * field[j]).sum())
            .collect()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn bandwidth(&self) -> usize {
        let mut bw = 0usize;
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, _) in row {
                bw = bw.max(i.abs_diff(j));
            }
        }
        bw
    }
}

/// Radial grid with quadrature weights and differentiation stencils.
#[derive(Debug, Clone)]
pub struct RadialGrid {
    pub n: usize,
    pub nodes: Vec<f64>,
    pub sphere_area: f64,
    pub quad_weights: Vec<f64>,
    pub stencil_order: usize,
    x_min: f64,
    x_max: f64,
    d: [DiffOp; 2],
    parity_d: Option<[[DiffOp; 2]; 2]>, // [even, odd] x [d1, d2]
    panels: Vec<Panel>,
}

#[derive(Debug, Clone)]
struct Panel {
    right: usize,
    start: usize,
    w: Vec<f64>,
}

/// Fornberg weights for derivatives 0..=m of the interpolant through `x`,
/// evaluated at `z`; c[k][j] multiplies the value at x[j].
fn fornberg(z: f64, x: &[f64], m: usize) -> Vec<Vec<f64>> {
    let nn = x.len();
    let mut c = vec![vec![0.0; nn]; m + 1];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..nn {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

// 8-point Gauss-Legendre rule on [-1, 1].
const GL_X: [f64; 8] = [
    -0.960_289_856_497_536_2,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329_0,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
const GL_W: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362_0,
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// Volume of the unit round (n-1)-sphere, 2 pi^{n/2} / Gamma(n/2).
pub fn unit_sphere_area(n: usize) -> f64 {
    let half = 0.5 * n as f64;
    // Gamma at integer or half-integer argument by upward recursion.
    let (mut g, mut z) = if n % 2 == 0 { (1.0, 1.0) } else { (std::f64::consts::PI.sqrt(), 0.5) };
    while z + 0.5 < half {
        g *= z;
        z += 1.0;
    }
    2.0 * std::f64::consts::PI.powf(half) / g
}

/// Width of the near-origin patch where parity stencils are raised to
/// order 6 to control cancellation in (1 - W'^2)/W^2.
const ORIGIN_PATCH: f64 = 0.35;

impl RadialGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn has_parity(&self) -> bool {
        self.parity_d.is_some()
    }

    /// Finite-difference derivative with one-sided stencils at the endpoints.
    pub fn diff(&self, field: &[f64], order: usize) -> Result<Vec<f64>> {
        if order == 0 || order > 2 {
            return Err(AhError::Parameter(format!("derivative order {order} not in {{1, 2}}")));
        }
        Ok(self.d[order - 1].apply(field))
    }

    /// Derivative using the parity extension across x = 0 where available;
    /// falls back to one-sided stencils on grids not touching the origin.
    pub fn diff_parity(&self, field: &[f64], order: usize, parity: Parity) -> Result<Vec<f64>> {
        if order == 0 || order > 2 {
            return Err(AhError::Parameter(format!("derivative order {order} not in {{1, 2}}")));
        }
        match &self.parity_d {
            Some(ops) => {
                let p = match parity {
                    Parity::Even => 0,
                    Parity::Odd => 1,
                };
                Ok(ops[p][order - 1].apply(field))
            }
            None => Ok(self.d[order - 1].apply(field)),
        }
    }

    pub fn parity_op(&self, order: usize, parity: Parity) -> Option<&DiffOp> {
        self.parity_d.as_ref().map(|ops| {
            let p = match parity {
                Parity::Even => 0,
                Parity::Odd => 1,
            };
            &ops[p][order - 1]
        })
    }

    pub fn standard_op(&self, order: usize) -> &DiffOp {
        &self.d[order - 1]
    }

    /// Sum of quad_weights * field * weight_field over the whole domain.
    pub fn integrate(&self, field: &[f64], weight_field: &[f64]) -> Result<f64> {
        if weight_field.iter().any(|&w| w <= 0.0 || !w.is_finite()) {
            return Err(AhError::Domain("nonpositive quadrature weight field".into()));
        }
        Ok(self
            .quad_weights
            .iter()
            .zip(field)
            .zip(weight_field)
            .map(|((&q, &f), &w)| q * f * w)
            .sum())
    }

    /// Cumulative integral of `integrand` from x_min up to each node.
    pub fn integrate_prefix(&self, integrand: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let mut acc = 0.0;
        for p in &self.panels {
            let s: f64 = p.w.iter().enumerate().map(|(k, &w)| w * integrand[p.start + k]).sum();
            acc += s;
            out[p.right] = acc;
        }
        // Nodes that are not a panel right endpoint (only x_0 on staggered
        // grids when the stub panel ends there) are already covered; fill
        // any untouched leading nodes with the running value.
        let mut last = 0.0;
        for (i, v) in out.iter_mut().enumerate() {
            if i > 0 && *v == 0.0 && self.panels.iter().all(|p| p.right != i) {
                *v = last;
            }
            last = *v;
        }
        out
    }
}

/// Builds a radial grid; `clustering` selects the node layout.
pub fn make_grid(
    n: usize,
    x_min: f64,
    x_max: f64,
    count: usize,
    clustering: Clustering,
) -> Result<RadialGrid> {
    if n < 3 {
        return Err(AhError::Parameter(format!("dimension n = {n} must be >= 3")));
    }
    if !(0.0 <= x_min && x_min < x_max) {
        return Err(AhError::Parameter(format!("invalid bounds [{x_min}, {x_max}]")));
    }
    if count < 64 {
        return Err(AhError::Parameter(format!("node count {count} must be >= 64")));
    }
    let stencil_order = 4usize;
    let nf = count as f64;
    let nodes: Vec<f64> = match clustering {
        Clustering::Uniform => {
            let h = (x_max - x_min) / (nf - 1.0);
            (0..count).map(|j| x_min + j as f64 * h).collect()
        }
        Clustering::Staggered => {
            let h = (x_max - x_min) / (nf - 0.5);
            (0..count).map(|j| x_min + (j as f64 + 0.5) * h).collect()
        }
        Clustering::Clustered(s) => {
            if s <= 0.0 {
                return Err(AhError::Parameter("clustering strength must be positive".into()));
            }
            let l = x_max - x_min;
            (0..count)
                .map(|j| {
                    let t = j as f64 / (nf - 1.0);
                    x_min + l * (s * t).sinh() / s.sinh()
                })
                .collect()
        }
    };
    // Force the endpoint exactly.
    let mut nodes = nodes;
    *nodes.last_mut().unwrap() = x_max;

    let parity_capable = x_min == 0.0;
    let d1 = standard_diff_op(&nodes, 1, stencil_order);
    let d2 = standard_diff_op(&nodes, 2, stencil_order);
    let parity_d = if parity_capable {
        Some([
            [
                parity_diff_op(&nodes, 1, stencil_order, Parity::Even),
                parity_diff_op(&nodes, 2, stencil_order, Parity::Even),
            ],
            [
                parity_diff_op(&nodes, 1, stencil_order, Parity::Odd),
                parity_diff_op(&nodes, 2, stencil_order, Parity::Odd),
            ],
        ])
    } else {
        None
    };

    let panels = build_panels(&nodes, x_min, stencil_order);
    let mut quad_weights = vec![0.0; count];
    for p in &panels {
        for (k, &w) in p.w.iter().enumerate() {
            quad_weights[p.start + k] += w;
        }
    }
    if quad_weights.iter().any(|&w| w <= 0.0) {
        return Err(AhError::Parameter("quadrature produced nonpositive weights".into()));
    }

    Ok(RadialGrid {
        n,
        nodes,
        sphere_area: unit_sphere_area(n),
        quad_weights,
        stencil_order,
        x_min,
        x_max,
        d: [d1, d2],
        parity_d,
        panels,
    })
}

fn standard_diff_op(nodes: &[f64], order: usize, stencil_order: usize) -> DiffOp {
    let count = nodes.len();
    let m = stencil_order + order;
    let rows = (0..count)
        .map(|i| {
            // Clamped (one-sided) windows get two extra nodes to offset the
            // larger error constants of off-centred stencils.
            let clamped = i < m / 2 || i + (m - m / 2) > count;
            let mm = if clamped { (m + 2).min(count) } else { m };
            let start = i.saturating_sub(mm / 2).min(count - mm);
            let window = &nodes[start..start + mm];
            let c = fornberg(nodes[i], window, order);
            (0..mm).map(|k| (start + k, c[order][k])).collect()
        })
        .collect();
    DiffOp { rows }
}

fn parity_diff_op(nodes: &[f64], order: usize, stencil_order: usize, parity: Parity) -> DiffOp {
    let count = nodes.len();
    let node_at_zero = nodes[0] == 0.0;
    let sign = match parity {
        Parity::Even => 1.0,
        Parity::Odd => -1.0,
    };
    let rows = (0..count)
        .map(|i| {
            let acc = if nodes[i] < ORIGIN_PATCH { 6 } else { stencil_order };
            let mut m = acc + order;
            // Widen windows clamped against the outer boundary.
            if i + (m - m / 2) > count {
                m = (m + 2).min(count);
            }
            let start = (i as isize - (m / 2) as isize).min(count as isize - m as isize);
            let mut coords = Vec::with_capacity(m);
            let mut idxs = Vec::with_capacity(m);
            let mut signs = Vec::with_capacity(m);
            for e in start..start + m as isize {
                if e >= 0 {
                    coords.push(nodes[e as usize]);
                    idxs.push(e as usize);
                    signs.push(1.0);
                } else {
                    let mirror = if node_at_zero { (-e) as usize } else { (-1 - e) as usize };
                    coords.push(-nodes[mirror]);
                    idxs.push(mirror);
                    signs.push(sign);
                }
            }
            let c = fornberg(nodes[i], &coords, order);
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(m);
            for k in 0..m {
                let w = signs[k] * c[order][k];
                match row.iter_mut().find(|(j, _)| *j == idxs[k]) {
                    Some(entry) => entry.1 += w,
                    None => row.push((idxs[k], w)),
                }
            }
            row
        })
        .collect();
    DiffOp { rows }
}

fn build_panels(nodes: &[f64], x_min: f64, stencil_order: usize) -> Vec<Panel> {
    let count = nodes.len();
    let m = stencil_order + 2;
    let mut panels = Vec::with_capacity(count);
    let push = |a: f64, b: f64, left_idx: usize, right: usize, panels: &mut Vec<Panel>| {
        let start = left_idx.saturating_sub(m / 2 - 1).min(count - m);
        let window = &nodes[start..start + m];
        let mut w = vec![0.0; m];
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        for (gx, gw) in GL_X.iter().zip(GL_W.iter()) {
            let xq = mid + half * gx;
            // Lagrange basis values at xq.
            for k in 0..m {
                let mut l = 1.0;
                for j in 0..m {
                    if j != k {
                        l *= (xq - window[j]) / (window[k] - window[j]);
                    }
                }
                w[k] += gw * half * l;
            }
        }
        panels.push(Panel { right, start, w });
    };
    if nodes[0] > x_min {
        push(x_min, nodes[0], 0, 0, &mut panels);
    }
    for k in 0..count - 1 {
        push(nodes[k], nodes[k + 1], k, k + 1, &mut panels);
    }
    panels
}
