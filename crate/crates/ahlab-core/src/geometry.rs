//! Radial warped-product metrics g = e^{2B}dx² + e^{2A}·(round sphere),
//! their curvature, and the auxiliary-metric operators (drift Laplacian,
//! divergence, Ricci lift) in the geometer's sign convention
//! Δ = -(trace of Hessian), δ = -div.

use crate::grid::{Parity, RadialGrid};
use crate::Result;
use std::sync::Arc;

/// Warped-product metric; B is the log radial lapse, A the log sphere warp.
#[derive(Debug, Clone)]
pub struct RadialMetric {
    pub grid: Arc<RadialGrid>,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

/// Metric plus potential φ (asymptotic to -x + const); the auxiliary lift
/// is 𝔤 = e^{-2φ}dτ² + g.
#[derive(Debug, Clone)]
pub struct AuxTriple {
    pub metric: RadialMetric,
    pub phi: Vec<f64>,
}

/// Diagonal radial symmetric 2-tensor on the auxiliary space, stored in the
/// orthonormal coframe {e^B dx, e^A·(sphere), e^{-φ}dτ}: t_xx = 𝔥(e₀,e₀),
/// t_sph multiplies each sphere direction, and t_tau stores ψ where the
/// ττ-part is -2ψ e^{-2φ}dτ².
#[derive(Debug, Clone)]
pub struct RadialSymTensor {
    pub t_xx: Vec<f64>,
    pub t_sph: Vec<f64>,
    pub t_tau: Vec<f64>,
}

/// Curvature of a RadialMetric: ric_xx is the coefficient of dx², ric_sph
/// the coefficient of e^{2A}·(unit sphere metric), scal the scalar curvature.
#[derive(Debug, Clone)]
pub struct Curvature {
    pub ric_xx: Vec<f64>,
    pub ric_sph: Vec<f64>,
    pub scal: Vec<f64>,
}

/// Residual of the static equations for a triple.
#[derive(Debug, Clone)]
pub struct StaticResidual {
    pub tensor_res: RadialSymTensor,
    pub scalar_res: Vec<f64>,
    pub max_norm: f64,
}

/// First and second derivative data of a metric, computed once per call
/// through the cancellation-free W = e^A representation (W is odd, B even):
/// a1 = A' = W'/W, p = A'' + A'² - A'B' = W''/W - (W'/W)B',
/// q = e^{-2A} - e^{-2B}A'² = (1 - e^{-2B}W'²)/W², e2bi = e^{-2B}.
#[derive(Debug, Clone)]
pub struct MetricDerivs {
    pub a1: Vec<f64>,
    pub b1: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub e2bi: Vec<f64>,
}

impl RadialMetric {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn n(&self) -> usize {
        self.grid.n
    }

    pub fn derivs(&self) -> MetricDerivs {
        let g = &self.grid;
        let w: Vec<f64> = self.a.iter().map(|&v| v.exp()).collect();
        let w1 = g.diff_parity(&w, 1, Parity::Odd).expect("order 1");
        let w2 = g.diff_parity(&w, 2, Parity::Odd).expect("order 2");
        let b1 = g.diff_parity(&self.b, 1, Parity::Even).expect("order 1");
        let e2bi: Vec<f64> = self.b.iter().map(|&v| (-2.0 * v).exp()).collect();
        let m = self.len();
        let mut a1 = vec![0.0; m];
        let mut p = vec![0.0; m];
        let mut q = vec![0.0; m];
        for i in 0..m {
            a1[i] = w1[i] / w[i];
            p[i] = w2[i] / w[i] - a1[i] * b1[i];
            q[i] = (1.0 - e2bi[i] * w1[i] * w1[i]) / (w[i] * w[i]);
        }
        MetricDerivs { a1, b1, p, q, e2bi }
    }

    /// Coordinate volume density e^{B + (n-1)A}; multiply by sphere_area
    /// and the quadrature weights for volume integrals.
    pub fn volume_weight(&self) -> Vec<f64> {
        let nm1 = (self.n() - 1) as f64;
        self.b
            .iter()
            .zip(&self.a)
            .map(|(&b, &a)| (b + nm1 * a).exp())
            .collect()
    }

    /// Checks warp positivity and the AH tail normalisation
    /// (A - x bounded, A'e^{-B} -> 1) within tolerance 1e-2.
    pub fn check_ah(&self) -> Result<()> {
        if self.b.iter().chain(&self.a).any(|v| !v.is_finite()) {
            return Err(crate::AhError::Domain("non-finite warp field".into()));
        }
        let d = self.derivs();
        let m = self.len();
        let tail = (m as f64 * 0.9) as usize;
        for i in tail..m {
            let slope = d.a1[i] * (-self.b[i]).exp();
            if (slope - 1.0).abs() > 1e-2 {
                return Err(crate::AhError::Asymptotics(format!(
                    "A'e^{{-B}} = {slope} at x = {} violates the AH tail normalisation",
                    self.grid.nodes[i]
                )));
            }
        }
        Ok(())
    }
}

impl AuxTriple {
    pub fn len(&self) -> usize {
        self.metric.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metric.is_empty()
    }

    pub fn n(&self) -> usize {
        self.metric.n()
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.metric.grid
    }

    /// Weighted volume density e^{B + (n-1)A - φ}.
    pub fn weighted_volume(&self) -> Vec<f64> {
        self.metric
            .volume_weight()
            .iter()
            .zip(&self.phi)
            .map(|(&v, &p)| v * (-p).exp())
            .collect()
    }

    /// Multiplicative perturbation family along a tensor direction 𝔥:
    /// e^{2B} -> (1+sT_x)e^{2B}, e^{2A} -> (1+sT_s)e^{2A},
    /// e^{-2φ} -> (1-2sψ)e^{-2φ}, so that d/ds at s=0 gives exactly 𝔥.
    pub fn perturbed(&self, h: &RadialSymTensor, s: f64) -> AuxTriple {
        let m = self.len();
        let mut out = self.clone();
        for i in 0..m {
            out.metric.b[i] += 0.5 * (1.0 + s * h.t_xx[i]).ln();
            out.metric.a[i] += 0.5 * (1.0 + s * h.t_sph[i]).ln();
            out.phi[i] -= 0.5 * (1.0 - 2.0 * s * h.t_tau[i]).ln();
        }
        out
    }
}

impl RadialSymTensor {
    pub fn zeros(m: usize) -> Self {
        RadialSymTensor { t_xx: vec![0.0; m], t_sph: vec![0.0; m], t_tau: vec![0.0; m] }
    }

    /// The auxiliary metric 𝔤 itself in this storage: (1, 1, ψ = -1/2).
    pub fn metric_tensor(m: usize) -> Self {
        RadialSymTensor { t_xx: vec![1.0; m], t_sph: vec![1.0; m], t_tau: vec![-0.5; m] }
    }

    pub fn len(&self) -> usize {
        self.t_xx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_xx.is_empty()
    }

    /// Pointwise pair norm |𝔥|² = t_xx² + (n-1)t_sph² + 4ψ².
    pub fn pair_norm_sq(&self, n: usize) -> Vec<f64> {
        let nm1 = (n - 1) as f64;
        (0..self.len())
            .map(|i| {
                self.t_xx[i] * self.t_xx[i]
                    + nm1 * self.t_sph[i] * self.t_sph[i]
                    + 4.0 * self.t_tau[i] * self.t_tau[i]
            })
            .collect()
    }

    /// Trace with respect to g (the n-dimensional part).
    pub fn tr_g(&self, n: usize) -> Vec<f64> {
        let nm1 = (n - 1) as f64;
        (0..self.len()).map(|i| self.t_xx[i] + nm1 * self.t_sph[i]).collect()
    }

    /// Trace with respect to 𝔤: tr_𝔤𝔥 = tr_g h - 2ψ.
    pub fn tr_aux(&self, n: usize) -> Vec<f64> {
        let nm1 = (n - 1) as f64;
        (0..self.len())
            .map(|i| self.t_xx[i] + nm1 * self.t_sph[i] - 2.0 * self.t_tau[i])
            .collect()
    }

    pub fn scaled(&self, c: f64) -> Self {
        RadialSymTensor {
            t_xx: self.t_xx.iter().map(|&v| c * v).collect(),
            t_sph: self.t_sph.iter().map(|&v| c * v).collect(),
            t_tau: self.t_tau.iter().map(|&v| c * v).collect(),
        }
    }

    /// Pointwise pairing ⟨𝔥, 𝔨⟩ = h_x k_x + (n-1)h_s k_s + 4ψ_h ψ_k.
    pub fn pair_with(&self, other: &RadialSymTensor, n: usize) -> Vec<f64> {
        let nm1 = (n - 1) as f64;
        (0..self.len())
            .map(|i| {
                self.t_xx[i] * other.t_xx[i]
                    + nm1 * self.t_sph[i] * other.t_sph[i]
                    + 4.0 * self.t_tau[i] * other.t_tau[i]
            })
            .collect()
    }
}

/// Exact multiplicative difference of a triple against a background triple:
/// tx = e^{2(B-B̂)} - 1, ts = e^{2(A-Â)} - 1, dphi = φ - φ̂.
///
/// Carrying these fields directly keeps tail perturbations representable far
/// below the roundoff floor of the absolute fields B, A, φ; the e^{nx}
/// weighted integrals amplify any absolute-field rounding jitter
/// catastrophically, so all curvature differences against a background go
/// through [`scal_diff`] / [`aux_ricci_diff`] rather than subtracting two
/// independently computed curvatures.
#[derive(Debug, Clone)]
pub struct DiffFields {
    pub tx: Vec<f64>,
    pub ts: Vec<f64>,
    pub dphi: Vec<f64>,
}

impl DiffFields {
    pub fn zeros(m: usize) -> Self {
        DiffFields { tx: vec![0.0; m], ts: vec![0.0; m], dphi: vec![0.0; m] }
    }

    pub fn len(&self) -> usize {
        self.tx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tx.is_empty()
    }

    /// Recovers difference fields from absolute triples. Accurate only down
    /// to the rounding floor of the absolute fields; prefer constructing the
    /// differences analytically when they are known in closed form.
    pub fn from_triples(bg: &AuxTriple, t: &AuxTriple) -> Self {
        let m = bg.len();
        let mut df = DiffFields::zeros(m);
        for i in 0..m {
            df.tx[i] = (2.0 * (t.metric.b[i] - bg.metric.b[i])).exp_m1();
            df.ts[i] = (2.0 * (t.metric.a[i] - bg.metric.a[i])).exp_m1();
            df.dphi[i] = t.phi[i] - bg.phi[i];
        }
        df
    }

    /// Materialises the absolute triple bg + self.
    pub fn apply(&self, bg: &AuxTriple) -> AuxTriple {
        let mut out = bg.clone();
        for i in 0..self.len() {
            out.metric.b[i] += 0.5 * self.tx[i].ln_1p();
            out.metric.a[i] += 0.5 * self.ts[i].ln_1p();
            out.phi[i] += self.dphi[i];
        }
        out
    }

    /// The multiplicative family direction s·𝔥 as difference fields:
    /// tx = sT_x, ts = sT_s, dphi = -ln(1-2sψ)/2.
    pub fn from_direction(h: &RadialSymTensor, s: f64) -> Self {
        let m = h.len();
        let mut df = DiffFields::zeros(m);
        for i in 0..m {
            df.tx[i] = s * h.t_xx[i];
            df.ts[i] = s * h.t_sph[i];
            df.dphi[i] = -0.5 * (-2.0 * s * h.t_tau[i]).ln_1p();
        }
        df
    }
}

/// Shared pieces of the difference-form curvature: with β = (B-B̂),
/// α = (A-Â), etx = e^{-2β}-1, the differences of
/// E = e^{-2B}(A''+A'²-A'B') and Q = (e^{-2A}-e^{-2B}A'²) are assembled from
/// products of background quantities with difference quantities, with no
/// catastrophic cancellation.
struct MetricDiffParts {
    etx: Vec<f64>,
    beta1: Vec<f64>,
    alpha1: Vec<f64>,
    df_warp: Vec<f64>,
    de: Vec<f64>,
    dq: Vec<f64>,
}

fn metric_diff_parts(
    ghat: &RadialMetric,
    d: &MetricDerivs,
    tx: &[f64],
    ts: &[f64],
) -> MetricDiffParts {
    let grid = &ghat.grid;
    let m = ghat.len();
    let tx1 = grid.diff_parity(tx, 1, Parity::Even).expect("order 1");
    let ts1 = grid.diff_parity(ts, 1, Parity::Even).expect("order 1");
    let ts2 = grid.diff_parity(ts, 2, Parity::Even).expect("order 2");
    let mut parts = MetricDiffParts {
        etx: vec![0.0; m],
        beta1: vec![0.0; m],
        alpha1: vec![0.0; m],
        df_warp: vec![0.0; m],
        de: vec![0.0; m],
        dq: vec![0.0; m],
    };
    for i in 0..m {
        let (txi, tsi) = (tx[i], ts[i]);
        let etx = -txi / (1.0 + txi);
        let b1d = 0.5 * tx1[i] / (1.0 + txi);
        let a1d = 0.5 * ts1[i] / (1.0 + tsi);
        let a2d = 0.5 * (ts2[i] / (1.0 + tsi) - ts1[i] * ts1[i] / ((1.0 + tsi) * (1.0 + tsi)));
        // ΔF for F = A'' + A'² - A'B'; the background value is d.p.
        let dfv = a2d + a1d * (2.0 * d.a1[i] + a1d) - a1d * d.b1[i] - (d.a1[i] + a1d) * b1d;
        parts.de[i] = d.e2bi[i] * (etx * (d.p[i] + dfv) + dfv);
        parts.dq[i] = -d.e2bi[i]
            * (d.a1[i] * d.a1[i] * (tsi - txi) / (1.0 + txi)
                + (1.0 + tsi) / (1.0 + txi) * a1d * (2.0 * d.a1[i] + a1d))
            / (1.0 + tsi)
            - d.q[i] * tsi / (1.0 + tsi);
        parts.etx[i] = etx;
        parts.beta1[i] = b1d;
        parts.alpha1[i] = a1d;
        parts.df_warp[i] = dfv;
    }
    parts
}

/// scal(g) - scal(ĝ) in cancellation-free difference form, where g is ĝ
/// perturbed by e^{2B} -> (1+tx)e^{2B̂}, e^{2A} -> (1+ts)e^{2Â}.
pub fn scal_diff(ghat: &RadialMetric, tx: &[f64], ts: &[f64]) -> Vec<f64> {
    let d = ghat.derivs();
    let parts = metric_diff_parts(ghat, &d, tx, ts);
    let nm1 = (ghat.n() - 1) as f64;
    let nm2 = (ghat.n() - 2) as f64;
    (0..ghat.len()).map(|i| -2.0 * nm1 * parts.de[i] + nm1 * nm2 * parts.dq[i]).collect()
}

/// aux_ricci(bg + df) - aux_ricci(bg) slotwise in difference form.
pub fn aux_ricci_diff(bg: &AuxTriple, df: &DiffFields) -> RadialSymTensor {
    let g = &bg.metric;
    let d = g.derivs();
    let grid = &g.grid;
    let parts = metric_diff_parts(g, &d, &df.tx, &df.ts);
    let p1 = grid.diff_parity(&bg.phi, 1, Parity::Even).expect("order 1");
    let p2 = grid.diff_parity(&bg.phi, 2, Parity::Even).expect("order 2");
    let dp1 = grid.diff_parity(&df.dphi, 1, Parity::Even).expect("order 1");
    let dp2 = grid.diff_parity(&df.dphi, 2, Parity::Even).expect("order 2");
    let nm1 = (g.n() - 1) as f64;
    let nm2 = (g.n() - 2) as f64;
    let m = g.len();
    let mut out = RadialSymTensor::zeros(m);
    for i in 0..m {
        let e2bi = d.e2bi[i];
        let (etx, b1d, a1d) = (parts.etx[i], parts.beta1[i], parts.alpha1[i]);
        // xx slot: e^{-2B}(-(n-1)F + φ'' - B'φ' - φ'²).
        let fhat = d.p[i];
        let dfv = parts.df_warp[i];
        let ghat_v = -nm1 * fhat + p2[i] - d.b1[i] * p1[i] - p1[i] * p1[i];
        let dg = -nm1 * dfv + dp2[i]
            - (b1d * p1[i] + d.b1[i] * dp1[i] + b1d * dp1[i])
            - dp1[i] * (2.0 * p1[i] + dp1[i]);
        out.t_xx[i] = e2bi * (etx * (ghat_v + dg) + dg);
        // sph slot: (n-2)Q - E + e^{-2B}A'φ'.
        let dap = a1d * p1[i] + d.a1[i] * dp1[i] + a1d * dp1[i];
        let ap_full = (d.a1[i] + a1d) * (p1[i] + dp1[i]);
        out.t_sph[i] = nm2 * parts.dq[i] - parts.de[i] + e2bi * (etx * ap_full + dap);
        // tau slot: ψ = (Δφ + |dφ|²)/2 with Δφ = -e^{-2B}(φ'' + ((n-1)A'-B')φ').
        let hhat = p2[i] + (nm1 * d.a1[i] - d.b1[i]) * p1[i];
        let dh = dp2[i]
            + (nm1 * d.a1[i] - d.b1[i]) * dp1[i]
            + (nm1 * a1d - b1d) * (p1[i] + dp1[i]);
        let dlap = -e2bi * (etx * (hhat + dh) + dh);
        let pf = p1[i] + dp1[i];
        let ddphi2 = e2bi * (etx * pf * pf + dp1[i] * (2.0 * p1[i] + dp1[i]));
        out.t_tau[i] = 0.5 * (dlap + ddphi2);
    }
    out
}

/// Hyperbolic space in the radial gauge: B = 0, A = ln sinh x.
pub fn hyperbolic_metric(grid: Arc<RadialGrid>) -> RadialMetric {
    let a = grid.nodes.iter().map(|&x| x.sinh().ln()).collect();
    let b = vec![0.0; grid.len()];
    RadialMetric { grid, b, a }
}

/// The static hyperbolic triple with potential φ = -ln(2 cosh x).
pub fn hyperbolic_triple(grid: Arc<RadialGrid>) -> AuxTriple {
    let phi = grid.nodes.iter().map(|&x| -(2.0 * x.cosh()).ln()).collect();
    AuxTriple { metric: hyperbolic_metric(grid), phi }
}

/// Ricci and scalar curvature of a radial warped product.
pub fn curvature(g: &RadialMetric) -> Curvature {
    let d = g.derivs();
    let nm1 = (g.n() - 1) as f64;
    let nm2 = (g.n() - 2) as f64;
    let m = g.len();
    let mut ric_xx = vec![0.0; m];
    let mut ric_sph = vec![0.0; m];
    let mut scal = vec![0.0; m];
    for i in 0..m {
        ric_xx[i] = -nm1 * d.p[i];
        ric_sph[i] = nm2 * d.q[i] - d.e2bi[i] * d.p[i];
        scal[i] = -2.0 * nm1 * d.e2bi[i] * d.p[i] + nm1 * nm2 * d.q[i];
    }
    Curvature { ric_xx, ric_sph, scal }
}

/// Geometer's Laplacian Δu = -e^{-2B}(u'' + ((n-1)A' - B')u'); u is
/// differentiated with even parity across the origin.
pub fn laplacian(g: &RadialMetric, u: &[f64]) -> Vec<f64> {
    let d = g.derivs();
    laplacian_with(g, &d, u)
}

/// Laplacian reusing precomputed metric derivatives.
pub fn laplacian_with(g: &RadialMetric, d: &MetricDerivs, u: &[f64]) -> Vec<f64> {
    let grid = &g.grid;
    let u1 = grid.diff_parity(u, 1, Parity::Even).expect("order 1");
    let u2 = grid.diff_parity(u, 2, Parity::Even).expect("order 2");
    let nm1 = (g.n() - 1) as f64;
    (0..g.len())
        .map(|i| -d.e2bi[i] * (u2[i] + (nm1 * d.a1[i] - d.b1[i]) * u1[i]))
        .collect()
}

/// Hessian of u in orthonormal components: t_xx = e^{-2B}(u'' - B'u'),
/// t_sph = e^{-2B}A'u', t_tau = 0.
pub fn hessian(g: &RadialMetric, u: &[f64]) -> RadialSymTensor {
    let d = g.derivs();
    let grid = &g.grid;
    let u1 = grid.diff_parity(u, 1, Parity::Even).expect("order 1");
    let u2 = grid.diff_parity(u, 2, Parity::Even).expect("order 2");
    let m = g.len();
    let mut t = RadialSymTensor::zeros(m);
    for i in 0..m {
        t.t_xx[i] = d.e2bi[i] * (u2[i] - d.b1[i] * u1[i]);
        t.t_sph[i] = d.e2bi[i] * d.a1[i] * u1[i];
    }
    t
}

/// Drift Laplacian Δ_φ u = Δu + ⟨dφ, du⟩ = Δu + e^{-2B}φ'u'.
pub fn drift_laplacian(t: &AuxTriple, u: &[f64]) -> Vec<f64> {
    let g = &t.metric;
    let d = g.derivs();
    let grid = &g.grid;
    let lap = laplacian_with(g, &d, u);
    let u1 = grid.diff_parity(u, 1, Parity::Even).expect("order 1");
    let p1 = grid.diff_parity(&t.phi, 1, Parity::Even).expect("order 1");
    (0..g.len()).map(|i| lap[i] + d.e2bi[i] * p1[i] * u1[i]).collect()
}

/// Radial dx-coefficient of δ_𝔤𝔥 = δ_g h + 𝔥(dφ, ·) reduced to symmetry:
/// -(T_x' + (n-1)A'(T_x - T_s)) + T_x φ' + 2ψ φ'.
pub fn aux_divergence(t: &AuxTriple, h: &RadialSymTensor) -> Vec<f64> {
    let g = &t.metric;
    let d = g.derivs();
    let grid = &g.grid;
    let tx1 = grid.diff_parity(&h.t_xx, 1, Parity::Even).expect("order 1");
    let p1 = grid.diff_parity(&t.phi, 1, Parity::Even).expect("order 1");
    let nm1 = (g.n() - 1) as f64;
    (0..g.len())
        .map(|i| {
            -(tx1[i] + nm1 * d.a1[i] * (h.t_xx[i] - h.t_sph[i]))
                + h.t_xx[i] * p1[i]
                + 2.0 * h.t_tau[i] * p1[i]
        })
        .collect()
}

/// Codifferential of a radial 1-form (given by its dx-coefficient) with
/// respect to the auxiliary metric:
/// δ_𝔤ω = -e^{-2B}(ω' + ((n-1)A' - B')ω) + e^{-2B}φ'ω.
pub fn aux_codiff_oneform(t: &AuxTriple, omega: &[f64]) -> Vec<f64> {
    let g = &t.metric;
    let d = g.derivs();
    let grid = &g.grid;
    let o1 = grid.diff_parity(omega, 1, Parity::Odd).expect("order 1");
    let p1 = grid.diff_parity(&t.phi, 1, Parity::Even).expect("order 1");
    let nm1 = (g.n() - 1) as f64;
    (0..g.len())
        .map(|i| {
            -d.e2bi[i] * (o1[i] + (nm1 * d.a1[i] - d.b1[i]) * omega[i])
                + d.e2bi[i] * p1[i] * omega[i]
        })
        .collect()
}

/// Ricci curvature of the auxiliary lift,
/// Ric_𝔤 = -(Δφ + |dφ|²)e^{-2φ}dτ² + Ric_g + ∇²φ - dφ⊗dφ,
/// stored with ψ = (Δφ + |dφ|²)/2 in the t_tau slot.
pub fn aux_ricci(t: &AuxTriple) -> RadialSymTensor {
    let g = &t.metric;
    let d = g.derivs();
    let grid = &g.grid;
    let p1 = grid.diff_parity(&t.phi, 1, Parity::Even).expect("order 1");
    let p2 = grid.diff_parity(&t.phi, 2, Parity::Even).expect("order 2");
    let nm1 = (g.n() - 1) as f64;
    let nm2 = (g.n() - 2) as f64;
    let m = g.len();
    let mut out = RadialSymTensor::zeros(m);
    for i in 0..m {
        let hess_xx = d.e2bi[i] * (p2[i] - d.b1[i] * p1[i]);
        let dphi2 = d.e2bi[i] * p1[i] * p1[i];
        let lap = -d.e2bi[i] * (p2[i] + (nm1 * d.a1[i] - d.b1[i]) * p1[i]);
        out.t_xx[i] = -nm1 * d.e2bi[i] * d.p[i] + hess_xx - dphi2;
        out.t_sph[i] = nm2 * d.q[i] - d.e2bi[i] * d.p[i] + d.e2bi[i] * d.a1[i] * p1[i];
        out.t_tau[i] = 0.5 * (lap + dphi2);
    }
    out
}

/// Residual of the static equations: tensor_res = ∇²φ - dφ⊗dφ + Ric + ng,
/// scalar_res = Δφ + |dφ|² - n, max_norm = sup of the pair norm with the
/// scalar slot entering as ψ = scalar_res/2.
pub fn static_residual(t: &AuxTriple) -> StaticResidual {
    let n = t.n() as f64;
    let ric_aux = aux_ricci(t);
    let m = t.len();
    let mut tensor_res = RadialSymTensor::zeros(m);
    let mut scalar_res = vec![0.0; m];
    let mut max_norm = 0.0f64;
    let nm1 = n - 1.0;
    for i in 0..m {
        // aux_ricci already carries Ric_g + ∇²φ - dφ⊗dφ in the M-slots.
        tensor_res.t_xx[i] = ric_aux.t_xx[i] + n;
        tensor_res.t_sph[i] = ric_aux.t_sph[i] + n;
        scalar_res[i] = 2.0 * ric_aux.t_tau[i] - n;
        let psi = 0.5 * scalar_res[i];
        tensor_res.t_tau[i] = psi;
        let norm = (tensor_res.t_xx[i] * tensor_res.t_xx[i]
            + nm1 * tensor_res.t_sph[i] * tensor_res.t_sph[i]
            + 4.0 * psi * psi)
            .sqrt();
        max_norm = max_norm.max(norm);
    }
    StaticResidual { tensor_res, scalar_res, max_norm }
}

/// Sup of the static-residual pair norm in difference form. At bg + df the
/// residual tensor equals aux_ricci(bg + df) - aux_ricci(bg) because the
/// background is static, so the difference kernels evaluate it without the
/// absolute-field rounding floor.
pub fn static_residual_diff(bg: &AuxTriple, df: &DiffFields) -> f64 {
    let ard = aux_ricci_diff(bg, df);
    let nm1 = (bg.n() - 1) as f64;
    let mut sup = 0.0f64;
    for i in 0..bg.len() {
        let norm_sq = ard.t_xx[i] * ard.t_xx[i]
            + nm1 * ard.t_sph[i] * ard.t_sph[i]
            + 4.0 * ard.t_tau[i] * ard.t_tau[i];
        sup = sup.max(norm_sq);
    }
    sup.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, Clustering};

    fn grid(n: usize, count: usize) -> Arc<RadialGrid> {
        Arc::new(make_grid(n, 0.0, 12.0, count, Clustering::Staggered).unwrap())
    }

    fn bump(x: f64, c: f64, w: f64) -> f64 {
        let t = (x - c) / w;
        if t.abs() < 1.0 {
            (-1.0 / (1.0 - t * t)).exp()
        } else {
            0.0
        }
    }

    #[test]
    fn hyperbolic_curvature_constants() {
        let g = hyperbolic_metric(grid(3, 2048));
        let c = curvature(&g);
        for i in 0..g.len() {
            assert!((c.scal[i] + 6.0).abs() < 1e-8, "scal at {i}: {}", c.scal[i]);
            assert!((c.ric_xx[i] + 2.0).abs() < 1e-8);
            assert!((c.ric_sph[i] + 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn euclidean_cone_is_flat() {
        let gr = grid(3, 1024);
        let a = gr.nodes.iter().map(|&x| x.ln()).collect();
        let g = RadialMetric { grid: gr, b: vec![0.0; 1024], a };
        let c = curvature(&g);
        for i in 0..g.len() {
            assert!(c.scal[i].abs() < 1e-8, "scal[{i}] = {}", c.scal[i]);
        }
    }

    #[test]
    fn laplacian_of_static_potential() {
        let g = hyperbolic_metric(grid(3, 1024));
        let v: Vec<f64> = g.grid.nodes.iter().map(|&x| 2.0 * x.cosh()).collect();
        let lv = laplacian(&g, &v);
        for i in 0..g.len() {
            assert!((lv[i] + 3.0 * v[i]).abs() < 1e-8 * v[i], "node {i}");
        }
        let c = vec![1.7; g.len()];
        for d in laplacian(&g, &c) {
            assert!(d.abs() < 1e-10);
        }
    }

    #[test]
    fn laplacian_exponential_closed_form() {
        let g = hyperbolic_metric(grid(3, 1024));
        let beta = 2.0;
        let u: Vec<f64> = g.grid.nodes.iter().map(|&x| (-beta * x).exp()).collect();
        let lu = laplacian(&g, &u);
        for (i, &x) in g.grid.nodes.iter().enumerate() {
            if x < 1.0 {
                continue; // e^{-βx} is not even; parity stencils only apply off-origin
            }
            let expect = (-beta * beta + 2.0 * x.tanh().recip() * beta) * (-beta * x).exp();
            assert!((lu[i] - expect).abs() < 1e-7, "x = {x}");
        }
    }

    #[test]
    fn hessian_examples() {
        let g = hyperbolic_metric(grid(3, 2048));
        let v: Vec<f64> = g.grid.nodes.iter().map(|&x| 2.0 * x.cosh()).collect();
        let h = hessian(&g, &v);
        // ∇²V = V(Ric + 3g) for the static potential.
        let c = curvature(&g);
        for i in 0..g.len() {
            assert!((h.t_xx[i] - v[i] * (c.ric_xx[i] + 3.0)).abs() < 1e-8 * v[i]);
            assert!(
                (h.t_sph[i] - v[i] * (c.ric_sph[i] + 3.0)).abs() < 1e-8 * v[i],
                "node {i}, x = {}",
                g.grid.nodes[i]
            );
        }
        let sq: Vec<f64> = g.grid.nodes.iter().map(|&x| x * x).collect();
        let hs = hessian(&g, &sq);
        for i in 0..g.len() {
            assert!((hs.t_xx[i] - 2.0).abs() < 1e-7);
        }
        let z = hessian(&g, &vec![4.0; g.len()]);
        for i in 0..g.len() {
            assert!(z.t_xx[i].abs() < 1e-9 && z.t_sph[i].abs() < 1e-9);
        }
    }

    #[test]
    fn drift_laplacian_of_phi_is_n() {
        let t = hyperbolic_triple(grid(3, 1024));
        let dl = drift_laplacian(&t, &t.phi);
        for (i, &v) in dl.iter().enumerate() {
            assert!((v - 3.0).abs() < 1e-7, "node {i}: {v}");
        }
        let z = drift_laplacian(&t, &vec![0.3; t.len()]);
        for v in z {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn aux_divergence_of_metric_vanishes() {
        let t = hyperbolic_triple(grid(3, 1024));
        let m = RadialSymTensor::metric_tensor(t.len());
        for v in aux_divergence(&t, &m) {
            assert!(v.abs() < 1e-9);
        }
        for v in aux_divergence(&t, &RadialSymTensor::zeros(t.len())) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn codiff_chain_identity() {
        // δ_𝔤 δ_𝔤 (χ𝔤) = -Δ_φ χ for compactly supported χ.
        let t = hyperbolic_triple(grid(3, 2048));
        // Even extension keeps the parity stencils near the origin honest.
        let chi: Vec<f64> = t
            .grid()
            .nodes
            .iter()
            .map(|&x| (-((x - 6.0) / 1.5).powi(2)).exp() + (-((x + 6.0) / 1.5).powi(2)).exp())
            .collect();
        let m = t.len();
        let mut hg = RadialSymTensor::zeros(m);
        for i in 0..m {
            hg.t_xx[i] = chi[i];
            hg.t_sph[i] = chi[i];
            hg.t_tau[i] = -0.5 * chi[i];
        }
        let div = aux_divergence(&t, &hg);
        let dd = aux_codiff_oneform(&t, &div);
        let dl = drift_laplacian(&t, &chi);
        for i in 0..m {
            assert!((dd[i] + dl[i]).abs() < 1e-7, "node {i}: {} vs {}", dd[i], -dl[i]);
        }
    }

    #[test]
    fn aux_ricci_static_is_minus_n_metric() {
        let t = hyperbolic_triple(grid(3, 1024));
        let r = aux_ricci(&t);
        for i in 0..t.len() {
            assert!((r.t_xx[i] + 3.0).abs() < 1e-7);
            assert!((r.t_sph[i] + 3.0).abs() < 1e-7);
            assert!((r.t_tau[i] - 1.5).abs() < 1e-7);
        }
    }

    #[test]
    fn aux_ricci_tau_slot_closed_form() {
        let gr = grid(3, 1024);
        let phi: Vec<f64> = gr.nodes.iter().map(|&x| -x).collect();
        let t = AuxTriple { metric: hyperbolic_metric(gr), phi };
        let r = aux_ricci(&t);
        for (i, &x) in t.grid().nodes.iter().enumerate() {
            if x < 1.0 {
                continue; // -x is not even across the origin
            }
            // ψ = (Δ(-x) + 1)/2 = ((n-1)coth x + 1)/2.
            let expect = 0.5 * (2.0 / x.tanh() + 1.0);
            assert!((r.t_tau[i] - expect).abs() < 1e-7, "x = {x}");
        }
    }

    #[test]
    fn difference_curvature_matches_absolute() {
        let t = hyperbolic_triple(grid(3, 1024));
        let m = t.len();
        let mut h = RadialSymTensor::zeros(m);
        for (i, &x) in t.grid().nodes.iter().enumerate() {
            h.t_xx[i] = 1e-2 * bump(x, 5.0, 3.0);
            h.t_sph[i] = 7e-3 * bump(x, 5.5, 3.2);
            h.t_tau[i] = 4e-3 * bump(x, 4.5, 2.8);
        }
        let df = DiffFields::from_direction(&h, 1.0);
        let tp = df.apply(&t);
        let sd = scal_diff(&t.metric, &df.tx, &df.ts);
        let s0 = curvature(&t.metric).scal;
        let s1 = curvature(&tp.metric).scal;
        for i in 0..m {
            assert!(
                (sd[i] - (s1[i] - s0[i])).abs() < 1e-7,
                "scal diff at {i}: {} vs {}",
                sd[i],
                s1[i] - s0[i]
            );
        }
        let rd = aux_ricci_diff(&t, &df);
        let r0 = aux_ricci(&t);
        let r1 = aux_ricci(&tp);
        for i in 0..m {
            assert!((rd.t_xx[i] - (r1.t_xx[i] - r0.t_xx[i])).abs() < 1e-7, "xx at {i}");
            assert!((rd.t_sph[i] - (r1.t_sph[i] - r0.t_sph[i])).abs() < 1e-7, "sph at {i}");
            assert!((rd.t_tau[i] - (r1.t_tau[i] - r0.t_tau[i])).abs() < 1e-7, "tau at {i}");
        }
    }

    #[test]
    fn difference_curvature_stable_below_roundoff() {
        // Amplitudes far below the rounding floor of the absolute fields
        // must still produce cleanly linear curvature differences.
        let t = hyperbolic_triple(grid(3, 1024));
        let m = t.len();
        let mut h = RadialSymTensor::zeros(m);
        for (i, &x) in t.grid().nodes.iter().enumerate() {
            let s = 1e-20 / (2.0 * x).cosh();
            h.t_xx[i] = s;
            h.t_sph[i] = s * (0.5 + 0.5 / (1.0 + x * x));
            h.t_tau[i] = 0.3 * s;
        }
        let r1 = aux_ricci_diff(&t, &DiffFields::from_direction(&h, 1.0));
        let r2 = aux_ricci_diff(&t, &DiffFields::from_direction(&h, 0.5));
        let scale: f64 =
            r1.t_xx.iter().chain(&r1.t_sph).chain(&r1.t_tau).fold(0.0, |a, &v| a.max(v.abs()));
        assert!(scale > 1e-22 && scale < 1e-18, "unexpected scale {scale}");
        for i in 0..m {
            assert!((r1.t_xx[i] - 2.0 * r2.t_xx[i]).abs() < 1e-9 * scale, "xx at {i}");
            assert!((r1.t_sph[i] - 2.0 * r2.t_sph[i]).abs() < 1e-9 * scale, "sph at {i}");
            assert!((r1.t_tau[i] - 2.0 * r2.t_tau[i]).abs() < 1e-9 * scale, "tau at {i}");
        }
    }

    #[test]
    fn aux_scalar_trace_identity() {
        // scal_𝔤 = scal_g - 2Δφ - 2|dφ|² pointwise for a perturbed triple.
        let gr = grid(4, 1024);
        let mut t = hyperbolic_triple(gr);
        let xs = t.grid().nodes.clone();
        for (i, &x) in xs.iter().enumerate() {
            t.metric.a[i] += 0.02 * bump(x, 4.0, 1.5);
            t.phi[i] += 0.03 * bump(x, 6.0, 2.0);
        }
        let r = aux_ricci(&t);
        let scal_aux = r.tr_aux(t.n());
        let c = curvature(&t.metric);
        let lap = laplacian(&t.metric, &t.phi);
        let p1 = t.grid().diff_parity(&t.phi, 1, Parity::Even).unwrap();
        for i in 0..t.len() {
            let dphi2 = p1[i] * p1[i];
            let expect = c.scal[i] - 2.0 * lap[i] - 2.0 * dphi2;
            assert!((scal_aux[i] - expect).abs() < 1e-8, "node {i}");
        }
    }

    #[test]
    fn static_residual_fixture_and_offstatic() {
        let t = hyperbolic_triple(grid(3, 2048));
        let r = static_residual(&t);
        assert!(r.max_norm < 1e-7, "static residual {}", r.max_norm);

        let gr = grid(3, 1024);
        let phi: Vec<f64> = gr.nodes.iter().map(|&x| -x).collect();
        let t2 = AuxTriple { metric: hyperbolic_metric(gr), phi };
        let r2 = static_residual(&t2);
        assert!(r2.max_norm > 1e-2);
    }

    #[test]
    fn laplacian_adjointness_sign_lock() {
        let g = hyperbolic_metric(grid(3, 2048));
        let u: Vec<f64> = g.grid.nodes.iter().map(|&x| bump(x, 5.0, 3.0)).collect();
        let v: Vec<f64> = g.grid.nodes.iter().map(|&x| bump(x, 6.0, 3.0)).collect();
        let lu = laplacian(&g, &u);
        let u1 = g.grid.diff_parity(&u, 1, Parity::Even).unwrap();
        let v1 = g.grid.diff_parity(&v, 1, Parity::Even).unwrap();
        let vol = g.volume_weight();
        let lhs_f: Vec<f64> = (0..g.len()).map(|i| lu[i] * v[i]).collect();
        let rhs_f: Vec<f64> = (0..g.len()).map(|i| u1[i] * v1[i]).collect();
        let lhs = g.grid.integrate(&lhs_f, &vol).unwrap();
        let rhs = g.grid.integrate(&rhs_f, &vol).unwrap();
        assert!((lhs - rhs).abs() < 1e-7 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn trace_and_pair_norm_rules() {
        let m = 8;
        let mut h = RadialSymTensor::zeros(m);
        for i in 0..m {
            h.t_xx[i] = i as f64;
            h.t_sph[i] = 1.0 - i as f64 * 0.5;
            h.t_tau[i] = 0.25 * i as f64;
        }
        let n = 4;
        let trg = h.tr_g(n);
        let tra = h.tr_aux(n);
        let nrm = h.pair_norm_sq(n);
        for i in 0..m {
            assert_eq!(tra[i], trg[i] - 2.0 * h.t_tau[i]);
            let expect = h.t_xx[i].powi(2) + 3.0 * h.t_sph[i].powi(2) + 4.0 * h.t_tau[i].powi(2);
            assert_eq!(nrm[i], expect);
        }
    }

    #[test]
    fn perturbation_family_derivative_is_h() {
        let t = hyperbolic_triple(grid(3, 512));
        let m = t.len();
        let mut h = RadialSymTensor::zeros(m);
        for (i, &x) in t.grid().nodes.iter().enumerate() {
            h.t_xx[i] = bump(x, 5.0, 2.0);
            h.t_sph[i] = 0.5 * bump(x, 4.0, 1.5);
            h.t_tau[i] = -0.25 * bump(x, 6.0, 2.0);
        }
        let s = 1e-6;
        let tp = t.perturbed(&h, s);
        let tm = t.perturbed(&h, -s);
        for i in 0..m {
            let db = (tp.metric.b[i] - tm.metric.b[i]) / (2.0 * s);
            let da = (tp.metric.a[i] - tm.metric.a[i]) / (2.0 * s);
            let dp = (tp.phi[i] - tm.phi[i]) / (2.0 * s);
            // d/ds e^{2B} = T_x e^{2B} => dB/ds = T_x/2, and dφ/ds = ψ.
            assert!((db - 0.5 * h.t_xx[i]).abs() < 1e-8);
            assert!((da - 0.5 * h.t_sph[i]).abs() < 1e-8);
            assert!((dp - h.t_tau[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn linearised_scal_consistency() {
        // scal of a perturbed hyperbolic metric matches scal(ĝ) plus the
        // derivative of scal along the family to quadratic order.
        let gr = grid(3, 1024);
        let t = hyperbolic_triple(gr);
        let m = t.len();
        let mut h = RadialSymTensor::zeros(m);
        for (i, &x) in t.grid().nodes.iter().enumerate() {
            h.t_sph[i] = bump(x, 5.0, 2.0);
        }
        let eps = 1e-2;
        let tp = t.perturbed(&h, eps);
        let scal_p = curvature(&tp.metric).scal;
        let s = 1e-5;
        let sa = curvature(&t.perturbed(&h, s).metric).scal;
        let sb = curvature(&t.perturbed(&h, -s).metric).scal;
        let scal0 = curvature(&t.metric).scal;
        for i in 0..m {
            let lin = (sa[i] - sb[i]) / (2.0 * s);
            let err = (scal_p[i] - scal0[i] - eps * lin).abs();
            assert!(err < 1e-2 * eps, "node {i}: {err}");
        }
    }

    #[test]
    fn ah_validation() {
        let g = hyperbolic_metric(grid(3, 512));
        assert!(g.check_ah().is_ok());
        let gr = grid(3, 512);
        let a = gr.nodes.iter().map(|&x| 0.5 * x).collect();
        let bad = RadialMetric { grid: gr, b: vec![0.0; 512], a };
        assert!(bad.check_ah().is_err());
    }
}
