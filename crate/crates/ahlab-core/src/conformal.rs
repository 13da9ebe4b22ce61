//! Radial Yamabe solve to constant-scalar-curvature representatives and the
//! constructive conformal positive-mass certificate.

use crate::entropy::{ladder_indices, mass_flux_series, StaticBackground};
use crate::fit::{aitken_extrapolate, linreg, monotone_diverging};
use crate::geometry::{
    aux_ricci, curvature, hyperbolic_metric, scal_diff, AuxTriple, RadialMetric,
};
use crate::grid::Parity;
use crate::linalg::assemble_operator;
use crate::{AhError, Result};
use serde::Serialize;

/// Conformal positive-mass certificate: the weighted mass of
/// h = (φ_c^{4/(n-2)} - 1)g evaluated once as a boundary flux and once as the
/// manifestly sign-controlled bulk integral
/// ∫ W(φ_c^{(n+2)/(n-2)}(scal_g̃ + n(n-1)) + n(n-1)F(φ_c)) dV_g.
#[derive(Debug, Clone, Serialize)]
pub struct PmtCertificate {
    pub mass_boundary: f64,
    pub mass_bulk: f64,
    pub w: Vec<f64>,
    pub p: u32,
    pub discrepancy: f64,
    /// min W: below -1e-9 flags a maximum-principle violation.
    pub w_min: f64,
    pub phi_c_min: f64,
    /// min of scal_g̃ + n(n-1) over the grid.
    pub scal_shift_min: f64,
    /// Hypotheses of the positive-mass statement hold numerically.
    pub positivity_ok: bool,
    /// Fitted tail decay rate of φ_c - 1.
    pub decay_rate: f64,
}

/// Radial Yamabe solve output: g_csc = e^{2ω}g has scal = -n(n-1).
#[derive(Debug, Clone)]
pub struct YamabeResult {
    pub omega: Vec<f64>,
    pub g_csc: RadialMetric,
}

/// Smallest admissible integer exponent for the certificate's F-function:
/// strictly above max{4/(n-2), (n+2)/(2(n-2))}.
pub fn pmt_exponent(n: usize) -> Result<u32> {
    if n < 3 {
        return Err(AhError::Parameter(format!("PMT exponent needs n >= 3, got {n}")));
    }
    let nm2 = (n - 2) as f64;
    let threshold = (4.0 / nm2).max((n as f64 + 2.0) / (2.0 * nm2));
    Ok(threshold.ceil() as u32 + 1)
}

/// F(x) = x - x^{(n+2)/(n-2)} + (4/(n-2))(x-1)x^p; F(1) = 0 and F'' > 0 on
/// [1, ∞) for admissible p, so F >= 0 there.
pub fn f_function(x: f64, n: usize, p: f64) -> Result<f64> {
    if n < 3 {
        return Err(AhError::Parameter(format!("F-function needs n >= 3, got {n}")));
    }
    if x <= 0.0 {
        return Err(AhError::Domain(format!("F-function needs x > 0, got {x}")));
    }
    let nm2 = (n - 2) as f64;
    let threshold = (4.0 / nm2).max((n as f64 + 2.0) / (2.0 * nm2));
    if p <= threshold {
        return Err(AhError::Parameter(format!(
            "F-function exponent p = {p} must exceed max{{4/(n-2), (n+2)/(2(n-2))}} = {threshold}"
        )));
    }
    Ok(x - x.powf((n as f64 + 2.0) / nm2) + 4.0 / nm2 * (x - 1.0) * x.powf(p))
}

/// scal + n(n-1) of a radial metric, as the stable curvature difference
/// against the exact hyperbolic metric on the same grid.
pub fn scal_shift(g: &RadialMetric) -> Vec<f64> {
    let gh = hyperbolic_metric(g.grid.clone());
    let m = g.len();
    let tx: Vec<f64> = (0..m).map(|i| (2.0 * (g.b[i] - gh.b[i])).exp_m1()).collect();
    let ts: Vec<f64> = (0..m).map(|i| (2.0 * (g.a[i] - gh.a[i])).exp_m1()).collect();
    scal_diff(&gh, &tx, &ts)
}

/// Solves the transformed Yamabe equation
/// (Δ_g + n)ω = (n-2)/2·|dω|² - (scal_g + n(n-1))/(2(n-1)) - (n/2)(e^{2ω}-1-2ω)
/// by a damped Newton iteration with ω pinned to 0 at x_max.
pub fn yamabe_radial(t: &AuxTriple) -> Result<YamabeResult> {
    let g = &t.metric;
    let grid = &g.grid;
    let m = g.len();
    let n = g.n() as f64;
    let nm1 = n - 1.0;
    let last = m - 1;
    let sc = scal_shift(g);
    let tail_sup = grid
        .nodes
        .iter()
        .zip(&sc)
        .filter(|(&x, _)| x >= grid.x_max() - 1.0)
        .fold(0.0f64, |a, (_, &v)| a.max(v.abs()));
    if tail_sup > 1e-2 {
        return Err(AhError::Asymptotics(format!(
            "scal + n(n-1) does not decay on the tail (sup {tail_sup:.3e})"
        )));
    }

    let d = g.derivs();
    let d1 = grid.parity_op(1, Parity::Even).unwrap_or_else(|| grid.standard_op(1));
    let d2 = grid.parity_op(2, Parity::Even).unwrap_or_else(|| grid.standard_op(2));
    let c2: Vec<f64> = d.e2bi.iter().map(|&v| -v).collect();
    let c1: Vec<f64> = (0..m).map(|i| -d.e2bi[i] * (nm1 * d.a1[i] - d.b1[i])).collect();
    let max_abs = |v: &[f64]| v[..last].iter().fold(0.0f64, |a, &x| a.max(x.abs()));

    let residual = |w: &[f64]| -> Vec<f64> {
        let w1 = grid.diff_parity(w, 1, Parity::Even).expect("order 1");
        let w2 = grid.diff_parity(w, 2, Parity::Even).expect("order 2");
        (0..m)
            .map(|i| {
                let lap = -d.e2bi[i] * (w2[i] + (nm1 * d.a1[i] - d.b1[i]) * w1[i]);
                lap + n * w[i] - 0.5 * (n - 2.0) * d.e2bi[i] * w1[i] * w1[i]
                    + sc[i] / (2.0 * nm1)
                    + 0.5 * n * ((2.0 * w[i]).exp_m1() - 2.0 * w[i])
            })
            .collect()
    };

    let mut w = vec![0.0; m];
    let mut r = residual(&w);
    let mut rmax = max_abs(&r);
    let mut trace = vec![rmax];
    for _ in 0..40 {
        if rmax < 1e-11 {
            break;
        }
        let w1 = grid.diff_parity(&w, 1, Parity::Even)?;
        let jc1: Vec<f64> = (0..m).map(|i| c1[i] - (n - 2.0) * d.e2bi[i] * w1[i]).collect();
        let diag: Vec<f64> = (0..m).map(|i| n + n * (2.0 * w[i]).exp_m1()).collect();
        let mut jac = assemble_operator(m, &diag, &[(&jc1, d1), (&c2, d2)]);
        jac.clear_row(last);
        jac.set(last, last, 1.0);
        let mut rhs: Vec<f64> = r.iter().map(|&x| -x).collect();
        rhs[last] = 0.0;
        let delta = jac.solve(&rhs)?;
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha >= 1.0 / 256.0 {
            let trial: Vec<f64> = (0..m).map(|i| w[i] + alpha * delta[i]).collect();
            let rt = residual(&trial);
            let rtmax = max_abs(&rt);
            if rtmax < rmax {
                w = trial;
                r = rt;
                rmax = rtmax;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        trace.push(rmax);
        if !accepted {
            break;
        }
    }
    if rmax >= 1e-9 {
        return Err(AhError::Solver { context: "Yamabe Newton stalled".into(), trace });
    }
    let mut g_csc = g.clone();
    for i in 0..m {
        g_csc.b[i] += w[i];
        g_csc.a[i] += w[i];
    }
    Ok(YamabeResult { omega: w, g_csc })
}

/// Constructive conformal positive-mass certificate at a CSC pair (g, φ):
/// solves (Δ_g + nφ_c^p)(W - V) = n(1 - φ_c^p)V for the substitute potential
/// W, evaluates the mass of h = (φ_c^{4/(n-2)} - 1)g as a boundary flux, and
/// compares with the bulk integral whose integrand is nonnegative under the
/// hypotheses scal_g̃ >= -n(n-1), φ_c >= 1, W >= 0.
pub fn pmt_certificate(pair: &AuxTriple, phi_c: &[f64]) -> Result<PmtCertificate> {
    let g = &pair.metric;
    let grid = &g.grid;
    let m = g.len();
    let n = g.n() as f64;
    let nm1 = n - 1.0;
    let nm2 = n - 2.0;
    let last = m - 1;

    let scal = curvature(g).scal;
    let csc_res =
        scal.iter().map(|&s| (s + n * nm1).abs()).fold(0.0f64, f64::max);
    if csc_res >= 1e-6 {
        return Err(AhError::Parameter(format!(
            "certificate base metric is not CSC: |scal + n(n-1)| = {csc_res:.3e}"
        )));
    }
    let aux = aux_ricci(pair);
    let pot_res =
        aux.t_tau.iter().map(|&v| (2.0 * v - n).abs()).fold(0.0f64, f64::max);
    if pot_res >= 1e-6 {
        return Err(AhError::Parameter(format!(
            "certificate potential is not exact: |Δφ + |dφ|² - n| = {pot_res:.3e}"
        )));
    }
    if phi_c.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(AhError::Domain("conformal factor must be positive".into()));
    }

    // Tail decay-rate fit of φ_c - 1: must exceed n/2 for the mass terms to
    // be integrable. Rates at or above n (the critical mass-aspect rate) stay
    // in every admissible decay class β < n, so only a sanity cap applies.
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &x) in grid.nodes.iter().enumerate() {
        if x >= grid.x_max() - 6.0 && x <= grid.x_max() - 1.0 && (phi_c[i] - 1.0).abs() > 1e-300 {
            xs.push(x);
            ys.push((phi_c[i] - 1.0).abs().ln());
        }
    }
    let is_one = xs.len() < 8;
    let decay_rate = if is_one {
        n
    } else {
        let (slope, _, _) = linreg(&xs, &ys);
        -slope
    };
    if !is_one && (decay_rate <= 0.5 * n || decay_rate >= n + 0.5) {
        return Err(AhError::Asymptotics(format!(
            "conformal factor decay rate {decay_rate:.3} outside (n/2, n + 1/2)"
        )));
    }

    let p = pmt_exponent(g.n())?;
    let pf = p as f64;

    // Substitute potential: (Δ_g + nφ_c^p)(W - V) = n(1 - φ_c^p)V.
    let v: Vec<f64> = pair.phi.iter().map(|&x| (-x).exp()).collect();
    let d = g.derivs();
    let d1 = grid.parity_op(1, Parity::Even).unwrap_or_else(|| grid.standard_op(1));
    let d2 = grid.parity_op(2, Parity::Even).unwrap_or_else(|| grid.standard_op(2));
    let c2: Vec<f64> = d.e2bi.iter().map(|&x| -x).collect();
    let c1: Vec<f64> = (0..m).map(|i| -d.e2bi[i] * (nm1 * d.a1[i] - d.b1[i])).collect();
    let diag: Vec<f64> = phi_c.iter().map(|&x| n * x.powf(pf)).collect();
    let mut op = assemble_operator(m, &diag, &[(&c1, d1), (&c2, d2)]);
    op.clear_row(last);
    op.set(last, last, 1.0);
    let mut rhs: Vec<f64> =
        (0..m).map(|i| n * (1.0 - phi_c[i].powf(pf)) * v[i]).collect();
    rhs[last] = 0.0;
    let w_minus_v = op.solve(&rhs)?;
    let w: Vec<f64> = (0..m).map(|i| v[i] + w_minus_v[i]).collect();
    let w_min = w.iter().cloned().fold(f64::INFINITY, f64::min);

    // Boundary mass of h = (φ_c^{4/(n-2)} - 1)g.
    let eta: Vec<f64> = phi_c.iter().map(|&x| (4.0 / nm2 * x.ln()).exp_m1()).collect();
    let bg = StaticBackground { triple: pair.clone(), v: v.clone() };
    let flux = mass_flux_series(&bg, &eta, &eta, &pair.phi);
    let idx = ladder_indices(grid);
    let flux_ladder: Vec<f64> = idx.iter().map(|&i| flux[i]).collect();
    if monotone_diverging(&flux_ladder) {
        return Err(AhError::Divergence(format!(
            "certificate mass flux ladder drifts monotonically: {flux_ladder:?}"
        )));
    }
    let (mass_boundary, _) = aitken_extrapolate(&flux_ladder);

    // Bulk mass; scal_g̃ + n(n-1) enters through the stable conformal
    // curvature difference against g itself (CSC to 1e-6 by the check above).
    let sdiff = scal_diff(g, &eta, &eta);
    let scal_shift_min = sdiff.iter().cloned().fold(f64::INFINITY, f64::min);
    let vol = g.volume_weight();
    let integrand: Vec<f64> = (0..m)
        .map(|i| {
            let fval = phi_c[i] - phi_c[i].powf((n + 2.0) / nm2)
                + 4.0 / nm2 * (phi_c[i] - 1.0) * phi_c[i].powf(pf);
            w[i] * (phi_c[i].powf((n + 2.0) / nm2) * sdiff[i] + n * nm1 * fval)
                * vol[i]
                * grid.sphere_area
        })
        .collect();
    let bulk_prefix = grid.integrate_prefix(&integrand);
    let bulk_ladder: Vec<f64> = idx.iter().map(|&i| bulk_prefix[i]).collect();
    if monotone_diverging(&bulk_ladder) {
        return Err(AhError::Divergence(format!(
            "certificate bulk ladder drifts monotonically: {bulk_ladder:?}"
        )));
    }
    let (mass_bulk, _) = aitken_extrapolate(&bulk_ladder);

    let phi_c_min = phi_c.iter().cloned().fold(f64::INFINITY, f64::min);
    let positivity_ok =
        scal_shift_min >= -1e-9 && phi_c_min >= 1.0 - 1e-9 && w_min >= -1e-9;

    Ok(PmtCertificate {
        mass_boundary,
        mass_bulk,
        w,
        p,
        discrepancy: (mass_boundary - mass_bulk).abs(),
        w_min,
        phi_c_min,
        scal_shift_min,
        positivity_ok,
        decay_rate,
    })
}
