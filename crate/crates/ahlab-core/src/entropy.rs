//! Weighted ADM mass, the renormalised expander entropy μ with its
//! minimiser, the entropy gradient, and the second-variation quadratic form.

use crate::fit::{aitken_extrapolate, linreg, monotone_diverging};
use crate::geometry::{
    aux_codiff_oneform, aux_divergence, aux_ricci, aux_ricci_diff, curvature, hessian, laplacian,
    scal_diff, static_residual, AuxTriple, DiffFields, RadialSymTensor,
};
use crate::grid::{Parity, RadialGrid};
use crate::linalg::assemble_operator;
use crate::potential::extract_g;
use crate::{AhError, Result};
use serde::Serialize;

/// Static background (ĝ, φ̂) with potential weight V = e^{-φ̂}.
#[derive(Debug, Clone)]
pub struct StaticBackground {
    pub triple: AuxTriple,
    pub v: Vec<f64>,
}

impl StaticBackground {
    pub fn new(triple: AuxTriple) -> Result<Self> {
        let r = static_residual(&triple);
        if r.max_norm >= 1e-7 {
            return Err(AhError::Parameter(format!(
                "background is not static: residual {:.3e}",
                r.max_norm
            )));
        }
        let n = triple.n() as f64;
        let scal = curvature(&triple.metric).scal;
        let worst = scal.iter().map(|&s| (s + n * (n - 1.0)).abs()).fold(0.0f64, f64::max);
        if worst >= 1e-6 {
            return Err(AhError::Parameter(format!(
                "background scalar curvature deviates from -n(n-1) by {worst:.3e}"
            )));
        }
        let v = triple.phi.iter().map(|&p| (-p).exp()).collect();
        Ok(StaticBackground { triple, v })
    }

    pub fn hyperbolic(grid: std::sync::Arc<RadialGrid>) -> Result<Self> {
        StaticBackground::new(crate::geometry::hyperbolic_triple(grid))
    }
}

/// Weighted-mass evaluation on a radius ladder.
#[derive(Debug, Clone, Serialize)]
pub struct MassReport {
    pub value: f64,
    pub extrapolated: f64,
    pub error_est: f64,
    pub ladder: Vec<(f64, f64)>,
}

/// Full entropy report at the solved minimiser.
#[derive(Debug, Clone, Serialize)]
pub struct EntropyReport {
    pub w: f64,
    pub mass: f64,
    pub boundary_term: f64,
    pub mu: f64,
    pub f: Vec<f64>,
    pub u: Vec<f64>,
    pub el_residual: f64,
    pub r_eval: f64,
    pub extrapolation_error: f64,
}

/// Solved entropy minimiser with max-principle diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct Minimiser {
    pub f: Vec<f64>,
    pub u: Vec<f64>,
    pub omega: Vec<f64>,
    pub el_residual: f64,
    pub window: (f64, f64),
    pub window_ok: bool,
    pub barrier: Option<Barrier>,
}

/// Supersolution barrier |u| <= lambda e^{-beta x} on x >= rho.
#[derive(Debug, Clone, Serialize)]
pub struct Barrier {
    pub lambda: f64,
    pub beta: f64,
    pub rho: f64,
    pub ok: bool,
}

/// Entropy gradient components in the L²_f pairing.
#[derive(Debug, Clone)]
pub struct GradMu {
    pub tensor_part: RadialSymTensor,
    pub scalar_part: Vec<f64>,
    pub f: Vec<f64>,
}

/// Ladders of the renormalised entropy evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct WReport {
    pub w_ladder: Vec<(f64, f64)>,
    pub mass_ladder: Vec<(f64, f64)>,
    pub b_ladder: Vec<(f64, f64)>,
    pub w_ah: f64,
    pub error_est: f64,
}

fn nearest_node(grid: &RadialGrid, x: f64) -> usize {
    match grid.nodes.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(i) => i,
        Err(i) => {
            if i == 0 {
                0
            } else if i >= grid.len() {
                grid.len() - 1
            } else if (grid.nodes[i] - x).abs() < (x - grid.nodes[i - 1]).abs() {
                i
            } else {
                i - 1
            }
        }
    }
}

/// Node indices of the renormalisation ladder {x_max - 4, …, x_max}.
pub fn ladder_indices(grid: &RadialGrid) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    let mut r = grid.x_max() - 4.0;
    while r <= grid.x_max() + 1e-9 {
        let i = nearest_node(grid, r);
        if out.last() != Some(&i) {
            out.push(i);
        }
        r += 0.5;
    }
    out
}

/// Weighted-mass boundary flux at every node for ĝ-orthonormal perturbation
/// components (tx, ts) and weight potential φ:
/// -(n-1)[T_s' - Â'(T_x - T_s) + T_s φ'] e^{-B̂-φ} ω_{n-1} e^{(n-1)Â}.
pub fn mass_flux_series(
    bg: &StaticBackground,
    tx: &[f64],
    ts: &[f64],
    phi: &[f64],
) -> Vec<f64> {
    let gh = &bg.triple.metric;
    let grid = &gh.grid;
    let n = gh.n() as f64;
    let nm1 = n - 1.0;
    let d = gh.derivs();
    let ts1 = grid.diff_parity(ts, 1, Parity::Even).expect("order 1");
    let p1 = grid.diff_parity(phi, 1, Parity::Even).expect("order 1");
    (0..gh.len())
        .map(|i| {
            -nm1 * (ts1[i] - d.a1[i] * (tx[i] - ts[i]) + ts[i] * p1[i])
                * (-gh.b[i] - phi[i]).exp()
                * grid.sphere_area
                * (nm1 * gh.a[i]).exp()
        })
        .collect()
}

/// Evaluates the weighted ADM mass of h = g - ĝ on the radius ladder and
/// extrapolates the renormalised limit.
pub fn weighted_mass(bg: &StaticBackground, t: &AuxTriple, r_eval: f64) -> Result<MassReport> {
    weighted_mass_diff(bg, &DiffFields::from_triples(&bg.triple, t), r_eval)
}

/// As weighted_mass, with exact difference fields (the stable entry point:
/// recovering them from absolute fields loses the tail to rounding).
pub fn weighted_mass_diff(
    bg: &StaticBackground,
    df: &DiffFields,
    r_eval: f64,
) -> Result<MassReport> {
    let gh = &bg.triple.metric;
    let phi: Vec<f64> =
        (0..gh.len()).map(|i| bg.triple.phi[i] + df.dphi[i]).collect();
    let series = mass_flux_series(bg, &df.tx, &df.ts, &phi);
    let idx = ladder_indices(&gh.grid);
    let ladder: Vec<(f64, f64)> = idx.iter().map(|&i| (gh.grid.nodes[i], series[i])).collect();
    let vals: Vec<f64> = ladder.iter().map(|&(_, v)| v).collect();
    if monotone_diverging(&vals) {
        return Err(AhError::Divergence(format!(
            "mass ladder drifts monotonically: {vals:?}"
        )));
    }
    let (extrapolated, error_est) = aitken_extrapolate(&vals);
    let value = series[nearest_node(&gh.grid, r_eval)];
    Ok(MassReport { value, extrapolated, error_est, ladder })
}

/// Linearised scalar curvature D_g scal(h) = Δ(tr h) + δδh - ⟨Ric, h⟩
/// for an n-dimensional radial perturbation (the ψ-slot is ignored).
pub fn linearized_scal(g: &crate::geometry::RadialMetric, h: &RadialSymTensor) -> Vec<f64> {
    let grid = &g.grid;
    let m = g.len();
    let n = g.n() as f64;
    let nm1 = n - 1.0;
    let d = g.derivs();
    let tr: Vec<f64> = (0..m).map(|i| h.t_xx[i] + nm1 * h.t_sph[i]).collect();
    let lap_tr = laplacian(g, &tr);
    let tx1 = grid.diff_parity(&h.t_xx, 1, Parity::Even).expect("order 1");
    let div: Vec<f64> = (0..m)
        .map(|i| -(tx1[i] + nm1 * d.a1[i] * (h.t_xx[i] - h.t_sph[i])))
        .collect();
    let div1 = grid.diff_parity(&div, 1, Parity::Odd).expect("order 1");
    let ric = curvature(g);
    (0..m)
        .map(|i| {
            let dd = -d.e2bi[i] * (div1[i] + (nm1 * d.a1[i] - d.b1[i]) * div[i]);
            let pair = d.e2bi[i] * ric.ric_xx[i] * h.t_xx[i] + nm1 * ric.ric_sph[i] * h.t_sph[i];
            lap_tr[i] + dd - pair
        })
        .collect()
}

/// R(g,φ) = scal + n(n-1) - 2(Δφ + |dφ|² - n), the EL source term.
///
/// Evaluated as the difference of scal - 2(Δφ + |dφ|²) against the exact
/// hyperbolic triple on the same grid, whose continuum value is the negated
/// constant: this cancels the non-decaying part of the stencil truncation
/// error, which the e^{nx} volume growth would otherwise amplify.
pub fn el_source(t: &AuxTriple) -> Vec<f64> {
    let hyp = crate::geometry::hyperbolic_triple(t.metric.grid.clone());
    el_source_diff(&hyp, &DiffFields::from_triples(&hyp, t))
}

/// EL source from exact difference fields against a static background:
/// R(g,φ) = [scal - 2(Δφ + |dφ|²)](bg + df) - [same](bg), assembled with the
/// cancellation-free difference kernels so the truncation and rounding error
/// decays with the perturbation.
pub fn el_source_diff(bg: &AuxTriple, df: &DiffFields) -> Vec<f64> {
    let sd = scal_diff(&bg.metric, &df.tx, &df.ts);
    let rd = aux_ricci_diff(bg, df);
    (0..bg.len()).map(|i| sd[i] - 4.0 * rd.t_tau[i]).collect()
}

/// Solves the Euler–Lagrange minimiser of the entropy: damped Newton in the
/// substitution ω = e^{-u/2} - 1 followed by a Newton polish on u = f - φ,
/// which drives the discrete EL residual to machine precision.
pub fn solve_minimiser(t: &AuxTriple) -> Result<Minimiser> {
    solve_minimiser_from(t, None)
}

/// As solve_minimiser, optionally warm-started from a previous u.
pub fn solve_minimiser_from(t: &AuxTriple, u_init: Option<&[f64]>) -> Result<Minimiser> {
    minimiser_with_source(t, el_source(t), u_init)
}

/// Minimiser solve from exact difference fields against a static background.
pub fn solve_minimiser_diff(
    bg: &AuxTriple,
    df: &DiffFields,
    u_init: Option<&[f64]>,
) -> Result<Minimiser> {
    minimiser_with_source(&df.apply(bg), el_source_diff(bg, df), u_init)
}

fn minimiser_with_source(
    t: &AuxTriple,
    r_field: Vec<f64>,
    u_init: Option<&[f64]>,
) -> Result<Minimiser> {
    let g = &t.metric;
    let grid = &g.grid;
    let m = g.len();
    let n = g.n() as f64;
    let nm1 = n - 1.0;
    let last = m - 1;
    let d = g.derivs();
    let p1 = grid.diff_parity(&t.phi, 1, Parity::Even)?;
    let d1 = grid.parity_op(1, Parity::Even).unwrap_or_else(|| grid.standard_op(1));
    let d2 = grid.parity_op(2, Parity::Even).unwrap_or_else(|| grid.standard_op(2));
    let c2: Vec<f64> = d.e2bi.iter().map(|&v| -v).collect();
    // Drift-Laplacian first-order coefficient of Δ_φ.
    let c1_drift: Vec<f64> = (0..m)
        .map(|i| -d.e2bi[i] * (nm1 * d.a1[i] - d.b1[i]) + d.e2bi[i] * p1[i])
        .collect();
    let max_abs = |v: &[f64]| v[..last].iter().fold(0.0f64, |a, &x| a.max(x.abs()));

    let res_u = |u: &[f64]| -> Vec<f64> {
        let u1 = grid.diff_parity(u, 1, Parity::Even).expect("order 1");
        let u2 = grid.diff_parity(u, 2, Parity::Even).expect("order 2");
        (0..m)
            .map(|i| {
                let lap = -d.e2bi[i] * (u2[i] + (nm1 * d.a1[i] - d.b1[i]) * u1[i]);
                lap + n * u[i]
                    + 0.5 * d.e2bi[i] * u1[i] * u1[i]
                    + d.e2bi[i] * p1[i] * u1[i]
                    - 0.5 * r_field[i]
            })
            .collect()
    };

    let mut u: Vec<f64>;
    if let Some(u0) = u_init {
        u = u0.to_vec();
    } else {
        // Phase 1: globalised Newton in ω with 1 + ω > 0 enforced.
        let res_w = |w: &[f64]| -> Vec<f64> {
            let w1 = grid.diff_parity(w, 1, Parity::Even).expect("order 1");
            let w2 = grid.diff_parity(w, 2, Parity::Even).expect("order 2");
            (0..m)
                .map(|i| {
                    let dl = -d.e2bi[i] * (w2[i] + (nm1 * d.a1[i] - d.b1[i]) * w1[i])
                        + d.e2bi[i] * p1[i] * w1[i];
                    dl + (1.0 + w[i]) * (n * (1.0 + w[i]).ln() + 0.25 * r_field[i])
                })
                .collect()
        };
        let mut w = vec![0.0; m];
        let mut r = res_w(&w);
        let mut rmax = max_abs(&r);
        let mut trace = vec![rmax];
        for _ in 0..50 {
            if rmax < 1e-10 {
                break;
            }
            let diag: Vec<f64> = (0..m)
                .map(|i| n + n * (1.0 + w[i]).ln() + 0.25 * r_field[i])
                .collect();
            let mut jac = assemble_operator(m, &diag, &[(&c1_drift, d1), (&c2, d2)]);
            jac.clear_row(last);
            jac.set(last, last, 1.0);
            let mut rhs: Vec<f64> = r.iter().map(|&x| -x).collect();
            rhs[last] = 0.0;
            let delta = jac.solve(&rhs)?;
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha >= 1.0 / 256.0 {
                let trial: Vec<f64> = (0..m).map(|i| w[i] + alpha * delta[i]).collect();
                if trial.iter().any(|&x| x <= -0.999) {
                    alpha *= 0.5;
                    continue;
                }
                let rt = res_w(&trial);
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
        if rmax >= 1e-6 {
            return Err(AhError::Solver { context: "minimiser ω-Newton stalled".into(), trace });
        }
        u = w.iter().map(|&x| -2.0 * (1.0 + x).ln()).collect();
    }

    // Phase 2: Newton polish on u (exactly the discrete EL equation).
    let mut r = res_u(&u);
    let mut rmax = max_abs(&r);
    let mut trace = vec![rmax];
    for _ in 0..40 {
        if rmax < 5e-13 {
            break;
        }
        let u1 = grid.diff_parity(&u, 1, Parity::Even)?;
        let jc1: Vec<f64> = (0..m).map(|i| c1_drift[i] + d.e2bi[i] * u1[i]).collect();
        let mut jac = assemble_operator(m, &vec![n; m], &[(&jc1, d1), (&c2, d2)]);
        jac.clear_row(last);
        jac.set(last, last, 1.0);
        let mut rhs: Vec<f64> = r.iter().map(|&x| -x).collect();
        rhs[last] = 0.0;
        let delta = jac.solve(&rhs)?;
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha >= 1.0 / 256.0 {
            let trial: Vec<f64> = (0..m).map(|i| u[i] + alpha * delta[i]).collect();
            let rt = res_u(&trial);
            let rtmax = max_abs(&rt);
            if rtmax < rmax {
                u = trial;
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
    if rmax >= 5e-9 {
        return Err(AhError::Solver { context: "minimiser u-polish stalled".into(), trace });
    }
    let el_residual = 2.0 * rmax;
    let f: Vec<f64> = (0..m).map(|i| t.phi[i] + u[i]).collect();
    let omega: Vec<f64> = u.iter().map(|&x| (-0.5 * x).exp() - 1.0).collect();

    // Maximum-principle window 2n·u ∈ [inf R, sup R].
    let rmin = r_field.iter().cloned().fold(f64::INFINITY, f64::min);
    let rmaxv = r_field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let window = (rmin / (2.0 * n), rmaxv / (2.0 * n));
    let window_ok = u.iter().all(|&x| x >= window.0 - 1e-8 && x <= window.1 + 1e-8);

    let barrier = build_barrier(t, &r_field, &u);

    Ok(Minimiser { f, u, omega, el_residual, window, window_ok, barrier })
}

/// Constructive supersolution barrier of the EL equation on x >= rho = 2.
fn build_barrier(t: &AuxTriple, r_field: &[f64], u: &[f64]) -> Option<Barrier> {
    let g = &t.metric;
    let grid = &g.grid;
    let n = g.n() as f64;
    let rho = 2.0;
    let sup_r = r_field.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if sup_r < 1e-12 {
        return Some(Barrier { lambda: 0.0, beta: n - 0.5, rho, ok: true });
    }
    // Decay rate of R fitted on the tail.
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &x) in grid.nodes.iter().enumerate() {
        if x >= rho + 1.0 && x <= grid.x_max() - 1.0 && r_field[i].abs() > 1e-13 {
            xs.push(x);
            ys.push(r_field[i].abs().ln());
        }
    }
    if xs.len() < 8 {
        return None;
    }
    let (slope, _, _) = linreg(&xs, &ys);
    let beta = (-slope).clamp(0.2, n - 1e-3);
    let denom = n + n * beta - beta * beta;
    if denom <= 0.0 {
        return None;
    }
    let gg = extract_g(g).ok()?;
    let psi1 = {
        let psi: Vec<f64> = t.phi.iter().zip(&grid.nodes).map(|(&p, &x)| p + x).collect();
        grid.diff(&psi, 1).ok()?
    };
    let mut c1 = 0.0f64;
    let mut c2 = 0.0f64;
    for (i, &x) in grid.nodes.iter().enumerate() {
        if x >= rho {
            c1 = c1.max((gg[i] - psi1[i]).abs() * x.exp());
            c2 = c2.max(r_field[i].abs() * (beta * x).exp());
        }
    }
    let mut lambda = 0.5 * c2 / denom;
    for _ in 0..40 {
        lambda = (0.5 * (beta * lambda) * (beta * lambda) * (-beta * rho).exp()
            + c1 * beta * lambda * (-rho).exp()
            + 0.5 * c2)
            / denom;
    }
    let ok = grid
        .nodes
        .iter()
        .zip(u)
        .all(|(&x, &ui)| x < rho || ui.abs() <= lambda * (-beta * x).exp() * (1.0 + 1e-6) + 1e-12);
    Some(Barrier { lambda, beta, rho, ok })
}

/// Entropy ladders W_R, m_R, B_R and the extrapolated combination
/// W_AH = lim (W_R - m_R/(2n) + B_R).
pub fn entropy_w(bg: &StaticBackground, t: &AuxTriple, f: &[f64]) -> Result<WReport> {
    let df = DiffFields::from_triples(&bg.triple, t);
    let u: Vec<f64> = (0..t.len()).map(|i| f[i] - t.phi[i]).collect();
    entropy_w_diff(bg, &df, &u)
}

/// Entropy ladders from exact difference fields, with u = f - φ.
pub fn entropy_w_diff(bg: &StaticBackground, df: &DiffFields, u: &[f64]) -> Result<WReport> {
    let t = df.apply(&bg.triple);
    let g = &t.metric;
    let grid = &g.grid;
    let m = g.len();
    let n = g.n() as f64;
    let nm1 = n - 1.0;
    let d = g.derivs();
    // scal + n(n-1) in difference form: keeps the stencil truncation and
    // rounding error decaying so the e^{nx} measure cannot amplify it.
    let sd = scal_diff(&bg.triple.metric, &df.tx, &df.ts);
    let u1 = grid.diff_parity(u, 1, Parity::Even)?;
    let p1 = grid.diff_parity(&t.phi, 1, Parity::Even)?;
    let vol_bg = bg.triple.metric.volume_weight();
    let f: Vec<f64> = (0..m).map(|i| t.phi[i] + u[i]).collect();
    let integrand: Vec<f64> = (0..m)
        .map(|i| {
            // |df|² - |dφ|² = e^{-2B} u'(2φ' + u').
            let grad_term = d.e2bi[i] * u1[i] * (2.0 * p1[i] + u1[i]);
            let dens = ((1.0 + df.tx[i]) * (1.0 + df.ts[i]).powf(nm1)).sqrt();
            ((grad_term + sd[i]) / (2.0 * n) - u[i])
                * (-bg.triple.phi[i] - df.dphi[i] - u[i]).exp()
                * vol_bg[i]
                * dens
                * grid.sphere_area
        })
        .collect();
    let w_prefix = grid.integrate_prefix(&integrand);

    let idx = ladder_indices(grid);
    let mass_series = mass_flux_series(bg, &df.tx, &df.ts, &t.phi);
    let b_series: Vec<f64> = (0..m)
        .map(|i| {
            -(1.0 / n)
                * (f[i] - t.phi[i])
                * (-g.b[i]).exp()
                * p1[i]
                * (-t.phi[i]).exp()
                * grid.sphere_area
                * (nm1 * g.a[i]).exp()
        })
        .collect();

    let w_ladder: Vec<(f64, f64)> = idx.iter().map(|&i| (grid.nodes[i], w_prefix[i])).collect();
    let mass_ladder: Vec<(f64, f64)> =
        idx.iter().map(|&i| (grid.nodes[i], mass_series[i])).collect();
    let b_ladder: Vec<(f64, f64)> = idx.iter().map(|&i| (grid.nodes[i], b_series[i])).collect();
    let combined: Vec<f64> = idx
        .iter()
        .map(|&i| w_prefix[i] - mass_series[i] / (2.0 * n) + b_series[i])
        .collect();
    if monotone_diverging(&combined) {
        return Err(AhError::Divergence(format!(
            "renormalised entropy ladder drifts monotonically: {combined:?}"
        )));
    }
    let (w_ah, error_est) = aitken_extrapolate(&combined);
    Ok(WReport { w_ladder, mass_ladder, b_ladder, w_ah, error_est })
}

/// Composes solve_minimiser and entropy_w into the full report.
pub fn mu(bg: &StaticBackground, t: &AuxTriple) -> Result<EntropyReport> {
    mu_diff(bg, &DiffFields::from_triples(&bg.triple, t))
}

/// Full entropy report from exact difference fields (the stable entry point).
pub fn mu_diff(bg: &StaticBackground, df: &DiffFields) -> Result<EntropyReport> {
    let min = solve_minimiser_diff(&bg.triple, df, None)?;
    let wrep = entropy_w_diff(bg, df, &min.u)?;
    let (mass, _) = aitken_extrapolate(
        &wrep.mass_ladder.iter().map(|&(_, v)| v).collect::<Vec<_>>(),
    );
    Ok(EntropyReport {
        w: wrep.w_ladder.last().map(|&(_, v)| v).unwrap_or(0.0),
        mass,
        boundary_term: wrep.b_ladder.last().map(|&(_, v)| v).unwrap_or(0.0),
        mu: wrep.w_ah,
        f: min.f,
        u: min.u,
        el_residual: min.el_residual,
        r_eval: wrep.w_ladder.last().map(|&(x, _)| x).unwrap_or(0.0),
        extrapolation_error: wrep.error_est,
    })
}

/// Entropy gradient ∇μ = (T, S) in the L²_f pairing:
/// T = -(1/2n)(Ric + ng - dφ⊗dφ + ∇²f), S = -(1/n)(Δφ + ⟨dφ, df⟩ - n).
pub fn grad_mu(t: &AuxTriple) -> Result<GradMu> {
    let min = solve_minimiser(t)?;
    grad_mu_at(t, &min.u)
}

/// Gradient components at a given minimiser u = f - φ.
pub fn grad_mu_at(t: &AuxTriple, u: &[f64]) -> Result<GradMu> {
    let g = &t.metric;
    let grid = &g.grid;
    let m = g.len();
    let n = g.n() as f64;
    let aux = aux_ricci(t);
    let hess_u = hessian(g, u);
    let d = g.derivs();
    let p1 = grid.diff_parity(&t.phi, 1, Parity::Even)?;
    let u1 = grid.diff_parity(u, 1, Parity::Even)?;
    let mut tensor = RadialSymTensor::zeros(m);
    let mut scalar = vec![0.0; m];
    for i in 0..m {
        tensor.t_xx[i] = -(aux.t_xx[i] + n + hess_u.t_xx[i]) / (2.0 * n);
        tensor.t_sph[i] = -(aux.t_sph[i] + n + hess_u.t_sph[i]) / (2.0 * n);
        scalar[i] = -(2.0 * aux.t_tau[i] + d.e2bi[i] * p1[i] * u1[i] - n) / n;
    }
    let f: Vec<f64> = (0..m).map(|i| t.phi[i] + u[i]).collect();
    Ok(GradMu { tensor_part: tensor, scalar_part: scalar, f })
}

/// L²_f pairing ⟨∇μ, (h,ψ)⟩ = ∫(⟨T,h⟩ + S·ψ) e^{-f} dV.
pub fn pair_grad(t: &AuxTriple, grad: &GradMu, dir: &RadialSymTensor) -> Result<f64> {
    let g = &t.metric;
    let grid = &g.grid;
    let n = g.n() as f64;
    let vol = g.volume_weight();
    let integrand: Vec<f64> = (0..g.len())
        .map(|i| {
            (grad.tensor_part.t_xx[i] * dir.t_xx[i]
                + (n - 1.0) * grad.tensor_part.t_sph[i] * dir.t_sph[i]
                + grad.scalar_part[i] * dir.t_tau[i])
                * (-grad.f[i]).exp()
                * vol[i]
                * grid.sphere_area
        })
        .collect();
    let one = vec![1.0; g.len()];
    grid.integrate(&integrand, &one)
}

/// Second variation D²μ(𝔥,𝔥) at a static background:
/// solves 2(Δ_φ̂ + n)q = δ_𝔤δ_𝔤𝔥, forms u' = q + ½tr_g h - ψ, and pairs
/// Dk = DRic_𝔤(𝔥) + n𝔥 + ∇²_𝔤u' against 𝔥 in L²_φ̂.
pub fn hessian_mu_quadform(bg: &StaticBackground, h: &RadialSymTensor) -> Result<f64> {
    let t = &bg.triple;
    let g = &t.metric;
    let grid = &g.grid;
    let m = g.len();
    let n = g.n() as f64;
    let nm1 = n - 1.0;
    let last = m - 1;
    let d = g.derivs();
    let p1 = grid.diff_parity(&t.phi, 1, Parity::Even)?;

    // Linearised-minimiser solve.
    let div = aux_divergence(t, h);
    let ddh = aux_codiff_oneform(t, &div);
    let d1 = grid.parity_op(1, Parity::Even).unwrap_or_else(|| grid.standard_op(1));
    let d2 = grid.parity_op(2, Parity::Even).unwrap_or_else(|| grid.standard_op(2));
    let c2: Vec<f64> = d.e2bi.iter().map(|&v| -2.0 * v).collect();
    let c1: Vec<f64> = (0..m)
        .map(|i| 2.0 * (-d.e2bi[i] * (nm1 * d.a1[i] - d.b1[i]) + d.e2bi[i] * p1[i]))
        .collect();
    let mut op = assemble_operator(m, &vec![2.0 * n; m], &[(&c1, d1), (&c2, d2)]);
    op.clear_row(last);
    op.set(last, last, 1.0);
    let mut rhs = ddh.clone();
    rhs[last] = 0.0;
    let q = op.solve(&rhs)?;
    let uprime: Vec<f64> = (0..m)
        .map(|i| q[i] + 0.5 * (h.t_xx[i] + nm1 * h.t_sph[i]) - h.t_tau[i])
        .collect();

    // DRic + n𝔥 by central differencing of the analytic curvature along the
    // exact multiplicative family (the frame-rotation term supplies the n𝔥).
    let s = 1e-5;
    let rp = aux_ricci(&t.perturbed(h, s));
    let rm = aux_ricci(&t.perturbed(h, -s));
    let hu = hessian(g, &uprime);
    let u1 = grid.diff_parity(&uprime, 1, Parity::Even)?;
    let mut dk = RadialSymTensor::zeros(m);
    for i in 0..m {
        dk.t_xx[i] = (rp.t_xx[i] - rm.t_xx[i]) / (2.0 * s) + hu.t_xx[i];
        dk.t_sph[i] = (rp.t_sph[i] - rm.t_sph[i]) / (2.0 * s) + hu.t_sph[i];
        dk.t_tau[i] =
            (rp.t_tau[i] - rm.t_tau[i]) / (2.0 * s) + 0.5 * d.e2bi[i] * p1[i] * u1[i];
    }

    let vol = g.volume_weight();
    let integrand: Vec<f64> = (0..m)
        .map(|i| {
            (dk.t_xx[i] * h.t_xx[i]
                + nm1 * dk.t_sph[i] * h.t_sph[i]
                + 4.0 * dk.t_tau[i] * h.t_tau[i])
                * (-t.phi[i]).exp()
                * vol[i]
                * grid.sphere_area
        })
        .collect();
    let one = vec![1.0; m];
    Ok(-grid.integrate(&integrand, &one)? / (2.0 * n))
}
