//! Scratch diagnostics (not part of the library).
use ahlab_core::entropy::*;
use ahlab_core::flow::*;
use ahlab_core::geometry::*;
use ahlab_core::grid::*;
use std::sync::Arc;

fn bump(x: f64, c: f64, w: f64) -> f64 {
    let t = (x - c) / w;
    if t.abs() < 1.0 {
        (-1.0 / (1.0 - t * t)).exp()
    } else {
        0.0
    }
}

fn spectrum(count: usize) {
    use nalgebra::DMatrix;
    let grid = Arc::new(make_grid(3, 0.0, 12.0, count, Clustering::Staggered).unwrap());
    let triple = hyperbolic_triple(grid.clone());
    let v: Vec<f64> = triple.phi.iter().map(|&p| (-p).exp()).collect();
    let bg = StaticBackground { triple, v };
    let m = bg.triple.len();
    let mm = 3 * m;
    let eps = 1e-7;
    for gauge in [Gauge::Gradient, Gauge::DeTurck] {
        let mut jac = DMatrix::<f64>::zeros(mm, mm);
        for node in 0..m {
            for c in 0..3usize {
                let mut df = DiffFields::zeros(m);
                match c {
                    0 => df.tx[node] = eps,
                    1 => df.ts[node] = eps,
                    _ => df.dphi[node] = eps,
                }
                let st = FlowState::from_difference(&bg, df, gauge).unwrap();
                let dot = match gauge {
                    Gauge::DeTurck => deturck_rhs(&st),
                    Gauge::Gradient => gradient_rhs(&st).unwrap().0,
                };
                let col = 3 * node + c;
                for i in 0..m {
                    jac[(3 * i, col)] = dot.tx[i] / eps;
                    jac[(3 * i + 1, col)] = dot.ts[i] / eps;
                    jac[(3 * i + 2, col)] = dot.dphi[i] / eps;
                }
            }
        }
        let eig = jac.complex_eigenvalues();
        let max_re = eig.iter().fold(f64::NEG_INFINITY, |a, z| a.max(z.re));
        let min_re = eig.iter().fold(f64::INFINITY, |a, z| a.min(z.re));
        let bad = eig.iter().filter(|z| z.re > 1.0).count();
        let worse = eig.iter().filter(|z| z.re > 20.0).count();
        println!(
            "{gauge:?} N={count}: max Re = {max_re:.4e}, min Re = {min_re:.3e}, #Re>1: {bad}, #Re>20: {worse}"
        );
        if max_re > 0.5 {
            let shift = max_re + 1e-4;
            let shifted = &jac - DMatrix::<f64>::identity(mm, mm) * shift;
            let lu = shifted.lu();
            let mut v = DMatrix::<f64>::from_element(mm, 1, 1.0);
            for _ in 0..40 {
                if let Some(w) = lu.solve(&v) {
                    let norm = w.norm();
                    v = w / norm;
                } else {
                    break;
                }
            }
            let mut peak = 0usize;
            for i in 0..mm {
                if v[i].abs() > v[peak].abs() {
                    peak = i;
                }
            }
            let grid2 = Arc::new(make_grid(3, 0.0, 12.0, count, Clustering::Staggered).unwrap());
            println!(
                "  top mode peak at node {} (x={:.2}) field {}",
                peak / 3,
                grid2.nodes[peak / 3],
                ["tx", "ts", "dphi"][peak % 3]
            );
            // Field-component mass and mass by x-quarter.
            let mut fm = [0.0f64; 3];
            let mut qm = [0.0f64; 4];
            for i in 0..mm {
                fm[i % 3] += v[i] * v[i];
                qm[(4 * (i / 3) / m).min(3)] += v[i] * v[i];
            }
            println!("  field mass tx/ts/dphi: {:.2e} {:.2e} {:.2e}; quarters: {:.2e} {:.2e} {:.2e} {:.2e}",
                fm[0], fm[1], fm[2], qm[0], qm[1], qm[2], qm[3]);
        }
    }
}

fn main() {
    if std::env::args().nth(1).as_deref() == Some("spec") {
        let count: usize = std::env::args()
            .nth(2)
            .and_then(|s| s.parse().ok())
            .unwrap_or(128);
        spectrum(count);
        return;
    }
    let gauge = match std::env::args().nth(1).as_deref() {
        Some("grad") => Gauge::Gradient,
        _ => Gauge::DeTurck,
    };
    let scheme = match std::env::args().nth(2).as_deref() {
        Some("rk4") => Scheme::Rk4,
        _ => Scheme::Imex,
    };
    let dt: f64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1e-3);
    let t_end: f64 = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.0);
    let count: usize = std::env::args()
        .nth(5)
        .and_then(|s| s.parse().ok())
        .unwrap_or(256);
    let grid = Arc::new(make_grid(3, 0.0, 12.0, count, Clustering::Staggered).unwrap());
    let triple = hyperbolic_triple(grid.clone());
    let v: Vec<f64> = triple.phi.iter().map(|&p| (-p).exp()).collect();
    let bg = StaticBackground { triple, v };
    let m = bg.triple.len();
    let mut df = DiffFields::zeros(m);
    for (i, &x) in bg.triple.grid().nodes.iter().enumerate() {
        df.ts[i] = (2.0 * 1e-2 * bump(x, 4.0, 2.0)).exp_m1();
    }
    let mut st = FlowState::from_difference(&bg, df, gauge).unwrap();
    let mut integ = Integrator::new(scheme);
    let steps = (t_end / dt).round() as usize;
    let stride = (steps / 20).max(1);
    for k in 0..steps {
        if k % stride == 0 || k > 1150 {
            let mut ix = 0;
            let mut sx = 0.0f64;
            for (i, &v) in st.df.tx.iter().enumerate() {
                if v.abs() > sx {
                    sx = v.abs();
                    ix = i;
                }
            }
            let ss = st.df.ts.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            let sp = st.df.dphi.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            print!("argmax tx node {ix} x={:.3} ", st.bg.triple.grid().nodes[ix]);
            // Irregularity monitor at the origin: (tx - ts)/sinh^2 at node 0.
            let x0 = st.bg.triple.grid().nodes[0];
            let lam0 = (st.df.tx[0] - st.df.ts[0]) / x0.sinh().powi(2);
            println!(
                "k={k} t={:.3} res={:.3e} sup tx={sx:.3e} ts={ss:.3e} dphi={sp:.3e} lam0={lam0:.3e}",
                st.t,
                st.static_residual()
            );
        }
        match integ.step(&mut st, dt) {
            Ok(used) => {
                if used < dt {
                    println!("  step {k} halved to {used:.3e} at t={:.4}", st.t);
                }
            }
            Err(e) => {
                println!("DIED at k={k} t={:.4}: {e}", st.t);
                return;
            }
        }
    }
    println!("done t={:.3} res={:.3e}", st.t, st.static_residual());
}
