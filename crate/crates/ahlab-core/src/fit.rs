//! Small fitting helpers: exponential-basis least squares, linear
//! regression, and iterated Aitken extrapolation for radius ladders.

use nalgebra::{DMatrix, DVector};

/// Least-squares coefficients c_l of y ~ sum_l c_l e^{-r_l x}.
/// Columns are scaled to unit norm before the SVD solve to keep the
/// wildly different decay rates comparable.
pub fn exp_fit(x: &[f64], y: &[f64], rates: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), y.len());
    let (m, k) = (x.len(), rates.len());
    let mut a = DMatrix::zeros(m, k);
    let mut scale = vec![0.0f64; k];
    for (j, &r) in rates.iter().enumerate() {
        for (i, &xi) in x.iter().enumerate() {
            a[(i, j)] = (-r * xi).exp();
        }
        let nrm = a.column(j).norm();
        scale[j] = if nrm > 0.0 { nrm } else { 1.0 };
        for i in 0..m {
            a[(i, j)] /= scale[j];
        }
    }
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    let c = svd.solve(&b, 1e-13).expect("svd solve");
    (0..k).map(|j| c[j] / scale[j]).collect()
}

/// Ordinary least squares y ~ intercept + slope * x; returns
/// (slope, intercept, r_squared).
pub fn linreg(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    let m = x.len() as f64;
    let xm = x.iter().sum::<f64>() / m;
    let ym = y.iter().sum::<f64>() / m;
    let sxx: f64 = x.iter().map(|&v| (v - xm) * (v - xm)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(&u, &v)| (u - xm) * (v - ym)).sum();
    let syy: f64 = y.iter().map(|&v| (v - ym) * (v - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let r2 = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    (slope, intercept, r2)
}

/// Iterated Aitken extrapolation of a ladder converging like a sum of
/// exponential modes; returns (limit, error_estimate) where the estimate
/// is the last observed change.
pub fn aitken_extrapolate(seq: &[f64]) -> (f64, f64) {
    assert!(!seq.is_empty());
    let mut s = seq.to_vec();
    let mut last = *s.last().unwrap();
    let mut err = if s.len() >= 2 { (s[s.len() - 1] - s[s.len() - 2]).abs() } else { 0.0 };
    while s.len() >= 3 {
        let mut t = Vec::with_capacity(s.len() - 2);
        for k in 0..s.len() - 2 {
            let d1 = s[k + 1] - s[k];
            let d2 = s[k + 2] - s[k + 1];
            let den = d2 - d1;
            if den.abs() <= 1e-13 * (s[k + 2].abs() + 1.0) {
                t.push(s[k + 2]);
            } else {
                t.push(s[k + 2] - d2 * d2 / den);
            }
        }
        let new_last = *t.last().unwrap();
        err = (new_last - last).abs();
        last = new_last;
        s = t;
    }
    (last, err)
}

/// True when the ladder drifts monotonically with growing increments,
/// the signature of a divergent renormalised limit.
pub fn monotone_diverging(seq: &[f64]) -> bool {
    if seq.len() < 4 {
        return false;
    }
    let d: Vec<f64> = seq.windows(2).map(|w| w[1] - w[0]).collect();
    let same_sign = d.iter().all(|&v| v > 0.0) || d.iter().all(|&v| v < 0.0);
    let growing = d.windows(2).all(|w| w[1].abs() >= w[0].abs() * 0.999);
    same_sign && growing && d.last().unwrap().abs() > d[0].abs()
}
