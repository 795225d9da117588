//! Least-squares helpers for rate fits.

/// Ordinary least-squares line `y ≈ slope·x + intercept`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Slope of `log y` against `log x`, skipping nonpositive samples.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let (lx, ly): (Vec<f64>, Vec<f64>) = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .unzip();
    if lx.len() < 2 {
        return f64::NAN;
    }
    fit_line(&lx, &ly).0
}

/// Exponential rate of `y(t)`: slope of `log y` against `t`.
pub fn exp_rate(ts: &[f64], ys: &[f64]) -> f64 {
    let (tx, ly): (Vec<f64>, Vec<f64>) = ts
        .iter()
        .zip(ys)
        .filter(|(_, y)| **y > 0.0)
        .map(|(t, y)| (*t, y.ln()))
        .unzip();
    if tx.len() < 2 {
        return f64::NAN;
    }
    fit_line(&tx, &ly).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_lines() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 0.3).collect();
        let ys: Vec<f64> = xs.iter().map(|x| -2.0 * x + 1.5).collect();
        let (s, c) = fit_line(&xs, &ys);
        assert!((s + 2.0).abs() < 1e-12 && (c - 1.5).abs() < 1e-12);
        let es: Vec<f64> = xs.iter().map(|t| 3.0 * (-0.7 * t).exp()).collect();
        assert!((exp_rate(&xs, &es) + 0.7).abs() < 1e-12);
        let ps: Vec<f64> = xs.iter().skip(1).map(|x| x.powf(-1.25)).collect();
        assert!((loglog_slope(&xs[1..], &ps) + 1.25).abs() < 1e-12);
    }
}
