//! Small statistics helpers: moments, standard errors and least-squares fits.

use num_complex::Complex64;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

pub fn complex_mean(zs: &[Complex64]) -> Complex64 {
    zs.iter().sum::<Complex64>() / zs.len() as f64
}

/// Standard error of a complex sample mean, `sqrt(E|z - m|² / n)`.
pub fn complex_std_error(zs: &[Complex64]) -> f64 {
    let m = complex_mean(zs);
    let n = zs.len() as f64;
    (zs.iter().map(|z| (z - m).norm_sqr()).sum::<f64>() / (n - 1.0) / n).sqrt()
}

/// Leave-one-out jackknife standard error of the mean of complex samples.
pub fn jackknife_std_error(zs: &[Complex64]) -> f64 {
    let n = zs.len();
    if n < 2 {
        return 0.0;
    }
    let total: Complex64 = zs.iter().sum();
    let loo: Vec<Complex64> = zs.iter().map(|z| (total - z) / (n - 1) as f64).collect();
    let m = complex_mean(&loo);
    let s: f64 = loo.iter().map(|z| (z - m).norm_sqr()).sum();
    ((n - 1) as f64 / n as f64 * s).sqrt()
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
#[derive(Debug, Clone, Copy)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> LineFit {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    LineFit { slope, intercept: my - slope * mx }
}

/// Slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    fit_line(&lx, &ly).slope
}

/// Sample excess-free kurtosis `E(x-m)^4 / (E(x-m)^2)^2`.
pub fn kurtosis(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        let f = fit_line(&xs, &ys);
        assert!((f.slope + 0.5).abs() < 1e-14);
        assert!((f.intercept - 2.0).abs() < 1e-14);
    }

    #[test]
    fn jackknife_of_mean_equals_classical_se() {
        let zs: Vec<Complex64> = (0..20)
            .map(|k| Complex64::new((k as f64 * 0.7).sin(), (k as f64 * 1.3).cos()))
            .collect();
        assert!((jackknife_std_error(&zs) - complex_std_error(&zs)).abs() < 1e-12);
    }
}
