//! Small statistics helpers for the multi-run reporting protocol: mean with
//! 95% confidence interval and Welch's two-sided t-test between two
//! configurations.

use crate::error::{Error, Result};
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Mean and two-sided 95% CI half-width from the t distribution.
pub fn mean_ci95(xs: &[f64]) -> Result<MeanCi> {
    if xs.len() < 2 {
        return Err(Error::validation("mean_ci95 needs at least 2 samples"));
    }
    let (mean, var) = mean_var(xs);
    let n = xs.len() as f64;
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::validation(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(MeanCi {
        mean,
        half_width: t * (var / n).sqrt(),
        n: xs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Welch's unequal-variance two-sided t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::validation("welch_t_test needs at least 2 samples per side"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        // identical constant samples: no evidence of a difference
        return Ok(TTest {
            t: 0.0,
            df: na + nb - 2.0,
            p_value: 1.0,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2.powi(2)
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::validation(e.to_string()))?;
    let p = 2.0 * dist.cdf(-t.abs());
    Ok(TTest { t, df, p_value: p })
}

pub fn median(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::validation("median of empty sample"));
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ci_matches_hand_computation() {
        // n=5, sd=1: t_{4,.975}=2.7764, half-width = 2.7764/sqrt(5)
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ci = mean_ci95(&xs).unwrap();
        assert_relative_eq!(ci.mean, 3.0, epsilon = 1e-12);
        let sd = (2.5f64).sqrt();
        assert_relative_eq!(ci.half_width, 2.7764451051977987 * sd / 5f64.sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn welch_identical_samples_p_one() {
        let a = [0.4, 0.4, 0.4];
        let t = welch_t_test(&a, &a).unwrap();
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn welch_known_case() {
        // classic Welch example
        let a = [27.5, 21.0, 19.0, 23.6, 17.0, 17.9, 16.9, 20.1, 21.9, 22.6, 23.1, 19.6, 19.0, 21.7, 21.4];
        let b = [27.1, 22.0, 20.8, 23.4, 23.4, 23.5, 25.8, 22.0, 24.8, 20.2, 21.9, 22.1, 22.9, 30.5];
        let t = welch_t_test(&a, &b).unwrap();
        assert_relative_eq!(t.t, -2.7078, epsilon = 1e-3);
        assert_relative_eq!(t.df, 26.953, epsilon = 1e-2);
        assert!((t.p_value - 0.0116).abs() < 0.002, "p = {}", t.p_value);
    }

    #[test]
    fn welch_separated_samples_small_p() {
        let a = [0.10, 0.11, 0.12, 0.10, 0.11];
        let b = [0.40, 0.41, 0.39, 0.42, 0.40];
        assert!(welch_t_test(&a, &b).unwrap().p_value < 1e-6);
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }
}
