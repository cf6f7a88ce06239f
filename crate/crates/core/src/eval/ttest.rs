//! Welch's two-sample two-tailed t-test.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{Error, Result};

/// Two-tailed p-value of Welch's t-test, degrees of freedom by the
/// Welch-Satterthwaite formula. The t distribution function comes from
/// statrs (regularized incomplete beta, accurate well beyond 1e-6).
/// Two zero-variance samples compare by mean alone: p = 1 when equal,
/// 0 otherwise.
pub fn ttest_two_tailed(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    if sample_a.len() < 2 || sample_b.len() < 2 {
        return Err(Error::Config(format!(
            "t-test needs at least 2 observations per sample, got {} and {}",
            sample_a.len(),
            sample_b.len()
        )));
    }
    let (na, nb) = (sample_a.len() as f64, sample_b.len() as f64);
    let (ma, mb) = (mean(sample_a), mean(sample_b));
    let (va, vb) = (sample_variance(sample_a, ma), sample_variance(sample_b, mb));

    if va == 0.0 && vb == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Config(format!("bad t distribution: {e}")))?;
    Ok((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64], m: f64) -> f64 {
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}
