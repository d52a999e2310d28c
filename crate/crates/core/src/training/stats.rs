use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n − 1` denominator); 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Mean and sample std of `xs`, computed over the sorted values so the result
/// does not depend on run order.
pub fn summarize(xs: &[f64]) -> (f64, f64) {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    (mean(&sorted), sample_std(&sorted))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl SampleSummary {
    pub fn new(mean: f64, std: f64, n: usize) -> Self {
        Self { mean, std, n }
    }

    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = summarize(xs);
        Self { mean, std, n: xs.len() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// One-sided p-value for the alternative mean(A) > mean(B).
    pub p_greater: f64,
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of
/// freedom. p-values come from the Student t CDF (regularized incomplete
/// beta function).
pub fn welch_test(a: SampleSummary, b: SampleSummary) -> Result<WelchResult> {
    if a.n < 2 || b.n < 2 {
        return Err(Error::Invalid("Welch test needs at least two runs per sample".into()));
    }
    if a.std < 0.0 || b.std < 0.0 {
        return Err(Error::Invalid("negative standard deviation".into()));
    }
    let va = a.std * a.std / a.n as f64;
    let vb = b.std * b.std / b.n as f64;
    let diff = a.mean - b.mean;
    if va + vb == 0.0 {
        let df = (a.n + b.n - 2) as f64;
        return Ok(if diff == 0.0 {
            WelchResult { t: 0.0, df, p: 1.0, p_greater: 0.5 }
        } else {
            let t = diff.signum() * f64::INFINITY;
            WelchResult { t, df, p: 0.0, p_greater: if diff > 0.0 { 0.0 } else { 1.0 } }
        });
    }
    let t = diff / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (a.n - 1) as f64 + vb * vb / (b.n - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(format!("t distribution: {e}")))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchResult { t, df, p, p_greater: dist.sf(t) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_examples() {
        assert_eq!(summarize(&[91.0; 10]), (91.0, 0.0));
        let (m, s) = summarize(&[90.0, 92.0]);
        assert_eq!(m, 91.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(summarize(&[3.0, 1.0, 2.0]), summarize(&[2.0, 3.0, 1.0]));
    }

    #[test]
    fn welch_reference_values() {
        let r = welch_test(SampleSummary::new(91.93, 0.19, 10), SampleSummary::new(91.62, 0.33, 10)).unwrap();
        assert!((r.t - 2.5745).abs() < 1e-3, "{r:?}");
        assert!((r.df - 14.37).abs() < 0.05, "{r:?}");
        assert!((r.p - 0.0217).abs() < 5e-4, "{r:?}");
        assert!((r.p_greater - r.p / 2.0).abs() < 1e-12);
    }

    #[test]
    fn welch_degenerate_cases() {
        let a = SampleSummary::new(5.0, 1.0, 4);
        let r = welch_test(a, a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        let z = SampleSummary::new(5.0, 0.0, 4);
        assert_eq!(welch_test(z, z).unwrap().p, 1.0);
        let far = welch_test(SampleSummary::new(100.0, 0.01, 10), SampleSummary::new(0.0, 0.01, 10)).unwrap();
        assert!(far.p < 1e-6);
        assert!(welch_test(SampleSummary::new(1.0, 1.0, 1), a).is_err());
    }
}
