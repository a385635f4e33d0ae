//! Error-versus-uncertainty correlation analysis.

use serde::Serialize;

use crate::error::{Error, Result};

/// One test image's summary: mean absolute residual against the ground
/// truth and mean predicted scale, optionally tagged with the noise level
/// it was measured under.
#[derive(Debug, Clone, Serialize)]
pub struct UncSample {
    pub index: usize,
    pub mean_abs_residual: f64,
    pub mean_sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationGroup {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub count: usize,
    pub mean_abs_residual: f64,
    pub mean_sigma: f64,
    pub pearson_r: f64,
    /// Set when a variance was (numerically) zero and `pearson_r` was
    /// reported as 0 by convention.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationReport {
    pub groups: Vec<CorrelationGroup>,
    pub pooled: CorrelationGroup,
}

/// Pearson correlation; zero-variance inputs are degenerate and yield
/// `(0.0, true)`.
pub fn pearson(xs: &[f64], ys: &[f64]) -> (f64, bool) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let denom = (sxx * syy).sqrt();
    if denom <= 1e-300 || !denom.is_finite() {
        return (0.0, true);
    }
    (sxy / denom, false)
}

/// Per-noise-level and pooled correlation between prediction error and mean
/// uncertainty. Needs at least 3 samples.
pub fn uncertainty_error_report(samples: &[UncSample]) -> Result<CorrelationReport> {
    if samples.len() < 3 {
        return Err(Error::Statistics(format!(
            "correlation needs at least 3 images, got {}",
            samples.len()
        )));
    }

    let mut deltas: Vec<Option<f64>> = Vec::new();
    for s in samples {
        if !deltas
            .iter()
            .any(|d| match (d, &s.delta) {
                (None, None) => true,
                (Some(a), Some(b)) => a == b,
                _ => false,
            })
        {
            deltas.push(s.delta);
        }
    }
    deltas.sort_by(|a, b| {
        a.unwrap_or(f64::NEG_INFINITY)
            .partial_cmp(&b.unwrap_or(f64::NEG_INFINITY))
            .unwrap()
    });

    let group_of = |delta: Option<f64>| -> CorrelationGroup {
        let members: Vec<&UncSample> = samples
            .iter()
            .filter(|s| match (delta, s.delta) {
                (None, None) => true,
                (Some(a), Some(b)) => a == b,
                _ => false,
            })
            .collect();
        summarize(delta, &members)
    };

    let groups: Vec<CorrelationGroup> = deltas.iter().map(|&d| group_of(d)).collect();
    let all: Vec<&UncSample> = samples.iter().collect();
    let pooled = summarize(None, &all);
    Ok(CorrelationReport { groups, pooled })
}

fn summarize(delta: Option<f64>, members: &[&UncSample]) -> CorrelationGroup {
    let n = members.len() as f64;
    let res: Vec<f64> = members.iter().map(|s| s.mean_abs_residual).collect();
    let sig: Vec<f64> = members.iter().map(|s| s.mean_sigma).collect();
    let (r, degenerate) = if members.len() >= 2 {
        pearson(&res, &sig)
    } else {
        (0.0, true)
    };
    CorrelationGroup {
        delta,
        count: members.len(),
        mean_abs_residual: res.iter().sum::<f64>() / n,
        mean_sigma: sig.iter().sum::<f64>() / n,
        pearson_r: r,
        degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(i: usize, res: f64, sigma: f64) -> UncSample {
        UncSample {
            index: i,
            mean_abs_residual: res,
            mean_sigma: sigma,
            delta: None,
        }
    }

    #[test]
    fn perfect_predictor_gives_r_one() {
        // sigma map equal to |residual|: oracle injection
        let samples: Vec<UncSample> = (0..10)
            .map(|i| sample(i, 0.1 + i as f64 * 0.03, 0.1 + i as f64 * 0.03))
            .collect();
        let report = uncertainty_error_report(&samples).unwrap();
        assert!((report.pooled.pearson_r - 1.0).abs() < 1e-12);
        assert!(!report.pooled.degenerate);
    }

    #[test]
    fn constant_sigma_is_degenerate_zero() {
        let samples: Vec<UncSample> = (0..5)
            .map(|i| sample(i, 0.1 * (i + 1) as f64, 0.42))
            .collect();
        let report = uncertainty_error_report(&samples).unwrap();
        assert_eq!(report.pooled.pearson_r, 0.0);
        assert!(report.pooled.degenerate);
    }

    #[test]
    fn too_few_images_is_a_statistics_error() {
        let samples = vec![sample(0, 0.1, 0.2), sample(1, 0.2, 0.3)];
        assert!(matches!(
            uncertainty_error_report(&samples),
            Err(Error::Statistics(_))
        ));
    }

    #[test]
    fn groups_by_noise_level() {
        let mut samples = Vec::new();
        for i in 0..4 {
            samples.push(UncSample {
                index: i,
                mean_abs_residual: 0.1 + i as f64 * 0.01,
                mean_sigma: 0.2 + i as f64 * 0.01,
                delta: Some(0.0),
            });
            samples.push(UncSample {
                index: 10 + i,
                mean_abs_residual: 0.3 + i as f64 * 0.01,
                mean_sigma: 0.5 + i as f64 * 0.01,
                delta: Some(2.5),
            });
        }
        let report = uncertainty_error_report(&samples).unwrap();
        assert_eq!(report.groups.len(), 2);
        assert_eq!(report.groups[0].delta, Some(0.0));
        assert_eq!(report.groups[1].delta, Some(2.5));
        assert!(report.groups[1].mean_sigma > report.groups[0].mean_sigma);
    }
}
