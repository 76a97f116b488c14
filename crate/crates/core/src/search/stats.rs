use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{GhnError, Result};

/// Sample Pearson correlation.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(GhnError::Statistics(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(GhnError::Statistics("need at least two pairs".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(GhnError::Statistics("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One-sided p-value of `r > 0` for `n` pairs, from the t statistic with
/// `n − 2` degrees of freedom.
pub fn one_sided_p(r: f64, n: usize) -> Result<f64> {
    if n < 3 {
        return Err(GhnError::Statistics(
            "t-test needs at least three pairs".into(),
        ));
    }
    if r >= 1.0 {
        return Ok(0.0);
    }
    if r <= -1.0 {
        return Ok(1.0);
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| GhnError::Statistics(e.to_string()))?;
    Ok(1.0 - dist.cdf(t))
}

/// Trapezoidal area under an accuracy-FLOPs curve divided by the FLOP
/// span. Points may come in any order.
pub fn anytime_auc(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(GhnError::input("AUC needs at least two points"));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(GhnError::input("AUC points must be finite"));
    }
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.0.total_cmp(&b.0));
    if p.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(GhnError::input("duplicate FLOP values on the curve"));
    }
    let area: f64 = p
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(area / (p[p.len() - 1].0 - p[0].0))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0];
        assert_eq!(pearson_r(&xs, &xs).unwrap(), 1.0);
        assert_eq!(pearson_r(&xs, &[-1.0, -2.0, -3.0]).unwrap(), -1.0);
        assert!((pearson_r(&xs, &[1.0, 2.0, 4.0]).unwrap() - 0.9820).abs() < 1e-4);
        assert!(pearson_r(&xs, &[2.0; 3]).is_err());
        assert!(pearson_r(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert!((anytime_auc(&[(0.0, 0.3), (5.0, 0.3)]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(anytime_auc(&[(0.0, 0.0), (1.0, 1.0)]).unwrap(), 0.5);
        let a = anytime_auc(&[(0.0, 0.2), (2.0, 0.4), (4.0, 0.9)]).unwrap();
        assert!((a - 0.475).abs() < 1e-12);
        assert!(anytime_auc(&[(1.0, 0.2), (1.0, 0.4)]).is_err());
    }

    #[test]
    fn p_values() {
        // r = 0.5 with 30 pairs: t = 3.055, df = 28
        let p = one_sided_p(0.5, 30).unwrap();
        assert!((p - 0.00246).abs() < 5e-5, "{p}");
        assert!((one_sided_p(0.0, 10).unwrap() - 0.5).abs() < 1e-12);
    }
}
