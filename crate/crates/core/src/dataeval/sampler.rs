use crate::error::bail;
use crate::Result;

/// Per-class sampling probabilities inversely proportional to class
/// frequency, normalized to sum to 1.
pub fn weighted_sampler(counts: &[u64]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        bail!(Argument, "no classes to sample from");
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        bail!(Argument, "class {c} has zero count");
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let z: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|p| p / z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn inverse_frequency() {
        assert!(close(&weighted_sampler(&[100, 50]).unwrap(), &[1.0 / 3.0, 2.0 / 3.0]));
        assert!(close(&weighted_sampler(&[7, 7, 7, 7]).unwrap(), &[0.25; 4]));
        assert!(close(
            &weighted_sampler(&[100, 50, 25]).unwrap(),
            &[1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]
        ));
        assert!(weighted_sampler(&[3, 0]).is_err());
        assert!(weighted_sampler(&[]).is_err());
    }
}
