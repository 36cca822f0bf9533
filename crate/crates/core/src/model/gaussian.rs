use serde::{Deserialize, Serialize};

use super::LOGVAR_BOUND;
use crate::error::{Error, Result};

/// Diagonal Gaussian given by mean and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl DiagGaussian {
    /// Builds a Gaussian, clamping log-variances into the supported range.
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() {
            return Err(Error::Dimension {
                op: "diag_gaussian",
                left: (1, mu.len()),
                right: (1, logvar.len()),
            });
        }
        let logvar = logvar
            .into_iter()
            .map(|v| v.clamp(-LOGVAR_BOUND, LOGVAR_BOUND))
            .collect();
        Ok(Self { mu, logvar })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `mu + exp(logvar / 2) * noise`.
    pub fn reparameterize(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(Error::Dimension {
                op: "reparameterize",
                left: (1, self.dim()),
                right: (1, noise.len()),
            });
        }
        Ok(self
            .mu
            .iter()
            .zip(&self.logvar)
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect())
    }
}

/// `KL(q || p)` for diagonal Gaussians, summed over dimensions.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Contract(format!(
            "kl_diag over dims {} and {}",
            q.dim(),
            p.dim()
        )));
    }
    Ok(crate::numkit::kl_value(&q.mu, &q.logvar, &p.mu, &p.logvar))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mu: &[f64], lv: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mu.to_vec(), lv.to_vec()).unwrap()
    }

    #[test]
    fn identical_is_zero() {
        let q = g(&[0.3, -1.0], &[0.5, -2.0]);
        assert_eq!(kl_diag(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn unit_variance_mean_shift() {
        let q = g(&[1.0, 0.0], &[0.0, 0.0]);
        let p = g(&[0.0, 0.0], &[0.0, 0.0]);
        assert!((kl_diag(&q, &p).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn variance_ratio_case() {
        // sigma_q = e  =>  logvar_q = 2
        let q = g(&[0.0], &[2.0]);
        let p = g(&[0.0], &[0.0]);
        let expected = std::f64::consts::E.powi(2) / 2.0 - 1.5;
        assert!((kl_diag(&q, &p).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 2.194_53).abs() < 1e-5);
    }

    #[test]
    fn dim_mismatch() {
        assert!(matches!(
            kl_diag(&DiagGaussian::standard(2), &DiagGaussian::standard(3)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn reparameterize_cases() {
        let q = g(&[1.0, -2.0], &[0.3, -0.7]);
        assert_eq!(q.reparameterize(&[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        let tight = g(&[0.5], &[-1e9]);
        assert_eq!(tight.logvar, vec![-LOGVAR_BOUND]);
        let z = tight.reparameterize(&[1.7]).unwrap();
        assert!((z[0] - 0.5).abs() <= (-5.0f64).exp() * 1.7 + 1e-15);
    }

    #[test]
    fn reparameterized_mean_matches_mu() {
        use rand_distr::{Distribution, StandardNormal};
        let q = g(&[0.7, -1.2], &[0.4, -0.9]);
        let mut rng = crate::rng::rng_for(3, &[]);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let e: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z = q.reparameterize(&e).unwrap();
            sum[0] += z[0];
            sum[1] += z[1];
        }
        for d in 0..2 {
            let sigma = (0.5 * q.logvar[d]).exp();
            let mean = sum[d] / n as f64;
            assert!((mean - q.mu[d]).abs() < 3.0 * sigma / (n as f64).sqrt(), "dim {d}: {mean}");
        }
    }
}
