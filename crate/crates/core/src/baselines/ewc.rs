use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// Single-anchor EWC: `sum_i lambda/2 * F_i * (theta_i - theta*_i)^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct EwcState {
    pub anchor: Vec<Tensor>,
    pub fisher: Vec<Tensor>,
    pub lambda: f64,
}

fn check_shapes(a: &[Tensor], b: &[Tensor], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("{op}: {} tensors against {}", a.len(), b.len())));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::Contract(format!(
                "{op}: shape {:?} against {:?}",
                x.shape(),
                y.shape()
            )));
        }
    }
    Ok(())
}

impl EwcState {
    pub fn new(anchor: Vec<Tensor>, fisher: Vec<Tensor>, lambda: f64) -> Result<Self> {
        check_shapes(&anchor, &fisher, "ewc")?;
        if fisher.iter().any(|f| f.data().iter().any(|&v| !(v >= 0.0))) {
            return Err(Error::contract("fisher entries must be non-negative"));
        }
        Ok(Self { anchor, fisher, lambda })
    }

    pub fn penalty(&self, params: &[Tensor]) -> Result<f64> {
        check_shapes(params, &self.anchor, "ewc_penalty")?;
        let mut total = 0.0;
        for ((p, a), f) in params.iter().zip(&self.anchor).zip(&self.fisher) {
            for ((&x, &y), &w) in p.data().iter().zip(a.data()).zip(f.data()) {
                total += w * (x - y) * (x - y);
            }
        }
        Ok(0.5 * self.lambda * total)
    }

    /// Adds `lambda * F * (theta - theta*)` to `grads`.
    pub fn add_gradient(&self, params: &[Tensor], grads: &mut [Tensor]) -> Result<()> {
        check_shapes(params, &self.anchor, "ewc_gradient")?;
        check_shapes(params, grads, "ewc_gradient")?;
        for (((p, a), f), g) in params.iter().zip(&self.anchor).zip(&self.fisher).zip(grads.iter_mut()) {
            for (((&x, &y), &w), gi) in p.data().iter().zip(a.data()).zip(f.data()).zip(g.data_mut()) {
                *gi += self.lambda * w * (x - y);
            }
        }
        Ok(())
    }
}

pub fn ewc_penalty(params: &[Tensor], state: &EwcState) -> Result<f64> {
    state.penalty(params)
}

/// Diagonal Fisher estimate: the entrywise mean of squared per-sample gradients.
pub fn fisher_from_grads(per_sample: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let Some(first) = per_sample.first() else {
        return Err(Error::contract("fisher estimate needs at least one sample"));
    };
    let mut acc: Vec<Tensor> = first.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
    for grads in per_sample {
        check_shapes(&acc, grads, "fisher")?;
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, &v) in a.data_mut().iter_mut().zip(g.data()) {
                *x += v * v;
            }
        }
    }
    let n = per_sample.len() as f64;
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn fisher_hand_example() {
        let f = fisher_from_grads(&[vec![s(1.0)], vec![s(-3.0)]]).unwrap();
        assert_eq!(f[0].data(), &[5.0]);
        assert!(fisher_from_grads(&[]).is_err());
    }

    #[test]
    fn fisher_zero_and_duplication() {
        let set = vec![vec![s(0.0), s(2.0)], vec![s(0.0), s(-1.0)]];
        let f = fisher_from_grads(&set).unwrap();
        assert_eq!(f[0].data(), &[0.0]);
        let doubled: Vec<_> = set.iter().chain(&set).cloned().collect();
        assert_eq!(fisher_from_grads(&doubled).unwrap(), f);
    }

    #[test]
    fn penalty_examples() {
        let st = EwcState::new(vec![s(1.0)], vec![s(3.0)], 2.0).unwrap();
        assert_eq!(st.penalty(&[s(1.0)]).unwrap(), 0.0);
        assert!((st.penalty(&[s(1.5)]).unwrap() - 0.75).abs() < 1e-12);
        let zero = EwcState::new(vec![s(1.0)], vec![s(0.0)], 2e6).unwrap();
        assert_eq!(zero.penalty(&[s(40.0)]).unwrap(), 0.0);
        assert!(st.penalty(&[s(1.0), s(2.0)]).is_err());
    }

    #[test]
    fn gradient_matches_penalty_slope() {
        let st = EwcState::new(vec![s(0.2)], vec![s(1.5)], 4.0).unwrap();
        let mut g = vec![s(0.0)];
        st.add_gradient(&[s(0.7)], &mut g).unwrap();
        let h = 1e-6;
        let fd = (st.penalty(&[s(0.7 + h)]).unwrap() - st.penalty(&[s(0.7 - h)]).unwrap()) / (2.0 * h);
        assert!((g[0].data()[0] - fd).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn penalty_grows_with_distance(a in -2.0..2.0f64, f in 0.0..5.0f64, d1 in 0.0..3.0f64, d2 in 0.0..3.0f64) {
            let st = EwcState::new(vec![s(a)], vec![s(f)], 2e6).unwrap();
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(st.penalty(&[s(a + lo)]).unwrap() <= st.penalty(&[s(a + hi)]).unwrap());
            prop_assert!(st.penalty(&[s(a - lo)]).unwrap() <= st.penalty(&[s(a - hi)]).unwrap());
        }
    }
}
