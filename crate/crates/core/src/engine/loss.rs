use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};

#[inline]
fn huber_term(r: f64, delta: f64) -> (f64, f64) {
    if r.abs() <= delta {
        (0.5 * r * r, r)
    } else {
        (delta * (r.abs() - 0.5 * delta), delta * r.signum())
    }
}

fn check<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, delta: f64) -> Result<()> {
    if !(delta > 0.0) {
        return Err(Error::invalid("huber_loss", format!("delta must be positive, got {delta}")));
    }
    if pred.shape() != target.shape() {
        return Err(Error::invalid(
            "huber_loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    Ok(())
}

/// Huber loss summed over all components of a single prediction, with its
/// exact gradient w.r.t. `pred`.
pub fn huber_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, delta: f64) -> Result<(f64, Tensor<T>)> {
    check(pred, target, delta)?;
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let (l, g) = huber_term(p.to_real() - t.to_real(), delta);
            loss += l;
            T::from_real(g)
        })
        .collect();
    Ok((loss, Tensor::new(pred.shape(), grad)?))
}

/// Batched form over `[N, k]`: summed over components, averaged over the
/// batch. The gradient carries the `1/N` factor.
pub fn huber_loss_batch<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, delta: f64) -> Result<(f64, Tensor<T>)> {
    check(pred, target, delta)?;
    if pred.rank() != 2 {
        return Err(Error::shape("huber_loss_batch", "prediction rank", 2, pred.rank()));
    }
    let n = pred.shape()[0] as f64;
    let (loss, grad) = huber_loss(pred, target, delta)?;
    let inv = T::from_real(1.0 / n);
    Ok((loss / n, grad.map(|g| g * inv)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::new(&[x.len()], x.to_vec()).unwrap()
    }

    #[test]
    fn zero_residual() {
        let p = v(&[0.3, -1.0]);
        let (l, g) = huber_loss(&p, &p, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn quadratic_and_linear_zones() {
        let (l, g) = huber_loss(&v(&[0.5]), &v(&[0.0]), 1.0).unwrap();
        assert_eq!((l, g.data()[0]), (0.125, 0.5));
        let (l, g) = huber_loss(&v(&[2.0]), &v(&[0.0]), 1.0).unwrap();
        assert_eq!((l, g.data()[0]), (1.5, 1.0));
        let (_, g) = huber_loss(&v(&[-7.0]), &v(&[0.0]), 0.25).unwrap();
        assert_eq!(g.data()[0], -0.25);
    }

    #[test]
    fn rejects_bad_delta_and_shapes() {
        assert!(huber_loss(&v(&[1.0]), &v(&[1.0]), 0.0).is_err());
        assert!(huber_loss(&v(&[1.0]), &v(&[1.0]), -1.0).is_err());
        assert!(huber_loss(&v(&[1.0]), &v(&[1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn batch_averages() {
        let p = Tensor::new(&[2, 1], vec![0.5, 2.0]).unwrap();
        let t = Tensor::zeros(&[2, 1]);
        let (l, g) = huber_loss_batch(&p, &t, 1.0).unwrap();
        assert_eq!(l, (0.125 + 1.5) / 2.0);
        assert_eq!(g.data(), &[0.25, 0.5]);
    }
}
