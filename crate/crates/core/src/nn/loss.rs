use crate::error::{Error, Result};
use crate::nn::tape::huber_scalar;
use crate::nn::Tensor;

/// Mean Huber penalty over all elements of `residual`.
pub fn huber_loss(residual: &Tensor, delta: f64) -> Result<f64> {
    if delta <= 0.0 {
        return Err(Error::Config(format!("huber delta must be positive, got {delta}")));
    }
    if residual.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = residual.data().iter().map(|&x| huber_scalar(x, delta)).sum();
    Ok(s / residual.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branches() {
        assert_eq!(huber_loss(&Tensor::scalar(0.0), 1.0).unwrap(), 0.0);
        assert_eq!(huber_loss(&Tensor::scalar(0.5), 1.0).unwrap(), 0.125);
        assert_eq!(huber_loss(&Tensor::scalar(2.0), 1.0).unwrap(), 1.5);
        assert_eq!(huber_loss(&Tensor::scalar(-2.0), 1.0).unwrap(), 1.5);
    }

    #[test]
    fn mean_over_elements() {
        let r = Tensor::vector(vec![0.5, 2.0]);
        assert_eq!(huber_loss(&r, 1.0).unwrap(), (0.125 + 1.5) / 2.0);
    }

    #[test]
    fn rejects_bad_delta() {
        assert!(huber_loss(&Tensor::scalar(1.0), 0.0).is_err());
    }
}
