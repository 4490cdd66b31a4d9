//! Segmentation metrics.

use crate::error::{shape, Result};
use crate::tensor::Tensor;

/// Dice coefficient between `prediction > 0.5` and `truth > 0.5`. Two empty
/// masks score 1.
pub fn dice(prediction: &Tensor, truth: &Tensor) -> Result<f64> {
    if prediction.len() != truth.len() {
        return Err(shape(format!(
            "dice over {:?} and {:?}",
            prediction.dims(),
            truth.dims()
        )));
    }
    let (mut inter, mut sp, mut st) = (0usize, 0usize, 0usize);
    for (&p, &t) in prediction.data().iter().zip(truth.data()) {
        let (p, t) = (p > 0.5, t > 0.5);
        inter += (p && t) as usize;
        sp += p as usize;
        st += t as usize;
    }
    if sp + st == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sp + st) as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn known_values() {
        assert_eq!(dice(&t(&[1.0, 1.0, 0.0, 0.0]), &t(&[1.0, 0.0, 0.0, 0.0])).unwrap(), 2.0 / 3.0);
        assert_eq!(dice(&t(&[0.9, 0.2]), &t(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(dice(&t(&[0.0, 0.0]), &t(&[0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(dice(&t(&[1.0, 0.0]), &t(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(dice(&t(&[0.5]), &t(&[1.0])).unwrap(), 0.0);
        assert!(dice(&t(&[1.0]), &t(&[1.0, 0.0])).is_err());
    }
}
