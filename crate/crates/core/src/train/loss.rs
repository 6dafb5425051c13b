use crate::{Error, Result, Tensor};

/// Predictions are clamped to `[CLAMP, 1 - CLAMP]` before the logarithm.
pub const CLAMP: f64 = 1e-7;

fn check_shapes(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {} and target {} differ",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    Ok(())
}

/// Mean pixelwise binary cross-entropy and its gradient with respect to `pred`.
///
/// The gradient is evaluated at the clamped prediction and passed straight through
/// the clamp, so saturated wrong pixels still receive a signal.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_shapes(pred, target)?;
    let n = pred.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let p = (p as f64).clamp(CLAMP, 1.0 - CLAMP);
        let y = y as f64;
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad.push(((p - y) / (p * (1.0 - p) * n)) as f32);
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("binary cross-entropy".into()));
    }
    Ok((loss, Tensor::from_vec(pred.shape(), grad)?))
}

/// Number of pixels where `(pred >= 0.5)` agrees with the binary target.
pub fn correct_pixels(pred: &Tensor, target: &Tensor) -> Result<usize> {
    check_shapes(pred, target)?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5))
        .count())
}

/// Fraction of pixels where `(pred >= 0.5)` agrees with the binary target.
pub fn pixel_accuracy(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(correct_pixels(pred, target)? as f64 / pred.len() as f64)
}
