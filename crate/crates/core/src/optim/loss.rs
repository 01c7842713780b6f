#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::vec::Vec;
use nalgebra::Vector3;

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    ShapeMismatch,
    NoValidPixels,
    NonPositiveConfidence { index: usize, value: f64 },
}

impl core::fmt::Display for LossError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LossError::ShapeMismatch => write!(f, "loss inputs have mismatched shapes"),
            LossError::NoValidPixels => write!(f, "no valid pixels to average over"),
            LossError::NonPositiveConfidence { index, value } => {
                write!(f, "confidence at pixel {index} is not positive: {value}")
            }
        }
    }
}

impl core::error::Error for LossError {}

/// How the photometric loss aggregates over pixels.
///
/// `MeanPerPixel` keeps learning rates independent of resolution; `Sum` is
/// the plain summed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossReduction {
    #[default]
    MeanPerPixel,
    Sum,
}

/// L1 photometric loss: per-pixel L1 norm of the color difference, summed
/// (or pixel-averaged) over the image.
pub fn photometric_loss(rendered: &[f64], observed: &[f64], reduction: LossReduction) -> Result<f64, LossError> {
    if rendered.len() != observed.len() || rendered.len() % 3 != 0 {
        return Err(LossError::ShapeMismatch);
    }
    let sum: f64 = rendered.iter().zip(observed).map(|(r, o)| (r - o).abs()).sum();
    Ok(match reduction {
        LossReduction::MeanPerPixel => sum / (rendered.len() / 3) as f64,
        LossReduction::Sum => sum,
    })
}

/// L1 subgradient with respect to `rendered` (zero exactly at ties).
pub fn photometric_loss_backward(
    rendered: &[f64],
    observed: &[f64],
    reduction: LossReduction,
) -> Result<Vec<f64>, LossError> {
    if rendered.len() != observed.len() || rendered.len() % 3 != 0 {
        return Err(LossError::ShapeMismatch);
    }
    let scale = match reduction {
        LossReduction::MeanPerPixel => 1.0 / (rendered.len() / 3) as f64,
        LossReduction::Sum => 1.0,
    };
    Ok(rendered
        .iter()
        .zip(observed)
        .map(|(r, o)| {
            let d = r - o;
            if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            }
        })
        .collect())
}

/// Mean norm of the valid points, the scale-normalization factor.
fn mean_norm(points: &[Vector3<f64>], valid: &[bool]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, &v) in points.iter().zip(valid) {
        if v {
            sum += p.norm();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Scale-normalized point-map regression: mean over valid pixels of
/// `|| P_i / z - Phat_i / zhat ||` with `z`, `zhat` the mean norms of the
/// respective valid points. Invariant under positive rescaling of either
/// argument by construction.
pub fn pointmap_regression_loss(
    predicted: &[Vector3<f64>],
    target: &[Vector3<f64>],
    valid: &[bool],
) -> Result<f64, LossError> {
    if predicted.len() != target.len() || predicted.len() != valid.len() {
        return Err(LossError::ShapeMismatch);
    }
    let z = mean_norm(predicted, valid).ok_or(LossError::NoValidPixels)?;
    let zh = mean_norm(target, valid).ok_or(LossError::NoValidPixels)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, t), &v) in predicted.iter().zip(target).zip(valid) {
        if v {
            sum += (p / z - t / zh).norm();
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Per-pixel normalized residual norms `|| P_i / z - Phat_i / zhat ||`,
/// feeding the confidence objective.
pub fn normalized_residuals(
    predicted: &[Vector3<f64>],
    target: &[Vector3<f64>],
    valid: &[bool],
) -> Result<Vec<f64>, LossError> {
    if predicted.len() != target.len() || predicted.len() != valid.len() {
        return Err(LossError::ShapeMismatch);
    }
    let z = mean_norm(predicted, valid).ok_or(LossError::NoValidPixels)?;
    let zh = mean_norm(target, valid).ok_or(LossError::NoValidPixels)?;
    Ok(predicted
        .iter()
        .zip(target)
        .zip(valid)
        .map(|((p, t), &v)| if v { (p / z - t / zh).norm() } else { 0.0 })
        .collect())
}

/// Gradient of `sum_i w_i || P_i / z - Phat_i / zhat ||` with respect to the
/// predictions, including the chain through the normalization factor
/// `z = mean |P|`.
pub fn weighted_residual_backward(
    predicted: &[Vector3<f64>],
    target: &[Vector3<f64>],
    valid: &[bool],
    weights: &[f64],
) -> Result<Vec<Vector3<f64>>, LossError> {
    if predicted.len() != target.len() || predicted.len() != valid.len() || predicted.len() != weights.len() {
        return Err(LossError::ShapeMismatch);
    }
    let z = mean_norm(predicted, valid).ok_or(LossError::NoValidPixels)?;
    let zh = mean_norm(target, valid).ok_or(LossError::NoValidPixels)?;
    let n = valid.iter().filter(|v| **v).count() as f64;

    // s = sum_i w_i ahat_i . P_i feeds the dz chain.
    let mut s = 0.0;
    let mut unit_residuals = alloc::vec![Vector3::zeros(); predicted.len()];
    for (i, ((p, t), &v)) in predicted.iter().zip(target).zip(valid).enumerate() {
        if !v {
            continue;
        }
        let a = p / z - t / zh;
        let an = a.norm();
        if an > 0.0 {
            let ahat = a / an;
            unit_residuals[i] = ahat;
            s += weights[i] * ahat.dot(p);
        }
    }

    let mut grads = alloc::vec![Vector3::zeros(); predicted.len()];
    for (i, (p, &v)) in predicted.iter().zip(valid).enumerate() {
        if !v {
            continue;
        }
        let pn = p.norm();
        let phat = if pn > 0.0 { p / pn } else { Vector3::zeros() };
        grads[i] = unit_residuals[i] * (weights[i] / z) - phat * (s / (n * z * z));
    }
    Ok(grads)
}

/// Exact gradient of [`pointmap_regression_loss`] with respect to the
/// predicted points, including the path through the normalization factor.
pub fn pointmap_regression_loss_backward(
    predicted: &[Vector3<f64>],
    target: &[Vector3<f64>],
    valid: &[bool],
) -> Result<Vec<Vector3<f64>>, LossError> {
    let n = valid.iter().filter(|v| **v).count();
    if n == 0 {
        return Err(LossError::NoValidPixels);
    }
    let weights = alloc::vec![1.0 / n as f64; predicted.len()];
    weighted_residual_backward(predicted, target, valid, &weights)
}

/// Confidence-weighted objective `sum_i O_i L_i - w_conf log O_i` over valid
/// pixels.
pub fn confidence_loss(
    confidence: &[f64],
    per_pixel_losses: &[f64],
    valid: &[bool],
    w_conf: f64,
) -> Result<f64, LossError> {
    if confidence.len() != per_pixel_losses.len() || confidence.len() != valid.len() {
        return Err(LossError::ShapeMismatch);
    }
    let mut total = 0.0;
    for (i, ((&o, &l), &v)) in confidence.iter().zip(per_pixel_losses).zip(valid).enumerate() {
        if !v {
            continue;
        }
        if o <= 0.0 {
            return Err(LossError::NonPositiveConfidence { index: i, value: o });
        }
        total += o * l - w_conf * o.ln();
    }
    Ok(total)
}

/// Gradients of [`confidence_loss`] with respect to the confidences and the
/// per-pixel losses.
pub fn confidence_loss_backward(
    confidence: &[f64],
    per_pixel_losses: &[f64],
    valid: &[bool],
    w_conf: f64,
) -> Result<(Vec<f64>, Vec<f64>), LossError> {
    if confidence.len() != per_pixel_losses.len() || confidence.len() != valid.len() {
        return Err(LossError::ShapeMismatch);
    }
    let mut d_conf = alloc::vec![0.0; confidence.len()];
    let mut d_loss = alloc::vec![0.0; confidence.len()];
    for (i, ((&o, &l), &v)) in confidence.iter().zip(per_pixel_losses).zip(valid).enumerate() {
        if !v {
            continue;
        }
        if o <= 0.0 {
            return Err(LossError::NonPositiveConfidence { index: i, value: o });
        }
        d_conf[i] = l - w_conf / o;
        d_loss[i] = o;
    }
    Ok((d_conf, d_loss))
}
