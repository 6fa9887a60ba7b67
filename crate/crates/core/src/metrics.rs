//! Losses and error metrics.

use crate::autodiff::Var;
use crate::error::{GdeError, Result};
use crate::tensor::Tensor;

/// Mean of squared elementwise differences, on the tape.
pub fn mse<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(GdeError::shape("mse", pred.shape(), target.shape()));
    }
    let diff = pred.sub(&pred.tape().constant(target.clone()))?;
    Ok(diff.hadamard(&diff)?.mean())
}

pub fn mse_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.ensure_same_shape(target, "mse")?;
    let s: f64 = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

fn check_sequences(targets: &[Tensor], preds: &[Tensor], op: &'static str) -> Result<usize> {
    if targets.len() != preds.len() {
        return Err(GdeError::Contract(format!(
            "{op}: {} targets but {} predictions",
            targets.len(),
            preds.len()
        )));
    }
    if targets.is_empty() {
        return Err(GdeError::Contract(format!("{op}: empty sequence")));
    }
    let p = targets[0].len();
    for (y, yh) in targets.iter().zip(preds) {
        y.ensure_same_shape(yh, op)?;
        y.ensure_same_shape(&targets[0], op)?;
    }
    Ok(p)
}

fn relative_errors<'a>(
    targets: &'a [Tensor],
    preds: &'a [Tensor],
) -> impl Iterator<Item = Result<(usize, f64)>> + 'a {
    targets.iter().zip(preds).enumerate().flat_map(|(t, (y, yh))| {
        y.data.iter().zip(&yh.data).enumerate().map(move |(index, (&y, &yh))| {
            if y == 0.0 {
                Err(GdeError::ZeroTarget { t, index })
            } else {
                Ok((index, (y - yh) / y))
            }
        })
    })
}

/// `(100 / pT) · ‖Σ_t (y_t − ŷ_t) ⊘ y_t‖₁`: signed relative errors are
/// summed over time before the norm, so opposite errors cancel.
pub fn mape(targets: &[Tensor], preds: &[Tensor]) -> Result<f64> {
    let p = check_sequences(targets, preds, "mape")?;
    let mut acc = vec![0.0; p];
    for e in relative_errors(targets, preds) {
        let (i, r) = e?;
        acc[i] += r;
    }
    let norm: f64 = acc.iter().map(|x| x.abs()).sum();
    Ok(100.0 * norm / (p * targets.len()) as f64)
}

/// Conventional MAPE: mean of absolute relative errors, in percent.
pub fn mape_abs(targets: &[Tensor], preds: &[Tensor]) -> Result<f64> {
    let p = check_sequences(targets, preds, "mape_abs")?;
    let mut total = 0.0;
    for e in relative_errors(targets, preds) {
        total += e?.1.abs();
    }
    Ok(100.0 * total / (p * targets.len()) as f64)
}

/// `(1/p) · ‖sqrt((1/T) Σ_t (y_t − ŷ_t)²)‖₁`.
pub fn rmse(targets: &[Tensor], preds: &[Tensor]) -> Result<f64> {
    let p = check_sequences(targets, preds, "rmse")?;
    let mut acc = vec![0.0; p];
    for (y, yh) in targets.iter().zip(preds) {
        for (i, (a, b)) in y.data.iter().zip(&yh.data).enumerate() {
            acc[i] += (a - b) * (a - b);
        }
    }
    let t = targets.len() as f64;
    Ok(acc.iter().map(|s| (s / t).sqrt()).sum::<f64>() / p as f64)
}

/// Fraction of masked rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<f64> {
    if labels.len() != logits.rows || mask.len() != logits.rows {
        return Err(GdeError::Contract(format!(
            "accuracy: {} rows, {} labels, {} mask entries",
            logits.rows,
            labels.len(),
            mask.len()
        )));
    }
    let pred = logits.argmax_rows();
    let (mut hit, mut total) = (0usize, 0usize);
    for i in (0..logits.rows).filter(|&i| mask[i]) {
        total += 1;
        hit += usize::from(pred[i] == labels[i]);
    }
    if total == 0 {
        return Err(GdeError::Contract("accuracy over an empty mask".into()));
    }
    Ok(hit as f64 / total as f64)
}
