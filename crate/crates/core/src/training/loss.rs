//! Next-token cross-entropy with teacher forcing.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::{s as sc, Scalar};
use crate::vocab::PAD;

/// Mean cross-entropy of `logits[t]` against `target[t + 1]`, skipping
/// positions whose label is `<pad>`. Returns the loss and d(logits) for
/// that mean. All-pad targets yield loss 0 and zero gradient.
pub fn cross_entropy<S: Scalar>(logits: &Array2<S>, target: &[u32]) -> Result<(f64, Array2<S>)> {
    let (rows, classes) = logits.dim();
    if target.len() != rows + 1 {
        return Err(Error::shape(format!(
            "{rows} logit rows need {} target tokens, got {}",
            rows + 1,
            target.len()
        )));
    }
    let labels = &target[1..];
    let counted = labels.iter().filter(|&&l| l != PAD).count();
    let mut dlogits = Array2::zeros((rows, classes));
    if counted == 0 {
        return Ok((0.0, dlogits));
    }
    let inv = 1.0 / counted as f64;
    let mut loss = 0.0;
    for (t, &label) in labels.iter().enumerate() {
        if label == PAD {
            continue;
        }
        let label = label as usize;
        if label >= classes {
            return Err(Error::bounds(format!(
                "label {label} outside {classes} classes at position {t}"
            )));
        }
        let row = logits.row(t);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
        let mut z = 0.0;
        for &v in row.iter() {
            z += (v.as_f64() - max).exp();
        }
        let lse = max + z.ln();
        loss += (lse - logits[[t, label]].as_f64()) * inv;
        for (c, &v) in row.iter().enumerate() {
            let p = (v.as_f64() - max).exp() / z;
            let grad = (p - f64::from(c == label)) * inv;
            dlogits[[t, c]] = sc(grad);
        }
    }
    Ok((loss, dlogits))
}
