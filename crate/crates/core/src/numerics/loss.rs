use crate::error::{Error, Result};
use crate::numerics::layers::softmax_in_place;
use crate::numerics::tensor::Tensor;

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    if logits.ndim() != 2 || logits.rows() != labels.len() {
        return Err(Error::dim(format!(
            "cross entropy: logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(classes)
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(b, &y)| {
            let row = logits.row(b);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Loss plus its gradient w.r.t. the logits: `(softmax - onehot) / B`.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let loss = cross_entropy_loss(logits, labels)?;
    let classes = logits.shape()[1];
    let scale = 1.0 / labels.len() as f64;
    let mut grad = logits.data().to_vec();
    for (row, &y) in grad.chunks_exact_mut(classes).zip(labels) {
        softmax_in_place(row);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_binary_is_ln2() {
        let logits = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let l = cross_entropy_loss(&logits, &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_correct_is_zero() {
        let mut row = vec![0.0; 10];
        row[3] = 1000.0;
        let logits = Tensor::from_rows(&[row]).unwrap();
        let l = cross_entropy_loss(&logits, &[3]).unwrap();
        assert!(l.abs() < 1e-12 && l.is_finite());
    }

    #[test]
    fn out_of_range_label() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            cross_entropy_loss(&logits, &[3]),
            Err(Error::Input(_))
        ));
    }
}
