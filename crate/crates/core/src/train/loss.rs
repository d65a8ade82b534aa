use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Row-wise log-softmax with max subtraction.
fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Mean negative log-likelihood of `labels` under softmax of `logits`
/// `[batch × classes]`.
pub fn cross_entropy(tape: &mut Tape, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = match logits.shape() {
        [b, c] => (*b, *c),
        other => return Err(Error::dim("cross_entropy", other, &[labels.len()])),
    };
    if labels.len() != b {
        return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut logp = vec![0.0; b * c];
    for (row, out) in logits.data().chunks(c).zip(logp.chunks_mut(c)) {
        log_softmax_row(row, out);
    }
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(i, &l)| logp[i * c + l])
        .sum::<f64>()
        / b as f64;
    let labels = labels.to_vec();
    Ok(tape.record(&[logits], &[1], vec![loss], move |g| {
        let k = g[0] / b as f64;
        let mut gx: Vec<f64> = logp.iter().map(|lp| lp.exp() * k).collect();
        for (i, &l) in labels.iter().enumerate() {
            gx[i * c + l] -= k;
        }
        vec![Some(gx)]
    }))
}

/// Per-row argmax, first index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().expect("non-empty shape");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut tape = Tape::new();
        let x = Tensor::new(&[2, 4], vec![0.3; 8]).unwrap();
        let l = cross_entropy(&mut tape, &x, &[0, 3]).unwrap();
        assert!((l.item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logit_gives_zero_loss() {
        let mut tape = Tape::new();
        let x = Tensor::new(&[1, 3], vec![0.0, 1000.0, 0.0]).unwrap();
        let l = cross_entropy(&mut tape, &x, &[1]).unwrap();
        assert!(l.item().abs() < 1e-12);
        assert!(l.item().is_finite());
    }

    #[test]
    fn bad_labels_are_data_errors() {
        let mut tape = Tape::new();
        let x = Tensor::new(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            cross_entropy(&mut tape, &x, &[3]),
            Err(Error::Data(_))
        ));
        assert!(cross_entropy(&mut tape, &x, &[0, 1]).is_err());
    }

    #[test]
    fn gradient_matches_softmax_minus_onehot() {
        let x = Tensor::param(&[1, 2], vec![0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let l = cross_entropy(&mut tape, &x, &[0]).unwrap();
        tape.backward(&l).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[-0.5, 0.5]);
    }
}
