//! Training objectives.

use numkit::{Tape, Tensor, Var};

use crate::error::{QgError, Result};

/// Label-smoothed cross-entropy averaged over kept positions: the target
/// class gets `1 - eps`, every other class `eps / (V - 1)`.
pub fn label_smoothed_nll(
    tape: &mut Tape,
    logits: Var,
    targets: &[u32],
    eps: f64,
    keep: Option<&[bool]>,
) -> Result<Var> {
    let (k, v) = (tape.value(logits).rows(), tape.value(logits).cols());
    if targets.len() != k {
        return Err(QgError::Alignment(format!(
            "{} targets for {k} logit rows",
            targets.len()
        )));
    }
    let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
    let mut q = vec![0.0; k * v];
    let mut kept = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if keep.is_some_and(|m| !m[i]) {
            continue;
        }
        let t = t as usize;
        if t >= v {
            return Err(QgError::Decode { id: t as u32, size: v });
        }
        kept += 1;
        q[i * v..(i + 1) * v].fill(off);
        q[i * v + t] = 1.0 - eps;
    }
    if kept == 0 {
        return Err(QgError::EmptyInput("no target positions to score".into()));
    }
    let logp = tape.log_softmax_rows(logits);
    let q = tape.constant(Tensor::new(vec![k, v], q)?);
    let prod = tape.mul(q, logp)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0 / kept as f64))
}

/// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let n = tape.value(logits).numel();
    if labels.len() != n || n == 0 {
        return Err(QgError::Alignment(format!(
            "{} labels for {n} sentence logits",
            labels.len()
        )));
    }
    let shape = tape.value(logits).shape().to_vec();
    let pos: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    let neg: Vec<f64> = pos.iter().map(|y| 1.0 - y).collect();
    let pos = tape.constant(Tensor::new(shape.clone(), pos)?);
    let neg = tape.constant(Tensor::new(shape, neg)?);
    let lp = tape.log_sigmoid(logits);
    let flipped = tape.scale(logits, -1.0);
    let ln = tape.log_sigmoid(flipped);
    let a = tape.mul(pos, lp)?;
    let b = tape.mul(neg, ln)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// `lambda * ct + (1 - lambda) * nll`.
pub fn composite_loss(tape: &mut Tape, nll: Var, ct: Var, lambda: f64) -> Result<Var> {
    let a = tape.scale(ct, lambda);
    let b = tape.scale(nll, 1.0 - lambda);
    Ok(tape.add(a, b)?)
}

/// Binary cross-entropy from probabilities; reference form of the
/// supporting-fact loss.
pub fn bce_from_probs(probs: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| if y == 1 { p.ln() } else { (1.0 - p).ln() })
        .sum();
    -total / probs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn logits(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn perfect_prediction_without_smoothing() {
        let mut tape = Tape::new();
        let l = logits(&mut tape, &[vec![0.0, 800.0, 0.0]]);
        let loss = label_smoothed_nll(&mut tape, l, &[1], 0.0, None).unwrap();
        assert_abs_diff_eq!(tape.value(loss).item().unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let mut tape = Tape::new();
        let l = logits(&mut tape, &[vec![0.3; 7], vec![-2.0; 7]]);
        let loss = label_smoothed_nll(&mut tape, l, &[2, 5], 0.0, None).unwrap();
        assert_abs_diff_eq!(tape.value(loss).item().unwrap(), 7f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn smoothed_scalar_value() {
        // Independent value: 0.678515231419189 (high-precision evaluation).
        let mut tape = Tape::new();
        let l = logits(&mut tape, &[vec![1.0, 2.0, 0.5, -1.0]]);
        let loss = label_smoothed_nll(&mut tape, l, &[1], 0.1, None).unwrap();
        assert_abs_diff_eq!(tape.value(loss).item().unwrap(), 0.678515231419189, epsilon = 1e-12);
    }

    #[test]
    fn masked_positions_are_ignored() {
        let mut tape = Tape::new();
        let l = logits(&mut tape, &[vec![0.0, 0.0], vec![5.0, -5.0]]);
        let loss = label_smoothed_nll(&mut tape, l, &[0, 1], 0.0, Some(&[true, false])).unwrap();
        assert_abs_diff_eq!(tape.value(loss).item().unwrap(), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn bce_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let loss = bce_with_logits(&mut tape, z, &[1, 0, 1]).unwrap();
        assert_abs_diff_eq!(tape.value(loss).item().unwrap(), 2f64.ln(), epsilon = 1e-12);

        let probs: [f64; 4] = [0.9, 0.8, 0.1, 0.2];
        let labels = [1, 1, 0, 0];
        assert_abs_diff_eq!(bce_from_probs(&probs, &labels), 0.164252033486018, epsilon = 1e-12);
        let logits: Vec<f64> = probs.iter().map(|p| (p / (1.0 - p)).ln()).collect();
        let z = tape.constant(Tensor::vector(logits));
        let loss = bce_with_logits(&mut tape, z, &labels).unwrap();
        assert_abs_diff_eq!(tape.value(loss).item().unwrap(), 0.164252033486018, epsilon = 1e-12);

        let z = tape.constant(Tensor::vector(vec![60.0, -60.0]));
        let loss = bce_with_logits(&mut tape, z, &[1, 0]).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-20);
    }

    #[test]
    fn composite_is_convex_combination() {
        let mut tape = Tape::new();
        let nll = tape.constant(Tensor::scalar(2.0));
        let ct = tape.constant(Tensor::scalar(0.4));
        for (lambda, expect) in [(0.0, 2.0), (1.0, 0.4), (0.5, 1.2)] {
            let c = composite_loss(&mut tape, nll, ct, lambda).unwrap();
            assert_abs_diff_eq!(tape.value(c).item().unwrap(), expect, epsilon = 1e-15);
        }
    }
}
