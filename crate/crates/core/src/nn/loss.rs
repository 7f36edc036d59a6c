/// Two-class cross-entropy: `-log softmax(logits)[label]`.
pub fn binary_cross_entropy(logits: [f64; 2], label: u8) -> f64 {
    let max = logits[0].max(logits[1]);
    let lse = max + ((logits[0] - max).exp() + (logits[1] - max).exp()).ln();
    lse - logits[label as usize]
}

/// Gradient of [`binary_cross_entropy`] with respect to the logits.
pub fn binary_cross_entropy_grad(logits: [f64; 2], label: u8) -> [f64; 2] {
    let max = logits[0].max(logits[1]);
    let e0 = (logits[0] - max).exp();
    let e1 = (logits[1] - max).exp();
    let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
    if label == 0 {
        [p0 - 1.0, p1]
    } else {
        [p0, p1 - 1.0]
    }
}

/// Mean cross-entropy of one row of logits over a set of target classes.
pub fn softmax_cross_entropy(logits: &[f64], targets: &[usize]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let lse = max + sum.ln();
    let n = targets.len().max(1) as f64;
    let loss = targets.iter().map(|&t| lse - logits[t]).sum::<f64>() / n;
    let mut grad: Vec<f64> = exp.iter().map(|e| e / sum * targets.len() as f64 / n).collect();
    for &t in targets {
        grad[t] -= 1.0 / n;
    }
    (loss, grad)
}
