//! Binary cross-entropy on clamped probabilities.

pub const PROB_EPS: f64 = 1e-7;

pub fn bce_loss(prob: f64, label: u8) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean BCE over a batch.
pub fn bce_batch(probs: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    let total: f64 = probs.iter().zip(labels).map(|(&p, &y)| bce_loss(p, y)).sum();
    total / probs.len() as f64
}

/// Gradient of the per-sample loss with respect to the logit.
pub fn bce_logit_grad(prob: f64, label: u8) -> f64 {
    prob - f64::from(label)
}
