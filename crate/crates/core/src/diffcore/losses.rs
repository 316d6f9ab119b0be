//! Scalar loss definitions shared by the tape ops and by reporting code.

use crate::error::{Error, Result};

use super::graph::PROB_FLOOR;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Binary cross-entropy `−[y·ln p + (1−y)·ln(1−p)]`.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub(crate) fn bce_grad(p: f64, y: f64) -> f64 {
    if p < PROB_FLOOR || p > 1.0 - PROB_FLOOR {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}

/// Next-token prediction loss: mean over steps of `−ln p_t(target_t)`.
pub fn ntp_loss(step_dists: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Precondition("ntp_loss needs a non-empty target sequence".into()));
    }
    if step_dists.len() != targets.len() {
        return Err(Error::shape(
            "ntp_loss",
            format!("{} distributions for {} targets", step_dists.len(), targets.len()),
        ));
    }
    let mut total = 0.0;
    for (dist, &t) in step_dists.iter().zip(targets) {
        let p = *dist.get(t).ok_or(Error::TokenOutOfRange {
            id: t,
            size: dist.len(),
        })?;
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(total / targets.len() as f64)
}
