use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar loss terms of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ctc: f64,
    pub l_att: Option<f64>,
    pub l_asr: f64,
    pub l_sim: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub lambda: f64,
    /// α·l_ctc + (1−α)·l_att of each branch, in branch order.
    pub l_asr_branch: Vec<f64>,
}

fn check_weights(alpha: f64, lambda: f64, has_att: bool) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("lambda {lambda} must be non-negative")));
    }
    if alpha < 1.0 && !has_att {
        return Err(Error::config(
            "alpha < 1 needs an attention loss; enable the decoder or set alpha = 1",
        ));
    }
    Ok(())
}

fn asr(alpha: f64, ctc: f64, att: Option<f64>) -> f64 {
    match att {
        Some(a) if alpha < 1.0 => alpha * ctc + (1.0 - alpha) * a,
        _ => ctc,
    }
}

/// Joint ASR loss and the final loss from already averaged terms.
pub fn combine_losses(l_ctc: f64, l_att: Option<f64>, l_sim: f64, alpha: f64, lambda: f64) -> Result<LossBreakdown> {
    LossBreakdown::from_branches(&[(l_ctc, l_att)], l_sim, alpha, lambda)
}

impl LossBreakdown {
    /// Per-branch (l_ctc, l_att) pairs are averaged term by term.
    pub fn from_branches(branches: &[(f64, Option<f64>)], l_sim: f64, alpha: f64, lambda: f64) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::config("no branches to combine"));
        }
        let has_att = branches.iter().all(|b| b.1.is_some());
        check_weights(alpha, lambda, has_att)?;
        let n = branches.len() as f64;
        let l_ctc = branches.iter().map(|b| b.0).sum::<f64>() / n;
        let l_att = has_att.then(|| branches.iter().filter_map(|b| b.1).sum::<f64>() / n);
        let l_asr = asr(alpha, l_ctc, l_att);
        Ok(Self {
            l_ctc,
            l_att,
            l_asr,
            l_sim,
            l_total: l_asr + lambda * l_sim,
            alpha,
            lambda,
            l_asr_branch: branches.iter().map(|&(c, a)| asr(alpha, c, a)).collect(),
        })
    }

    /// Largest deviation from the two reconstruction identities.
    pub fn identity_error(&self) -> f64 {
        let asr_err = (self.l_asr - asr(self.alpha, self.l_ctc, self.l_att)).abs();
        let total_err = (self.l_total - (self.l_asr + self.lambda * self.l_sim)).abs();
        asr_err.max(total_err)
    }
}
