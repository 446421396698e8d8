//! Similarity metrics, their analytic gradients, the CTC spike filter and the
//! spike-triggered similarity loss between the two Siamese branches.

use serde::{Deserialize, Serialize};

use crate::ctc::PeakScoreMode;
use crate::error::{Error, Result};
use crate::tensor::DiffTensor;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(op: &'static str, z1: &[f64], z2: &[f64]) -> Result<()> {
    if z1.len() != z2.len() || z1.is_empty() {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![z1.len()],
            right: vec![z2.len()],
        });
    }
    Ok(())
}

/// z1·z2 / (‖z1‖‖z2‖).
pub fn cosine_sim(z1: &[f64], z2: &[f64]) -> Result<f64> {
    check_pair("cosine_sim", z1, z2)?;
    let (n1, n2) = (norm(z1), norm(z2));
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim"));
    }
    Ok(dot(z1, z2) / (n1 * n2))
}

/// ∂S_cs/∂z1:
/// (z2_j‖z1‖ − z1_j (z1·z2)/‖z1‖) / (‖z1‖² ‖z2‖).
pub fn cosine_grad(z1: &[f64], z2: &[f64]) -> Result<Vec<f64>> {
    check_pair("cosine_grad", z1, z2)?;
    let (n1, n2) = (norm(z1), norm(z2));
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::ZeroNorm("cosine_grad"));
    }
    let d = dot(z1, z2);
    Ok(z1
        .iter()
        .zip(z2)
        .map(|(&a, &b)| (b * n1 - a * d / n1) / (n1 * n1 * n2))
        .collect())
}

fn check_distribution(z: &[f64]) -> Result<()> {
    if let Some(v) = z.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::NotDistribution(format!("component {v} is not positive")));
    }
    let s: f64 = z.iter().sum();
    if (s - 1.0).abs() > 1e-8 {
        return Err(Error::NotDistribution(format!("components sum to {s}")));
    }
    Ok(())
}

/// Σ_j z1_j log(z1_j / z2_j).
pub fn kl_sim(z1: &[f64], z2: &[f64]) -> Result<f64> {
    check_pair("kl_sim", z1, z2)?;
    check_distribution(z1)?;
    check_distribution(z2)?;
    Ok(z1.iter().zip(z2).map(|(&a, &b)| a * (a.ln() - b.ln())).sum())
}

/// Per-component gradient log z1_j + 1 − log z2_j − z1_j/z2_j.
///
/// This is the derivative of KL(z1‖z2) when component j of both
/// distributions moves together (the sum of the partials with respect to
/// z1_j and z2_j), which vanishes exactly when z1_j = z2_j.
pub fn kl_grad(z1: &[f64], z2: &[f64]) -> Result<Vec<f64>> {
    check_pair("kl_grad", z1, z2)?;
    check_distribution(z1)?;
    check_distribution(z2)?;
    Ok(z1
        .iter()
        .zip(z2)
        .map(|(&a, &b)| a.ln() + 1.0 - b.ln() - a / b)
        .collect())
}

/// Row-wise cosine similarity of two `T × D` tensors, shape `T × 1`.
pub fn cosine_rows<'t>(z1: &DiffTensor<'t>, z2: &DiffTensor<'t>) -> Result<DiffTensor<'t>> {
    if z1.shape() != z2.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_rows",
            left: z1.shape(),
            right: z2.shape(),
        });
    }
    let dot = z1.mul(z2)?.sum_axis(1)?;
    let n1 = z1.mul(z1)?.sum_axis(1)?;
    let n2 = z2.mul(z2)?.sum_axis(1)?;
    if n1.values().iter().chain(n2.values().iter()).any(|&v| v == 0.0) {
        return Err(Error::ZeroNorm("cosine_rows"));
    }
    dot.div(&n1.mul(&n2)?.sqrt()?)
}

/// Row-wise KL(p‖q) from log-probabilities, shape `T × 1`.
pub fn kl_rows<'t>(log_p: &DiffTensor<'t>, log_q: &DiffTensor<'t>) -> Result<DiffTensor<'t>> {
    if log_p.shape() != log_q.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_rows",
            left: log_p.shape(),
            right: log_q.shape(),
        });
    }
    log_p.exp().mul(&log_p.sub(log_q)?)?.sum_axis(1)
}

/// Taped KL(z1‖z2) over probability tensors.
pub fn kl_sim_tensor<'t>(z1: &DiffTensor<'t>, z2: &DiffTensor<'t>) -> Result<DiffTensor<'t>> {
    Ok(z1.mul(&z1.log()?.sub(&z2.log()?)?)?.sum())
}

/// How spike frames are picked out of the per-frame peak scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    /// Sign formula over zero-padded left/right shifts; flags every strict
    /// local extremum, minima included.
    #[default]
    PaperExact,
    /// P[t−1] < P[t] > P[t+1] with −∞ beyond the ends.
    StrictMax,
}

impl DetectionMode {
    pub fn name(&self) -> &'static str {
        match self {
            DetectionMode::PaperExact => "paper_exact",
            DetectionMode::StrictMax => "strict_max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper_exact" => Ok(Self::PaperExact),
            "strict_max" => Ok(Self::StrictMax),
            other => Err(Error::config(format!("unknown spike detection mode `{other}`"))),
        }
    }
}

/// Spike indicator of one utterance on one branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeMask {
    pub indicator: Vec<bool>,
    /// 1 or 2.
    pub branch: u8,
    pub mode: DetectionMode,
}

impl SpikeMask {
    pub fn detect(scores: &[f64], mode: DetectionMode, branch: u8) -> Self {
        Self {
            indicator: spike_filter(scores, mode),
            branch,
            mode,
        }
    }

    pub fn count(&self) -> usize {
        self.indicator.iter().filter(|&&s| s).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        spike_indices(&self.indicator)
    }
}

pub fn spike_indices(indicator: &[bool]) -> Vec<usize> {
    indicator
        .iter()
        .enumerate()
        .filter_map(|(t, &s)| s.then_some(t))
        .collect()
}

/// sign with sign(0) = 0.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Spike indicator for one sequence of per-frame scores.
pub fn spike_filter(scores: &[f64], mode: DetectionMode) -> Vec<bool> {
    let n = scores.len();
    match mode {
        DetectionMode::PaperExact => {
            let mut left = vec![0.0; n];
            let mut right = vec![0.0; n];
            if n > 1 {
                left[1..].copy_from_slice(&scores[..n - 1]);
                right[..n - 1].copy_from_slice(&scores[1..]);
            }
            scores
                .iter()
                .zip(left.iter().zip(&right))
                .map(|(&p, (&l, &r))| {
                    let sp = -(sign(sign((l - p) * (p - r)) + 0.1) - 1.0) / 2.0;
                    sp == 1.0
                })
                .collect()
        }
        DetectionMode::StrictMax => (0..n)
            .map(|t| {
                let l = if t > 0 { scores[t - 1] } else { f64::NEG_INFINITY };
                let r = if t + 1 < n { scores[t + 1] } else { f64::NEG_INFINITY };
                l < scores[t] && scores[t] > r
            })
            .collect(),
    }
}

/// Spike filter over a padded batch (one row per utterance, zeros past each
/// length). Padded frames are never spikes.
pub fn spike_filter_batch(scores: &[Vec<f64>], lengths: &[usize], mode: DetectionMode) -> Vec<Vec<bool>> {
    scores
        .iter()
        .zip(lengths)
        .map(|(row, &len)| {
            let mut sp = spike_filter(row, mode);
            let end = len.min(sp.len());
            sp[end..].iter_mut().for_each(|s| *s = false);
            sp
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    Kl,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    #[default]
    AllFrames,
    CtcOneDirection,
    CtcBidirectional,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimTarget {
    #[default]
    CtcPosterior,
    EncoderHidden,
}

macro_rules! named_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+ $(,)?) => {
        impl $ty {
            pub fn name(&self) -> &'static str {
                match self { $($variant => $name),+ }
            }

            pub fn parse(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::config(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

named_enum!(Metric, "similarity metric", Metric::Cosine => "cosine", Metric::Kl => "kl");
named_enum!(Trigger, "similarity trigger",
    Trigger::AllFrames => "all_frames",
    Trigger::CtcOneDirection => "ctc_one_direction",
    Trigger::CtcBidirectional => "ctc_bidirectional");
named_enum!(SimTarget, "similarity target",
    SimTarget::CtcPosterior => "ctc_posterior",
    SimTarget::EncoderHidden => "encoder_hidden");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub metric: Metric,
    pub trigger: Trigger,
    pub target: SimTarget,
    pub stop_gradient: bool,
    pub peak_mode: PeakScoreMode,
    pub detection: DetectionMode,
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.metric == Metric::Kl && self.target != SimTarget::CtcPosterior {
            return Err(Error::config("kl similarity needs the CTC posterior as its target"));
        }
        Ok(())
    }
}

/// Summed per-frame dissimilarity over one set of frames.
#[derive(Clone, Copy, Debug)]
pub struct SimTerm<'t> {
    pub sum: Option<DiffTensor<'t>>,
    pub frames: usize,
}

/// The one or two terms of the similarity loss for one utterance, before
/// averaging. Batches pool `sum` and `frames` across utterances.
#[derive(Clone, Debug)]
pub struct SimPartial<'t> {
    pub terms: Vec<SimTerm<'t>>,
}

/// Averaging weight per term: 1 / (frames × nonempty terms), 0 for empty terms.
pub fn term_weights(frames: &[usize]) -> Vec<f64> {
    let nonempty = frames.iter().filter(|&&n| n > 0).count();
    frames
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { 1.0 / (n as f64 * nonempty as f64) })
        .collect()
}

impl<'t> SimPartial<'t> {
    pub fn frame_counts(&self) -> Vec<usize> {
        self.terms.iter().map(|t| t.frames).collect()
    }

    /// Σ_k weight_k · sum_k, or `None` when every term is empty.
    pub fn weighted(&self, weights: &[f64]) -> Option<DiffTensor<'t>> {
        let mut acc: Option<DiffTensor<'t>> = None;
        for (term, &w) in self.terms.iter().zip(weights) {
            if let Some(s) = term.sum {
                let part = s.scale(w);
                acc = Some(match acc {
                    None => part,
                    Some(a) => a.add(&part).expect("scalar shapes"),
                });
            }
        }
        acc
    }
}

fn frame_dissimilarity<'t>(
    spiking: &DiffTensor<'t>,
    counterpart: &DiffTensor<'t>,
    frames: &[usize],
    cfg: &SimilarityConfig,
) -> Result<SimTerm<'t>> {
    if frames.is_empty() {
        return Ok(SimTerm { sum: None, frames: 0 });
    }
    let counterpart = if cfg.stop_gradient {
        counterpart.detach()
    } else {
        *counterpart
    };
    let a = spiking.select_rows(frames)?;
    let c = counterpart.select_rows(frames)?;
    let per_frame = match cfg.metric {
        Metric::Cosine => cosine_rows(&a, &c)?.neg(),
        Metric::Kl => kl_rows(&a, &c)?.add(&kl_rows(&c, &a)?)?.scale(0.5),
    };
    Ok(SimTerm {
        sum: Some(per_frame.sum()),
        frames: frames.len(),
    })
}

/// Per-utterance similarity terms given the spike indicators of both branches.
///
/// With the cosine metric `z1`, `z2` are the compared vectors (posterior
/// probabilities or hidden states); with KL they are log-probabilities.
/// Only frames selected by the trigger ever reach the metric.
pub fn sim_partial<'t>(
    z1: &DiffTensor<'t>,
    z2: &DiffTensor<'t>,
    sp1: &[bool],
    sp2: &[bool],
    cfg: &SimilarityConfig,
) -> Result<SimPartial<'t>> {
    cfg.validate()?;
    let shape = z1.shape();
    if shape != z2.shape() || shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "sim_loss",
            left: shape,
            right: z2.shape(),
        });
    }
    let frames = shape[0];
    if sp1.len() != frames || sp2.len() != frames {
        return Err(Error::ShapeMismatch {
            op: "sim_loss spikes",
            left: vec![sp1.len(), sp2.len()],
            right: vec![frames],
        });
    }
    if cfg.metric == Metric::Kl {
        for z in [z1, z2] {
            let v = z.values();
            for row in v.chunks(shape[1]) {
                let s: f64 = row.iter().map(|l| l.exp()).sum();
                if (s - 1.0).abs() > 1e-8 {
                    return Err(Error::NotDistribution(format!(
                        "kl similarity row sums to {s}"
                    )));
                }
            }
        }
    }
    let terms = match cfg.trigger {
        Trigger::AllFrames => {
            let all: Vec<usize> = (0..frames).collect();
            vec![frame_dissimilarity(z1, z2, &all, cfg)?]
        }
        Trigger::CtcOneDirection => vec![frame_dissimilarity(z1, z2, &spike_indices(sp1), cfg)?],
        Trigger::CtcBidirectional => vec![
            frame_dissimilarity(z1, z2, &spike_indices(sp1), cfg)?,
            frame_dissimilarity(z2, z1, &spike_indices(sp2), cfg)?,
        ],
    };
    Ok(SimPartial { terms })
}

/// L_sim for a single utterance from its per-frame peak scores `p1`, `p2`.
/// Returns an untracked zero when no frame qualifies.
pub fn sim_loss<'t>(
    z1: &DiffTensor<'t>,
    z2: &DiffTensor<'t>,
    p1: &[f64],
    p2: &[f64],
    cfg: &SimilarityConfig,
) -> Result<DiffTensor<'t>> {
    let sp1 = spike_filter(p1, cfg.detection);
    let sp2 = spike_filter(p2, cfg.detection);
    let partial = sim_partial(z1, z2, &sp1, &sp2, cfg)?;
    let weights = term_weights(&partial.frame_counts());
    Ok(partial
        .weighted(&weights)
        .unwrap_or_else(|| z1.tape().scalar(0.0)))
}
