//! CTC loss, posteriors, greedy decoding and a brute-force oracle.
//!
//! Label id 0 is always the blank; tokens are 1..=K, so a posterior has
//! K + 1 columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DiffTensor;

pub const BLANK: usize = 0;

/// Token inventory 1..=K plus the blank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: usize,
}

impl Vocab {
    pub fn new(tokens: usize) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::config("vocabulary needs at least one token"));
        }
        Ok(Self { tokens })
    }

    /// Number of non-blank tokens K.
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// K + 1.
    pub fn classes(&self) -> usize {
        self.tokens + 1
    }

    pub fn check(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&l| l == BLANK || l > self.tokens) {
            Some(&label) => Err(Error::LabelOutOfRange {
                label,
                vocab: self.tokens,
            }),
            None => Ok(()),
        }
    }
}

/// Per-frame log distributions over blank + K tokens for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcPosterior {
    log_probs: Vec<f64>,
    frames: usize,
    classes: usize,
}

impl CtcPosterior {
    pub fn new(log_probs: Vec<f64>, frames: usize, classes: usize) -> Result<Self> {
        if frames == 0 || classes < 2 || log_probs.len() != frames * classes {
            return Err(Error::InvalidShape {
                op: "ctc posterior",
                shape: vec![frames, classes],
            });
        }
        for t in 0..frames {
            let row = &log_probs[t * classes..(t + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            if !(lse.abs() < 1e-10) {
                return Err(Error::NotDistribution(format!(
                    "frame {t} log-sum-exp is {lse}"
                )));
            }
        }
        Ok(Self {
            log_probs,
            frames,
            classes,
        })
    }

    pub fn from_probs(probs: &[f64], frames: usize, classes: usize) -> Result<Self> {
        Self::new(probs.iter().map(|p| p.ln()).collect(), frames, classes)
    }

    /// Snapshot of a `frames × classes` log-probability tensor.
    pub fn from_tensor(t: &DiffTensor<'_>) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "ctc posterior",
                shape,
            });
        }
        Self::new(t.to_vec(), shape[0], shape[1])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.log_probs[t * self.classes..(t + 1) * self.classes]
    }

    pub fn prob(&self, t: usize, k: usize) -> f64 {
        self.row(t)[k].exp()
    }

    /// Probability rows, for similarity and analysis features.
    pub fn prob_rows(&self) -> Vec<Vec<f64>> {
        (0..self.frames)
            .map(|t| self.row(t).iter().map(|v| v.exp()).collect())
            .collect()
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Number of adjacent equal labels; each needs a separating blank frame.
pub fn adjacent_repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Rejects targets that no alignment over `frames` frames can produce.
pub fn check_feasible(frames: usize, target: &[usize]) -> Result<()> {
    let repeats = adjacent_repeats(target);
    if frames < target.len() + repeats {
        return Err(Error::InfeasibleTarget {
            frames,
            labels: target.len(),
            repeats,
        });
    }
    Ok(())
}

/// −log P(target | log_probs) and its gradient with respect to every entry
/// of the `frames × classes` log-probability matrix, treating the entries as
/// free variables.
///
/// Forward–backward over the blank-interleaved target, entirely in log space.
pub fn ctc_forward_backward(
    log_probs: &[f64],
    frames: usize,
    classes: usize,
    target: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if frames == 0 || log_probs.len() != frames * classes {
        return Err(Error::InvalidShape {
            op: "ctc_loss",
            shape: vec![frames, classes],
        });
    }
    Vocab::new(classes.saturating_sub(1))?.check(target)?;
    check_feasible(frames, target)?;

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in target {
        ext.push(l);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs[t * classes + k];
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let neg_inf = f64::NEG_INFINITY;
    let mut alpha = vec![neg_inf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == neg_inf { neg_inf } else { a + lp(t, ext[s]) };
        }
    }

    let mut beta = vec![neg_inf; frames * s_len];
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = lp(last, ext[s_len - 1]);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = lp(last, ext[s_len - 2]);
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && ext[s] != BLANK && ext[s + 2] != ext[s] {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == neg_inf { neg_inf } else { b + lp(t, ext[s]) };
        }
    }

    let end = &alpha[last * s_len..];
    let mut log_p = end[s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, end[s_len - 2]);
    }
    let mut grad = vec![0.0; frames * classes];
    if log_p == neg_inf {
        return Ok((f64::INFINITY, grad));
    }
    let mut occupancy = vec![neg_inf; classes];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|o| *o = neg_inf);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > neg_inf {
                occupancy[ext[s]] = log_add(occupancy[ext[s]], ab);
            }
        }
        for k in 0..classes {
            if occupancy[k] > neg_inf {
                grad[t * classes + k] = -(occupancy[k] - lp(t, k) - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Differentiable CTC loss of a `frames × classes` log-probability tensor.
pub fn ctc_loss<'t>(log_probs: &DiffTensor<'t>, target: &[usize]) -> Result<DiffTensor<'t>> {
    let shape = log_probs.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "ctc_loss",
            shape,
        });
    }
    let (loss, grad) = ctc_forward_backward(&log_probs.values(), shape[0], shape[1], target)?;
    Ok(log_probs.with_fixed_grad(loss, grad))
}

/// Upper bound on enumerated alignments for [`ctc_bruteforce`].
pub const BRUTEFORCE_LIMIT: u128 = 10_000_000;

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Exact −log P(target) by enumerating every alignment.
pub fn ctc_bruteforce(posterior: &CtcPosterior, target: &[usize]) -> Result<f64> {
    let (frames, classes) = (posterior.frames(), posterior.classes());
    let count = (classes as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if count > BRUTEFORCE_LIMIT {
        return Err(Error::EnumerationTooLarge(count));
    }
    let mut path = vec![0usize; frames];
    let mut total = f64::NEG_INFINITY;
    loop {
        if collapse(&path) == target {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| posterior.row(t)[k]).sum();
            total = log_add(total, lp);
        }
        let mut ax = frames;
        loop {
            if ax == 0 {
                if total == f64::NEG_INFINITY {
                    return Err(Error::InfeasibleTarget {
                        frames,
                        labels: target.len(),
                        repeats: adjacent_repeats(target),
                    });
                }
                return Ok(-total);
            }
            ax -= 1;
            path[ax] += 1;
            if path[ax] < classes {
                break;
            }
            path[ax] = 0;
        }
    }
}

/// Per-frame argmax (ties to the lowest id), collapse repeats, drop blanks.
pub fn greedy_decode(posterior: &CtcPosterior) -> Vec<usize> {
    let best: Vec<usize> = (0..posterior.frames())
        .map(|t| {
            let row = posterior.row(t);
            let mut arg = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[arg] {
                    arg = k;
                }
            }
            arg
        })
        .collect();
    collapse(&best)
}

/// How one scalar per frame is read off the posterior for spike detection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakScoreMode {
    /// Largest non-blank probability.
    #[default]
    MaxNonBlank,
    /// 1 − p(blank).
    BlankComplement,
}

impl PeakScoreMode {
    pub fn name(&self) -> &'static str {
        match self {
            PeakScoreMode::MaxNonBlank => "max_non_blank",
            PeakScoreMode::BlankComplement => "blank_complement",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max_non_blank" => Ok(Self::MaxNonBlank),
            "blank_complement" => Ok(Self::BlankComplement),
            other => Err(Error::config(format!("unknown peak score mode `{other}`"))),
        }
    }
}

/// Scores from a raw `frames × classes` log-probability buffer.
pub fn peak_scores_raw(log_probs: &[f64], classes: usize, mode: PeakScoreMode) -> Vec<f64> {
    log_probs
        .chunks(classes)
        .map(|row| match mode {
            PeakScoreMode::MaxNonBlank => row[1..]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
                .exp(),
            PeakScoreMode::BlankComplement => 1.0 - row[BLANK].exp(),
        })
        .collect()
}

pub fn frame_peak_score(posterior: &CtcPosterior, mode: PeakScoreMode) -> Vec<f64> {
    peak_scores_raw(posterior.log_probs(), posterior.classes(), mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::{finite_diff_check, Tape};

    fn random_posterior(rng: &mut SeededRng, frames: usize, classes: usize) -> CtcPosterior {
        let mut lp = Vec::new();
        for _ in 0..frames {
            let logits: Vec<f64> = (0..classes).map(|_| rng.normal(0.0, 1.5)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lp.extend(logits.iter().map(|v| v - lse));
        }
        CtcPosterior::new(lp, frames, classes).unwrap()
    }

    fn uniform_two_frames() -> CtcPosterior {
        CtcPosterior::from_probs(&[0.5; 4], 2, 2).unwrap()
    }

    #[test]
    fn two_frame_uniform_example() {
        // paths aa, a-, -a collapse to "a": P = 3/4
        let expected = -(0.75f64).ln();
        let p = uniform_two_frames();
        let (loss, _) = ctc_forward_backward(p.log_probs(), 2, 2, &[1]).unwrap();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.287682).abs() < 1e-6);
        assert!((ctc_bruteforce(&p, &[1]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let mut rng = SeededRng::new(1);
        let p = random_posterior(&mut rng, 5, 3);
        let expected: f64 = -(0..5).map(|t| p.row(t)[BLANK]).sum::<f64>();
        let (loss, _) = ctc_forward_backward(p.log_probs(), 5, 3, &[]).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn certain_path_has_zero_loss() {
        let eps = 1e-300f64;
        // frames: a, blank, b with probability 1
        let probs = [eps, 1.0, eps, 1.0, eps, eps, eps, eps, 1.0];
        let p = CtcPosterior::new(
            probs.iter().map(|&v| if v == 1.0 { 0.0 } else { v.ln() }).collect(),
            3,
            3,
        )
        .unwrap();
        assert!(ctc_bruteforce(&p, &[1, 2]).unwrap().abs() < 1e-12);
        let (loss, _) = ctc_forward_backward(p.log_probs(), 3, 3, &[1, 2]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn infeasible_targets_are_rejected() {
        let p = uniform_two_frames();
        let err = ctc_forward_backward(p.log_probs(), 2, 2, &[1, 1]).unwrap_err();
        assert!(matches!(
            err,
            Error::InfeasibleTarget {
                frames: 2,
                labels: 2,
                repeats: 1
            }
        ));
        assert!(err.to_string().contains('2'));
        assert!(matches!(
            ctc_bruteforce(&p, &[1, 1, 1]),
            Err(Error::InfeasibleTarget { .. })
        ));
        assert!(ctc_forward_backward(p.log_probs(), 2, 2, &[2]).is_err());
    }

    #[test]
    fn bruteforce_refuses_large_instances() {
        let mut rng = SeededRng::new(2);
        let p = random_posterior(&mut rng, 16, 4);
        assert!(matches!(
            ctc_bruteforce(&p, &[1]),
            Err(Error::EnumerationTooLarge(_))
        ));
    }

    #[test]
    fn random_small_instance_matches_bruteforce() {
        let mut rng = SeededRng::new(4);
        let p = random_posterior(&mut rng, 4, 3);
        let (loss, _) = ctc_forward_backward(p.log_probs(), 4, 3, &[2, 1]).unwrap();
        let oracle = ctc_bruteforce(&p, &[2, 1]).unwrap();
        assert!((loss - oracle).abs() < 1e-10);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(8);
        let logits: Vec<f64> = (0..6 * 3).map(|_| rng.normal(0.0, 1.0)).collect();
        let err = finite_diff_check(
            |_, x| ctc_loss(&x.log_softmax(), &[1, 2, 2]),
            &[6, 3],
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err:e}");
    }

    #[test]
    fn tape_loss_matches_raw_loss() {
        let mut rng = SeededRng::new(9);
        let p = random_posterior(&mut rng, 7, 4);
        let tape = Tape::new();
        let lp = tape.param(&[7, 4], p.log_probs().to_vec()).unwrap();
        let loss = ctc_loss(&lp, &[3, 1, 3]).unwrap();
        let (raw, grad) = ctc_forward_backward(p.log_probs(), 7, 4, &[3, 1, 3]).unwrap();
        assert_eq!(loss.item(), raw);
        loss.backward().unwrap();
        assert_eq!(lp.grad().unwrap(), grad);
    }

    #[test]
    fn relabeling_tokens_leaves_loss_unchanged() {
        let mut rng = SeededRng::new(12);
        for _ in 0..20 {
            let p = random_posterior(&mut rng, 6, 4);
            let perm = [0usize, 3, 1, 2];
            let mut permuted = vec![0.0; 24];
            for t in 0..6 {
                for k in 0..4 {
                    permuted[t * 4 + perm[k]] = p.row(t)[k];
                }
            }
            let target = [1, 2, 3];
            let mapped: Vec<usize> = target.iter().map(|&l| perm[l]).collect();
            let (a, _) = ctc_forward_backward(p.log_probs(), 6, 4, &target).unwrap();
            let (b, _) = ctc_forward_backward(&permuted, 6, 4, &mapped).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn posterior_with_argmax(path: &[usize], classes: usize) -> CtcPosterior {
        let mut probs = Vec::new();
        for &k in path {
            for c in 0..classes {
                probs.push(if c == k { 0.7 } else { 0.3 / (classes - 1) as f64 });
            }
        }
        CtcPosterior::from_probs(&probs, path.len(), classes).unwrap()
    }

    #[test]
    fn greedy_collapses_and_drops_blanks() {
        assert_eq!(greedy_decode(&posterior_with_argmax(&[0, 1, 1, 0, 2], 3)), vec![1, 2]);
        assert_eq!(greedy_decode(&posterior_with_argmax(&[0, 0, 0], 3)), Vec::<usize>::new());
        assert_eq!(greedy_decode(&posterior_with_argmax(&[1, 0, 1], 3)), vec![1, 1]);
    }

    #[test]
    fn greedy_ties_go_to_lowest_id() {
        let p = CtcPosterior::from_probs(&[0.2, 0.4, 0.4, 0.5, 0.25, 0.25], 2, 3).unwrap();
        assert_eq!(greedy_decode(&p), vec![1]);
        let tie_blank = CtcPosterior::from_probs(&[0.5, 0.5], 1, 2).unwrap();
        assert!(greedy_decode(&tie_blank).is_empty());
    }

    #[test]
    fn greedy_output_is_clean() {
        let mut rng = SeededRng::new(21);
        for _ in 0..200 {
            let p = random_posterior(&mut rng, 12, 4);
            let out = greedy_decode(&p);
            assert!(out.iter().all(|&k| k != BLANK));
        }
    }

    #[test]
    fn peak_score_modes() {
        let p = CtcPosterior::from_probs(&[0.8, 0.15, 0.05], 1, 3).unwrap();
        let max_nb = frame_peak_score(&p, PeakScoreMode::MaxNonBlank)[0];
        let comp = frame_peak_score(&p, PeakScoreMode::BlankComplement)[0];
        assert!((max_nb - 0.15).abs() < 1e-12);
        assert!((comp - 0.2).abs() < 1e-12);
        let u = CtcPosterior::from_probs(&[1.0 / 3.0; 3], 1, 3).unwrap();
        assert!((frame_peak_score(&u, PeakScoreMode::MaxNonBlank)[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((frame_peak_score(&u, PeakScoreMode::BlankComplement)[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_rejects_unnormalised_rows() {
        assert!(CtcPosterior::from_probs(&[0.5, 0.6], 1, 2).is_err());
        assert!(CtcPosterior::new(vec![], 0, 2).is_err());
    }
}
