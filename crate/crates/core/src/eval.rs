//! Error rates, alignment/uniformity of positive pairs, spike-probability
//! histograms and per-frame spike traces, with JSON/CSV writers.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctc::{frame_peak_score, CtcPosterior, PeakScoreMode};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::similarity::{spike_filter, DetectionMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_len: usize,
    /// (S + I + D) / reference length; with an empty reference the error
    /// count itself.
    pub error_rate: f64,
}

impl ErrorReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn with_rate(mut self) -> Self {
        self.error_rate = self.errors() as f64 / self.reference_len.max(1) as f64;
        self
    }

    /// Pools counts over utterances.
    pub fn total<'a>(reports: impl IntoIterator<Item = &'a ErrorReport>) -> ErrorReport {
        let mut t = ErrorReport::default();
        for r in reports {
            t.substitutions += r.substitutions;
            t.insertions += r.insertions;
            t.deletions += r.deletions;
            t.reference_len += r.reference_len;
        }
        t.with_rate()
    }
}

/// Levenshtein alignment of `hyp` against `reference`. Among minimal
/// alignments the backtrace prefers substitution, then insertion, then
/// deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> ErrorReport {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = sub.min(ins).min(del);
        }
    }
    let mut r = ErrorReport {
        reference_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                r.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            r.insertions += 1;
            j -= 1;
        } else {
            r.deletions += 1;
            i -= 1;
        }
    }
    r.with_rate()
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::ZeroNorm("feature vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean over pairs of ‖f1/‖f1‖ − f2/‖f2‖‖².
pub fn alignment_metric(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::config("alignment needs at least one pair"));
    }
    let mut sum = 0.0;
    for (a, b) in pairs {
        sum += sq_dist(&normalized(a)?, &normalized(b)?);
    }
    Ok(sum / pairs.len() as f64)
}

/// log of the mean over distinct pairs i < j of exp(−2‖n_i − n_j‖²), with
/// n the unit-normalised features.
pub fn uniformity_metric(features: &[Vec<f64>], exec: Execution) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::config("uniformity needs at least two vectors"));
    }
    let unit = features.iter().map(|f| normalized(f)).collect::<Result<Vec<_>>>()?;
    let n = unit.len();
    let rows = exec.map(n, |i| {
        unit[i + 1..]
            .iter()
            .map(|u| (-2.0 * sq_dist(&unit[i], u)).exp())
            .sum::<f64>()
    });
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((rows.iter().sum::<f64>() / pairs).ln())
}

/// One frame of a spike trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub utt_id: String,
    pub frame: usize,
    pub neg_log_peak: f64,
    pub is_spike: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeHistogram {
    /// `bins + 1` strictly increasing edges over [0, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub total_spikes: usize,
}

impl SpikeHistogram {
    /// Fraction of spikes whose score is at least `threshold`, or 0 without spikes.
    pub fn mass_at_least(&self, threshold: f64) -> f64 {
        if self.total_spikes == 0 {
            return 0.0;
        }
        let n: usize = self
            .counts
            .iter()
            .zip(&self.edges)
            .filter(|(_, &lo)| lo >= threshold - 1e-12)
            .map(|(c, _)| c)
            .sum();
        n as f64 / self.total_spikes as f64
    }
}

fn bin_of(score: f64, bins: usize) -> usize {
    ((score.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Histogram of peak scores at spike frames and per-frame −log(peak) traces.
pub fn spike_histogram(
    posteriors: &[(&str, &CtcPosterior)],
    mode: PeakScoreMode,
    detection: DetectionMode,
    bins: usize,
) -> Result<(SpikeHistogram, Vec<TracePoint>)> {
    if bins == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    let mut counts = vec![0; bins];
    let mut traces = Vec::new();
    let mut total = 0;
    for (id, post) in posteriors {
        let scores = frame_peak_score(post, mode);
        let spikes = spike_filter(&scores, detection);
        for (t, (&s, &is_spike)) in scores.iter().zip(&spikes).enumerate() {
            if is_spike {
                counts[bin_of(s, bins)] += 1;
                total += 1;
            }
            traces.push(TracePoint {
                utt_id: id.to_string(),
                frame: t,
                neg_log_peak: -s.ln(),
                is_spike,
            });
        }
    }
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    Ok((
        SpikeHistogram {
            edges,
            counts,
            total_spikes: total,
        },
        traces,
    ))
}

/// Scalars written to the JSON report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportScalars {
    pub cer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_len: usize,
    pub alignment: Option<f64>,
    pub uniformity: Option<f64>,
    pub spike_mass_090: Option<f64>,
    pub total_spikes: Option<usize>,
}

impl ReportScalars {
    pub fn from_errors(e: &ErrorReport) -> Self {
        Self {
            cer: e.error_rate,
            substitutions: e.substitutions,
            insertions: e.insertions,
            deletions: e.deletions,
            reference_len: e.reference_len,
            ..Default::default()
        }
    }
}

pub fn write_json(path: &Path, scalars: &ReportScalars) -> Result<()> {
    let text = serde_json::to_string_pretty(scalars).map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn histogram_csv(h: &SpikeHistogram) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(s, "{},{},{}", h.edges[i], h.edges[i + 1], c).unwrap();
    }
    s
}

pub fn traces_csv(traces: &[TracePoint]) -> String {
    let mut s = String::from("utt_id,frame,neg_log_peak,is_spike\n");
    for t in traces {
        writeln!(s, "{},{},{},{}", t.utt_id, t.frame, t.neg_log_peak, u8::from(t.is_spike)).unwrap();
    }
    s
}
