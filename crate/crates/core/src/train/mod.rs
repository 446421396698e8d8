//! Siamese training loop, evaluation and analysis.
//!
//! A training step duplicates the batch (entries N..2N are copies of 0..N,
//! tagged branch 2), runs every entry through the shared parameters with a
//! dropout stream keyed by (branch, step, source utterance), and combines the
//! branch-averaged ASR loss with the similarity loss of each utterance pair.
//!
//! Each utterance (both of its branches) is recorded on its own tape. The
//! forward passes run in parallel; the similarity weights need the spike
//! counts of the whole batch, so the per-utterance losses are assembled
//! afterwards and back-propagated in parallel again. Parameter gradients are
//! summed in utterance order, which keeps results independent of threading.

mod config;
mod optim;

pub use config::{preset, preset_names, ExperimentConfig, OptimizerConfig, Seeds, PRESETS};
pub use optim::{clip_grads, grad_norm, Adam};

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::ctc::{greedy_decode, peak_scores_raw, CtcPosterior};
use crate::data::{make_batches, Batch, Corpus, Utterance};
use crate::dropout::DropoutContext;
use crate::error::{Error, Result};
use crate::eval::{
    alignment_metric, edit_distance, spike_histogram, uniformity_metric, ErrorReport, ReportScalars, SpikeHistogram,
    TracePoint,
};
use crate::exec::Execution;
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, LossBreakdown, Model};
use crate::rng::SeededRng;
use crate::similarity::{sim_partial, spike_filter, term_weights, Metric, SimTarget};
use crate::tensor::{DiffTensor, Tape};

/// Appends a copy of every entry, tagged branch 2.
pub fn make_siamese_batch(batch: &Batch) -> Batch {
    let mut out = batch.clone();
    out.ids.extend_from_slice(&batch.ids);
    out.features.extend_from_slice(&batch.features);
    out.lengths.extend_from_slice(&batch.lengths);
    out.labels.extend_from_slice(&batch.labels);
    out.label_lengths.extend_from_slice(&batch.label_lengths);
    out.branches.extend(std::iter::repeat_n(2, batch.len()));
    out.sources.extend_from_slice(&batch.sources);
    out
}

/// Result of one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub lambda_eff: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
    /// Spike frames per similarity term, pooled over the batch.
    pub spike_frames: Vec<usize>,
    /// Largest |log-posterior difference| between paired branches.
    pub branch_gap: Option<f64>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogRecord<'a> {
    Config {
        preset: &'a str,
        seeds: [u64; 4],
        config: &'a str,
    },
    Step(&'a StepReport),
    Epoch {
        epoch: usize,
        steps: u64,
        dev_error_rate: Option<f64>,
    },
    Error {
        step: u64,
        message: String,
    },
}

fn record(r: &LogRecord) -> String {
    serde_json::to_string(r).expect("log records serialise")
}

struct GroupForward {
    tape: Tape,
    /// (node, value) of each entry's CTC loss, in entry order.
    ctc: Vec<(usize, f64)>,
    att: Vec<Option<(usize, f64)>>,
    /// (node, frames, value) per similarity term.
    sim: Vec<(Option<usize>, usize, f64)>,
    gap: Option<f64>,
}

fn sim_input<'t>(o: &crate::model::BranchOutput<'t>, c: &crate::similarity::SimilarityConfig) -> DiffTensor<'t> {
    match (c.metric, c.target) {
        (Metric::Kl, _) => o.encoder.log_probs,
        (Metric::Cosine, SimTarget::CtcPosterior) => o.encoder.log_probs.exp(),
        (Metric::Cosine, SimTarget::EncoderHidden) => o.encoder.hidden,
    }
}

/// Loss values and summed parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub loss: LossBreakdown,
    pub grads: Vec<Vec<f64>>,
    pub spike_frames: Vec<usize>,
    pub branch_gap: Option<f64>,
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: Model,
    adam: Adam,
    step: u64,
    exec: Execution,
}

impl Trainer {
    pub fn new(config: ExperimentConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.resolved_model()?, &mut SeededRng::new(config.seeds.init).derive(&[0]))?;
        let adam = Adam::new(config.optimizer, &model.params);
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
            exec,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    fn dropout_stream(&self, branch: u8, source: usize, step: u64) -> SeededRng {
        let seed = if branch == 1 {
            self.config.seeds.dropout1
        } else {
            self.config.seeds.dropout2
        };
        SeededRng::new(seed).derive(&[branch as u64, step, source as u64])
    }

    /// Entry groups sharing one tape: pairs (i, i+N) of a duplicated batch
    /// in Siamese mode, single entries otherwise.
    fn groups(&self, batch: &Batch) -> Result<Vec<Vec<usize>>> {
        if !self.config.siamese {
            return Ok((0..batch.len()).map(|i| vec![i]).collect());
        }
        let n = batch.len() / 2;
        let paired = batch.len().is_multiple_of(2)
            && (0..n).all(|i| {
                batch.branches[i] == 1 && batch.branches[i + n] == 2 && batch.sources[i] == batch.sources[i + n]
            });
        if n == 0 || !paired {
            return Err(Error::config("siamese training needs a batch built by make_siamese_batch"));
        }
        Ok((0..n).map(|i| vec![i, i + n]).collect())
    }

    fn forward_group(&self, batch: &Batch, entries: &[usize], step: u64) -> Result<GroupForward> {
        let cfg = &self.config;
        let model = &self.model;
        let tape = Tape::new();
        let p = model.bind(&tape);
        let with_att = cfg.alpha < 1.0;
        let f = batch.feature_dim;
        let mut ctc = Vec::new();
        let mut att = Vec::new();
        let mut outs = Vec::new();
        for &e in entries {
            let x = tape.constant(&[batch.lengths[e], f], batch.features_of(e).to_vec())?;
            let mut ctx = DropoutContext::train(self.dropout_stream(batch.branches[e], batch.sources[e], step));
            let out = model.branch(&p, &x, batch.labels_of(e), with_att, &mut ctx)?;
            ctc.push((out.l_ctc.id(), out.l_ctc.item()));
            att.push(out.l_att.map(|a| (a.id(), a.item())));
            outs.push(out);
        }
        let mut sim = Vec::new();
        let mut gap = None;
        if let [a, b] = outs[..] {
            let (la, lb) = (a.encoder.log_probs, b.encoder.log_probs);
            let classes = model.config.classes();
            let (pa, pb, g) = {
                let (va, vb) = (la.values(), lb.values());
                let g = va.iter().zip(vb.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                let mode = cfg.similarity.peak_mode;
                (peak_scores_raw(&va, classes, mode), peak_scores_raw(&vb, classes, mode), g)
            };
            gap = Some(g);
            let det = cfg.similarity.detection;
            let (sp1, sp2) = (spike_filter(&pa, det), spike_filter(&pb, det));
            let (z1, z2) = (sim_input(&a, &cfg.similarity), sim_input(&b, &cfg.similarity));
            let partial = sim_partial(&z1, &z2, &sp1, &sp2, &cfg.similarity)?;
            sim = partial
                .terms
                .iter()
                .map(|t| (t.sum.map(|s| s.id()), t.frames, t.sum.map_or(0.0, |s| s.item())))
                .collect();
        }
        Ok(GroupForward {
            tape,
            ctc,
            att,
            sim,
            gap,
        })
    }

    /// Loss breakdown and summed gradients for `batch` without updating
    /// parameters. `batch` must come from [`make_siamese_batch`] in Siamese
    /// mode.
    pub fn batch_gradients(&self, batch: &Batch, lambda_eff: f64) -> Result<BatchGradients> {
        let cfg = &self.config;
        let groups = self.groups(batch)?;
        let step = self.step;
        let forwards: Vec<GroupForward> = self
            .exec
            .map(groups.len(), |g| self.forward_group(batch, &groups[g], step))
            .into_iter()
            .collect::<Result<_>>()?;

        // per-branch means, entries in index order
        let mut per_branch: Vec<(u8, f64, Option<f64>, usize)> = Vec::new();
        for (gi, fw) in forwards.iter().enumerate() {
            for (k, &e) in groups[gi].iter().enumerate() {
                let b = batch.branches[e];
                let slot = match per_branch.iter().position(|s| s.0 == b) {
                    Some(i) => i,
                    None => {
                        per_branch.push((b, 0.0, fw.att[k].map(|_| 0.0), 0));
                        per_branch.len() - 1
                    }
                };
                let s = &mut per_branch[slot];
                s.1 += fw.ctc[k].1;
                s.2 = s.2.zip(fw.att[k]).map(|(acc, (_, v))| acc + v);
                s.3 += 1;
            }
        }
        per_branch.sort_by_key(|s| s.0);
        let branch_terms: Vec<(f64, Option<f64>)> = per_branch
            .iter()
            .map(|&(_, c, a, n)| (c / n as f64, a.map(|a| a / n as f64)))
            .collect();
        let entries = batch.len() as f64;

        let n_terms = forwards.first().map_or(0, |f| f.sim.len());
        let totals: Vec<usize> = (0..n_terms).map(|k| forwards.iter().map(|f| f.sim[k].1).sum()).collect();
        let weights = term_weights(&totals);
        let mut l_sim = 0.0;
        for (k, w) in weights.iter().enumerate() {
            l_sim += w * forwards.iter().map(|f| f.sim[k].2).sum::<f64>();
        }
        let lambda_log = if cfg.siamese { lambda_eff } else { 0.0 };
        let mut loss = LossBreakdown::from_branches(&branch_terms, l_sim, cfg.alpha, lambda_log)?;
        loss.lambda = lambda_log;

        let alpha = cfg.alpha;
        let params = &self.model.params;
        let gap = forwards.iter().filter_map(|f| f.gap).reduce(f64::max);
        let grads_per_group: Vec<Vec<Vec<f64>>> = self
            .exec
            .map_owned(forwards, |_, fw| local_backward(&fw, params, alpha, entries, lambda_eff, &weights))
            .into_iter()
            .collect::<Result<_>>()?;
        let mut grads = params.zeros_like();
        for g in &grads_per_group {
            for (acc, gi) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
            }
        }
        Ok(BatchGradients {
            loss,
            grads,
            spike_frames: totals,
            branch_gap: gap,
        })
    }

    /// One optimisation step on `batch` (not yet duplicated).
    pub fn step(&mut self, batch: &Batch, epoch: usize, lambda_eff: f64) -> Result<StepReport> {
        let input = if self.config.siamese {
            make_siamese_batch(batch)
        } else {
            batch.clone()
        };
        let step = self.step + 1;
        // non-finite weights surface as a domain error inside the forward pass
        let mut bg = match self.batch_gradients(&input, lambda_eff) {
            Err(Error::Domain { value, .. }) if !value.is_finite() => {
                return Err(Error::NonFinite {
                    step: step as usize,
                    value,
                })
            }
            r => r?,
        };
        if !bg.loss.l_total.is_finite() {
            return Err(Error::NonFinite {
                step: step as usize,
                value: bg.loss.l_total,
            });
        }
        let norm = clip_grads(&mut bg.grads, self.config.optimizer.grad_clip);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step: step as usize,
                value: norm,
            });
        }
        let lr = self.adam.update(&mut self.model.params, &bg.grads);
        self.step = step;
        Ok(StepReport {
            step,
            epoch,
            lambda_eff: bg.loss.lambda,
            lr,
            grad_norm: norm,
            loss: bg.loss,
            spike_frames: bg.spike_frames,
            branch_gap: bg.branch_gap,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config.to_text(),
            step: self.step,
            params: self.model.params.clone(),
        }
    }
}

fn local_backward(
    fw: &GroupForward,
    params: &crate::model::ParamSet,
    alpha: f64,
    entries: f64,
    lambda_eff: f64,
    weights: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let tape = &fw.tape;
    let mut parts = Vec::new();
    for (k, &(id, _)) in fw.ctc.iter().enumerate() {
        match fw.att[k] {
            Some((aid, _)) => {
                parts.push(tape.handle(id).scale(alpha / entries));
                parts.push(tape.handle(aid).scale((1.0 - alpha) / entries));
            }
            None => parts.push(tape.handle(id).scale(1.0 / entries)),
        }
    }
    if lambda_eff > 0.0 {
        for (k, &(id, _, _)) in fw.sim.iter().enumerate() {
            if let Some(id) = id {
                parts.push(tape.handle(id).scale(lambda_eff * weights[k]));
            }
        }
    }
    let mut local = parts[0];
    for p in &parts[1..] {
        local = local.add(p)?;
    }
    local.backward()?;
    let handles: Vec<DiffTensor<'_>> = (0..params.len()).map(|i| tape.handle(i)).collect();
    Ok(params.collect_grads(&handles))
}

/// λ actually applied during `epoch`.
pub fn lambda_for_epoch(config: &ExperimentConfig, epoch: usize) -> f64 {
    if !config.siamese || (config.lambda_ramp && epoch == 0) {
        0.0
    } else {
        config.lambda
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Where checkpoint.bin, config.txt, train.jsonl and timing.jsonl go.
    pub out_dir: Option<PathBuf>,
    pub exec: Execution,
    /// Stop after this many steps even mid-epoch.
    pub max_steps: Option<u64>,
    /// Decode the dev split after every epoch.
    pub eval_dev: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            exec: Execution::default(),
            max_steps: None,
            eval_dev: true,
        }
    }
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    /// JSON lines, as written to train.jsonl.
    pub log: Vec<String>,
    pub reports: Vec<StepReport>,
    pub dev_error_rates: Vec<f64>,
    /// Set when training stopped on a non-finite loss.
    pub error: Option<String>,
}

fn check_dims(config: &ExperimentConfig, corpus: &Corpus) -> Result<()> {
    let m = &config.model;
    if corpus.spec.feature_dim != m.input_dim || corpus.spec.vocab != m.vocab {
        return Err(Error::config(format!(
            "corpus has feature_dim {} and vocab {}, model expects {} and {}",
            corpus.spec.feature_dim, corpus.spec.vocab, m.input_dim, m.vocab
        )));
    }
    Ok(())
}

/// Full training run over the train split. A non-finite loss ends the run
/// early: the error is logged and returned in [`TrainOutcome::error`], and
/// no checkpoint is written.
pub fn train(config: ExperimentConfig, corpus: &Corpus, opts: &TrainOptions) -> Result<TrainOutcome> {
    check_dims(&config, corpus)?;
    let train_utts = corpus.split("train")?;
    if train_utts.is_empty() {
        return Err(Error::config("train split is empty"));
    }
    let dev = if opts.eval_dev { Some(corpus.split("dev")?) } else { None };
    let mut trainer = Trainer::new(config, opts.exec)?;
    let cfg = trainer.config.clone();
    let config_text = cfg.to_text();
    let s = cfg.seeds;
    let mut log = vec![record(&LogRecord::Config {
        preset: &cfg.preset,
        seeds: [s.init, s.dropout1, s.dropout2, s.data],
        config: &config_text,
    })];
    let mut timing = Vec::new();
    let mut reports = Vec::new();
    let mut dev_error_rates = Vec::new();
    let mut error = None;
    let started = Instant::now();
    let order_rng = SeededRng::new(s.data);
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_utts.len()).collect();
        order_rng.derive(&[epoch as u64]).shuffle(&mut order);
        let lambda_eff = lambda_for_epoch(&cfg, epoch);
        for batch in make_batches(train_utts, &order, cfg.batch_size, cfg.model.input_dim) {
            if opts.max_steps.is_some_and(|m| trainer.steps_done() >= m) {
                break 'epochs;
            }
            let t0 = Instant::now();
            match trainer.step(&batch, epoch, lambda_eff) {
                Ok(r) => {
                    log.push(record(&LogRecord::Step(&r)));
                    timing.push(format!(
                        "{{\"step\":{},\"seconds\":{:.6}}}",
                        r.step,
                        t0.elapsed().as_secs_f64()
                    ));
                    reports.push(r);
                }
                Err(e @ Error::NonFinite { .. }) => {
                    log.push(record(&LogRecord::Error {
                        step: trainer.steps_done() + 1,
                        message: e.to_string(),
                    }));
                    error = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let dev_error_rate = match dev {
            Some(d) => Some(evaluate_split(&trainer.model, d, opts.exec)?.0.error_rate),
            None => None,
        };
        dev_error_rates.extend(dev_error_rate);
        log.push(record(&LogRecord::Epoch {
            epoch,
            steps: trainer.steps_done(),
            dev_error_rate,
        }));
        timing.push(format!(
            "{{\"epoch\":{epoch},\"elapsed_seconds\":{:.3}}}",
            started.elapsed().as_secs_f64()
        ));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        write_lines(&dir.join("train.jsonl"), &log)?;
        write_lines(&dir.join("timing.jsonl"), &timing)?;
        std::fs::write(dir.join("config.txt"), &config_text)?;
        if error.is_none() {
            save_checkpoint(&dir.join("checkpoint.bin"), &trainer.checkpoint())?;
        }
    }
    Ok(TrainOutcome {
        trainer,
        log,
        reports,
        dev_error_rates,
        error,
    })
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in lines {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

/// Rebuilds the model stored in a checkpoint.
pub fn load_for_eval(path: &Path) -> Result<(ExperimentConfig, Model)> {
    let ckpt = load_checkpoint(path)?;
    let config = ExperimentConfig::from_text(&ckpt.config_text)?;
    let mut model = Model::new(config.resolved_model()?, &mut SeededRng::new(config.seeds.init).derive(&[0]))?;
    model.params.assign(&ckpt.params)?;
    Ok((config, model))
}

/// CTC posterior of one utterance; dropout off unless `ctx` is training.
pub fn infer_with(model: &Model, utt: &Utterance, ctx: &mut DropoutContext) -> Result<CtcPosterior> {
    let tape = Tape::new();
    let p = model.bind(&tape);
    let x = tape.constant(&[utt.frames, model.config.input_dim], utt.features.clone())?;
    let enc = model.encode(&p, &x, ctx)?;
    CtcPosterior::from_tensor(&enc.log_probs)
}

pub fn infer(model: &Model, utt: &Utterance) -> Result<CtcPosterior> {
    infer_with(model, utt, &mut DropoutContext::eval())
}

/// Greedy hypotheses and pooled error counts over `utts`, plus the
/// posteriors in utterance order.
pub fn evaluate_split(model: &Model, utts: &[Utterance], exec: Execution) -> Result<(ErrorReport, Vec<CtcPosterior>)> {
    let posts: Vec<CtcPosterior> = exec.map(utts.len(), |i| infer(model, &utts[i])).into_iter().collect::<Result<_>>()?;
    let reports: Vec<ErrorReport> = utts
        .iter()
        .zip(&posts)
        .map(|(u, p)| edit_distance(&u.labels, &greedy_decode(p)))
        .collect();
    Ok((ErrorReport::total(&reports), posts))
}

#[derive(Clone, Debug)]
pub struct Analysis {
    pub errors: ErrorReport,
    pub scalars: ReportScalars,
    pub histogram: SpikeHistogram,
    pub traces: Vec<TracePoint>,
}

/// Error rate, spike histogram, traces, and alignment/uniformity of
/// spike-frame posteriors.
///
/// Spike frames come from the dropout-off posterior. Uniformity is taken over
/// those dropout-off rows; alignment pairs the same frames from two
/// dropout-on passes using the two branch seed streams.
pub fn analyze_split(
    config: &ExperimentConfig,
    model: &Model,
    utts: &[Utterance],
    bins: usize,
    exec: Execution,
) -> Result<Analysis> {
    let (errors, posts) = evaluate_split(model, utts, exec)?;
    let named: Vec<(&str, &CtcPosterior)> = utts.iter().map(|u| u.id.as_str()).zip(&posts).collect();
    let sim = &config.similarity;
    let (histogram, traces) = spike_histogram(&named, sim.peak_mode, sim.detection, bins)?;

    let per_utt = exec.map(utts.len(), |i| -> Result<_> {
        let scores = crate::ctc::frame_peak_score(&posts[i], sim.peak_mode);
        let spikes = spike_filter(&scores, sim.detection);
        let frames: Vec<usize> = (0..spikes.len()).filter(|&t| spikes[t]).collect();
        if frames.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let probs = posts[i].prob_rows();
        let clean: Vec<Vec<f64>> = frames.iter().map(|&t| probs[t].clone()).collect();
        let mut noisy = Vec::new();
        for (b, seed) in [(1u64, config.seeds.dropout1), (2, config.seeds.dropout2)] {
            let rng = SeededRng::new(seed).derive(&[b, u64::MAX, i as u64]);
            noisy.push(infer_with(model, &utts[i], &mut DropoutContext::train(rng))?.prob_rows());
        }
        let pairs = frames.iter().map(|&t| (noisy[0][t].clone(), noisy[1][t].clone())).collect();
        Ok((clean, pairs))
    });
    let mut clean = Vec::new();
    let mut pairs = Vec::new();
    for r in per_utt {
        let (c, p) = r?;
        clean.extend(c);
        pairs.extend(p);
    }
    let mut scalars = ReportScalars::from_errors(&errors);
    scalars.alignment = (!pairs.is_empty()).then(|| alignment_metric(&pairs)).transpose()?;
    scalars.uniformity = (clean.len() >= 2).then(|| uniformity_metric(&clean, exec)).transpose()?;
    scalars.spike_mass_090 = Some(histogram.mass_at_least(0.9));
    scalars.total_spikes = Some(histogram.total_spikes);
    Ok(Analysis {
        errors,
        scalars,
        histogram,
        traces,
    })
}
