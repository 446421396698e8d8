//! Finite-difference checks over every differentiable piece, grouped into
//! suites. Used by the `gradcheck` command.

use crate::ctc::ctc_loss;
use crate::data::{generate_corpus, Batch, CorpusSpec, Utterance};
use crate::error::Result;
use crate::exec::Execution;
use crate::rng::SeededRng;
use crate::similarity::{cosine_grad, cosine_sim, kl_grad, sim_loss, SimilarityConfig, Trigger};
use crate::tensor::{finite_diff_check, finite_diff_grad, max_rel_error, DiffTensor};
use crate::train::{make_siamese_batch, preset, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub checks: usize,
    pub max_rel_error: f64,
}

fn normal_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal(0.0, 1.0)).collect()
}

fn dist(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn weighted<'t>(y: DiffTensor<'t>, w: &[f64]) -> Result<DiffTensor<'t>> {
    let c = y.tape().constant(&y.shape(), w[..y.numel()].to_vec())?;
    Ok(y.mul(&c)?.sum())
}

type Op = for<'t> fn(DiffTensor<'t>) -> Result<DiffTensor<'t>>;

fn tensor_ops() -> Result<SuiteResult> {
    let ops: [Op; 10] = [
        |x| Ok(x.exp()),
        |x| x.add_scalar(3.0).log(),
        |x| Ok(x.tanh()),
        |x| Ok(x.sigmoid()),
        |x| x.swish(),
        |x| Ok(x.softmax()),
        |x| Ok(x.log_softmax()),
        |x| x.matmul(&x.t()?),
        |x| x.mean_axis(0),
        |x| x.mul(&x.select_rows(&[2, 0, 1])?),
    ];
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for (k, op) in ops.iter().enumerate() {
        for seed in 0..20 {
            let mut rng = SeededRng::new(seed).derive(&[k as u64]);
            let x = normal_vec(&mut rng, 12);
            let w = normal_vec(&mut rng, 16);
            worst = worst.max(finite_diff_check(|_, x| weighted(op(x)?, &w), &[3, 4], &x, 1e-5)?);
            checks += 1;
        }
    }
    Ok(SuiteResult {
        name: "tensor-ops",
        checks,
        max_rel_error: worst,
    })
}

fn ctc() -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut rng = SeededRng::new(seed).derive(&[1]);
        let t = rng.int_inclusive(3, 6);
        let k = rng.int_inclusive(1, 3);
        let len = rng.int_inclusive(0, 2);
        let target: Vec<usize> = (0..len).map(|_| rng.int_inclusive(1, k)).collect();
        let logits = normal_vec(&mut rng, t * (k + 1));
        let err = finite_diff_check(|_, x| ctc_loss(&x.log_softmax(), &target), &[t, k + 1], &logits, 1e-5)?;
        worst = worst.max(err);
    }
    Ok(SuiteResult {
        name: "ctc",
        checks: 50,
        max_rel_error: worst,
    })
}

fn cosine() -> Result<SuiteResult> {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = SeededRng::new(seed).derive(&[2]);
        let (z1, z2) = (normal_vec(&mut rng, 8), normal_vec(&mut rng, 8));
        let analytic = cosine_grad(&z1, &z2)?;
        let numeric = finite_diff_grad(|x| cosine_sim(x, &z2).unwrap_or(f64::NAN), &z1, 1e-5);
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    Ok(SuiteResult {
        name: "cosine",
        checks: 100,
        max_rel_error: worst,
    })
}

/// The analytic KL gradient is the derivative along a shift applied to both
/// arguments at once, so the finite difference moves both.
fn kl() -> Result<SuiteResult> {
    let raw = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(p, q)| p * (p.ln() - q.ln())).sum() };
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = SeededRng::new(seed).derive(&[3]);
        let (z1, z2) = (dist(&mut rng, 8), dist(&mut rng, 8));
        let analytic = kl_grad(&z1, &z2)?;
        let h = 1e-6;
        let numeric: Vec<f64> = (0..8)
            .map(|j| {
                let at = |e: f64| {
                    let (mut a, mut b) = (z1.clone(), z2.clone());
                    a[j] += e;
                    b[j] += e;
                    raw(&a, &b)
                };
                (at(h) - at(-h)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    Ok(SuiteResult {
        name: "kl",
        checks: 100,
        max_rel_error: worst,
    })
}

fn similarity_loss() -> Result<SuiteResult> {
    let cfg = SimilarityConfig {
        trigger: Trigger::CtcBidirectional,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = SeededRng::new(seed).derive(&[4]);
        let z2 = normal_vec(&mut rng, 6 * 4);
        let z1 = normal_vec(&mut rng, 6 * 4);
        let p1: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
        let p2: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
        let err = finite_diff_check(
            |tape, x| {
                let other = tape.constant(&[6, 4], z2.clone())?;
                sim_loss(&x, &other, &p1, &p2, &cfg)
            },
            &[6, 4],
            &z1,
            1e-6,
        )?;
        worst = worst.max(err);
    }
    Ok(SuiteResult {
        name: "similarity-loss",
        checks: 20,
        max_rel_error: worst,
    })
}

/// Every parameter coordinate of a small model under the full Siamese
/// objective, dropout masks held fixed.
fn training_objective() -> Result<SuiteResult> {
    let corpus = generate_corpus(&CorpusSpec {
        vocab: 3,
        feature_dim: 4,
        label_len: (2, 3),
        counts: [2, 1, 1],
        ..Default::default()
    })?;
    let mut cfg = preset("BiCTC-T-DropC")?;
    cfg.model.input_dim = 4;
    cfg.model.d_model = 8;
    cfg.model.blocks = 1;
    cfg.model.ffn_dim = 12;
    cfg.model.vocab = 3;
    let mut trainer = Trainer::new(cfg, Execution::Sequential)?;
    let utts: Vec<&Utterance> = corpus.split("train")?.iter().collect();
    let batch = make_siamese_batch(&Batch::from_utterances(&utts, 4));
    let lambda = 0.1;
    let analytic = trainer.batch_gradients(&batch, lambda)?.grads;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for i in 0..trainer.model.params.len() {
        for j in 0..trainer.model.params.values(i).len() {
            let orig = trainer.model.params.values(i)[j];
            trainer.model.params.values_mut(i)[j] = orig + h;
            let up = trainer.batch_gradients(&batch, lambda)?.loss.l_total;
            trainer.model.params.values_mut(i)[j] = orig - h;
            let down = trainer.batch_gradients(&batch, lambda)?.loss.l_total;
            trainer.model.params.values_mut(i)[j] = orig;
            worst = worst.max(max_rel_error(&[analytic[i][j]], &[(up - down) / (2.0 * h)]));
            checks += 1;
        }
    }
    Ok(SuiteResult {
        name: "training-objective",
        checks,
        max_rel_error: worst,
    })
}

/// Runs every suite in a fixed order.
pub fn run_all() -> Result<Vec<SuiteResult>> {
    Ok(vec![
        tensor_ops()?,
        ctc()?,
        cosine()?,
        kl()?,
        similarity_loss()?,
        training_objective()?,
    ])
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_suites_within_tolerance() {
        for r in super::run_all().unwrap() {
            assert!(r.checks > 0 && r.max_rel_error < 1e-5, "{r:?}");
        }
    }
}
