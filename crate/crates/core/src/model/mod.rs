//! Miniature conformer-style encoder with a CTC head, an optional one-block
//! attention decoder, the joint loss and checkpoint I/O.
//!
//! Encoder: frame stacking with an input projection, sinusoidal
//! positions, then `blocks` × (self-attention → depthwise conv + pointwise →
//! feed-forward), each sublayer post-norm with a residual and a dropout site.
//! Decoder: token embedding (index 0 doubles as start and end marker), causal
//! self-attention, cross-attention over the encoder output and feed-forward.

mod checkpoint;
mod loss;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{combine_losses, LossBreakdown};
pub use params::ParamSet;

use crate::ctc::{ctc_loss, BLANK};
use crate::dropout::{DropoutContext, SiteClass, SiteDropout};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{DiffTensor, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub subsample: usize,
    pub ffn_dim: usize,
    /// Number of real tokens K; outputs have K + 1 classes.
    pub vocab: usize,
    pub decoder: bool,
    pub dropout: SiteDropout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            d_model: 32,
            blocks: 2,
            heads: 2,
            subsample: 2,
            ffn_dim: 64,
            vocab: 8,
            decoder: true,
            dropout: SiteDropout::off(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.d_model == 0 || self.ffn_dim == 0 || self.vocab == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if !matches!(self.subsample, 1 | 2) {
            return bad(format!("subsampling factor must be 1 or 2, got {}", self.subsample));
        }
        if self.blocks == 0 {
            return bad("at least one encoder block is required".into());
        }
        for site in SiteClass::ALL {
            self.dropout.get(site).validate()?;
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.vocab + 1
    }

    /// Frames after subsampling.
    pub fn output_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample)
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Head {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Clone, Debug)]
struct Attention {
    heads: Vec<Head>,
    out_bias: usize,
}

#[derive(Clone, Debug)]
struct Conv {
    depthwise: usize,
    depthwise_bias: usize,
    pointwise: Linear,
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    attention: Attention,
    norm_att: Norm,
    conv: Conv,
    norm_conv: Norm,
    ffn: FeedForward,
    norm_ffn: Norm,
}

#[derive(Clone, Debug)]
struct Decoder {
    embed: usize,
    self_att: Attention,
    norm_self: Norm,
    cross_att: Attention,
    norm_cross: Norm,
    ffn: FeedForward,
    norm_ffn: Norm,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    input: Linear,
    blocks: Vec<EncoderBlock>,
    ctc_head: Linear,
    decoder: Option<Decoder>,
}

struct Builder<'a> {
    params: ParamSet,
    rng: &'a mut SeededRng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.params.push_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, self.rng),
            b: self.params.push_uniform(format!("{name}.b"), &[1, fan_out], fan_in, self.rng),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.params.push_const(format!("{name}.gain"), &[1, d], 1.0),
            bias: self.params.push_const(format!("{name}.bias"), &[1, d], 0.0),
        }
    }

    fn attention(&mut self, name: &str, d: usize, heads: usize) -> Attention {
        let dh = d / heads;
        let heads = (0..heads)
            .map(|h| Head {
                q: self.params.push_uniform(format!("{name}.h{h}.q"), &[d, dh], d, self.rng),
                k: self.params.push_uniform(format!("{name}.h{h}.k"), &[d, dh], d, self.rng),
                v: self.params.push_uniform(format!("{name}.h{h}.v"), &[d, dh], d, self.rng),
                o: self.params.push_uniform(format!("{name}.h{h}.o"), &[dh, d], d, self.rng),
            })
            .collect();
        Attention {
            heads,
            out_bias: self.params.push_uniform(format!("{name}.o.b"), &[1, d], d, self.rng),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, hidden),
            down: self.linear(&format!("{name}.down"), hidden, d),
        }
    }
}

/// Model parameters plus the structure that reads them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    layout: Layout,
}

/// Encoder results for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput<'t> {
    /// `T' × d_model`.
    pub hidden: DiffTensor<'t>,
    /// `T' × (K+1)` CTC log-posteriors.
    pub log_probs: DiffTensor<'t>,
}

/// One branch (one forward pass) over one utterance.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput<'t> {
    pub encoder: EncoderOutput<'t>,
    pub l_ctc: DiffTensor<'t>,
    pub l_att: Option<DiffTensor<'t>>,
}

const NORM_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

fn positional(frames: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; frames * d];
    for t in 0..frames {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = t as f64 / rate;
            pe[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut b = Builder {
            params: ParamSet::new(),
            rng,
        };
        let input = b.linear("input", config.subsample * config.input_dim, d);
        let blocks = (0..config.blocks)
            .map(|i| {
                let p = format!("enc{i}");
                EncoderBlock {
                    attention: b.attention(&format!("{p}.att"), d, config.heads),
                    norm_att: b.norm(&format!("{p}.norm_att"), d),
                    conv: Conv {
                        depthwise: b.params.push_uniform(format!("{p}.conv.dw"), &[3, d], 3, b.rng),
                        depthwise_bias: b.params.push_uniform(format!("{p}.conv.dw_b"), &[1, d], 3, b.rng),
                        pointwise: b.linear(&format!("{p}.conv.pw"), d, d),
                    },
                    norm_conv: b.norm(&format!("{p}.norm_conv"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, config.ffn_dim),
                    norm_ffn: b.norm(&format!("{p}.norm_ffn"), d),
                }
            })
            .collect();
        let ctc_head = b.linear("ctc", d, config.classes());
        let decoder = config.decoder.then(|| Decoder {
            embed: b.params.push_uniform("dec.embed", &[config.classes(), d], 1, b.rng),
            self_att: b.attention("dec.self", d, config.heads),
            norm_self: b.norm("dec.norm_self", d),
            cross_att: b.attention("dec.cross", d, config.heads),
            norm_cross: b.norm("dec.norm_cross", d),
            ffn: b.ffn("dec.ffn", d, config.ffn_dim),
            norm_ffn: b.norm("dec.norm_ffn", d),
            out: b.linear("dec.out", d, config.classes()),
        });
        Ok(Self {
            config,
            params: b.params,
            layout: Layout {
                input,
                blocks,
                ctc_head,
                decoder,
            },
        })
    }

    /// Zeroes the decoder output projection so its logits start uniform.
    pub fn zero_decoder_logits(&mut self) {
        if let Some(dec) = &self.layout.decoder {
            for id in [dec.out.w, dec.out.b] {
                self.params.values_mut(id).fill(0.0);
            }
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<DiffTensor<'t>> {
        self.params.bind(tape)
    }

    fn linear<'t>(&self, p: &[DiffTensor<'t>], l: &Linear, x: &DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        x.matmul(&p[l.w])?.add(&p[l.b])
    }

    /// Input projection of consecutive frame groups: output frame o sees
    /// frames o·s .. o·s+s−1 side by side (zeros past the end), as one linear
    /// map over the stacked `s·F` vector.
    fn stack_frames<'t>(&self, p: &[DiffTensor<'t>], x: &DiffTensor<'t>, out_frames: usize) -> Result<DiffTensor<'t>> {
        let (s, f) = (self.config.subsample, self.config.input_dim);
        let frames = x.shape()[0];
        let l = &self.layout.input;
        if s == 1 {
            return self.linear(p, l, x);
        }
        let tape = x.tape();
        let padded = if out_frames * s > frames {
            tape.concat(&[*x, tape.zeros(&[out_frames * s - frames, f])?])?
        } else {
            *x
        };
        let mut acc = p[l.b];
        for k in 0..s {
            let rows: Vec<usize> = (0..out_frames).map(|o| o * s + k).collect();
            let part = padded.select_rows(&rows)?.matmul(&p[l.w].slice_rows(k * f, (k + 1) * f)?)?;
            acc = part.add(&acc)?;
        }
        Ok(acc)
    }

    fn norm<'t>(&self, p: &[DiffTensor<'t>], n: &Norm, x: &DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        let centered = x.sub(&x.mean_axis(1)?)?;
        let var = centered.mul(&centered)?.mean_axis(1)?;
        let normed = centered.div(&var.add_scalar(NORM_EPS).sqrt()?)?;
        normed.mul(&p[n.gain])?.add(&p[n.bias])
    }

    fn attention<'t>(
        &self,
        p: &[DiffTensor<'t>],
        a: &Attention,
        x: &DiffTensor<'t>,
        memory: &DiffTensor<'t>,
        causal: bool,
    ) -> Result<DiffTensor<'t>> {
        let dh = self.config.d_model / self.config.heads;
        let (tq, tk) = (x.shape()[0], memory.shape()[0]);
        let mask: Option<Vec<bool>> =
            causal.then(|| (0..tq).flat_map(|i| (0..tk).map(move |j| j > i)).collect());
        let mut out: Option<DiffTensor<'t>> = None;
        for h in &a.heads {
            let q = x.matmul(&p[h.q])?;
            let k = memory.matmul(&p[h.k])?;
            let v = memory.matmul(&p[h.v])?;
            let mut scores = q.matmul(&k.t()?)?.scale(1.0 / (dh as f64).sqrt());
            if let Some(m) = &mask {
                scores = scores.masked_fill(m, MASKED)?;
            }
            let head = scores.softmax().matmul(&v)?.matmul(&p[h.o])?;
            out = Some(match out {
                None => head,
                Some(acc) => acc.add(&head)?,
            });
        }
        out.expect("at least one head").add(&p[a.out_bias])
    }

    fn conv<'t>(&self, p: &[DiffTensor<'t>], c: &Conv, x: &DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        let tape = x.tape();
        let [frames, d] = x.shape()[..] else { unreachable!() };
        let kernel = p[c.depthwise];
        let tap = |k: usize| kernel.slice_rows(k, k + 1);
        let mut y = x.mul(&tap(1)?)?;
        if frames > 1 {
            let zero = tape.zeros(&[1, d])?;
            let prev = tape.concat(&[zero, x.slice_rows(0, frames - 1)?])?;
            let next = tape.concat(&[x.slice_rows(1, frames)?, zero])?;
            y = y.add(&prev.mul(&tap(0)?)?)?.add(&next.mul(&tap(2)?)?)?;
        }
        let y = y.add(&p[c.depthwise_bias])?.swish()?;
        self.linear(p, &c.pointwise, &y)
    }

    fn ffn<'t>(&self, p: &[DiffTensor<'t>], f: &FeedForward, x: &DiffTensor<'t>) -> Result<DiffTensor<'t>> {
        let h = self.linear(p, &f.up, x)?.swish()?;
        self.linear(p, &f.down, &h)
    }

    fn residual<'t>(
        &self,
        p: &[DiffTensor<'t>],
        norm: &Norm,
        x: &DiffTensor<'t>,
        sub: DiffTensor<'t>,
        site: SiteClass,
        ctx: &mut DropoutContext,
    ) -> Result<DiffTensor<'t>> {
        let dropped = ctx.apply(&sub, &self.config.dropout.get(site))?;
        self.norm(p, norm, &x.add(&dropped)?)
    }

    /// Encoder over a `T × F` input.
    pub fn encode<'t>(
        &self,
        p: &[DiffTensor<'t>],
        x: &DiffTensor<'t>,
        ctx: &mut DropoutContext,
    ) -> Result<EncoderOutput<'t>> {
        let cfg = &self.config;
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != cfg.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: shape,
                right: vec![0, cfg.input_dim],
            });
        }
        let frames = shape[0];
        if frames < cfg.subsample {
            return Err(Error::InvalidShape {
                op: "encode (fewer frames than the subsampling factor)",
                shape,
            });
        }
        let tape = x.tape();
        let out_frames = cfg.output_frames(frames);
        let pe = tape.constant(&[out_frames, cfg.d_model], positional(out_frames, cfg.d_model))?;
        let mut h = self.stack_frames(p, x, out_frames)?.add(&pe)?;
        for b in &self.layout.blocks {
            let att = self.attention(p, &b.attention, &h, &h, false)?;
            h = self.residual(p, &b.norm_att, &h, att, SiteClass::Attention, ctx)?;
            let conv = self.conv(p, &b.conv, &h)?;
            h = self.residual(p, &b.norm_conv, &h, conv, SiteClass::Conv, ctx)?;
            let ff = self.ffn(p, &b.ffn, &h)?;
            h = self.residual(p, &b.norm_ffn, &h, ff, SiteClass::FeedForward, ctx)?;
        }
        let log_probs = self.linear(p, &self.layout.ctc_head, &h)?.log_softmax();
        Ok(EncoderOutput { hidden: h, log_probs })
    }

    /// Teacher-forced cross-entropy of the decoder, averaged over the
    /// `targets.len() + 1` predicted positions (the last predicts the end
    /// marker).
    pub fn decode<'t>(
        &self,
        p: &[DiffTensor<'t>],
        hidden: &DiffTensor<'t>,
        targets: &[usize],
        ctx: &mut DropoutContext,
    ) -> Result<DiffTensor<'t>> {
        let Some(dec) = &self.layout.decoder else {
            return Err(Error::DecoderDisabled);
        };
        let cfg = &self.config;
        for &y in targets {
            if y == BLANK || y > cfg.vocab {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    vocab: cfg.vocab,
                });
            }
        }
        let tape = hidden.tape();
        let steps = targets.len() + 1;
        let mut inputs = vec![BLANK];
        inputs.extend_from_slice(targets);
        let pe = tape.constant(&[steps, cfg.d_model], positional(steps, cfg.d_model))?;
        let mut h = p[dec.embed].select_rows(&inputs)?.add(&pe)?;
        let site = SiteClass::Decoder;
        let sa = self.attention(p, &dec.self_att, &h, &h, true)?;
        h = self.residual(p, &dec.norm_self, &h, sa, site, ctx)?;
        let ca = self.attention(p, &dec.cross_att, &h, hidden, false)?;
        h = self.residual(p, &dec.norm_cross, &h, ca, site, ctx)?;
        let ff = self.ffn(p, &dec.ffn, &h)?;
        h = self.residual(p, &dec.norm_ffn, &h, ff, site, ctx)?;
        let log_probs = self.linear(p, &dec.out, &h)?.log_softmax();
        let classes = cfg.classes();
        let mut pick = vec![0.0; steps * classes];
        for (i, &y) in targets.iter().chain(std::iter::once(&BLANK)).enumerate() {
            pick[i * classes + y] = 1.0;
        }
        let pick = tape.constant(&[steps, classes], pick)?;
        Ok(log_probs.mul(&pick)?.sum().scale(-1.0 / steps as f64))
    }

    /// Encoder, CTC loss and (when the decoder is enabled and `with_att`)
    /// attention loss for one utterance on one branch.
    pub fn branch<'t>(
        &self,
        p: &[DiffTensor<'t>],
        x: &DiffTensor<'t>,
        targets: &[usize],
        with_att: bool,
        ctx: &mut DropoutContext,
    ) -> Result<BranchOutput<'t>> {
        let encoder = self.encode(p, x, ctx)?;
        let l_ctc = ctc_loss(&encoder.log_probs, targets)?;
        let l_att = if with_att {
            Some(self.decode(p, &encoder.hidden, targets, ctx)?)
        } else {
            None
        };
        Ok(BranchOutput { encoder, l_ctc, l_att })
    }
}
