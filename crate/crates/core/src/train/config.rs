use std::fmt::Write as _;

use crate::ctc::PeakScoreMode;
use crate::dropout::{DropoutMode, DropoutPlan, Placement};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::similarity::{DetectionMode, Metric, SimTarget, SimilarityConfig, Trigger};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 200,
            grad_clip: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub dropout1: u64,
    pub dropout2: u64,
    pub data: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            init: 1,
            dropout1: 2,
            dropout2: 3,
            data: 4,
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: String,
    /// Model shape; its dropout field is overwritten from `dropout`.
    pub model: ModelConfig,
    pub dropout: DropoutPlan,
    pub similarity: SimilarityConfig,
    /// Two dropout branches per utterance; false trains a single branch.
    pub siamese: bool,
    pub alpha: f64,
    pub lambda: f64,
    /// Hold the similarity weight at 0 for the first epoch.
    pub lambda_ramp: bool,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: "custom".into(),
            model: ModelConfig::default(),
            dropout: DropoutPlan {
                mode: DropoutMode::Standard,
                rate: 0.1,
                placement: Placement::All,
                base_rate: 0.1,
            },
            similarity: SimilarityConfig::default(),
            siamese: true,
            alpha: 0.3,
            lambda: 0.1,
            lambda_ramp: true,
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            epochs: 20,
            seeds: Seeds::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("invalid value `{v}` for {key}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("{key} expects true or false, got `{v}`"))),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.alpha < 1.0 && !self.model.decoder {
            return Err(Error::config("alpha < 1 needs the decoder; set model.decoder=true or alpha=1"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::config("invalid optimizer settings"));
        }
        if !(o.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip must be non-negative"));
        }
        if !self.siamese && self.lambda > 0.0 {
            return Err(Error::config("lambda > 0 needs siamese=true"));
        }
        self.similarity.validate()?;
        self.resolved_model().map(|_| ())
    }

    /// Model config with the dropout plan applied.
    pub fn resolved_model(&self) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        m.dropout = self.dropout.resolve()?;
        m.validate()?;
        Ok(m)
    }

    /// One `key=value` line per field, fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        let m = &self.model;
        kv("preset", self.preset.clone());
        kv("model.input_dim", m.input_dim.to_string());
        kv("model.d_model", m.d_model.to_string());
        kv("model.blocks", m.blocks.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.subsample", m.subsample.to_string());
        kv("model.ffn_dim", m.ffn_dim.to_string());
        kv("model.vocab", m.vocab.to_string());
        kv("model.decoder", m.decoder.to_string());
        kv("dropout.mode", self.dropout.mode.name().into());
        kv("dropout.rate", self.dropout.rate.to_string());
        kv("dropout.placement", self.dropout.placement.name().into());
        kv("dropout.base_rate", self.dropout.base_rate.to_string());
        let c = &self.similarity;
        kv("sim.metric", c.metric.name().into());
        kv("sim.trigger", c.trigger.name().into());
        kv("sim.target", c.target.name().into());
        kv("sim.stop_gradient", c.stop_gradient.to_string());
        kv("sim.peak_mode", c.peak_mode.name().into());
        kv("sim.detection", c.detection.name().into());
        kv("siamese", self.siamese.to_string());
        kv("alpha", self.alpha.to_string());
        kv("lambda", self.lambda.to_string());
        kv("lambda_ramp", self.lambda_ramp.to_string());
        let o = &self.optimizer;
        kv("optim.lr", o.lr.to_string());
        kv("optim.beta1", o.beta1.to_string());
        kv("optim.beta2", o.beta2.to_string());
        kv("optim.eps", o.eps.to_string());
        kv("optim.warmup", o.warmup.to_string());
        kv("optim.grad_clip", o.grad_clip.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed.init", self.seeds.init.to_string());
        kv("seed.dropout1", self.seeds.dropout1.to_string());
        kv("seed.dropout2", self.seeds.dropout2.to_string());
        kv("seed.data", self.seeds.data.to_string());
        s
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored; a `preset=` line replaces everything set so far
    /// with that preset.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "preset" => {
                if PRESETS.iter().any(|(name, _)| *name == v) {
                    *self = preset(v)?;
                } else {
                    self.preset = v.to_string();
                }
            }
            "model.input_dim" => m.input_dim = num(key, v)?,
            "model.d_model" => m.d_model = num(key, v)?,
            "model.blocks" => m.blocks = num(key, v)?,
            "model.heads" => m.heads = num(key, v)?,
            "model.subsample" => m.subsample = num(key, v)?,
            "model.ffn_dim" => m.ffn_dim = num(key, v)?,
            "model.vocab" => m.vocab = num(key, v)?,
            "model.decoder" => m.decoder = flag(key, v)?,
            "dropout.mode" => self.dropout.mode = DropoutMode::parse(v)?,
            "dropout.rate" => self.dropout.rate = num(key, v)?,
            "dropout.placement" => self.dropout.placement = Placement::parse(v)?,
            "dropout.base_rate" => self.dropout.base_rate = num(key, v)?,
            "sim.metric" => self.similarity.metric = Metric::parse(v)?,
            "sim.trigger" => self.similarity.trigger = Trigger::parse(v)?,
            "sim.target" => self.similarity.target = SimTarget::parse(v)?,
            "sim.stop_gradient" => self.similarity.stop_gradient = flag(key, v)?,
            "sim.peak_mode" => self.similarity.peak_mode = PeakScoreMode::parse(v)?,
            "sim.detection" => self.similarity.detection = DetectionMode::parse(v)?,
            "siamese" => self.siamese = flag(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "lambda" => self.lambda = num(key, v)?,
            "lambda_ramp" => self.lambda_ramp = flag(key, v)?,
            "optim.lr" => self.optimizer.lr = num(key, v)?,
            "optim.beta1" => self.optimizer.beta1 = num(key, v)?,
            "optim.beta2" => self.optimizer.beta2 = num(key, v)?,
            "optim.eps" => self.optimizer.eps = num(key, v)?,
            "optim.warmup" => self.optimizer.warmup = num(key, v)?,
            "optim.grad_clip" => self.optimizer.grad_clip = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "seed.init" => self.seeds.init = num(key, v)?,
            "seed.dropout1" => self.seeds.dropout1 = num(key, v)?,
            "seed.dropout2" => self.seeds.dropout2 = num(key, v)?,
            "seed.data" => self.seeds.data = num(key, v)?,
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

type PresetFn = fn(&mut ExperimentConfig);

fn standard(c: &mut ExperimentConfig) {
    c.dropout = DropoutPlan {
        mode: DropoutMode::Standard,
        rate: 0.1,
        placement: Placement::All,
        base_rate: 0.1,
    };
}

fn structured(c: &mut ExperimentConfig, mode: DropoutMode, placement: Placement) {
    c.dropout = DropoutPlan {
        mode,
        rate: 0.2,
        placement,
        base_rate: 0.1,
    };
}

fn siamese(c: &mut ExperimentConfig, trigger: Trigger) {
    c.siamese = true;
    c.lambda = 0.1;
    c.similarity.metric = Metric::Cosine;
    c.similarity.trigger = trigger;
}

fn single(c: &mut ExperimentConfig) {
    c.siamese = false;
    c.lambda = 0.0;
}

/// Named experiment variants. Structured dropout uses rate 0.2, standard
/// dropout 0.1; sites outside a placement keep standard dropout at 0.1.
pub const PRESETS: &[(&str, PresetFn)] = &[
    ("Baseline", |c| {
        standard(c);
        single(c);
    }),
    ("DropC", |c| {
        standard(c);
        siamese(c, Trigger::AllFrames);
    }),
    ("CTC-DropC", |c| {
        standard(c);
        siamese(c, Trigger::CtcOneDirection);
    }),
    ("BiCTC-DropC", |c| {
        standard(c);
        siamese(c, Trigger::CtcBidirectional);
    }),
    ("S-DropC", |c| {
        structured(c, DropoutMode::Spatial, Placement::All);
        siamese(c, Trigger::AllFrames);
    }),
    ("T-DropC", |c| {
        structured(c, DropoutMode::Temporal, Placement::All);
        siamese(c, Trigger::AllFrames);
    }),
    ("S-T-DropC", |c| {
        structured(c, DropoutMode::SpatialTemporal, Placement::All);
        siamese(c, Trigger::AllFrames);
    }),
    ("BiCTC-T-DropC", |c| {
        structured(c, DropoutMode::Temporal, Placement::All);
        siamese(c, Trigger::CtcBidirectional);
    }),
    ("BiCTC-S-DropC", |c| {
        structured(c, DropoutMode::Spatial, Placement::All);
        siamese(c, Trigger::CtcBidirectional);
    }),
    ("EncS-DropC", |c| {
        structured(c, DropoutMode::Spatial, Placement::EncoderOnly);
        siamese(c, Trigger::AllFrames);
    }),
    ("BiCTC-EncS-DropC", |c| {
        structured(c, DropoutMode::Spatial, Placement::EncoderOnly);
        siamese(c, Trigger::CtcBidirectional);
    }),
    ("S-Drop", |c| {
        structured(c, DropoutMode::Spatial, Placement::All);
        single(c);
    }),
    ("T-Drop", |c| {
        structured(c, DropoutMode::Temporal, Placement::All);
        single(c);
    }),
    ("S-T-Drop", |c| {
        structured(c, DropoutMode::SpatialTemporal, Placement::All);
        single(c);
    }),
    ("ConvS-Drop", |c| {
        structured(c, DropoutMode::Spatial, Placement::ConvOnly);
        single(c);
    }),
    ("EncS-Drop", |c| {
        structured(c, DropoutMode::Spatial, Placement::EncoderOnly);
        single(c);
    }),
    ("EncT-Drop", |c| {
        structured(c, DropoutMode::Temporal, Placement::EncoderOnly);
        single(c);
    }),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let Some((_, apply)) = PRESETS.iter().find(|(n, _)| *n == name) else {
        return Err(Error::UnknownPreset {
            name: name.to_string(),
            available: preset_names().join(", "),
        });
    };
    let mut c = ExperimentConfig::default();
    apply(&mut c);
    c.preset = name.to_string();
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_for_every_preset() {
        for name in preset_names() {
            let c = preset(name).unwrap();
            c.validate().unwrap();
            let back = ExperimentConfig::from_text(&c.to_text()).unwrap();
            assert_eq!(back, c, "{name}");
        }
    }

    #[test]
    fn presets_are_distinct() {
        let texts: Vec<String> = preset_names()
            .iter()
            .map(|n| {
                let mut c = preset(n).unwrap();
                c.preset.clear();
                c.to_text()
            })
            .collect();
        for i in 0..texts.len() {
            for j in i + 1..texts.len() {
                assert_ne!(texts[i], texts[j]);
            }
        }
    }

    #[test]
    fn preset_fidelity() {
        let b = preset("Baseline").unwrap();
        assert_eq!((b.lambda, b.siamese, b.dropout.mode), (0.0, false, DropoutMode::Standard));
        let t = preset("BiCTC-T-DropC").unwrap();
        assert_eq!(t.dropout.mode, DropoutMode::Temporal);
        assert_eq!(t.dropout.rate, 0.2);
        assert_eq!(t.similarity.trigger, Trigger::CtcBidirectional);
        assert_eq!(t.similarity.metric, Metric::Cosine);
        let d = preset("DropC").unwrap();
        assert_eq!((d.dropout.mode, d.similarity.trigger), (DropoutMode::Standard, Trigger::AllFrames));
        let conv = preset("ConvS-Drop").unwrap().resolved_model().unwrap();
        assert_eq!(conv.dropout.conv.mode, DropoutMode::Spatial);
        assert_eq!(conv.dropout.attention.mode, DropoutMode::Standard);
    }

    #[test]
    fn unknown_preset_lists_registry() {
        let err = preset("Nope").unwrap_err().to_string();
        assert!(err.contains("BiCTC-T-DropC") && err.contains("Baseline"));
    }

    #[test]
    fn overrides_apply_after_preset() {
        let c = ExperimentConfig::from_text("preset=T-DropC\nlambda=0.5\n# comment\n").unwrap();
        assert_eq!((c.preset.as_str(), c.lambda), ("T-DropC", 0.5));
        assert!(ExperimentConfig::from_text("alpha=2").is_err());
        assert!(ExperimentConfig::from_text("bogus=1").is_err());
        assert!(ExperimentConfig::from_text("siamese=false\nlambda=0.1").is_err());
    }
}
