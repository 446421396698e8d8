//! Standard, spatial, temporal and spatial-temporal dropout over `T × D`
//! activation maps (rows are frames, columns are feature dimensions).
//!
//! All modes use inverted dropout: survivors are scaled at training time and
//! inference is the identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::DiffTensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMode {
    /// Independent Bernoulli per element.
    #[default]
    Standard,
    /// Whole feature columns.
    Spatial,
    /// Whole frames.
    Temporal,
    /// Independent row and column draws, composed.
    SpatialTemporal,
}

impl DropoutMode {
    pub const ALL: [DropoutMode; 4] = [
        DropoutMode::Standard,
        DropoutMode::Spatial,
        DropoutMode::Temporal,
        DropoutMode::SpatialTemporal,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DropoutMode::Standard => "standard",
            DropoutMode::Spatial => "spatial",
            DropoutMode::Temporal => "temporal",
            DropoutMode::SpatialTemporal => "spatial_temporal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown dropout mode `{s}`")))
    }

    pub fn drops_rows(&self) -> bool {
        matches!(self, DropoutMode::Temporal | DropoutMode::SpatialTemporal)
    }

    pub fn drops_cols(&self) -> bool {
        matches!(self, DropoutMode::Spatial | DropoutMode::SpatialTemporal)
    }
}

/// Which site classes receive the structured mode; the rest keep standard dropout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    All,
    EncoderOnly,
    DecoderOnly,
    ConvOnly,
}

impl Placement {
    pub const ALL: [Placement; 4] = [
        Placement::All,
        Placement::EncoderOnly,
        Placement::DecoderOnly,
        Placement::ConvOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Placement::All => "all",
            Placement::EncoderOnly => "encoder_only",
            Placement::DecoderOnly => "decoder_only",
            Placement::ConvOnly => "conv_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown dropout placement `{s}`")))
    }

    fn covers(&self, site: SiteClass) -> bool {
        match self {
            Placement::All => true,
            Placement::EncoderOnly => site != SiteClass::Decoder,
            Placement::DecoderOnly => site == SiteClass::Decoder,
            Placement::ConvOnly => site == SiteClass::Conv,
        }
    }
}

/// Classes of dropout sites in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteClass {
    Attention,
    Conv,
    FeedForward,
    Decoder,
}

impl SiteClass {
    pub const ALL: [SiteClass; 4] = [
        SiteClass::Attention,
        SiteClass::Conv,
        SiteClass::FeedForward,
        SiteClass::Decoder,
    ];
}

/// Dropout applied at one site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub mode: DropoutMode,
    pub rate: f64,
}

impl DropoutSpec {
    pub fn new(mode: DropoutMode, rate: f64) -> Result<Self> {
        let spec = Self { mode, rate };
        spec.validate()?;
        Ok(spec)
    }

    pub fn off() -> Self {
        Self {
            mode: DropoutMode::Standard,
            rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::config(format!(
                "dropout rate {} outside [0, 1)",
                self.rate
            )));
        }
        Ok(())
    }
}

/// Resolved dropout for every site class of the model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteDropout {
    pub attention: DropoutSpec,
    pub conv: DropoutSpec,
    pub feed_forward: DropoutSpec,
    pub decoder: DropoutSpec,
}

impl SiteDropout {
    pub fn uniform(spec: DropoutSpec) -> Self {
        Self {
            attention: spec,
            conv: spec,
            feed_forward: spec,
            decoder: spec,
        }
    }

    pub fn off() -> Self {
        Self::uniform(DropoutSpec::off())
    }

    pub fn get(&self, site: SiteClass) -> DropoutSpec {
        match site {
            SiteClass::Attention => self.attention,
            SiteClass::Conv => self.conv,
            SiteClass::FeedForward => self.feed_forward,
            SiteClass::Decoder => self.decoder,
        }
    }
}

/// Experiment-level dropout description: a mode and rate for the sites
/// selected by `placement`, standard dropout at `base_rate` elsewhere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutPlan {
    pub mode: DropoutMode,
    pub rate: f64,
    pub placement: Placement,
    pub base_rate: f64,
}

impl DropoutPlan {
    pub fn resolve(&self) -> Result<SiteDropout> {
        let structured = DropoutSpec::new(self.mode, self.rate)?;
        let base = DropoutSpec::new(DropoutMode::Standard, self.base_rate)?;
        let pick = |site| {
            if self.placement.covers(site) {
                structured
            } else {
                base
            }
        };
        Ok(SiteDropout {
            attention: pick(SiteClass::Attention),
            conv: pick(SiteClass::Conv),
            feed_forward: pick(SiteClass::FeedForward),
            decoder: pick(SiteClass::Decoder),
        })
    }
}

/// Keep pattern for one `T × D` map.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredMask {
    pub mode: DropoutMode,
    pub frames: usize,
    pub features: usize,
    pub rows_kept: Vec<bool>,
    pub cols_kept: Vec<bool>,
    /// Per-element pattern, standard mode only.
    pub elements: Option<Vec<bool>>,
    pub scale: f64,
}

impl StructuredMask {
    pub fn keep_all(frames: usize, features: usize) -> Self {
        Self {
            mode: DropoutMode::Standard,
            frames,
            features,
            rows_kept: vec![true; frames],
            cols_kept: vec![true; features],
            elements: None,
            scale: 1.0,
        }
    }

    pub fn keeps(&self, t: usize, d: usize) -> bool {
        let structured = self.rows_kept[t] && self.cols_kept[d];
        match &self.elements {
            Some(e) => structured && e[t * self.features + d],
            None => structured,
        }
    }

    /// Multiplier for each element, row-major.
    pub fn factors(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.frames * self.features);
        for t in 0..self.frames {
            for d in 0..self.features {
                out.push(if self.keeps(t, d) { self.scale } else { 0.0 });
            }
        }
        out
    }

    pub fn kept_fraction(&self) -> f64 {
        let kept = (0..self.frames)
            .flat_map(|t| (0..self.features).map(move |d| (t, d)))
            .filter(|&(t, d)| self.keeps(t, d))
            .count();
        kept as f64 / (self.frames * self.features) as f64
    }
}

/// Draws a mask. Rows and/or columns are dropped independently with
/// probability `rate`; standard mode draws every element independently.
pub fn sample_mask(spec: &DropoutSpec, frames: usize, features: usize, rng: &mut SeededRng) -> StructuredMask {
    let p = spec.rate;
    if p == 0.0 {
        return StructuredMask::keep_all(frames, features);
    }
    let keep = 1.0 - p;
    let mut mask = StructuredMask {
        mode: spec.mode,
        frames,
        features,
        rows_kept: vec![true; frames],
        cols_kept: vec![true; features],
        elements: None,
        scale: 1.0 / keep,
    };
    match spec.mode {
        DropoutMode::Standard => {
            mask.elements = Some((0..frames * features).map(|_| !rng.bernoulli(p)).collect());
        }
        mode => {
            if mode.drops_rows() {
                mask.rows_kept = (0..frames).map(|_| !rng.bernoulli(p)).collect();
            }
            if mode.drops_cols() {
                mask.cols_kept = (0..features).map(|_| !rng.bernoulli(p)).collect();
            }
            if mode == DropoutMode::SpatialTemporal {
                mask.scale = 1.0 / (keep * keep);
            }
        }
    }
    mask
}

/// Applies `mask` to a `T × D` tensor. Identity when `training` is false.
pub fn apply_dropout<'t>(x: &DiffTensor<'t>, mask: &StructuredMask, training: bool) -> Result<DiffTensor<'t>> {
    if !training {
        return Ok(*x);
    }
    let shape = x.shape();
    if shape != [mask.frames, mask.features] {
        return Err(Error::ShapeMismatch {
            op: "apply_dropout",
            left: shape,
            right: vec![mask.frames, mask.features],
        });
    }
    if mask.scale == 1.0 && mask.elements.is_none() && mask.rows_kept.iter().chain(&mask.cols_kept).all(|&k| k) {
        return Ok(*x);
    }
    let factors = x.tape().constant(&shape, mask.factors())?;
    x.mul(&factors)
}

/// Training flag plus the random stream feeding every dropout site of one
/// forward pass. Each application draws a fresh mask.
#[derive(Clone, Debug)]
pub struct DropoutContext {
    training: bool,
    rng: SeededRng,
}

impl DropoutContext {
    pub fn train(rng: SeededRng) -> Self {
        Self { training: true, rng }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            rng: SeededRng::new(0),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn apply<'t>(&mut self, x: &DiffTensor<'t>, spec: &DropoutSpec) -> Result<DiffTensor<'t>> {
        if !self.training || spec.rate == 0.0 {
            return Ok(*x);
        }
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "dropout",
                shape,
            });
        }
        let mask = sample_mask(spec, shape[0], shape[1], &mut self.rng);
        apply_dropout(x, &mask, true)
    }
}
