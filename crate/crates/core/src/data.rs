//! Synthetic speech-like corpus: every token has a fixed prototype feature
//! vector, utterances render their labels as runs of noisy prototype frames
//! separated by near-silent frames.
//!
//! On disk a corpus directory holds `corpus.spec` (the generating spec as
//! key=value text) and, per split, `<split>.manifest` plus `<split>.feats`.
//! A manifest line is `id<TAB>frames<TAB>labels` with space-separated labels;
//! the last line is `checksum<TAB><sha256>` over the manifest lines above it
//! followed by the feature bytes. Features are little-endian f64, utterances
//! stored back to back in manifest order.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::ctc::adjacent_repeats;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub vocab: usize,
    pub feature_dim: usize,
    /// Per-utterance perturbation of the token prototypes.
    pub proto_noise: f64,
    /// Per-frame noise on token frames; silence frames get a tenth of it.
    pub frame_noise: f64,
    pub duration: (usize, usize),
    pub silence: (usize, usize),
    pub label_len: (usize, usize),
    pub counts: [usize; 3],
    pub seed: u64,
    /// Trailing silence is extended until `frames / subsample_guard` frames
    /// still fit the labels under CTC, and repeated tokens are separated by
    /// at least this many silent frames.
    pub subsample_guard: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab: 8,
            feature_dim: 16,
            proto_noise: 0.1,
            frame_noise: 0.3,
            duration: (2, 5),
            silence: (1, 3),
            label_len: (3, 10),
            counts: [2000, 200, 200],
            seed: 1,
            subsample_guard: 2,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab == 0 || self.feature_dim == 0 {
            return bad("vocab and feature_dim must be positive".into());
        }
        if !(self.proto_noise >= 0.0 && self.frame_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        for (name, (lo, hi)) in [
            ("duration", self.duration),
            ("silence", self.silence),
            ("label_len", self.label_len),
        ] {
            if lo > hi {
                return bad(format!("{name} range {lo}..{hi} is empty"));
            }
        }
        if self.duration.0 == 0 {
            return bad("token duration must be at least 1 frame".into());
        }
        if self.label_len.0 == 0 {
            return bad("utterances need at least one label".into());
        }
        if self.subsample_guard == 0 {
            return bad("subsample_guard must be at least 1".into());
        }
        Ok(())
    }

    /// Canonical `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let r = |(a, b): (usize, usize)| format!("{a},{b}");
        writeln!(s, "vocab={}", self.vocab).unwrap();
        writeln!(s, "feature_dim={}", self.feature_dim).unwrap();
        writeln!(s, "proto_noise={}", self.proto_noise).unwrap();
        writeln!(s, "frame_noise={}", self.frame_noise).unwrap();
        writeln!(s, "duration={}", r(self.duration)).unwrap();
        writeln!(s, "silence={}", r(self.silence)).unwrap();
        writeln!(s, "label_len={}", r(self.label_len)).unwrap();
        writeln!(s, "counts={},{},{}", self.counts[0], self.counts[1], self.counts[2]).unwrap();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "subsample_guard={}", self.subsample_guard).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected key=value, got `{line}`")))?;
            spec.set(k.trim(), v.trim())?;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(format!("invalid value `{v}` for {key}")))
        }
        fn pair(key: &str, v: &str) -> Result<(usize, usize)> {
            let (a, b) = v
                .split_once(',')
                .ok_or_else(|| Error::config(format!("{key} expects `lo,hi`, got `{v}`")))?;
            Ok((num(key, a.trim())?, num(key, b.trim())?))
        }
        match key {
            "vocab" => self.vocab = num(key, value)?,
            "feature_dim" => self.feature_dim = num(key, value)?,
            "proto_noise" => self.proto_noise = num(key, value)?,
            "frame_noise" => self.frame_noise = num(key, value)?,
            "duration" => self.duration = pair(key, value)?,
            "silence" => self.silence = pair(key, value)?,
            "label_len" => self.label_len = pair(key, value)?,
            "counts" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 3 {
                    return Err(Error::config(format!("counts expects `train,dev,test`, got `{value}`")));
                }
                for (slot, p) in self.counts.iter_mut().zip(parts) {
                    *slot = num(key, p.trim())?;
                }
            }
            "seed" => self.seed = num(key, value)?,
            "subsample_guard" => self.subsample_guard = num(key, value)?,
            other => return Err(Error::config(format!("unknown corpus key `{other}`"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Row-major `frames × feature_dim`.
    pub features: Vec<f64>,
    pub frames: usize,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub prototypes: Vec<Vec<f64>>,
    pub splits: Vec<(String, Vec<Utterance>)>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        self.splits
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, u)| u.as_slice())
            .ok_or_else(|| Error::config(format!("no split `{name}` (have train, dev, test)")))
    }
}

fn prototypes(spec: &CorpusSpec) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::new(spec.seed).derive(&[0]);
    (0..spec.vocab)
        .map(|_| (0..spec.feature_dim).map(|_| rng.normal(0.0, 1.0)).collect())
        .collect()
}

fn render(spec: &CorpusSpec, protos: &[Vec<f64>], id: String, rng: &mut SeededRng) -> Utterance {
    let f = spec.feature_dim;
    let len = rng.int_inclusive(spec.label_len.0, spec.label_len.1);
    let labels: Vec<usize> = (0..len).map(|_| rng.int_inclusive(1, spec.vocab)).collect();
    let local: Vec<Vec<f64>> = protos
        .iter()
        .map(|p| p.iter().map(|&v| v + rng.normal(0.0, spec.proto_noise)).collect())
        .collect();
    let silence_sd = spec.frame_noise / 10.0;
    let mut features = Vec::new();
    let silence = |n: usize, features: &mut Vec<f64>, rng: &mut SeededRng| {
        for _ in 0..n * f {
            features.push(rng.normal(0.0, silence_sd));
        }
    };
    let draw_silence = |rng: &mut SeededRng| rng.int_inclusive(spec.silence.0, spec.silence.1);
    let lead = draw_silence(rng);
    silence(lead, &mut features, rng);
    for (i, &y) in labels.iter().enumerate() {
        if i > 0 {
            let mut gap = draw_silence(rng);
            if labels[i - 1] == y {
                gap = gap.max(spec.subsample_guard);
            }
            silence(gap, &mut features, rng);
        }
        let dur = rng.int_inclusive(spec.duration.0, spec.duration.1);
        for _ in 0..dur {
            for &v in &local[y - 1] {
                features.push(v + rng.normal(0.0, spec.frame_noise));
            }
        }
    }
    let mut trail = draw_silence(rng);
    let needed = labels.len() + adjacent_repeats(&labels);
    let frames_so_far = features.len() / f;
    while (frames_so_far + trail).div_ceil(spec.subsample_guard) < needed {
        trail += 1;
    }
    silence(trail, &mut features, rng);
    let frames = features.len() / f;
    Utterance {
        id,
        features,
        frames,
        labels,
    }
}

/// Builds the corpus in memory; a pure function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let protos = prototypes(spec);
    let splits = SPLITS
        .iter()
        .zip(spec.counts)
        .enumerate()
        .map(|(si, (name, count))| {
            let mut rng = SeededRng::new(spec.seed).derive(&[1, si as u64]);
            let utts = (0..count)
                .map(|i| render(spec, &protos, format!("{name}-{i:05}"), &mut rng))
                .collect();
            (name.to_string(), utts)
        })
        .collect();
    Ok(Corpus {
        spec: spec.clone(),
        prototypes: protos,
        splits,
    })
}

fn manifest_body(utts: &[Utterance]) -> String {
    let mut s = String::new();
    for u in utts {
        let labels: Vec<String> = u.labels.iter().map(|l| l.to_string()).collect();
        writeln!(s, "{}\t{}\t{}", u.id, u.frames, labels.join(" ")).unwrap();
    }
    s
}

fn digest(body: &[u8], feats: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(body);
    h.update(feats);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `corpus` under `dir`, creating it if needed.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("corpus.spec"), corpus.spec.to_text())?;
    for (name, utts) in &corpus.splits {
        let body = manifest_body(utts);
        let feats: Vec<u8> = utts
            .iter()
            .flat_map(|u| u.features.iter().flat_map(|v| v.to_le_bytes()))
            .collect();
        let manifest = format!("{body}checksum\t{}\n", digest(body.as_bytes(), &feats));
        std::fs::write(dir.join(format!("{name}.manifest")), manifest)?;
        std::fs::write(dir.join(format!("{name}.feats")), feats)?;
    }
    Ok(())
}

/// Generates and writes in one go.
pub fn generate_to(spec: &CorpusSpec, dir: &Path) -> Result<Corpus> {
    let corpus = generate_corpus(spec)?;
    write_corpus(&corpus, dir)?;
    Ok(corpus)
}

fn load_split(dir: &Path, name: &str, spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    let mpath = dir.join(format!("{name}.manifest"));
    let fpath = dir.join(format!("{name}.feats"));
    let manifest = std::fs::read_to_string(&mpath)?;
    let feats = std::fs::read(&fpath)?;
    let corrupt = |reason: String| Error::corrupt(&mpath, reason);

    let trimmed = manifest.strip_suffix('\n').unwrap_or(&manifest);
    let (body_len, last) = match trimmed.rfind('\n') {
        Some(i) => (i + 1, &trimmed[i + 1..]),
        None => (0, trimmed),
    };
    let expected = last
        .strip_prefix("checksum\t")
        .ok_or_else(|| corrupt("missing checksum line".into()))?;
    let body = &manifest[..body_len];
    let actual = digest(body.as_bytes(), &feats);
    if actual != expected {
        return Err(Error::Checksum {
            path: mpath.display().to_string(),
            expected: expected.to_string(),
            actual,
        });
    }
    if feats.len() % 8 != 0 {
        return Err(Error::corrupt(&fpath, "length is not a multiple of 8"));
    }
    let values: Vec<f64> = feats
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let f = spec.feature_dim;
    let mut offset = 0;
    let mut utts = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, frames, labels] = fields[..] else {
            return Err(corrupt(format!("line {}: expected 3 tab-separated fields", lineno + 1)));
        };
        let frames: usize = frames
            .parse()
            .map_err(|_| corrupt(format!("line {}: bad frame count `{frames}`", lineno + 1)))?;
        let labels = labels
            .split_whitespace()
            .map(|l| l.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| corrupt(format!("line {}: bad label list", lineno + 1)))?;
        if labels.iter().any(|&l| l == 0 || l > spec.vocab) {
            return Err(corrupt(format!("line {}: label outside 1..={}", lineno + 1, spec.vocab)));
        }
        let end = offset + frames * f;
        if end > values.len() {
            return Err(Error::corrupt(&fpath, "fewer feature values than the manifest declares"));
        }
        utts.push(Utterance {
            id: id.to_string(),
            features: values[offset..end].to_vec(),
            frames,
            labels,
        });
        offset = end;
    }
    if offset != values.len() {
        return Err(Error::corrupt(&fpath, "more feature values than the manifest declares"));
    }
    Ok(utts)
}

/// Reads a corpus directory, verifying every split checksum.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let spec = CorpusSpec::from_text(&std::fs::read_to_string(dir.join("corpus.spec"))?)?;
    let splits = SPLITS
        .iter()
        .map(|name| Ok((name.to_string(), load_split(dir, name, &spec)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        prototypes: prototypes(&spec),
        spec,
        splits,
    })
}

/// Padded mini-batch. Features are `N × max_frames × F`, zero past each
/// utterance's length; labels are padded with 0 past `label_lengths`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub feature_dim: usize,
    pub max_frames: usize,
    pub features: Vec<f64>,
    pub lengths: Vec<usize>,
    pub labels: Vec<Vec<usize>>,
    pub label_lengths: Vec<usize>,
    /// Siamese branch (1 or 2) each entry feeds.
    pub branches: Vec<u8>,
    /// Position of the original utterance each entry was copied from.
    pub sources: Vec<usize>,
}

impl Batch {
    pub fn from_utterances(utts: &[&Utterance], feature_dim: usize) -> Self {
        let max_frames = utts.iter().map(|u| u.frames).max().unwrap_or(0);
        let max_labels = utts.iter().map(|u| u.labels.len()).max().unwrap_or(0);
        let mut features = vec![0.0; utts.len() * max_frames * feature_dim];
        for (i, u) in utts.iter().enumerate() {
            let start = i * max_frames * feature_dim;
            features[start..start + u.features.len()].copy_from_slice(&u.features);
        }
        Self {
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            feature_dim,
            max_frames,
            features,
            lengths: utts.iter().map(|u| u.frames).collect(),
            labels: utts
                .iter()
                .map(|u| {
                    let mut l = u.labels.clone();
                    l.resize(max_labels, 0);
                    l
                })
                .collect(),
            label_lengths: utts.iter().map(|u| u.labels.len()).collect(),
            branches: vec![1; utts.len()],
            sources: (0..utts.len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Unpadded features of entry `i`.
    pub fn features_of(&self, i: usize) -> &[f64] {
        let start = i * self.max_frames * self.feature_dim;
        &self.features[start..start + self.lengths[i] * self.feature_dim]
    }

    pub fn labels_of(&self, i: usize) -> &[usize] {
        &self.labels[i][..self.label_lengths[i]]
    }

    /// True for padded frames, row-major `N × max_frames`.
    pub fn padding_mask(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&len| (0..self.max_frames).map(move |t| t >= len))
            .collect()
    }
}

/// Splits `utts` (in the given order) into batches of at most `size`; the
/// last batch holds the remainder.
pub fn make_batches(utts: &[Utterance], order: &[usize], size: usize, feature_dim: usize) -> Vec<Batch> {
    let size = size.max(1);
    order
        .chunks(size)
        .map(|idx| {
            let refs: Vec<&Utterance> = idx.iter().map(|&i| &utts[i]).collect();
            Batch::from_utterances(&refs, feature_dim)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            counts: [6, 2, 2],
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn spec_text_round_trip() {
        let s = small();
        assert_eq!(CorpusSpec::from_text(&s.to_text()).unwrap(), s);
        assert!(CorpusSpec::from_text("duration=3,2").is_err());
        assert!(CorpusSpec::from_text("speed=2").is_err());
    }

    #[test]
    fn utterances_are_feasible_and_in_vocab() {
        let c = generate_corpus(&CorpusSpec {
            counts: [200, 0, 0],
            ..CorpusSpec::default()
        })
        .unwrap();
        for u in c.split("train").unwrap() {
            assert!(u.labels.iter().all(|&l| (1..=8).contains(&l)));
            let needed = u.labels.len() + adjacent_repeats(&u.labels);
            assert!(u.frames.div_ceil(2) >= needed);
            assert_eq!(u.features.len(), u.frames * 16);
        }
    }

    #[test]
    fn noiseless_frames_are_prototypes() {
        let spec = CorpusSpec {
            proto_noise: 0.0,
            frame_noise: 0.0,
            duration: (1, 1),
            silence: (0, 0),
            subsample_guard: 1,
            counts: [50, 0, 0],
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec).unwrap();
        for u in c.split("train").unwrap() {
            // nearest-prototype classifier over non-silent rows
            let decoded: Vec<usize> = u
                .features
                .chunks(16)
                .filter(|row| row.iter().any(|&v| v != 0.0))
                .map(|row| {
                    let dist = |p: &Vec<f64>| row.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    let (k, best) = c
                        .prototypes
                        .iter()
                        .enumerate()
                        .map(|(k, p)| (k, dist(p)))
                        .min_by(|a, b| a.1.total_cmp(&b.1))
                        .unwrap();
                    assert_eq!(best, 0.0);
                    k + 1
                })
                .collect();
            assert_eq!(decoded, u.labels);
        }
    }

    #[test]
    fn batching_pads_and_keeps_remainder() {
        let mk = |frames: usize| Utterance {
            id: format!("u{frames}"),
            features: vec![1.0; frames * 2],
            frames,
            labels: vec![1; frames.min(3)],
        };
        let utts = vec![mk(7), mk(5), mk(4)];
        let batches = make_batches(&utts, &[0, 1, 2], 2, 2);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].max_frames, 7);
        assert_eq!(batches[0].lengths, vec![7, 5]);
        assert_eq!(batches[0].features_of(1).len(), 10);
        assert_eq!(batches[0].padding_mask().iter().filter(|&&m| m).count(), 2);
        assert_eq!(batches[1].len(), 1);
        let one = make_batches(&utts, &[2, 0, 1], 10, 2);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].ids, vec!["u4", "u7", "u5"]);
    }
}
