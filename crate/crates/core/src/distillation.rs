//! Crop and pad transforms and teacher-labelled datasets of shorter crops.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;

use crate::audio::{write_mfcc, MfccMatrix, Waveform};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::rng;

/// A window of `tgt_len` samples starting at `offset` inside `src_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub src_len: usize,
    pub tgt_len: usize,
    pub offset: usize,
}

impl CropSpec {
    pub fn new(src_len: usize, tgt_len: usize, offset: usize) -> Result<Self> {
        if tgt_len > src_len {
            return Err(Error::Length(format!("crop of {tgt_len} samples from {src_len}")));
        }
        if offset > src_len - tgt_len {
            return Err(Error::Length(format!(
                "offset {offset} out of range 0..={} for a {tgt_len}-sample crop of {src_len}",
                src_len - tgt_len
            )));
        }
        Ok(Self {
            src_len,
            tgt_len,
            offset,
        })
    }
}

pub fn crop(w: &Waveform, spec: &CropSpec) -> Result<Waveform> {
    if w.len() != spec.src_len {
        return Err(Error::Length(format!("crop expects {} samples, got {}", spec.src_len, w.len())));
    }
    let samples = w.samples[spec.offset..spec.offset + spec.tgt_len].to_vec();
    Ok(Waveform::new(samples, w.sample_rate))
}

/// Crop at an offset drawn uniformly from `0..=len − tgt_len`.
pub fn random_crop(w: &Waveform, tgt_len: usize, rng: &mut rng::Rng) -> Result<(Waveform, usize)> {
    if tgt_len > w.len() {
        return Err(Error::Length(format!("crop of {tgt_len} samples from {}", w.len())));
    }
    let offset = rng.gen_range(0..=w.len() - tgt_len);
    let out = crop(w, &CropSpec::new(w.len(), tgt_len, offset)?)?;
    Ok((out, offset))
}

/// Zero-pads to `src_len`, placing the original at `floor((src_len − len) / 2)`.
pub fn pad(w: &Waveform, src_len: usize) -> Result<Waveform> {
    if w.len() > src_len {
        return Err(Error::Length(format!("cannot pad {} samples to {src_len}", w.len())));
    }
    let left = pad_offset(w.len(), src_len);
    let mut samples = vec![0.0; src_len];
    samples[left..left + w.len()].copy_from_slice(&w.samples);
    Ok(Waveform::new(samples, w.sample_rate))
}

/// Where [`pad`] places a clip of `len` samples.
pub fn pad_offset(len: usize, src_len: usize) -> usize {
    (src_len - len) / 2
}

/// Centre-crops clips that are too long and centre-pads clips that are too short.
pub fn fit_length(w: &Waveform, len: usize) -> Result<Waveform> {
    if w.len() > len {
        crop(w, &CropSpec::new(w.len(), len, (w.len() - len) / 2)?)
    } else {
        pad(w, len)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum LabelMode {
    Hard,
    #[default]
    Soft,
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
        })
    }
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            other => Err(Error::Config(format!("label mode must be hard or soft, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DistilledLabel {
    Hard(usize),
    Soft(Vec<f32>),
}

impl DistilledLabel {
    pub fn class(&self) -> usize {
        match self {
            Self::Hard(c) => *c,
            Self::Soft(p) => argmax(p),
        }
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Teacher labels for equal-length crops. Each crop is zero-padded to the
/// teacher's input length, featurized and run in eval mode.
pub fn distill_labels(teacher: &Network, crops: &[Waveform], mode: LabelMode) -> Result<Vec<DistilledLabel>> {
    let src = teacher.input_samples();
    if let Some(first) = crops.first() {
        if crops.iter().any(|c| c.len() != first.len()) {
            return Err(Error::Length("crops differ in length".into()));
        }
        if first.len() > src {
            return Err(Error::Length(format!(
                "crop of {} samples is longer than the teacher input of {src}",
                first.len()
            )));
        }
    }
    let padded = crops.iter().map(|c| pad(c, src)).collect::<Result<Vec<_>>>()?;
    let probs = teacher.predict_waves(&padded)?;
    Ok(probs
        .into_iter()
        .map(|p| match mode {
            LabelMode::Hard => DistilledLabel::Hard(argmax(&p)),
            LabelMode::Soft => DistilledLabel::Soft(p),
        })
        .collect())
}

/// A cropped, featurized sample with its teacher label. It deliberately
/// carries no ground-truth class.
#[derive(Clone, Debug, PartialEq)]
pub struct DistilledSample {
    pub features: MfccMatrix,
    pub label: DistilledLabel,
    pub source_id: String,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistilledDataset {
    pub samples: Vec<DistilledSample>,
    pub src_ms: u32,
    pub tgt_ms: u32,
    pub label_mode: LabelMode,
    pub crops_per_source: usize,
    pub teacher_checksum: String,
}

/// Options for [`build_distilled_dataset`].
#[derive(Clone, Debug)]
pub struct DistillOptions {
    pub tgt_ms: u32,
    pub crops_per_source: usize,
    pub mode: LabelMode,
    pub seed: u64,
    /// Folded into every crop seed so each epoch draws fresh crops.
    pub epoch: u64,
}

/// Per-crop random stream keyed by (seed, epoch, source index, crop index).
pub fn crop_rng(seed: u64, epoch: u64, source: usize, crop_idx: usize) -> rng::Rng {
    rng::stream(seed, &[rng::name_id("crop"), epoch, source as u64, crop_idx as u64])
}

/// Random crops of every (band-passed) source sample, labelled by `teacher`
/// and featurized with the teacher's front-end. Ground-truth labels in
/// `source` are never read.
pub fn build_distilled_dataset(
    teacher: &Network,
    source: &LabeledDataset,
    opts: &DistillOptions,
) -> Result<DistilledDataset> {
    if source.samples.is_empty() {
        return Err(Error::Dataset("empty source dataset".into()));
    }
    if opts.tgt_ms >= teacher.spec.input_ms {
        return Err(Error::Config(format!(
            "target {} ms must be shorter than the teacher's {} ms",
            opts.tgt_ms, teacher.spec.input_ms
        )));
    }
    if opts.crops_per_source == 0 {
        return Err(Error::Config("crops_per_source must be positive".into()));
    }
    let tgt_len = teacher.front.samples(opts.tgt_ms)?;
    let mut crops = Vec::with_capacity(source.samples.len() * opts.crops_per_source);
    let mut meta = Vec::with_capacity(crops.capacity());
    for (si, s) in source.samples.iter().enumerate() {
        for ci in 0..opts.crops_per_source {
            let mut r = crop_rng(opts.seed, opts.epoch, si, ci);
            let (c, offset) = random_crop(&s.wave, tgt_len, &mut r)?;
            crops.push(c);
            meta.push((s.id.clone(), offset));
        }
    }
    let labels = distill_labels(teacher, &crops, opts.mode)?;
    let samples = crops
        .iter()
        .zip(labels)
        .zip(meta)
        .map(|((c, label), (source_id, offset))| {
            Ok(DistilledSample {
                features: teacher.front.features(c)?,
                label,
                source_id,
                offset,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DistilledDataset {
        samples,
        src_ms: teacher.spec.input_ms,
        tgt_ms: opts.tgt_ms,
        label_mode: opts.mode,
        crops_per_source: opts.crops_per_source,
        teacher_checksum: teacher.to_checkpoint().checksum()?,
    })
}

impl DistilledDataset {
    /// Writes `manifest.tsv` (source id, offset, label or probabilities) and
    /// one feature file per sample under `dir/features/`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("features"))?;
        let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.tsv"))?);
        writeln!(manifest, "# teacher_sha256={}", self.teacher_checksum)?;
        writeln!(
            manifest,
            "# src_ms={} tgt_ms={} label_mode={} crops_per_source={}",
            self.src_ms, self.tgt_ms, self.label_mode, self.crops_per_source
        )?;
        for (i, s) in self.samples.iter().enumerate() {
            let label = match &s.label {
                DistilledLabel::Hard(c) => c.to_string(),
                DistilledLabel::Soft(p) => p.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(","),
            };
            writeln!(manifest, "{i:06}\t{}\t{}\t{label}", s.source_id, s.offset)?;
            let f = std::fs::File::create(dir.join("features").join(format!("{i:06}.mfcc")))?;
            write_mfcc(std::io::BufWriter::new(f), &s.features)?;
        }
        manifest.flush()?;
        Ok(())
    }
}
