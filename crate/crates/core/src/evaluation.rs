//! Three-crop averaged evaluation on full-length test clips.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::dataset::LabeledDataset;
use crate::distillation::{argmax, crop, CropSpec};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::rng;

/// Offsets `floor(k/6 · (src − tgt))` for k = 1, 3, 5: the centres of three
/// equal thirds of the admissible range.
pub fn eval_offsets(src_len: usize, tgt_len: usize) -> Result<[usize; 3]> {
    if tgt_len > src_len {
        return Err(Error::Length(format!("evaluation crop of {tgt_len} samples from {src_len}")));
    }
    let span = (src_len - tgt_len) as u128;
    Ok([1u128, 3, 5].map(|k| (k * span / 6) as usize))
}

fn offsets_for(src_len: usize, tgt_len: usize, random: Option<(u64, usize)>) -> Result<[usize; 3]> {
    match random {
        None => eval_offsets(src_len, tgt_len),
        Some((seed, idx)) => {
            if tgt_len > src_len {
                return Err(Error::Length(format!("evaluation crop of {tgt_len} samples from {src_len}")));
            }
            let mut r = rng::stream(seed, &[rng::name_id("eval"), idx as u64]);
            Ok([(); 3].map(|_| r.gen_range(0..=src_len - tgt_len)))
        }
    }
}

fn three_crops(net: &Network, sample: &Waveform, offsets: [usize; 3]) -> Result<Vec<Waveform>> {
    let tgt = net.input_samples();
    offsets
        .iter()
        .map(|&o| crop(sample, &CropSpec::new(sample.len(), tgt, o)?))
        .collect()
}

fn mean3(p: &[Vec<f32>]) -> Vec<f32> {
    (0..p[0].len()).map(|c| (p[0][c] + p[1][c] + p[2][c]) / 3.0).collect()
}

/// Mean of the network's probabilities over the three evaluation crops of
/// a band-passed clip.
pub fn three_crop_predict(net: &Network, sample: &Waveform) -> Result<Vec<f32>> {
    if sample.len() < net.input_samples() {
        return Err(Error::Length(format!(
            "test clip of {} samples is shorter than the network input of {}",
            sample.len(),
            net.input_samples()
        )));
    }
    let offsets = eval_offsets(sample.len(), net.input_samples())?;
    Ok(mean3(&net.predict_waves(&three_crops(net, sample, offsets)?)?))
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Draw the three offsets uniformly at random from this seed instead of
    /// using [`eval_offsets`].
    pub random_offsets: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub input_ms: u32,
    pub accuracy: f64,
    pub n_samples: usize,
    pub label_names: Vec<String>,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Offsets of the first test clip (all clips share them unless random).
    pub offsets_used: Vec<usize>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let width = self.label_names.iter().map(|n| n.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "model C{}: accuracy {:.2}% over {} clips\n",
            self.input_ms,
            100.0 * self.accuracy,
            self.n_samples
        );
        out.push_str(&format!("{:>width$}  {:>8}  {:>5}\n", "class", "accuracy", "n"));
        for (i, name) in self.label_names.iter().enumerate() {
            let n: usize = self.confusion[i].iter().sum();
            out.push_str(&format!("{name:>width$}  {:>7.2}%  {n:>5}\n", 100.0 * self.per_class_accuracy[i]));
        }
        out
    }

    pub const CSV_HEADER: &'static str = "model,input_ms,accuracy,n_samples";

    pub fn csv_row(&self) -> String {
        format!("C{},{},{:.4},{}", self.input_ms, self.input_ms, 100.0 * self.accuracy, self.n_samples)
    }
}

/// Accuracy of `argmax(three_crop_predict)` against the ground truth.
pub fn evaluate(net: &Network, test: &LabeledDataset, opts: &EvalOptions) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    if test.n_classes() != net.spec.n_classes {
        return Err(Error::Dataset(format!(
            "test set has {} classes, network has {}",
            test.n_classes(),
            net.spec.n_classes
        )));
    }
    let test = test.prepared(&net.front)?;
    let n = net.spec.n_classes;
    let mut confusion = vec![vec![0usize; n]; n];
    let mut offsets_used = Vec::new();
    const CLIPS_PER_BATCH: usize = 64;
    for (chunk_idx, chunk) in test.samples.chunks(CLIPS_PER_BATCH).enumerate() {
        let mut crops = Vec::with_capacity(3 * chunk.len());
        for (j, s) in chunk.iter().enumerate() {
            if s.wave.len() < net.input_samples() {
                return Err(Error::Length(format!("test clip {} is shorter than the network input", s.id)));
            }
            let idx = chunk_idx * CLIPS_PER_BATCH + j;
            let offsets = offsets_for(s.wave.len(), net.input_samples(), opts.random_offsets.map(|seed| (seed, idx)))?;
            if idx == 0 {
                offsets_used = offsets.to_vec();
            }
            crops.extend(three_crops(net, &s.wave, offsets)?);
        }
        let probs = net.predict_waves(&crops)?;
        for (s, p) in chunk.iter().zip(probs.chunks(3)) {
            confusion[s.label][argmax(&mean3(p))] += 1;
        }
    }
    let correct: usize = (0..n).map(|i| confusion[i][i]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[i] as f64 / total as f64
            }
        })
        .collect();
    Ok(EvalReport {
        input_ms: net.spec.input_ms,
        accuracy: correct as f64 / test.len() as f64,
        n_samples: test.len(),
        label_names: test.label_names.clone(),
        per_class_accuracy,
        confusion,
        offsets_used,
    })
}
