//! Labelled clip collections and ingestion of the `<label>/<clip>.wav`
//! directory layout used by keyword-spotting corpora.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::audio::{load_wav_at, FrontEnd, Waveform};
use crate::checkpoint::hex_sha256;
use crate::distillation::{fit_length, random_crop};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::rng;

pub const SILENCE: &str = "silence";
pub const UNKNOWN: &str = "unknown";
pub const BACKGROUND_DIR: &str = "_background_noise_";
/// Optional key=value file at the dataset root overriding [`IngestConfig`].
pub const CONFIG_FILE: &str = "dataset.conf";

/// The ten command words, in class order after silence and unknown.
pub const SPEECH_COMMANDS_TARGETS: [&str; 10] = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"];

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub wave: Waveform,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub label_names: Vec<String>,
    pub samples: Vec<LabeledSample>,
    /// Band edges already applied to every waveform, if any.
    pub band: Option<(f64, f64)>,
}

impl LabeledDataset {
    pub fn new(label_names: Vec<String>) -> Self {
        Self {
            label_names,
            samples: Vec::new(),
            band: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Common clip length in samples, or an error if clips differ.
    pub fn clip_len(&self) -> Result<usize> {
        let first = self.samples.first().ok_or_else(|| Error::Dataset("empty dataset".into()))?;
        let len = first.wave.len();
        if let Some(s) = self.samples.iter().find(|s| s.wave.len() != len) {
            return Err(Error::Dataset(format!("clip {} has {} samples, expected {len}", s.id, s.wave.len())));
        }
        Ok(len)
    }

    /// The dataset band-passed by `front`, unless that was already done.
    pub fn prepared(&self, front: &FrontEnd) -> Result<LabeledDataset> {
        let band = (front.low_hz, front.high_hz);
        if self.band == Some(band) {
            return Ok(self.clone());
        }
        if self.band.is_some() {
            return Err(Error::Dataset(format!("dataset was filtered with band {:?}, need {band:?}", self.band)));
        }
        let mut out = self.clone();
        for s in &mut out.samples {
            if s.wave.sample_rate != front.sample_rate() {
                return Err(Error::Dataset(format!(
                    "clip {} is at {} Hz, front-end expects {} Hz",
                    s.id,
                    s.wave.sample_rate,
                    front.sample_rate()
                )));
            }
            s.wave = front.prepare(&s.wave)?;
        }
        out.band = Some(band);
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestConfig {
    pub sample_rate: u32,
    pub clip_ms: u32,
    pub targets: Vec<String>,
    /// Unknown-word clips kept per split, as a fraction of target-word clips.
    pub unknown_fraction: f64,
    /// Silence clips synthesized per split, as a fraction of target-word clips.
    pub silence_fraction: f64,
    pub validation_percent: f64,
    pub test_percent: f64,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            clip_ms: 1000,
            targets: SPEECH_COMMANDS_TARGETS.iter().map(|s| s.to_string()).collect(),
            unknown_fraction: 0.1,
            silence_fraction: 0.1,
            validation_percent: 10.0,
            test_percent: 10.0,
            seed: 0,
        }
    }
}

impl IngestConfig {
    pub fn label_names(&self) -> Vec<String> {
        let mut names = vec![SILENCE.to_string(), UNKNOWN.to_string()];
        names.extend(self.targets.iter().cloned());
        names
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(v) = kv.parse_value("sample_rate")? {
            self.sample_rate = v;
        }
        if let Some(v) = kv.parse_value("clip_ms")? {
            self.clip_ms = v;
        }
        if let Some(v) = kv.parse_list("targets")? {
            self.targets = v;
        }
        if let Some(v) = kv.parse_value("unknown_fraction")? {
            self.unknown_fraction = v;
        }
        if let Some(v) = kv.parse_value("silence_fraction")? {
            self.silence_fraction = v;
        }
        if let Some(v) = kv.parse_value("validation_percent")? {
            self.validation_percent = v;
        }
        if let Some(v) = kv.parse_value("test_percent")? {
            self.test_percent = v;
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("sample_rate", self.sample_rate);
        kv.set("clip_ms", self.clip_ms);
        kv.set("targets", self.targets.join(","));
        kv.set("unknown_fraction", self.unknown_fraction);
        kv.set("silence_fraction", self.silence_fraction);
        kv.set("validation_percent", self.validation_percent);
        kv.set("test_percent", self.test_percent);
    }

    fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| (0.0..=10.0).contains(&f);
        if self.targets.is_empty() {
            return Err(Error::Config("no target words".into()));
        }
        if !frac_ok(self.unknown_fraction) || !frac_ok(self.silence_fraction) {
            return Err(Error::Config("unknown/silence fractions must be in [0, 10]".into()));
        }
        if self.validation_percent < 0.0 || self.test_percent < 0.0 || self.validation_percent + self.test_percent >= 100.0 {
            return Err(Error::Config("validation/test percentages must leave room for training".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Speaker part of a `<speaker>_nohash_<n>.wav` file name.
fn speaker_key(file_name: &str) -> &str {
    let stem = file_name.strip_suffix(".wav").unwrap_or(file_name);
    stem.split_once("_nohash_").map_or(stem, |(speaker, _)| speaker)
}

/// Hash split keyed on the speaker so one person never spans two splits.
pub fn hash_split(file_name: &str, validation_percent: f64, test_percent: f64) -> Split {
    let digest = hex_sha256(speaker_key(file_name).as_bytes());
    let bucket = u64::from_str_radix(&digest[..12], 16).expect("hex digest") % 10_000;
    let pct = bucket as f64 / 100.0;
    if pct < validation_percent {
        Split::Validation
    } else if pct < validation_percent + test_percent {
        Split::Test
    } else {
        Split::Train
    }
}

fn read_list(path: &Path) -> Result<Option<BTreeSet<String>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    Ok(Some(
        text.lines()
            .map(|l| l.trim().replace('\\', "/"))
            .filter(|l| !l.is_empty())
            .collect(),
    ))
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

/// Word clips grouped by split, before unknown down-sampling.
struct Found {
    targets: Vec<LabeledSample>,
    unknown: Vec<LabeledSample>,
}

/// Reads a dataset directory into train/validation/test splits.
///
/// Target-word directories map to their class; every other word directory
/// maps to "unknown", which is down-sampled per split. Silence clips are
/// random crops of the `_background_noise_` recordings. A `dataset.conf`
/// at the root overrides fields of `cfg`.
pub fn ingest(root: impl AsRef<Path>, cfg: &IngestConfig) -> Result<Splits> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
    }
    let mut cfg = cfg.clone();
    if root.join(CONFIG_FILE).exists() {
        cfg.apply_kv(&KvMap::parse(&std::fs::read_to_string(root.join(CONFIG_FILE))?)?)?;
    }
    cfg.validate()?;
    let clip_len = crate::audio::samples_for_ms(cfg.clip_ms, cfg.sample_rate)
        .ok_or_else(|| Error::Config("clip length is not a whole number of samples".into()))?;
    let names = cfg.label_names();
    let class_of: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let testing = read_list(&root.join("testing_list.txt"))?;
    let validation = read_list(&root.join("validation_list.txt"))?;
    let official = testing.is_some() || validation.is_some();

    let mut words: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != BACKGROUND_DIR))
        .collect();
    words.sort();

    let mut found: BTreeMap<Split, Found> = BTreeMap::new();
    for split in [Split::Train, Split::Validation, Split::Test] {
        found.insert(
            split,
            Found {
                targets: Vec::new(),
                unknown: Vec::new(),
            },
        );
    }
    for dir in &words {
        let word = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files = wav_files(dir)?;
        let target = class_of.get(word.as_str()).copied().filter(|&c| c >= 2);
        if files.is_empty() && target.is_some() {
            return Err(Error::Dataset(format!("class directory {} is empty", dir.display())));
        }
        for path in files {
            let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let rel = format!("{word}/{file_name}");
            let split = if official {
                if testing.as_ref().is_some_and(|t| t.contains(&rel)) {
                    Split::Test
                } else if validation.as_ref().is_some_and(|v| v.contains(&rel)) {
                    Split::Validation
                } else {
                    Split::Train
                }
            } else {
                hash_split(&file_name, cfg.validation_percent, cfg.test_percent)
            };
            let wave = fit_length(&load_wav_at(&path, cfg.sample_rate)?, clip_len)?;
            let sample = LabeledSample {
                id: rel,
                wave,
                label: target.unwrap_or(1),
            };
            let f = found.get_mut(&split).expect("all splits present");
            if target.is_some() {
                f.targets.push(sample);
            } else {
                f.unknown.push(sample);
            }
        }
    }
    for (i, t) in cfg.targets.iter().enumerate() {
        if !found.values().any(|f| f.targets.iter().any(|s| s.label == i + 2)) {
            return Err(Error::Dataset(format!("no clips found for target word {t:?}")));
        }
    }

    let noise = load_background(root, cfg.sample_rate)?;
    let mut splits = Vec::new();
    for (split, f) in found {
        let mut ds = LabeledDataset::new(names.clone());
        let n_targets = f.targets.len();
        ds.samples = f.targets;
        let mut unknown = f.unknown;
        let mut r = rng::stream(cfg.seed, &[rng::name_id("unknown"), split as u64]);
        unknown.shuffle(&mut r);
        unknown.truncate((cfg.unknown_fraction * n_targets as f64).round() as usize);
        ds.samples.extend(unknown);
        let n_silence = (cfg.silence_fraction * n_targets as f64).round() as usize;
        if n_silence > 0 {
            if noise.is_empty() {
                return Err(Error::Dataset(format!("silence requested but {BACKGROUND_DIR} has no usable clips")));
            }
            for i in 0..n_silence {
                let mut r = rng::stream(cfg.seed, &[rng::name_id("silence"), split as u64, i as u64]);
                let (name, src) = &noise[r.gen_range(0..noise.len())];
                let wave = if src.len() >= clip_len {
                    random_crop(src, clip_len, &mut r)?.0
                } else {
                    fit_length(src, clip_len)?
                };
                ds.samples.push(LabeledSample {
                    id: format!("{SILENCE}/{name}#{i}"),
                    wave,
                    label: 0,
                });
            }
        }
        ds.samples.sort_by(|a, b| a.id.cmp(&b.id));
        splits.push(ds);
    }
    let test = splits.pop().expect("three splits");
    let validation = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Splits {
        train,
        validation,
        test,
    })
}

fn load_background(root: &Path, sample_rate: u32) -> Result<Vec<(String, Waveform)>> {
    let dir = root.join(BACKGROUND_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    wav_files(&dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            Ok((name, load_wav_at(&p, sample_rate)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speaker_split_is_stable() {
        let a = hash_split("0a7c2a8d_nohash_0.wav", 10.0, 10.0);
        let b = hash_split("0a7c2a8d_nohash_3.wav", 10.0, 10.0);
        assert_eq!(a, b);
        assert_eq!(speaker_key("abc_nohash_1.wav"), "abc");
        assert_eq!(speaker_key("plain.wav"), "plain");
    }

    #[test]
    fn hash_split_proportions() {
        let mut counts = BTreeMap::new();
        for i in 0..5000 {
            *counts.entry(hash_split(&format!("spk{i}_nohash_0.wav"), 10.0, 10.0)).or_insert(0) += 1;
        }
        let frac = |s| counts[&s] as f64 / 5000.0;
        assert!((frac(Split::Train) - 0.8).abs() < 0.03);
        assert!((frac(Split::Validation) - 0.1).abs() < 0.03);
        assert!((frac(Split::Test) - 0.1).abs() < 0.03);
    }

    #[test]
    fn default_labels_have_twelve_classes() {
        let names = IngestConfig::default().label_names();
        assert_eq!(names.len(), 12);
        assert_eq!(names[..3], ["silence", "unknown", "yes"]);
    }
}
