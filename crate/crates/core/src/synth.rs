//! Deterministic synthetic keyword corpus.
//!
//! Every word is a fixed three-segment tone pattern. A clip is background
//! noise with one jittered utterance of the word placed at a uniformly
//! random offset, so a short crop of the clip can miss the word entirely.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::audio::{samples_for_ms, write_wav, Waveform};
use crate::dataset::{LabeledDataset, LabeledSample, Splits, BACKGROUND_DIR, CONFIG_FILE, SILENCE, UNKNOWN};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::rng;

const TARGET_WORDS: [&str; 10] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
];
const UNKNOWN_WORDS: [&str; 8] = ["kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo"];

/// Tone grid (Hz) the word patterns are drawn from.
const TONES: [f64; 8] = [300.0, 420.0, 560.0, 720.0, 900.0, 1100.0, 1320.0, 1560.0];
const SLOPES: [f64; 3] = [-0.25, 0.0, 0.25];
/// Seed of the word vocabulary; independent of the corpus seed so every
/// corpus uses the same words.
const VOCAB_SEED: u64 = 0x5eed_0f_70e5;
const BACKGROUND_FILES: usize = 4;
const BACKGROUND_MS: u32 = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Target words; silence and unknown are added on top.
    pub n_classes: usize,
    pub clip_ms: u32,
    pub utterance_ms: u32,
    pub sample_rate: u32,
    /// Clips per class (including silence and unknown) in each split.
    pub n_train: usize,
    pub n_test: usize,
    /// Background noise RMS relative to full scale.
    pub noise_level: f64,
    /// Peak utterance amplitude range.
    pub amplitude: (f64, f64),
    /// Number of distinct words that make up the unknown class.
    pub n_unknown_words: usize,
    /// Fraction of clips recorded shorter than `clip_ms` and centre-padded
    /// with zeros, as ingestion does with short recordings.
    pub short_fraction: f64,
    /// Shortest such recording.
    pub short_min_ms: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            clip_ms: 1000,
            utterance_ms: 300,
            sample_rate: 4000,
            n_train: 250,
            n_test: 100,
            noise_level: 0.02,
            amplitude: (0.2, 0.6),
            n_unknown_words: 4,
            short_fraction: 0.3,
            short_min_ms: 400,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic corpus: {m}")));
        if self.n_classes < 3 || self.n_classes > TARGET_WORDS.len() {
            return bad("between 3 and 10 target classes are supported");
        }
        if self.n_unknown_words == 0 || self.n_unknown_words > UNKNOWN_WORDS.len() {
            return bad("between 1 and 8 unknown words are supported");
        }
        if self.utterance_ms == 0 || self.utterance_ms >= self.clip_ms {
            return bad("utterance must be non-empty and shorter than the clip");
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("sample counts must be positive");
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return bad("noise level must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.short_fraction) {
            return bad("short fraction must be in [0, 1]");
        }
        if self.short_fraction > 0.0 && (self.short_min_ms < self.utterance_ms || self.short_min_ms >= self.clip_ms) {
            return bad("short recordings must fit the utterance and be shorter than the clip");
        }
        let (lo, hi) = self.amplitude;
        if !(lo > 0.0 && lo <= hi && hi + 4.0 * self.noise_level <= 1.0) {
            return bad("amplitude range must be positive and leave headroom for noise");
        }
        if TONES[TONES.len() - 1] * 1.2 >= self.sample_rate as f64 / 2.0 {
            return bad("sample rate too low for the tone grid");
        }
        for ms in [self.clip_ms, self.utterance_ms, self.short_min_ms] {
            if samples_for_ms(ms, self.sample_rate).is_none() {
                return bad("durations must be whole numbers of samples");
            }
        }
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        let mut names = vec![SILENCE.to_string(), UNKNOWN.to_string()];
        names.extend(TARGET_WORDS[..self.n_classes].iter().map(|s| s.to_string()));
        names
    }

    pub fn clip_len(&self) -> usize {
        samples_for_ms(self.clip_ms, self.sample_rate).expect("validated")
    }

    pub fn utterance_len(&self) -> usize {
        samples_for_ms(self.utterance_ms, self.sample_rate).expect("validated")
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        macro_rules! field {
            ($key:literal, $f:ident) => {
                if let Some(v) = kv.parse_value($key)? {
                    self.$f = v;
                }
            };
        }
        field!("classes", n_classes);
        field!("clip_ms", clip_ms);
        field!("utterance_ms", utterance_ms);
        field!("sample_rate", sample_rate);
        field!("train_per_class", n_train);
        field!("test_per_class", n_test);
        field!("noise_level", noise_level);
        field!("unknown_words", n_unknown_words);
        field!("short_fraction", short_fraction);
        field!("short_min_ms", short_min_ms);
        field!("seed", seed);
        if let Some(v) = kv.parse_list::<f64>("amplitude")? {
            if v.len() != 2 {
                return Err(Error::Config("amplitude needs two values".into()));
            }
            self.amplitude = (v[0], v[1]);
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("classes", self.n_classes);
        kv.set("clip_ms", self.clip_ms);
        kv.set("utterance_ms", self.utterance_ms);
        kv.set("sample_rate", self.sample_rate);
        kv.set("train_per_class", self.n_train);
        kv.set("test_per_class", self.n_test);
        kv.set("noise_level", self.noise_level);
        kv.set("amplitude", format!("{},{}", self.amplitude.0, self.amplitude.1));
        kv.set("unknown_words", self.n_unknown_words);
        kv.set("short_fraction", self.short_fraction);
        kv.set("short_min_ms", self.short_min_ms);
        kv.set("seed", self.seed);
    }

    /// Probability that a uniformly placed crop of `tgt_ms` does not overlap
    /// a uniformly placed utterance at all, for full-length recordings.
    pub fn miss_probability(&self, tgt_ms: u32) -> f64 {
        let l = self.clip_ms as f64;
        let u = self.utterance_ms as f64;
        let t = tgt_ms as f64;
        if t >= l {
            return 0.0;
        }
        let (a, b) = (l - u, l - t);
        // Area of {(x, y) ∈ [0, w] × [0, h] : x − y ≥ gap}.
        let area = |w: f64, h: f64, gap: f64| {
            let span = w - gap;
            if span <= 0.0 {
                return 0.0;
            }
            let ymax = span.min(h);
            span * ymax - ymax * ymax / 2.0
        };
        (area(a, b, t) + area(b, a, u)) / (a * b)
    }
}

/// One word: three tone segments with a start frequency and relative sweep each.
#[derive(Clone, Debug, PartialEq)]
pub struct WordPattern {
    pub name: &'static str,
    pub segments: [(f64, f64); 3],
}

/// Targets first, then unknown words; no two words share a tone sequence.
pub fn vocabulary() -> Vec<WordPattern> {
    let mut triples = Vec::new();
    for a in 0..TONES.len() {
        for b in 0..TONES.len() {
            for c in 0..TONES.len() {
                if a != b && b != c && a != c {
                    triples.push([a, b, c]);
                }
            }
        }
    }
    let mut r = rng::seeded(VOCAB_SEED);
    triples.shuffle(&mut r);
    TARGET_WORDS
        .iter()
        .chain(UNKNOWN_WORDS.iter())
        .zip(triples)
        .map(|(&name, t)| WordPattern {
            name,
            segments: t.map(|i| (TONES[i], SLOPES[r.gen_range(0..SLOPES.len())])),
        })
        .collect()
}

fn render_word(word: &WordPattern, len: usize, rate: f64, r: &mut rng::Rng, amp: f64) -> Vec<f32> {
    let pitch = r.gen_range(0.95..1.05);
    let seg_len = len / 3;
    let mut out = vec![0.0f32; len];
    let mut phase = 0.0f64;
    for (i, v) in out.iter_mut().enumerate() {
        let seg = (i / seg_len.max(1)).min(2);
        let (f0, slope) = word.segments[seg];
        let pos = (i - seg * seg_len) as f64 / seg_len as f64;
        let f = f0 * pitch * (1.0 + slope * (pos - 0.5));
        phase += 2.0 * std::f64::consts::PI * f / rate;
        let env = (std::f64::consts::PI * i as f64 / len as f64).sin().powf(0.5);
        let fade = (std::f64::consts::PI * pos).sin().powf(0.25);
        *v = (amp * env * fade * phase.sin()) as f32;
    }
    out
}

fn noise(len: usize, level: f64, r: &mut rng::Rng) -> Vec<f32> {
    if level == 0.0 {
        return vec![0.0; len];
    }
    let n = Normal::new(0.0, level).expect("positive std");
    (0..len).map(|_| n.sample(r).clamp(-4.0 * level, 4.0 * level) as f32).collect()
}

/// A generated corpus together with where each utterance was placed.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub splits: Splits,
    /// Utterance start in samples for each train sample; `None` for silence.
    pub train_offsets: Vec<Option<usize>>,
    pub test_offsets: Vec<Option<usize>>,
    pub background: Vec<Waveform>,
}

#[derive(Clone, Copy)]
enum Which {
    Train,
    Test,
}

fn make_split(spec: &SynthSpec, vocab: &[WordPattern], which: Which) -> (LabeledDataset, Vec<Option<usize>>) {
    let (per_class, tag) = match which {
        Which::Train => (spec.n_train, "train"),
        Which::Test => (spec.n_test, "test"),
    };
    let clip = spec.clip_len();
    let utt = spec.utterance_len();
    let rate = spec.sample_rate as f64;
    let n_labels = spec.n_classes + 2;
    let mut ds = LabeledDataset::new(spec.label_names());
    let mut offsets = Vec::new();
    for label in 0..n_labels {
        for i in 0..per_class {
            let mut r = rng::stream(spec.seed, &[rng::name_id(tag), label as u64, i as u64]);
            let short = spec.short_fraction > 0.0 && r.gen_bool(spec.short_fraction);
            let (start, len) = if short {
                let min = samples_for_ms(spec.short_min_ms, spec.sample_rate).expect("validated");
                let len = r.gen_range(min..clip);
                ((clip - len) / 2, len)
            } else {
                (0, clip)
            };
            let mut samples = vec![0.0f32; clip];
            samples[start..start + len].copy_from_slice(&noise(len, spec.noise_level, &mut r));
            let (word, offset) = match label {
                0 => (SILENCE, None),
                _ => {
                    let w = if label == 1 {
                        &vocab[TARGET_WORDS.len() + r.gen_range(0..spec.n_unknown_words)]
                    } else {
                        &vocab[label - 2]
                    };
                    let amp = r.gen_range(spec.amplitude.0..=spec.amplitude.1);
                    let offset = start + r.gen_range(0..=len - utt);
                    let voice = render_word(w, utt, rate, &mut r, amp);
                    for (s, v) in samples[offset..offset + utt].iter_mut().zip(voice) {
                        *s += v;
                    }
                    (w.name, Some(offset))
                }
            };
            ds.samples.push(LabeledSample {
                id: format!("{word}/{tag}{label:02}{i:05}_nohash_0.wav"),
                wave: Waveform::new(samples.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), spec.sample_rate),
                label,
            });
            offsets.push(offset);
        }
    }
    (ds, offsets)
}

/// Builds the corpus: `n_train`/`n_test` clips for each of the target words,
/// silence (noise only) and unknown (words outside the target set).
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let vocab = vocabulary();
    let (train, train_offsets) = make_split(spec, &vocab, Which::Train);
    let (test, test_offsets) = make_split(spec, &vocab, Which::Test);
    let bg_len = samples_for_ms(BACKGROUND_MS, spec.sample_rate).expect("validated rate");
    let background = (0..BACKGROUND_FILES)
        .map(|i| {
            let mut r = rng::stream(spec.seed, &[rng::name_id("background"), i as u64]);
            Waveform::new(noise(bg_len, spec.noise_level, &mut r), spec.sample_rate)
        })
        .collect();
    Ok(SynthCorpus {
        splits: Splits {
            train,
            validation: LabeledDataset::new(spec.label_names()),
            test,
        },
        train_offsets,
        test_offsets,
        background,
    })
}

/// Writes the corpus in the ingestion layout: one directory per word,
/// `_background_noise_` recordings, official split lists and a
/// `dataset.conf` that tells ingestion the sample rate and target words.
/// Silence clips are not written; ingestion cuts them from the background
/// recordings.
pub fn write_corpus(root: impl AsRef<Path>, spec: &SynthSpec, corpus: &SynthCorpus) -> Result<()> {
    let root = root.as_ref();
    std::fs::create_dir_all(root.join(BACKGROUND_DIR))?;
    let mut testing = Vec::new();
    for (split, is_test) in [(&corpus.splits.train, false), (&corpus.splits.test, true)] {
        for s in split.samples.iter().filter(|s| s.label != 0) {
            let path = root.join(&s.id);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            write_wav(&path, &s.wave)?;
            if is_test {
                testing.push(s.id.clone());
            }
        }
    }
    for (i, bg) in corpus.background.iter().enumerate() {
        write_wav(root.join(BACKGROUND_DIR).join(format!("noise_{i}.wav")), bg)?;
    }
    let mut f = std::fs::File::create(root.join("testing_list.txt"))?;
    for id in &testing {
        writeln!(f, "{id}")?;
    }
    std::fs::File::create(root.join("validation_list.txt"))?;
    let share = 1.0 / spec.n_classes as f64;
    let mut kv = KvMap::new();
    kv.set("sample_rate", spec.sample_rate);
    kv.set("clip_ms", spec.clip_ms);
    kv.set("targets", TARGET_WORDS[..spec.n_classes].join(","));
    kv.set("unknown_fraction", share);
    kv.set("silence_fraction", share);
    let mut gen = KvMap::new();
    spec.to_kv(&mut gen);
    let text = format!(
        "# synthetic corpus\n{}{}",
        kv.to_text(),
        gen.to_text().lines().map(|l| format!("# synth.{l}\n")).collect::<String>()
    );
    std::fs::write(root.join(CONFIG_FILE), text)?;
    Ok(())
}
