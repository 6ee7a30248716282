//! Audio ingestion and the MFCC front-end.
//!
//! Waveforms are mono `f32` in `[-1, 1]`. The front-end band-passes once,
//! then computes log-mel cepstra over 30 ms Hann windows every 10 ms.

mod filter;
mod mfcc;

use std::path::Path;

use thiserror::Error;

pub use filter::bandpass;
pub use mfcc::{mfcc, read_mfcc, read_mfcc_file, write_mfcc, FeatureNorm, MfccConfig, MfccMatrix};

/// Canonical sample rate of the keyword-spotting corpus.
pub const CANONICAL_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot read {path}")]
    Read {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("cannot write {path}")]
    Write {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("unsupported encoding: {0}")]
    Unsupported(String),
    #[error("empty audio in {0}")]
    Empty(String),
    #[error("invalid band edges {low_hz} Hz / {high_hz} Hz for sample rate {sample_rate} Hz")]
    InvalidBand { low_hz: f64, high_hz: f64, sample_rate: u32 },
    #[error("waveform of {got} samples is shorter than one {needed}-sample window")]
    TooShort { got: usize, needed: usize },
    #[error("invalid front-end configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed feature file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono audio normalized to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Number of samples spanned by `ms` milliseconds, if it is an integer.
pub fn samples_for_ms(ms: u32, sample_rate: u32) -> Option<usize> {
    let prod = ms as u64 * sample_rate as u64;
    (prod % 1000 == 0).then_some((prod / 1000) as usize)
}

/// Reads a PCM WAV file and resamples it to 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    load_wav_at(path, CANONICAL_RATE)
}

/// Reads a PCM WAV file (any bit depth, integer or float), down-mixes to
/// mono and resamples to `sample_rate`.
pub fn load_wav_at(path: impl AsRef<Path>, sample_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let mut reader = hound::WavReader::open(path).map_err(|source| AudioError::Read {
        path: shown.clone(),
        source,
    })?;
    let spec = reader.spec();
    let read_err = |source| AudioError::Read {
        path: shown.clone(),
        source,
    };
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            if spec.bits_per_sample == 0 || spec.bits_per_sample > 32 {
                return Err(AudioError::Unsupported(format!("{}-bit integer PCM", spec.bits_per_sample)));
            }
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(read_err)?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(read_err)?,
    };
    let channels = spec.channels.max(1) as usize;
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    if mono.is_empty() {
        return Err(AudioError::Empty(shown));
    }
    let wave = Waveform::new(mono, spec.sample_rate);
    Ok(resample(&wave, sample_rate))
}

/// Writes 16-bit mono PCM.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let werr = |source| AudioError::Write {
        path: path.display().to_string(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(werr)?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(werr)?;
    }
    writer.finalize().map_err(werr)
}

/// Linear-interpolation resampling; identity when the rates already match.
pub fn resample(wave: &Waveform, sample_rate: u32) -> Waveform {
    if wave.sample_rate == sample_rate || wave.is_empty() {
        return Waveform::new(wave.samples.clone(), sample_rate);
    }
    let out_len = ((wave.len() as u64 * sample_rate as u64) / wave.sample_rate as u64).max(1) as usize;
    let step = wave.sample_rate as f64 / sample_rate as f64;
    let last = wave.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = (pos - lo as f64) as f32;
            wave.samples[lo] * (1.0 - frac) + wave.samples[hi] * frac
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Band-pass filter plus MFCC settings applied to every waveform that
/// enters a network.
#[derive(Clone, Debug, PartialEq)]
pub struct FrontEnd {
    pub low_hz: f64,
    pub high_hz: f64,
    pub mfcc: MfccConfig,
}

impl FrontEnd {
    /// 16 kHz, 20 Hz–4 kHz band, 40 coefficients from 40 mel filters.
    pub fn standard() -> Self {
        Self {
            low_hz: 20.0,
            high_hz: 4000.0,
            mfcc: MfccConfig::standard(),
        }
    }

    /// 4 kHz desk-scale variant: the same pipeline with a band that fits
    /// under Nyquist and fewer coefficients.
    pub fn desk() -> Self {
        Self {
            low_hz: 20.0,
            high_hz: 1800.0,
            mfcc: MfccConfig {
                sample_rate: 4000,
                n_fft: 256,
                n_mels: 20,
                n_coeffs: 10,
                low_hz: 20.0,
                high_hz: 1800.0,
                ..MfccConfig::standard()
            },
        }
    }

    pub fn sample_rate(&self) -> u32 {
        self.mfcc.sample_rate
    }

    /// Samples in a clip of `ms` milliseconds.
    pub fn samples(&self, ms: u32) -> Result<usize> {
        samples_for_ms(ms, self.sample_rate()).ok_or_else(|| {
            AudioError::Config(format!("{ms} ms is not a whole number of samples at {} Hz", self.sample_rate()))
        })
    }

    pub fn prepare(&self, wave: &Waveform) -> Result<Waveform> {
        bandpass(wave, self.low_hz, self.high_hz)
    }

    pub fn features(&self, wave: &Waveform) -> Result<MfccMatrix> {
        mfcc(wave, &self.mfcc)
    }
}
