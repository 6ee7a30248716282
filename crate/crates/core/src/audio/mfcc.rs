use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{samples_for_ms, AudioError, Result, Waveform};

/// Floor applied to mel energies before the logarithm.
const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub window_ms: u32,
    pub shift_ms: u32,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl MfccConfig {
    /// 16 kHz, 30 ms Hann window, 10 ms shift, 512-point FFT, 40 mel filters
    /// over 20 Hz–4 kHz, 40 cepstral coefficients, no pre-emphasis or lifter.
    pub fn standard() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 30,
            shift_ms: 10,
            n_fft: 512,
            n_mels: 40,
            n_coeffs: 40,
            low_hz: 20.0,
            high_hz: 4000.0,
        }
    }

    pub fn window_len(&self) -> Result<usize> {
        samples_for_ms(self.window_ms, self.sample_rate)
            .ok_or_else(|| AudioError::Config("window is not a whole number of samples".into()))
    }

    pub fn hop_len(&self) -> Result<usize> {
        samples_for_ms(self.shift_ms, self.sample_rate)
            .ok_or_else(|| AudioError::Config("frame shift is not a whole number of samples".into()))
    }

    /// `floor((duration − window) / shift) + 1`, or `None` when the clip is
    /// shorter than one window.
    pub fn frames_for_samples(&self, len: usize) -> Result<Option<usize>> {
        let win = self.window_len()?;
        let hop = self.hop_len()?;
        Ok((len >= win).then(|| (len - win) / hop + 1))
    }

    /// Frame count for a clip of `ms` milliseconds.
    pub fn frames_for_ms(&self, ms: u32) -> Option<usize> {
        (ms >= self.window_ms).then(|| ((ms - self.window_ms) / self.shift_ms) as usize + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let win = self.window_len()?;
        let hop = self.hop_len()?;
        let bad = |m: String| Err(AudioError::Config(m));
        if win == 0 || hop == 0 {
            return bad("window and shift must be non-empty".into());
        }
        if self.n_fft < win {
            return bad(format!("FFT size {} is smaller than the {win}-sample window", self.n_fft));
        }
        if self.n_mels == 0 || self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return bad(format!("need 0 < coefficients ({}) <= mel filters ({})", self.n_coeffs, self.n_mels));
        }
        if !(self.low_hz >= 0.0 && self.low_hz < self.high_hz && self.high_hz <= self.sample_rate as f64 / 2.0) {
            return bad(format!("mel band {}–{} Hz does not fit the sample rate", self.low_hz, self.high_hz));
        }
        Ok(())
    }
}

/// `[frames × coeffs]` cepstral features, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MfccMatrix {
    pub frames: usize,
    pub coeffs: usize,
    pub data: Vec<f32>,
}

impl MfccMatrix {
    pub fn new(frames: usize, coeffs: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * coeffs {
            return Err(AudioError::Format(format!(
                "{frames}x{coeffs} matrix needs {} values, got {}",
                frames * coeffs,
                data.len()
            )));
        }
        Ok(Self { frames, coeffs, data })
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.coeffs..(i + 1) * self.coeffs]
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, filterbank and DCT for one configuration.
struct Plan {
    win: usize,
    hop: usize,
    n_bins: usize,
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    dct: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Plan {
    fn new(cfg: &MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let win = cfg.window_len()?;
        let hop = cfg.hop_len()?;
        let n_bins = cfg.n_fft / 2 + 1;
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (win as f64 - 1.0).max(1.0)).cos())
            .collect();

        let (mlo, mhi) = (hz_to_mel(cfg.low_hz), hz_to_mel(cfg.high_hz));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .filter_map(|b| {
                        let f = b as f64 * bin_hz;
                        let w = ((f - l) / (c - l)).min((r - f) / (r - c));
                        (w > 0.0).then_some((b, w))
                    })
                    .collect()
            })
            .collect();

        let m = cfg.n_mels as f64;
        let mut dct = vec![0.0; cfg.n_coeffs * cfg.n_mels];
        for k in 0..cfg.n_coeffs {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            for j in 0..cfg.n_mels {
                dct[k * cfg.n_mels + j] = scale * (PI * k as f64 * (j as f64 + 0.5) / m).cos();
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            win,
            hop,
            n_bins,
            window,
            filters,
            dct,
            fft,
        })
    }
}

thread_local! {
    static PLAN: std::cell::RefCell<Option<(MfccConfig, std::rc::Rc<Plan>)>> = const { std::cell::RefCell::new(None) };
}

fn cached_plan(cfg: &MfccConfig) -> Result<std::rc::Rc<Plan>> {
    PLAN.with(|cell| {
        let mut slot = cell.borrow_mut();
        if let Some((c, p)) = slot.as_ref() {
            if c == cfg {
                return Ok(p.clone());
            }
        }
        let plan = std::rc::Rc::new(Plan::new(cfg)?);
        *slot = Some((cfg.clone(), plan.clone()));
        Ok(plan)
    })
}

/// MFCC features of a waveform. Frame `i` covers samples
/// `[i·hop, i·hop + window)`, so features of a prefix equal the leading
/// frames of the whole.
pub fn mfcc(wave: &Waveform, cfg: &MfccConfig) -> Result<MfccMatrix> {
    if wave.sample_rate != cfg.sample_rate {
        return Err(AudioError::Config(format!(
            "waveform is {} Hz but the front-end expects {} Hz",
            wave.sample_rate, cfg.sample_rate
        )));
    }
    let plan = cached_plan(cfg)?;
    let frames = match cfg.frames_for_samples(wave.len())? {
        Some(f) => f,
        None => {
            return Err(AudioError::TooShort {
                got: wave.len(),
                needed: plan.win,
            })
        }
    };

    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); plan.fft.get_inplace_scratch_len()];
    let mut power = vec![0.0f64; plan.n_bins];
    let mut logmel = vec![0.0f64; cfg.n_mels];
    let mut data = Vec::with_capacity(frames * cfg.n_coeffs);
    for f in 0..frames {
        let start = f * plan.hop;
        let seg = &wave.samples[start..start + plan.win];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = match seg.get(i) {
                Some(&s) => Complex::new(s as f64 * plan.window[i], 0.0),
                None => Complex::new(0.0, 0.0),
            };
        }
        plan.fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (lm, filt) in logmel.iter_mut().zip(&plan.filters) {
            let e: f64 = filt.iter().map(|&(b, w)| w * power[b]).sum();
            *lm = e.max(LOG_FLOOR).ln();
        }
        for k in 0..cfg.n_coeffs {
            let row = &plan.dct[k * cfg.n_mels..(k + 1) * cfg.n_mels];
            data.push(row.iter().zip(&logmel).map(|(a, b)| a * b).sum::<f64>() as f32);
        }
    }
    MfccMatrix::new(frames, cfg.n_coeffs, data)
}

/// Per-coefficient mean/variance normalization fitted on a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl FeatureNorm {
    pub fn identity(coeffs: usize) -> Self {
        Self {
            mean: vec![0.0; coeffs],
            var: vec![1.0; coeffs],
        }
    }

    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a MfccMatrix>) -> Option<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for m in mats {
            if sum.is_empty() {
                sum = vec![0.0; m.coeffs];
                sq = vec![0.0; m.coeffs];
            }
            for f in 0..m.frames {
                for (k, &v) in m.frame(f).iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64).powi(2);
                }
            }
            count += m.frames;
        }
        if count == 0 {
            return None;
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var = sq.iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(0.0) as f32).collect();
        Some(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            var,
        })
    }

    pub fn apply(&self, m: &mut MfccMatrix) {
        for f in 0..m.frames {
            let row = &mut m.data[f * m.coeffs..(f + 1) * m.coeffs];
            for ((v, &mu), &var) in row.iter_mut().zip(&self.mean).zip(&self.var) {
                *v = (*v - mu) / (var + 1e-5).sqrt();
            }
        }
    }
}

/// Writes `"MFCC"`, `u32` rows, `u32` cols, then little-endian `f32` values.
pub fn write_mfcc(mut w: impl Write, m: &MfccMatrix) -> Result<()> {
    w.write_all(b"MFCC")?;
    w.write_all(&(m.frames as u32).to_le_bytes())?;
    w.write_all(&(m.coeffs as u32).to_le_bytes())?;
    for v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mfcc(mut r: impl Read) -> Result<MfccMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"MFCC" {
        return Err(AudioError::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let rows = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u32::from_le_bytes(word) as usize;
    let mut bytes = vec![0u8; rows * cols * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    MfccMatrix::new(rows, cols, data)
}

/// Reads a feature file from disk.
pub fn read_mfcc_file(path: impl AsRef<Path>) -> Result<MfccMatrix> {
    read_mfcc(std::io::BufReader::new(std::fs::File::open(path)?))
}
