use std::f64::consts::PI;

use super::{AudioError, Result, Waveform};

/// Direct-form-I second-order section, coefficients normalized by `a0`.
#[derive(Clone, Copy, Debug)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    /// Butterworth (Q = 1/√2) sections via the bilinear transform.
    fn butterworth(cutoff_hz: f64, sample_rate: f64, highpass: bool) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / sample_rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / std::f64::consts::SQRT_2;
        let a0 = 1.0 + alpha;
        let b = if highpass {
            [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0]
        } else {
            [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0]
        };
        Self {
            b: b.map(|v| v / a0),
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let y = self.b[0] * *v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = *v;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
}

/// Zero-phase band-pass: a 2nd-order Butterworth high-pass at `low_hz`
/// cascaded with a 2nd-order Butterworth low-pass at `high_hz` (4th order
/// overall), run forward then backward so utterances do not shift in time.
///
/// The signal is extended by odd reflection at both ends before filtering to
/// keep start-up transients out of the returned samples.
pub fn bandpass(wave: &Waveform, low_hz: f64, high_hz: f64) -> Result<Waveform> {
    let fs = wave.sample_rate as f64;
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(AudioError::InvalidBand {
            low_hz,
            high_hz,
            sample_rate: wave.sample_rate,
        });
    }
    let n = wave.len();
    if n == 0 {
        return Ok(wave.clone());
    }
    let sections = [Biquad::butterworth(low_hz, fs, true), Biquad::butterworth(high_hz, fs, false)];

    let pad = (3.0 * (fs / low_hz).ceil()) as usize;
    let pad = pad.min(n - 1);
    let x: Vec<f64> = wave.samples.iter().map(|&s| s as f64).collect();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(&x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    for s in &sections {
        s.run(&mut ext);
    }
    ext.reverse();
    for s in &sections {
        s.run(&mut ext);
    }
    ext.reverse();

    let samples = ext[pad..pad + n].iter().map(|&v| v as f32).collect();
    Ok(Waveform::new(samples, wave.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, len: usize, amp: f64) -> Waveform {
        let s = (0..len)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        Waveform::new(s, rate)
    }

    fn db(out: &Waveform, inp: &Waveform) -> f64 {
        20.0 * (out.rms() / inp.rms()).log10()
    }

    #[test]
    fn passband_tone_is_preserved() {
        let x = sine(1000.0, 16_000, 16_000, 0.5);
        let y = bandpass(&x, 20.0, 4000.0).unwrap();
        assert!(db(&y, &x).abs() < 1.0, "{} dB", db(&y, &x));
    }

    #[test]
    fn low_tone_is_attenuated() {
        let x = sine(10.0, 16_000, 16_000, 0.5);
        let y = bandpass(&x, 20.0, 4000.0).unwrap();
        assert!(db(&y, &x) <= -20.0, "{} dB", db(&y, &x));
    }

    #[test]
    fn high_tone_is_attenuated() {
        let x = sine(7500.0, 16_000, 16_000, 0.5);
        let y = bandpass(&x, 20.0, 4000.0).unwrap();
        assert!(db(&y, &x) <= -20.0, "{} dB", db(&y, &x));
    }

    #[test]
    fn zeros_stay_zero() {
        let x = Waveform::silence(1000, 16_000);
        let y = bandpass(&x, 20.0, 4000.0).unwrap();
        assert!(y.samples.iter().all(|&v| v == 0.0));
        assert_eq!(y.len(), x.len());
    }

    #[test]
    fn rejects_bad_edges() {
        let x = Waveform::silence(100, 16_000);
        assert!(bandpass(&x, 0.0, 4000.0).is_err());
        assert!(bandpass(&x, 4000.0, 20.0).is_err());
        assert!(bandpass(&x, 20.0, 8000.0).is_err());
    }
}
