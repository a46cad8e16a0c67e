//! Framing, Hamming window and HTK log-mel filterbank for 16-bit PCM input.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::corpus::Features;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-10;
pub const PCM_MAGIC: &[u8; 4] = b"PCM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    /// Zero means the smallest power of two holding one window.
    pub fft_size: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate_hz: 16000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 80,
            fft_size: 0,
        }
    }
}

impl FrontendConfig {
    pub fn window_len(&self) -> usize {
        (self.sample_rate_hz as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate_hz as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fft_len(&self) -> usize {
        if self.fft_size == 0 {
            self.window_len().next_power_of_two()
        } else {
            self.fft_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h, n) = (self.window_len(), self.hop_len(), self.fft_len());
        if self.sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if w == 0 || h == 0 || h > w {
            return Err(Error::invalid(format!("need 0 < hop ({h}) <= window ({w}) in samples")));
        }
        if self.n_mels == 0 {
            return Err(Error::invalid("n_mels must be at least 1"));
        }
        if !n.is_power_of_two() || n < w {
            return Err(Error::invalid(format!("fft size {n} must be a power of two >= window {w}")));
        }
        Ok(())
    }
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Overlapping Hamming-windowed frames, one per row.
pub fn frame_signal(samples: &[f64], cfg: &FrontendConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (w, h) = (cfg.window_len(), cfg.hop_len());
    if samples.len() < w {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than one window ({w})",
            samples.len()
        )));
    }
    let n = 1 + (samples.len() - w) / h;
    let win = hamming(w);
    let mut out = Tensor::zeros(n, w);
    for i in 0..n {
        let src = &samples[i * h..i * h + w];
        for ((o, s), c) in out.row_mut(i).iter_mut().zip(src).zip(&win) {
            *o = s * c;
        }
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filter weights, `n_mels × (fft/2 + 1)`, with centers equally
/// spaced in mel between 0 and Nyquist.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Tensor {
    let n_fft = cfg.fft_len();
    let bins = n_fft / 2 + 1;
    let sr = cfg.sample_rate_hz as f64;
    let top = hz_to_mel(sr / 2.0);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Tensor::zeros(cfg.n_mels, bins);
    for m in 0..cfg.n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sr / n_fft as f64;
            let w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            *fb.at_mut(m, k) = w;
        }
    }
    fb
}

/// Center frequency in Hz of mel filter `m`.
pub fn mel_center_hz(cfg: &FrontendConfig, m: usize) -> f64 {
    let top = hz_to_mel(cfg.sample_rate_hz as f64 / 2.0);
    mel_to_hz(top * (m + 1) as f64 / (cfg.n_mels + 1) as f64)
}

/// One-sided power spectrum `|X_k|²` of each row, zero-padded to the FFT size.
pub fn power_spectrum(frames: &Tensor, n_fft: usize) -> Tensor {
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let bins = n_fft / 2 + 1;
    let mut out = Tensor::zeros(frames.rows, bins);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for r in 0..frames.rows {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, &v) in buf.iter_mut().zip(frames.row(r)) {
            b.re = v;
        }
        fft.process(&mut buf);
        for (o, c) in out.row_mut(r).iter_mut().zip(&buf[..bins]) {
            *o = c.norm_sqr();
        }
    }
    out
}

pub fn log_mel(frames: &Tensor, cfg: &FrontendConfig) -> Result<Tensor> {
    cfg.validate()?;
    if frames.cols != cfg.window_len() {
        return Err(Error::Dimension(format!(
            "frames have {} samples, window is {}",
            frames.cols,
            cfg.window_len()
        )));
    }
    let power = power_spectrum(frames, cfg.fft_len());
    let fb = mel_filterbank(cfg);
    let mut out = crate::tensor::matmul_bt(&power, &fb);
    out.data.iter_mut().for_each(|v| *v = v.max(LOG_FLOOR).ln());
    Ok(out)
}

pub fn extract(samples: &[f64], cfg: &FrontendConfig) -> Result<Features> {
    Features::from_tensor(&log_mel(&frame_signal(samples, cfg)?, cfg)?)
}

/// Mono PCM: `PCM1`, u32 sample rate, then i16 little-endian samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Pcm {
    pub sample_rate_hz: u32,
    pub samples: Vec<i16>,
}

impl Pcm {
    /// Samples scaled to `[-1, 1)`.
    pub fn normalized(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64 / 32768.0).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(8 + 2 * self.samples.len());
        b.extend_from_slice(PCM_MAGIC);
        b.extend_from_slice(&self.sample_rate_hz.to_le_bytes());
        for s in &self.samples {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != PCM_MAGIC {
            return Err(Error::Header(format!("{origin}: not a PCM1 file")));
        }
        let sample_rate_hz = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        let body = &bytes[8..];
        if body.len() % 2 != 0 {
            return Err(Error::Header(format!("{origin}: odd number of sample bytes")));
        }
        let samples = body
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect();
        Ok(Pcm { sample_rate_hz, samples })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a PCM1 file and computes its log-mel features. The file's sample
/// rate must match the config.
pub fn extract_file(path: &Path, cfg: &FrontendConfig) -> Result<Features> {
    let pcm = Pcm::read(path)?;
    if pcm.sample_rate_hz != cfg.sample_rate_hz {
        return Err(Error::invalid(format!(
            "{} is sampled at {} Hz, expected {} Hz",
            path.display(),
            pcm.sample_rate_hz,
            cfg.sample_rate_hz
        )));
    }
    extract(&pcm.normalized(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> FrontendConfig {
        FrontendConfig::default()
    }

    #[test]
    fn default_geometry() {
        let c = cfg();
        assert_eq!((c.window_len(), c.hop_len(), c.fft_len()), (400, 160, 512));
    }

    #[test]
    fn frame_counts_at_boundaries() {
        let c = cfg();
        assert_eq!(frame_signal(&vec![0.0; 400], &c).unwrap().rows, 1);
        assert_eq!(frame_signal(&vec![0.0; 560], &c).unwrap().rows, 2);
        assert!(frame_signal(&vec![0.0; 399], &c).is_err());
    }

    #[test]
    fn constant_signal_yields_window() {
        let f = frame_signal(&vec![1.0; 500], &cfg()).unwrap();
        assert_eq!(f.row(0), hamming(400).as_slice());
    }

    #[test]
    fn silence_hits_floor() {
        let f = frame_signal(&vec![0.0; 1000], &cfg()).unwrap();
        let m = log_mel(&f, &cfg()).unwrap();
        assert_eq!(m.cols, 80);
        assert!(m.data.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    fn naive_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &x) in frame.iter().enumerate() {
                    let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                    re += x * a.cos();
                    im += x * a.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    fn tone(freq: f64, amp: f64, len: usize) -> Vec<f64> {
        (0..len).map(|n| amp * (2.0 * PI * freq * n as f64 / 16000.0).sin()).collect()
    }

    #[test]
    fn fft_matches_direct_dft() {
        let f = frame_signal(&tone(1234.5, 0.3, 400), &cfg()).unwrap();
        let fast = power_spectrum(&f, 512);
        let slow = naive_power(f.row(0), 512);
        for (a, b) in fast.row(0).iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn tone_at_center_peaks_in_its_filter() {
        let c = cfg();
        let fb = mel_filterbank(&c);
        for m in [30usize, 45, 60, 75] {
            let f0 = mel_center_hz(&c, m);
            let frames = frame_signal(&tone(f0, 0.5, 400), &c).unwrap();
            // Oracle: direct DFT power projected on the filters.
            let p = naive_power(frames.row(0), 512);
            let energies: Vec<f64> = (0..80).map(|j| fb.row(j).iter().zip(&p).map(|(w, q)| w * q).sum()).collect();
            let want = (0..80).max_by(|&a, &b| energies[a].total_cmp(&energies[b])).unwrap();
            assert_eq!(want, m);
            let got = log_mel(&frames, &c).unwrap();
            let arg = (0..80).max_by(|&a, &b| got.at(0, a).total_cmp(&got.at(0, b))).unwrap();
            assert_eq!(arg, m);
        }
    }

    #[test]
    fn doubling_amplitude_adds_log4() {
        let c = cfg();
        let x = tone(900.0, 0.2, 1200);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = log_mel(&frame_signal(&x, &c).unwrap(), &c).unwrap();
        let b = log_mel(&frame_signal(&y, &c).unwrap(), &c).unwrap();
        let mut checked = 0;
        for (u, v) in a.data.iter().zip(&b.data) {
            if *u > LOG_FLOOR.ln() + 1.0 {
                assert!((v - u - 4f64.ln()).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn pcm_round_trip() {
        let p = Pcm {
            sample_rate_hz: 16000,
            samples: vec![0, -1, 32767, -32768, 5],
        };
        assert_eq!(Pcm::decode(&p.encode(), "x").unwrap(), p);
        assert!(Pcm::decode(b"PCM0\0\0\0\0", "x").is_err());
        assert!(Pcm::decode(&p.encode()[..9], "x").is_err());
    }

    proptest! {
        #[test]
        fn frame_count_formula(extra in 0usize..5000) {
            let c = cfg();
            let l = 400 + extra;
            prop_assert_eq!(frame_signal(&vec![0.5; l], &c).unwrap().rows, 1 + extra / 160);
        }

        #[test]
        fn scaling_up_never_lowers_output(seed in 0u64..1000, k in 1.0f64..8.0) {
            let c = FrontendConfig { n_mels: 20, ..cfg() };
            let x: Vec<f64> = (0..600).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0 - 0.5).collect();
            let y: Vec<f64> = x.iter().map(|v| v * k).collect();
            let a = log_mel(&frame_signal(&x, &c).unwrap(), &c).unwrap();
            let b = log_mel(&frame_signal(&y, &c).unwrap(), &c).unwrap();
            for (u, v) in a.data.iter().zip(&b.data) {
                prop_assert!(*v >= *u - 1e-12);
            }
        }
    }
}
