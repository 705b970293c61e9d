//! Fixed-format WAV loading and log-mel spectrograms.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
/// Ten seconds at 16 kHz.
pub const CLIP_SAMPLES: usize = 160_000;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("unsupported WAV format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("corrupt WAV {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("wav i/o at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid mel config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    /// Mono samples in [-1, 1].
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    /// Zero-pads or truncates to exactly `len` samples.
    pub fn fit_length(mut self, len: usize) -> Self {
        self.samples.resize(len, 0.0);
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Linearly resample other rates to 16 kHz instead of rejecting them.
    pub resample: bool,
}

/// Reads a PCM16 mono 16 kHz WAV, scales by 1/32768 and fits it to [`CLIP_SAMPLES`].
pub fn load_wav(path: &Path, opts: LoadOptions) -> Result<AudioClip, SignalError> {
    let corrupt = |reason: String| SignalError::CorruptHeader { path: path.to_path_buf(), reason };
    let unsupported = |reason: String| SignalError::UnsupportedFormat { path: path.to_path_buf(), reason };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source)
            if matches!(source.kind(), std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied) =>
        {
            SignalError::Io { path: path.to_path_buf(), source }
        }
        hound::Error::Unsupported => unsupported("encoding not supported".into()),
        other => corrupt(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(unsupported(format!("expected 1 channel, found {}", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "expected 16-bit PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.sample_rate != SAMPLE_RATE && !opts.resample {
        return Err(unsupported(format!("expected sample rate {SAMPLE_RATE} Hz, found {} Hz", spec.sample_rate)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| corrupt(e.to_string()))?;
    let samples = if spec.sample_rate == SAMPLE_RATE {
        samples
    } else {
        resample_linear(&samples, spec.sample_rate, SAMPLE_RATE)
    };
    Ok(AudioClip { samples, sample_rate: SAMPLE_RATE }.fit_length(CLIP_SAMPLES))
}

/// Linear-interpolation resampler; no anti-alias filtering.
pub fn resample_linear(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if x.is_empty() || from == to {
        return x.to_vec();
    }
    let n_out = (x.len() as u64 * u64::from(to) / u64::from(from)) as usize;
    let step = f64::from(from) / f64::from(to);
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = x[j.min(x.len() - 1)];
            let b = x[(j + 1).min(x.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// Writes mono PCM16 at 16 kHz through a temporary file.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<(), SignalError> {
    let io = |source: std::io::Error| SignalError::Io { path: path.to_path_buf(), source };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let tmp = path.with_extension("wav.tmp");
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => io(source),
        other => SignalError::CorruptHeader { path: path.to_path_buf(), reason: other.to_string() },
    };
    let mut w = hound::WavWriter::create(&tmp, spec).map_err(to_err)?;
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(to_err)?;
    }
    w.finalize().map_err(to_err)?;
    std::fs::rename(&tmp, path).map_err(io)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelScale {
    /// Linear below 1 kHz, logarithmic above.
    Slaney,
    /// 2595 log10(1 + f/700).
    Htk,
}

impl MelScale {
    pub fn hz_to_mel(self, f: f64) -> f64 {
        match self {
            MelScale::Htk => 2595.0 * (1.0 + f / 700.0).log10(),
            MelScale::Slaney => {
                let f_sp = 200.0 / 3.0;
                let min_log_hz = 1000.0;
                let min_log_mel = min_log_hz / f_sp;
                let logstep = 6.4f64.ln() / 27.0;
                if f >= min_log_hz {
                    min_log_mel + (f / min_log_hz).ln() / logstep
                } else {
                    f / f_sp
                }
            }
        }
    }

    pub fn mel_to_hz(self, m: f64) -> f64 {
        match self {
            MelScale::Htk => 700.0 * (10f64.powf(m / 2595.0) - 1.0),
            MelScale::Slaney => {
                let f_sp = 200.0 / 3.0;
                let min_log_hz = 1000.0;
                let min_log_mel = min_log_hz / f_sp;
                let logstep = 6.4f64.ln() / 27.0;
                if m >= min_log_mel {
                    min_log_hz * (logstep * (m - min_log_mel)).exp()
                } else {
                    f_sp * m
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub clip_samples: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub scale: MelScale,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            clip_samples: CLIP_SAMPLES,
            win_length: 512,
            hop_length: 160,
            n_fft: 512,
            n_mels: 64,
            fmin: 50.0,
            fmax: 8000.0,
            scale: MelScale::Slaney,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<(), SignalError> {
        let bad = |m: &str| Err(SignalError::InvalidConfig(m.into()));
        if self.win_length == 0 || self.hop_length == 0 || self.n_mels == 0 {
            return bad("window, hop and mel count must be positive");
        }
        if self.n_fft < self.win_length {
            return bad("n_fft must be at least the window length");
        }
        if self.clip_samples < self.win_length {
            return bad("clip shorter than one window");
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= f64::from(self.sample_rate) / 2.0) {
            return bad("need 0 <= fmin < fmax <= sample_rate / 2");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    /// 1 + floor((clip_samples - win_length) / hop_length).
    pub fn n_frames(&self) -> usize {
        1 + (self.clip_samples - self.win_length) / self.hop_length
    }

    /// Hex SHA-256 of the canonical JSON form; identifies the front end in experiment records.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Center frequencies (Hz) of the triangular filters.
    pub fn center_frequencies(&self) -> Vec<f64> {
        let pts = self.mel_points();
        pts[1..=self.n_mels].to_vec()
    }

    fn mel_points(&self) -> Vec<f64> {
        let lo = self.scale.hz_to_mel(self.fmin);
        let hi = self.scale.hz_to_mel(self.fmax);
        (0..self.n_mels + 2)
            .map(|i| self.scale.mel_to_hz(lo + (hi - lo) * i as f64 / (self.n_mels + 1) as f64))
            .collect()
    }

    /// `n_mels × (n_fft/2 + 1)` peak-normalized triangles.
    pub fn filterbank(&self) -> Vec<Vec<f64>> {
        let n_bins = self.n_fft / 2 + 1;
        let pts = self.mel_points();
        let bin_hz = f64::from(self.sample_rate) / self.n_fft as f64;
        (0..self.n_mels)
            .map(|m| {
                let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let up = (f - l) / (c - l);
                        let down = (r - f) / (r - c);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Log-mel energies, `t × f` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpec {
    pub frames: Vec<f64>,
    pub t: usize,
    pub f: usize,
    pub config_digest: String,
}

impl MelSpec {
    pub fn at(&self, t: usize, f: usize) -> f64 {
        self.frames[t * self.f + f]
    }

    /// `[t, f]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.t, self.f], self.frames.clone()).expect("consistent shape")
    }
}

/// Reusable front end holding the FFT plan, window and filterbank.
pub struct LogMel {
    cfg: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// Per filter: first nonzero bin and its weights.
    bank: Vec<(usize, Vec<f64>)>,
    digest: String,
}

impl LogMel {
    pub fn new(cfg: MelConfig) -> Result<Self, SignalError> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        // Periodic Hann.
        let window = (0..cfg.win_length)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.win_length as f64).cos())
            .collect();
        let bank = cfg
            .filterbank()
            .into_iter()
            .map(|row| {
                let start = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let end = row.iter().rposition(|&w| w > 0.0).map_or(start, |e| e + 1);
                (start, row[start..end].to_vec())
            })
            .collect();
        let digest = cfg.digest();
        Ok(Self { cfg, fft, window, bank, digest })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Samples beyond `clip_samples` are ignored and missing ones read as zero.
    pub fn compute(&self, samples: &[f64]) -> MelSpec {
        let c = &self.cfg;
        let t = c.n_frames();
        let n_bins = c.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); c.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0.0; n_bins];
        let mut frames = Vec::with_capacity(t * c.n_mels);
        for i in 0..t {
            let start = i * c.hop_length;
            for (j, b) in buf.iter_mut().enumerate() {
                let s = if j < c.win_length {
                    samples.get(start + j).copied().unwrap_or(0.0) * self.window[j]
                } else {
                    0.0
                };
                *b = Complex::new(s, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, b) in mag.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            for (start, w) in &self.bank {
                let e: f64 = w.iter().zip(&mag[*start..]).map(|(a, b)| a * b).sum();
                frames.push((e + c.log_floor).ln());
            }
        }
        MelSpec { frames, t, f: c.n_mels, config_digest: self.digest.clone() }
    }
}

pub fn logmel(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpec, SignalError> {
    Ok(LogMel::new(cfg.clone())?.compute(&clip.samples))
}
