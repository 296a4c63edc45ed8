//! Waveform I/O, log-mel filter-bank features and far-field augmentation.
//!
//! Feature front-end: per-frame pre-emphasis (0.97), 400-sample Hamming
//! window, 512-point power spectrum, HTK mel scale triangles over 0–8 kHz and
//! natural log floored at `ln(1e-10)`. Frames are 25 ms long with a 10 ms
//! shift, so an `N`-sample utterance yields `1 + (N - 400) / 160` frames.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LENGTH: usize = 400;
pub const FRAME_SHIFT: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const PREEMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono 16 kHz audio with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform must contain at least one sample"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn scaled(&self, c: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|v| v * c).collect(),
        }
    }
}

/// Reads a 16 kHz mono PCM (or float) WAV file.
pub fn load_waveform(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedSampleRate(spec.sample_rate));
    }
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio(format!(
            "{} channels in {}, expected mono",
            spec.channels,
            path.display()
        )));
    }
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let full_scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full_scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()?,
    };
    Waveform::new(samples)
}

/// Writes 16-bit PCM; samples outside `[-1, 1]` are clipped.
pub fn save_waveform(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Log-mel filter-bank features of one utterance, `frames × num_mels`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(frames: Array2<f64>) -> Self {
        Self { frames }
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_mels(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame_shift_secs(&self) -> f64 {
        FRAME_SHIFT as f64 / SAMPLE_RATE as f64
    }

    pub fn frame_length_secs(&self) -> f64 {
        FRAME_LENGTH as f64 / SAMPLE_RATE as f64
    }
}

/// Number of 25 ms / 10 ms frames in `n_samples`, or `None` if shorter than one window.
pub fn fbank_frames(n_samples: usize) -> Option<usize> {
    n_samples
        .checked_sub(FRAME_LENGTH)
        .map(|r| 1 + r / FRAME_SHIFT)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel weights, `num_mels × (FFT_SIZE / 2 + 1)`.
pub fn mel_filterbank(num_mels: usize) -> Array2<f64> {
    let nbins = FFT_SIZE / 2 + 1;
    let max_mel = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    let edges: Vec<f64> = (0..num_mels + 2)
        .map(|i| mel_to_hz(max_mel * i as f64 / (num_mels + 1) as f64))
        .collect();
    let mut bank = Array2::zeros((num_mels, nbins));
    for m in 0..num_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..nbins {
            let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            bank[[m, k]] = w;
        }
    }
    bank
}

/// Reusable filter-bank extractor holding the mel weights, window and FFT plan.
pub struct FbankExtractor {
    num_mels: usize,
    bank: Array2<f64>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl FbankExtractor {
    pub fn new(num_mels: usize) -> Result<Self> {
        if num_mels == 0 {
            return Err(Error::invalid("num_mels must be positive"));
        }
        let window = (0..FRAME_LENGTH)
            .map(|n| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (FRAME_LENGTH - 1) as f64).cos()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        Ok(Self {
            num_mels,
            bank: mel_filterbank(num_mels),
            window,
            fft,
        })
    }

    pub fn num_mels(&self) -> usize {
        self.num_mels
    }

    /// Power spectrum of the frame starting at `start`, after pre-emphasis and windowing.
    fn power_spectrum(&self, samples: &[f64], start: usize, buf: &mut [Complex<f64>]) -> Vec<f64> {
        let frame = &samples[start..start + FRAME_LENGTH];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for n in 0..FRAME_LENGTH {
            let prev = if n == 0 { frame[0] } else { frame[n - 1] };
            buf[n].re = (frame[n] - PREEMPHASIS * prev) * self.window[n];
        }
        self.fft.process(buf);
        buf[..FFT_SIZE / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn compute(&self, w: &Waveform) -> Result<FeatureMatrix> {
        let n = w.len();
        let frames = fbank_frames(n).ok_or(Error::TooShort {
            got: n,
            need: FRAME_LENGTH,
        })?;
        let mut out = Array2::zeros((frames, self.num_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for t in 0..frames {
            let power = self.power_spectrum(w.samples(), t * FRAME_SHIFT, &mut buf);
            for m in 0..self.num_mels {
                let e: f64 = self
                    .bank
                    .row(m)
                    .iter()
                    .zip(&power)
                    .map(|(a, b)| a * b)
                    .sum();
                out[[t, m]] = e.max(LOG_FLOOR).ln();
            }
        }
        Ok(FeatureMatrix::new(out))
    }
}

/// Log-mel filter-bank features with the front-end described in the module docs.
pub fn compute_fbank(w: &Waveform, num_mels: usize) -> Result<FeatureMatrix> {
    FbankExtractor::new(num_mels)?.compute(w)
}

/// Indices where the clean signal is non-silent (non-zero).
fn active_support(clean: &[f64]) -> Vec<usize> {
    clean
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

fn power_over(x: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| x[i] * x[i]).sum::<f64>() / idx.len() as f64
}

/// Tiles (or truncates) `noise` to `len` samples.
pub fn tile_to(noise: &[f64], len: usize) -> Vec<f64> {
    noise.iter().copied().cycle().take(len).collect()
}

/// Signal-to-noise ratio in dB of `clean` against `noise` (same length),
/// measured over the non-silent support of `clean`.
pub fn measure_snr_db(clean: &[f64], noise: &[f64]) -> Result<f64> {
    if clean.len() != noise.len() {
        return Err(Error::ShapeMismatch(format!(
            "clean has {} samples, noise {}",
            clean.len(),
            noise.len()
        )));
    }
    let idx = active_support(clean);
    if idx.is_empty() {
        return Err(Error::Degenerate("clean signal has zero power".into()));
    }
    let pn = power_over(noise, &idx);
    if pn == 0.0 {
        return Err(Error::Degenerate("noise has zero power".into()));
    }
    Ok(10.0 * (power_over(clean, &idx) / pn).log10())
}

/// Gain applied to the tiled noise so that the mixture has the requested SNR.
pub fn noise_gain(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<f64> {
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("snr_db must be finite, got {snr_db}")));
    }
    let tiled = tile_to(noise.samples(), clean.len());
    let idx = active_support(clean.samples());
    if idx.is_empty() {
        return Err(Error::Degenerate("clean signal has zero power".into()));
    }
    let pc = power_over(clean.samples(), &idx);
    let pn = power_over(&tiled, &idx);
    if pn == 0.0 {
        return Err(Error::Degenerate("noise has zero power over the clean support".into()));
    }
    Ok((pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `clean + g · noise` with `g` chosen to hit `snr_db` over the clean signal's
/// non-silent support. The noise is tiled or truncated to the clean length.
pub fn add_noise(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    let g = noise_gain(clean, noise, snr_db)?;
    let tiled = tile_to(noise.samples(), clean.len());
    let samples = clean
        .samples()
        .iter()
        .zip(&tiled)
        .map(|(c, n)| c + g * n)
        .collect();
    Waveform::new(samples)
}

const DIRECT_CONV_MAX_TAPS: usize = 64;

/// Full linear convolution truncated to `dry.len()` samples.
pub fn convolve_truncated(dry: &[f64], kernel: &[f64]) -> Vec<f64> {
    if kernel.len() <= DIRECT_CONV_MAX_TAPS {
        let mut out = vec![0.0; dry.len()];
        for (n, o) in out.iter_mut().enumerate() {
            let kmax = kernel.len().min(n + 1);
            *o = (0..kmax).map(|k| kernel[k] * dry[n - k]).sum();
        }
        return out;
    }
    let full = dry.len() + kernel.len() - 1;
    let size = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex<f64>> = dry.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(size, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = kernel.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(size, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    let norm = size as f64;
    a[..dry.len()].iter().map(|c| c.re / norm).collect()
}

/// Reverberates `dry` with `rir`: convolution truncated to the dry length, then
/// rescaled so the output peak magnitude equals the dry peak magnitude.
pub fn apply_reverb(dry: &Waveform, rir: &Waveform) -> Result<Waveform> {
    if rir.samples().iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("impulse response is all zeros".into()));
    }
    let mut wet = convolve_truncated(dry.samples(), rir.samples());
    let peak_dry = dry.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let peak_wet = wet.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak_wet > 0.0 && peak_dry != peak_wet {
        let g = peak_dry / peak_wet;
        wet.iter_mut().for_each(|v| *v *= g);
    }
    Waveform::new(wet)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Noise,
    Music,
    Babble,
    Reverb,
}

/// Corruption policy: exactly one kind is drawn uniformly per call.
#[derive(Clone, Debug)]
pub struct AugmentPolicy {
    pub kinds: Vec<AugmentKind>,
    pub snr_db_range: (f64, f64),
    pub rir_pool: Vec<Waveform>,
    pub seed: u64,
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::invalid("augment policy needs at least one kind"));
        }
        let (lo, hi) = self.snr_db_range;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::invalid(format!("bad snr range [{lo}, {hi}]")));
        }
        if self.kinds.contains(&AugmentKind::Reverb) && self.rir_pool.is_empty() {
            return Err(Error::invalid("reverb augmentation needs a non-empty rir pool"));
        }
        Ok(())
    }
}

/// Serializable description of an augmentation policy; the RIR pool is
/// synthesized from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability that a training crop is corrupted; 0 disables augmentation.
    pub prob: f64,
    pub kinds: Vec<AugmentKind>,
    pub snr_db_range: (f64, f64),
    pub num_rirs: usize,
    pub rt60_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            prob: 0.0,
            kinds: vec![AugmentKind::Noise, AugmentKind::Music, AugmentKind::Babble, AugmentKind::Reverb],
            snr_db_range: (0.0, 15.0),
            num_rirs: 8,
            rt60_range: (0.3, 0.9),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::invalid(format!("augment prob {} outside [0, 1]", self.prob)));
        }
        let (lo, hi) = self.rt60_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("bad rt60 range [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Builds the policy, drawing `num_rirs` synthetic RIRs of 0.5 s.
    pub fn policy(&self, seed: u64) -> Result<AugmentPolicy> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let needs_rirs = self.kinds.contains(&AugmentKind::Reverb);
        let rir_pool = (0..if needs_rirs { self.num_rirs } else { 0 })
            .map(|_| {
                let (lo, hi) = self.rt60_range;
                let rt60 = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                synthetic_rir(rng.random(), rt60, 0.5)
            })
            .collect::<Result<Vec<_>>>()?;
        let policy = AugmentPolicy {
            kinds: self.kinds.clone(),
            snr_db_range: self.snr_db_range,
            rir_pool,
            seed,
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Stationary Gaussian noise with a first-order low-pass tilt.
fn synth_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let tilt: f64 = rng.random_range(0.0..0.9);
    let mut prev = 0.0;
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            prev = tilt * prev + (1.0 - tilt) * z;
            prev
        })
        .collect()
}

/// A few sustained tones with note changes every ~0.25 s.
fn synth_music(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let mut out = vec![0.0; len];
    let voices = rng.random_range(2..5);
    let note_len = (0.25 * sr) as usize;
    for _ in 0..voices {
        let mut n = 0;
        while n < len {
            let semitone: i32 = rng.random_range(-24..24);
            let f = 440.0 * 2f64.powf(semitone as f64 / 12.0);
            let amp: f64 = rng.random_range(0.2..1.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let end = (n + note_len).min(len);
            for (i, o) in out[n..end].iter_mut().enumerate() {
                let tt = i as f64 / sr;
                let env = (-3.0 * tt).exp();
                *o += amp * env * (std::f64::consts::TAU * f * tt + phase).sin();
            }
            n = end;
        }
    }
    out
}

/// Overlapping harmonic "talkers" with random pitch.
fn synth_babble(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let mut out = vec![0.0; len];
    let talkers = rng.random_range(3..7);
    for _ in 0..talkers {
        let f0: f64 = rng.random_range(90.0..260.0);
        let rate: f64 = rng.random_range(2.5..5.0);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for (i, o) in out.iter_mut().enumerate() {
            let tt = i as f64 / sr;
            let env = 0.5 * (1.0 + (std::f64::consts::TAU * rate * tt + phase).sin());
            let mut v = 0.0;
            for h in 1..=12 {
                let fh = f0 * h as f64;
                if fh >= sr / 2.0 {
                    break;
                }
                v += (std::f64::consts::TAU * fh * tt + phase * h as f64).sin() / h as f64;
            }
            *o += env * v;
        }
    }
    out
}

/// Applies one corruption drawn from `policy`; deterministic in `(w, policy.seed)`.
pub fn augment(w: &Waveform, policy: &AugmentPolicy) -> Result<Waveform> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let kind = policy.kinds[rng.random_range(0..policy.kinds.len())];
    let (lo, hi) = policy.snr_db_range;
    let snr = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let noise = match kind {
        AugmentKind::Reverb => {
            let rir = &policy.rir_pool[rng.random_range(0..policy.rir_pool.len())];
            return apply_reverb(w, rir);
        }
        AugmentKind::Noise => synth_noise(&mut rng, w.len()),
        AugmentKind::Music => synth_music(&mut rng, w.len()),
        AugmentKind::Babble => synth_babble(&mut rng, w.len()),
    };
    add_noise(w, &Waveform::new(noise)?, snr)
}

/// Exponentially decaying noise tail with a direct-path spike, `rt60` in seconds.
pub fn synthetic_rir(seed: u64, rt60: f64, length_secs: f64) -> Result<Waveform> {
    if rt60 <= 0.0 || length_secs <= 0.0 {
        return Err(Error::invalid("rt60 and length must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = ((length_secs * SAMPLE_RATE as f64) as usize).max(1);
    let decay = 6.9078 / (rt60 * SAMPLE_RATE as f64);
    let pre_delay = rng.random_range(0..80usize).min(len - 1);
    let mut h = vec![0.0; len];
    h[pre_delay] = 1.0;
    for (n, v) in h.iter_mut().enumerate().skip(pre_delay + 1) {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = 0.3 * z * (-decay * (n - pre_delay) as f64).exp();
    }
    Waveform::new(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn sine(freq: f64, n: usize, amp: f64) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
                .collect(),
        )
        .unwrap()
    }

    fn noise(seed: u64, n: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
    }

    #[test]
    fn fbank_shapes() {
        let f = compute_fbank(&noise(1, 16000), 80).unwrap();
        assert_eq!((f.num_frames(), f.num_mels()), (98, 80));
        let f = compute_fbank(&noise(1, 400), 40).unwrap();
        assert_eq!((f.num_frames(), f.num_mels()), (1, 40));
        assert!(matches!(
            compute_fbank(&noise(1, 399), 80),
            Err(Error::TooShort { got: 399, need: 400 })
        ));
    }

    /// Independent reference: direct DFT of the pre-emphasized Hamming frame
    /// and mel triangles evaluated in the mel domain edge by edge.
    fn oracle_fbank_frame(x: &[f64], num_mels: usize) -> Vec<f64> {
        let n = 400;
        let mut frame = vec![0.0; 512];
        for i in 0..n {
            let prev = if i == 0 { x[0] } else { x[i - 1] };
            let ham = 0.54 - 0.46 * (2.0 * PI * i as f64 / 399.0).cos();
            frame[i] = (x[i] - 0.97 * prev) * ham;
        }
        let power: Vec<f64> = (0..=256)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in frame.iter().enumerate() {
                    let ang = -2.0 * PI * (k * i) as f64 / 512.0;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let top = mel(8000.0);
        (0..num_mels)
            .map(|m| {
                let lo = inv(top * m as f64 / (num_mels + 1) as f64);
                let c = inv(top * (m + 1) as f64 / (num_mels + 1) as f64);
                let hi = inv(top * (m + 2) as f64 / (num_mels + 1) as f64);
                let e: f64 = (0..=256)
                    .map(|k| {
                        let f = k as f64 * 31.25;
                        let w = if f > lo && f <= c {
                            (f - lo) / (c - lo)
                        } else if f > c && f < hi {
                            (hi - f) / (hi - c)
                        } else {
                            0.0
                        };
                        w * power[k]
                    })
                    .sum();
                e.max(1e-10).ln()
            })
            .collect()
    }

    #[test]
    fn sine_peaks_in_the_mel_bin_covering_1khz() {
        let w = sine(1000.0, 16000, 0.5);
        let f = compute_fbank(&w, 80).unwrap();
        let target_bin = (0..80)
            .min_by(|&a, &b| {
                let ca = mel_to_hz(hz_to_mel(8000.0) * (a + 1) as f64 / 81.0);
                let cb = mel_to_hz(hz_to_mel(8000.0) * (b + 1) as f64 / 81.0);
                (ca - 1000.0).abs().partial_cmp(&(cb - 1000.0).abs()).unwrap()
            })
            .unwrap();
        for t in 0..f.num_frames() {
            let row = f.frames().row(t);
            let argmax = (0..80).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(argmax, target_bin, "frame {t}");
        }
        for t in [0, 17, 97] {
            let want = oracle_fbank_frame(&w.samples()[t * 160..t * 160 + 400], 80);
            for (m, v) in want.iter().enumerate() {
                assert!((f.frames()[[t, m]] - v).abs() < 1e-8, "frame {t} mel {m}");
            }
        }
    }

    #[test]
    fn zero_waveform_is_floored_not_nan() {
        let w = Waveform::new(vec![0.0; 800]).unwrap();
        let f = compute_fbank(&w, 40).unwrap();
        assert!(f.frames().iter().all(|v| *v == LOG_FLOOR.ln()));
    }

    #[test]
    fn snr_examples() {
        let clean = sine(440.0, 8000, 1.0);
        let g = noise_gain(&clean, &clean, 0.0).unwrap();
        assert!((g - 1.0).abs() < 1e-12);
        let g = noise_gain(&clean, &clean, 20.0).unwrap();
        assert!((g - 0.1).abs() < 1e-12);
        assert!(add_noise(&clean, &clean, f64::INFINITY).is_err());
        assert!(add_noise(&clean, &clean, f64::NAN).is_err());
        let silent = Waveform::new(vec![0.0; 100]).unwrap();
        assert!(matches!(add_noise(&clean, &silent, 5.0), Err(Error::Degenerate(_))));
        assert!(matches!(add_noise(&silent, &clean, 5.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn reverb_examples() {
        let dry = noise(3, 100);
        let delta = Waveform::new(vec![1.0]).unwrap();
        assert_eq!(apply_reverb(&dry, &delta).unwrap(), dry);

        let mut s = vec![0.0; 50];
        s[2] = 0.9;
        s[10] = -0.3;
        s[30] = 0.1;
        let dry = Waveform::new(s.clone()).unwrap();
        let mut d = vec![0.0; 4];
        d[3] = 1.0;
        let out = apply_reverb(&dry, &Waveform::new(d).unwrap()).unwrap();
        for n in 0..50 {
            let want = if n >= 3 { s[n - 3] } else { 0.0 };
            assert_eq!(out.samples()[n], want);
        }
        assert!(apply_reverb(&dry, &Waveform::new(vec![0.0; 3]).unwrap()).is_err());
    }

    fn brute_conv(x: &[f64], h: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|n| {
                let mut s = 0.0;
                for (k, hv) in h.iter().enumerate() {
                    if k <= n {
                        s += hv * x[n - k];
                    }
                }
                s
            })
            .collect()
    }

    #[test]
    fn reverb_matches_brute_force_convolution() {
        let dry = noise(4, 100);
        for taps in [5usize, 300] {
            let rir = noise(5 + taps as u64, taps);
            let out = apply_reverb(&dry, &rir).unwrap();
            let raw = brute_conv(dry.samples(), rir.samples());
            let peak_dry = dry.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let peak_raw = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in out.samples().iter().zip(&raw) {
                assert!((a - b * peak_dry / peak_raw).abs() < 1e-10, "taps {taps}");
            }
        }
    }

    #[test]
    fn augment_examples() {
        let w = noise(6, 4000);
        let identity = AugmentPolicy {
            kinds: vec![AugmentKind::Reverb],
            snr_db_range: (0.0, 10.0),
            rir_pool: vec![Waveform::new(vec![1.0]).unwrap()],
            seed: 9,
        };
        assert_eq!(augment(&w, &identity).unwrap(), w);

        let policy = AugmentPolicy {
            kinds: vec![AugmentKind::Noise, AugmentKind::Music, AugmentKind::Babble],
            snr_db_range: (0.0, 15.0),
            rir_pool: vec![],
            seed: 11,
        };
        assert_eq!(augment(&w, &policy).unwrap(), augment(&w, &policy).unwrap());

        for kind in [AugmentKind::Noise, AugmentKind::Music, AugmentKind::Babble] {
            let p = AugmentPolicy {
                kinds: vec![kind],
                snr_db_range: (5.0, 5.0),
                rir_pool: vec![],
                seed: 3,
            };
            let out = augment(&w, &p).unwrap();
            let added: Vec<f64> = out.samples().iter().zip(w.samples()).map(|(a, b)| a - b).collect();
            let snr = measure_snr_db(w.samples(), &added).unwrap();
            assert!((snr - 5.0).abs() < 1e-6, "{kind:?}: {snr}");
        }
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentPolicy {
            kinds: vec![],
            snr_db_range: (0.0, 1.0),
            rir_pool: vec![],
            seed: 0,
        };
        assert!(p.validate().is_err());
        p.kinds = vec![AugmentKind::Noise];
        p.snr_db_range = (3.0, 1.0);
        assert!(p.validate().is_err());
        p.snr_db_range = (1.0, 3.0);
        p.kinds = vec![AugmentKind::Reverb];
        assert!(p.validate().is_err());
    }

    #[test]
    fn wav_round_trip_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = sine(200.0, 16000, 0.5);
        save_waveform(&path, &w).unwrap();
        let back = load_waveform(&path).unwrap();
        assert_eq!(back.len(), 16000);
        for (a, b) in back.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }

        let zeros = dir.path().join("z.wav");
        save_waveform(&zeros, &Waveform::new(vec![0.0; 1600]).unwrap()).unwrap();
        let z = load_waveform(&zeros).unwrap();
        assert!(z.samples().iter().all(|v| *v == 0.0));

        let low = dir.path().join("8k.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&low, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(load_waveform(&low), Err(Error::UnsupportedSampleRate(8000))));
        assert!(matches!(load_waveform(dir.path().join("nope.wav")), Err(Error::Io { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn frame_count_formula(n in 400usize..6000) {
            let f = compute_fbank(&noise(n as u64, n), 40).unwrap();
            prop_assert_eq!(f.num_frames(), 1 + (n - 400) / 160);
        }

        #[test]
        fn log_mel_is_scale_covariant(c in 0.05f64..20.0, seed in 0u64..1000) {
            let w = noise(seed, 1200);
            let a = compute_fbank(&w, 40).unwrap();
            let b = compute_fbank(&w.scaled(c), 40).unwrap();
            for (x, y) in a.frames().iter().zip(b.frames()) {
                prop_assert!((y - x - 2.0 * c.ln()).abs() < 1e-6);
            }
        }

        #[test]
        fn add_noise_hits_requested_snr(snr in -10.0f64..30.0, s1 in 0u64..500, s2 in 500u64..1000, len in 100usize..3000) {
            let clean = noise(s1, len);
            let n = noise(s2, 777);
            let out = add_noise(&clean, &n, snr).unwrap();
            let added: Vec<f64> = out.samples().iter().zip(clean.samples()).map(|(a, b)| a - b).collect();
            let g = noise_gain(&clean, &n, snr).unwrap();
            let scaled: Vec<f64> = tile_to(n.samples(), len).iter().map(|v| v * g).collect();
            prop_assert!((measure_snr_db(clean.samples(), &scaled).unwrap() - snr).abs() < 1e-6);
            prop_assert!((measure_snr_db(clean.samples(), &added).unwrap() - snr).abs() < 1e-6);
        }

        #[test]
        fn unit_impulse_reverb_is_identity(seed in 0u64..1000, len in 1usize..500) {
            let w = noise(seed, len);
            prop_assert_eq!(apply_reverb(&w, &Waveform::new(vec![1.0]).unwrap()).unwrap(), w);
        }
    }
}
