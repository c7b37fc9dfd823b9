//! Deterministic 54-channel audio features at the motion frame rate.
//!
//! Channel layout:
//! - 0..20   log mel-band energies (20 bands, 0 Hz .. sr/2)
//! - 20..32  log chroma energies (12 pitch classes, 55 Hz .. 4 kHz)
//! - 32..52  band-wise onset strengths (rectified log-mel flux)
//! - 52      aggregate onset envelope (mean over bands)
//! - 53      binary beat indicator (adaptive peak picking on channel 52)
//!
//! The waveform is peak-normalized before analysis, so scaling the input by
//! any positive constant leaves every channel unchanged.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use duet_core::Tensor;

use crate::error::{MusicError, Result};

pub const CHANNELS: usize = 54;
pub const MEL_BANDS: usize = 20;
pub const CHROMA_BINS: usize = 12;
pub const ONSET_AGGREGATE: usize = 52;
pub const BEAT_CHANNEL: usize = 53;

const FFT_SIZE: usize = 1024;
const LOG_FLOOR: f64 = 1e-10;
/// Adaptive beat threshold window, seconds per side.
const BEAT_WINDOW_SEC: f64 = 0.25;

/// Per-frame audio features aligned with motion frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MusicFeatures {
    pub fps: f64,
    /// [T, 54]
    pub values: Tensor,
}

impl MusicFeatures {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channel(&self, t: usize, c: usize) -> f64 {
        self.values.data()[t * CHANNELS + c]
    }
}

fn mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_inv(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the power spectrum bins.
fn mel_filters(sample_rate: f64) -> Vec<Vec<(usize, f64)>> {
    let nyquist = sample_rate / 2.0;
    let points: Vec<f64> = (0..MEL_BANDS + 2)
        .map(|i| mel_inv(mel(nyquist) * i as f64 / (MEL_BANDS + 1) as f64))
        .collect();
    let bin_hz = sample_rate / FFT_SIZE as f64;
    let bins = FFT_SIZE / 2;
    let mut filters = Vec::with_capacity(MEL_BANDS);
    for b in 0..MEL_BANDS {
        let (lo, mid, hi) = (points[b], points[b + 1], points[b + 2]);
        let mut taps = Vec::new();
        for k in 1..bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            if w > 0.0 {
                taps.push((k, w));
            }
        }
        filters.push(taps);
    }
    filters
}

struct Analyzer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    sample_rate: f64,
}

impl Analyzer {
    fn new(sample_rate: f64) -> Self {
        let mut planner = FftPlanner::new();
        let window = (0..FFT_SIZE)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (FFT_SIZE - 1) as f64).cos())
            .collect();
        Self {
            fft: planner.plan_fft_forward(FFT_SIZE),
            window,
            filters: mel_filters(sample_rate),
            sample_rate,
        }
    }

    /// Power spectrum of the window centered on `center`.
    fn spectrum(&self, samples: &[f64], center: i64) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = (0..FFT_SIZE)
            .map(|i| {
                let idx = center - (FFT_SIZE as i64) / 2 + i as i64;
                let v = if idx >= 0 && (idx as usize) < samples.len() {
                    samples[idx as usize]
                } else {
                    0.0
                };
                Complex::new(v * self.window[i], 0.0)
            })
            .collect();
        self.fft.process(&mut buf);
        buf[..FFT_SIZE / 2].iter().map(|c| c.norm_sqr()).collect()
    }

    fn mel_frame(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|taps| {
                let e: f64 = taps.iter().map(|&(k, w)| power[k] * w).sum();
                (e + LOG_FLOOR).ln()
            })
            .collect()
    }

    fn chroma_frame(&self, power: &[f64]) -> Vec<f64> {
        let bin_hz = self.sample_rate / FFT_SIZE as f64;
        let mut chroma = [0.0f64; CHROMA_BINS];
        for (k, &p) in power.iter().enumerate().skip(1) {
            let f = k as f64 * bin_hz;
            if !(55.0..=4000.0).contains(&f) {
                continue;
            }
            let note = 69.0 + 12.0 * (f / 440.0).log2();
            let class = (note.round() as i64).rem_euclid(12) as usize;
            chroma[class] += p;
        }
        chroma.iter().map(|&e| (e + LOG_FLOOR).ln()).collect()
    }
}

/// Extract the fixed 54-channel layout from a mono waveform.
///
/// Pure function of (waveform, sample_rate, fps); the frame count is the
/// waveform duration times `fps`, rounded to the nearest frame.
pub fn extract_features(waveform: &[f64], sample_rate: u32, fps: f64) -> Result<MusicFeatures> {
    if waveform.is_empty() {
        return Err(MusicError::Invalid("empty waveform".into()));
    }
    if sample_rate < 16_000 {
        return Err(MusicError::Invalid(format!(
            "sample rate {sample_rate} below 16 kHz minimum"
        )));
    }
    if fps <= 0.0 {
        return Err(MusicError::Invalid("fps must be positive".into()));
    }
    if waveform.iter().any(|v| !v.is_finite()) {
        return Err(MusicError::Invalid("waveform contains non-finite samples".into()));
    }
    let sr = sample_rate as f64;
    let frames = ((waveform.len() as f64 / sr) * fps).round().max(1.0) as usize;

    // peak normalization makes every channel amplitude-invariant
    let peak = waveform.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let normalized: Vec<f64> = if peak > 0.0 {
        waveform.iter().map(|&v| v / peak).collect()
    } else {
        waveform.to_vec()
    };

    let analyzer = Analyzer::new(sr);
    let mut mels = Vec::with_capacity(frames);
    let mut chromas = Vec::with_capacity(frames);
    for t in 0..frames {
        let center = ((t as f64 + 0.5) / fps * sr).round() as i64;
        let power = analyzer.spectrum(&normalized, center);
        mels.push(analyzer.mel_frame(&power));
        chromas.push(analyzer.chroma_frame(&power));
    }

    // rectified log-mel flux per band
    let mut onsets = vec![vec![0.0f64; MEL_BANDS]; frames];
    for t in 1..frames {
        for b in 0..MEL_BANDS {
            onsets[t][b] = (mels[t][b] - mels[t - 1][b]).max(0.0);
        }
    }
    let aggregate: Vec<f64> = onsets
        .iter()
        .map(|frame| frame.iter().sum::<f64>() / MEL_BANDS as f64)
        .collect();
    let beats = pick_beats(&aggregate, fps);

    let mut values = Vec::with_capacity(frames * CHANNELS);
    for t in 0..frames {
        values.extend_from_slice(&mels[t]);
        values.extend_from_slice(&chromas[t]);
        values.extend_from_slice(&onsets[t]);
        values.push(aggregate[t]);
        values.push(if beats[t] { 1.0 } else { 0.0 });
    }
    Ok(MusicFeatures {
        fps,
        values: Tensor::new(vec![frames, CHANNELS], values).map_err(MusicError::Core)?,
    })
}

/// Peak picking with an adaptive mean threshold over a 0.5 s window.
fn pick_beats(onset: &[f64], fps: f64) -> Vec<bool> {
    let t = onset.len();
    let w = ((BEAT_WINDOW_SEC * fps).round() as usize).max(1);
    let mut beats = vec![false; t];
    for i in 0..t {
        let prev = if i > 0 { onset[i - 1] } else { f64::NEG_INFINITY };
        let next = if i + 1 < t { onset[i + 1] } else { f64::NEG_INFINITY };
        if !(onset[i] >= prev && onset[i] > next) {
            continue;
        }
        let lo = i.saturating_sub(w);
        let hi = (i + w).min(t - 1);
        let mean: f64 = onset[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
        if onset[i] > mean + 1e-6 {
            beats[i] = true;
        }
    }
    beats
}

/// Frame indices where the binary beat channel fires.
pub fn beats_from_features(features: &MusicFeatures) -> Vec<usize> {
    (0..features.frames())
        .filter(|&t| features.channel(t, BEAT_CHANNEL) == 1.0)
        .collect()
}

/// Click track with a faint melody: a 1 kHz decaying burst on every beat
/// plus a pitch cycling through a four-note pattern. Deterministic per seed.
/// The first click lands half a beat period in, since an onset at the very
/// first sample has no preceding frame to rise from.
pub fn synth_click_track(tempo_bpm: f64, duration_sec: f64, sample_rate: u32, seed: u64) -> Vec<f64> {
    let sr = sample_rate as f64;
    let n = (duration_sec * sr).round() as usize;
    let beat_period = 60.0 / tempo_bpm;
    let mut out = vec![0.0f64; n];
    // clicks
    let click_len = (0.004 * sr) as usize;
    let mut beat_t = beat_period / 2.0;
    while beat_t < duration_sec {
        let start = (beat_t * sr) as usize;
        for i in 0..click_len.min(n.saturating_sub(start)) {
            let env = (-(i as f64) / (0.001 * sr)).exp();
            out[start + i] += 0.9 * env * (std::f64::consts::TAU * 1000.0 * i as f64 / sr).sin();
        }
        beat_t += beat_period;
    }
    // melody: one sustained note per beat from a fixed pattern
    let pattern = [0, 4, 7, 9];
    let base = (seed % 12) as f64;
    for (k, sample) in out.iter_mut().enumerate() {
        let sec = k as f64 / sr;
        let beat_idx = (sec / beat_period) as usize;
        let degree = pattern[beat_idx % pattern.len()] as f64 + base;
        let freq = 220.0 * 2f64.powf(degree / 12.0);
        *sample += 0.12 * (std::f64::consts::TAU * freq * sec).sin();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_has_no_onsets_and_no_beats() {
        let silence = vec![0.0; 32_000];
        let f = extract_features(&silence, 16_000, 30.0).unwrap();
        for t in 0..f.frames() {
            for c in 32..52 {
                assert_eq!(f.channel(t, c), 0.0);
            }
            assert_eq!(f.channel(t, BEAT_CHANNEL), 0.0);
        }
        assert!(beats_from_features(&f).is_empty());
    }

    #[test]
    fn channel_count_is_54() {
        let wave = synth_click_track(120.0, 1.0, 16_000, 0);
        let f = extract_features(&wave, 16_000, 30.0).unwrap();
        assert_eq!(f.values.shape()[1], 54);
        assert_eq!(CHANNELS, 54);
    }

    #[test]
    fn click_track_beats_land_within_one_frame() {
        let fps = 30.0;
        let tempo = 120.0;
        let wave = synth_click_track(tempo, 4.0, 16_000, 3);
        let f = extract_features(&wave, 16_000, fps).unwrap();
        let beats = beats_from_features(&f);
        let beat_period = 60.0 / tempo;
        let mut hits = 0;
        let mut clicks = 0;
        let mut t = beat_period / 2.0;
        while t < 4.0 - 1e-9 {
            let frame = (t * fps).round() as i64;
            clicks += 1;
            if beats.iter().any(|&b| (b as i64 - frame).abs() <= 1) {
                hits += 1;
            }
            t += beat_period;
        }
        assert!(clicks >= 7);
        assert!(
            hits as f64 >= 0.95 * clicks as f64,
            "only {hits}/{clicks} clicks matched: beats {beats:?}"
        );
    }

    #[test]
    fn amplitude_scaling_leaves_the_beat_channel_unchanged() {
        let wave = synth_click_track(100.0, 2.0, 16_000, 1);
        for scale in [0.37, 4.0] {
            let scaled: Vec<f64> = wave.iter().map(|v| v * scale).collect();
            let a = extract_features(&wave, 16_000, 30.0).unwrap();
            let b = extract_features(&scaled, 16_000, 30.0).unwrap();
            assert_eq!(beats_from_features(&a), beats_from_features(&b), "scale {scale}");
            for t in 0..a.frames() {
                assert_eq!(a.channel(t, BEAT_CHANNEL), b.channel(t, BEAT_CHANNEL));
            }
        }
    }

    #[test]
    fn empty_and_low_rate_inputs_rejected() {
        assert!(extract_features(&[], 16_000, 30.0).is_err());
        assert!(extract_features(&[0.1; 8000], 8_000, 30.0).is_err());
    }

    #[test]
    fn beats_match_threshold_scan_of_channel_53() {
        let wave = synth_click_track(120.0, 2.0, 16_000, 5);
        let f = extract_features(&wave, 16_000, 30.0).unwrap();
        let oracle: Vec<usize> = (0..f.frames())
            .filter(|&t| f.values.data()[t * CHANNELS + BEAT_CHANNEL] > 0.5)
            .collect();
        assert_eq!(beats_from_features(&f), oracle);
        assert!(!oracle.is_empty());
    }

    #[test]
    fn extraction_is_a_pure_function() {
        let wave = synth_click_track(90.0, 1.5, 16_000, 2);
        let a = extract_features(&wave, 16_000, 30.0).unwrap();
        let b = extract_features(&wave, 16_000, 30.0).unwrap();
        assert_eq!(a, b);
    }
}
