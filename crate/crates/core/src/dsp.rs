//! Deterministic signal primitives shared by the generator, losses, and
//! feature extraction: Hann windows, control-track upsampling, FFT
//! convolution, overlap-add, magnitude STFT, and the exp-sigmoid
//! nonlinearity.
//!
//! Numeric functions take and return `f64`; accumulation is 64-bit
//! throughout. Audio buffers exposed to the rest of the engine are 32-bit.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::{Error, Result};

/// Engine-wide audio sample rate.
pub const SAMPLE_RATE_HZ: u32 = 16_000;
/// Control-feature frame rate.
pub const FRAME_RATE_HZ: u32 = 200;
/// Samples per control frame (upsampling factor u).
pub const FRAME_SIZE_U: usize = 80;

/// Mono waveform at the fixed engine sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioBuffer {
    /// Wraps samples at the fixed 16 kHz engine rate. Rejects non-finite
    /// samples.
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if let Some(bad) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite audio sample at index {bad}"
            )));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate_hz: SAMPLE_RATE_HZ,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Fixed relationship between the 200 Hz control grid and 16 kHz audio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGrid {
    pub frame_rate_hz: u32,
    pub frame_size_u: usize,
}

impl Default for FrameGrid {
    fn default() -> Self {
        FrameGrid {
            frame_rate_hz: FRAME_RATE_HZ,
            frame_size_u: FRAME_SIZE_U,
        }
    }
}

impl FrameGrid {
    /// frame_size_u × frame_rate_hz must equal the audio sample rate.
    pub fn validate(&self) -> Result<()> {
        if self.frame_size_u as u32 * self.frame_rate_hz != SAMPLE_RATE_HZ {
            return Err(Error::invalid(format!(
                "frame grid {} x {} does not tile {} Hz audio",
                self.frame_size_u, self.frame_rate_hz, SAMPLE_RATE_HZ
            )));
        }
        Ok(())
    }
}

/// Magnitude spectrogram, row-major `[frames x bins]`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub magnitudes: Vec<f32>,
    pub frames: usize,
    pub bins: usize,
    pub fft_size: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> f32 {
        self.magnitudes[frame * self.bins + bin]
    }
}

/// Symmetric Hann window: w[m] = 0.5 (1 - cos(2 pi m / (length-1))).
///
/// Endpoints are exactly zero for length > 1; length 1 yields `[1.0]`.
pub fn hann_window(length: usize) -> Result<Vec<f64>> {
    if length == 0 {
        return Err(Error::invalid("hann_window: length must be >= 1"));
    }
    if length == 1 {
        return Ok(vec![1.0]);
    }
    let denom = (length - 1) as f64;
    Ok((0..length)
        .map(|m| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * m as f64 / denom).cos()))
        .collect())
}

/// Upsamples a 200 Hz control track to the audio rate by zero-stuffing
/// (u-1 zeros between samples) and convolving with a Hann window of size
/// 2u+1. The track is reflect-padded by one frame on each side so boundary
/// samples keep the constant-overlap-add gain.
///
/// Frame n of the input maps to output sample n*u; output length is
/// `track.len() * u`.
pub fn upsample_control(track: &[f64], grid: &FrameGrid) -> Result<Vec<f64>> {
    if track.is_empty() {
        return Err(Error::invalid("upsample_control: empty track"));
    }
    if let Some(bad) = track.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "upsample_control: non-finite track value at frame {bad}"
        )));
    }
    grid.validate()?;
    let u = grid.frame_size_u;
    let window = hann_window(2 * u + 1)?;
    let frames = track.len();
    let out_len = frames * u;
    let mut out = vec![0.0f64; out_len];

    // Padded source i covers original frame i-1 centered at (i-1)*u.
    let pad_left = if frames > 1 { track[1] } else { track[0] };
    let pad_right = if frames > 1 {
        track[frames - 2]
    } else {
        track[frames - 1]
    };
    let source = |i: usize| -> f64 {
        if i == 0 {
            pad_left
        } else if i == frames + 1 {
            pad_right
        } else {
            track[i - 1]
        }
    };

    let iu = u as isize;
    for i in 0..frames + 2 {
        let value = source(i);
        if value == 0.0 {
            continue;
        }
        let center = (i as isize - 1) * iu;
        for (w_idx, &w) in window.iter().enumerate() {
            let n = center + w_idx as isize - iu;
            if n >= 0 && (n as usize) < out_len {
                out[n as usize] += value * w;
            }
        }
    }
    Ok(out)
}

/// Full linear convolution computed via FFT; output length |a| + |b| - 1.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("fft_convolve: empty input"));
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut fa = vec![Complex::new(0.0, 0.0); n];
    for (dst, &src) in fa.iter_mut().zip(a) {
        dst.re = src;
    }
    let mut fb = vec![Complex::new(0.0, 0.0); n];
    for (dst, &src) in fb.iter_mut().zip(b) {
        dst.re = src;
    }
    fft.process(&mut fa);
    fft.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    ifft.process(&mut fa);
    let scale = 1.0 / n as f64;
    Ok(fa[..out_len].iter().map(|c| c.re * scale).collect())
}

/// Overlap-add of equal-length frames (row-major `[n_frames x frame_len]`)
/// at the given hop. Output length is `(n_frames - 1) * hop + frame_len`.
pub fn overlap_add(frames: &[f64], frame_len: usize, hop: usize) -> Result<Vec<f64>> {
    if frame_len == 0 || frames.is_empty() {
        return Err(Error::invalid("overlap_add: empty frames"));
    }
    if frames.len() % frame_len != 0 {
        return Err(Error::invalid(format!(
            "overlap_add: {} values do not tile frame_len {}",
            frames.len(),
            frame_len
        )));
    }
    if hop < 1 {
        return Err(Error::invalid("overlap_add: hop must be >= 1"));
    }
    if hop > frame_len {
        return Err(Error::invalid(format!(
            "overlap_add: hop {hop} exceeds frame_len {frame_len}"
        )));
    }
    let n_frames = frames.len() / frame_len;
    let mut out = vec![0.0f64; (n_frames - 1) * hop + frame_len];
    for (f, frame) in frames.chunks_exact(frame_len).enumerate() {
        let base = f * hop;
        for (j, &v) in frame.iter().enumerate() {
            out[base + j] += v;
        }
    }
    Ok(out)
}

/// Hann-windowed magnitude STFT. `hop = fft_size * (1 - overlap)`.
///
/// With `len >= fft_size` the frame count is `(len - fft_size)/hop + 1`;
/// shorter audio (but at least one hop) yields a single zero-padded frame.
pub fn stft_magnitude(audio: &AudioBuffer, fft_size: usize, overlap: f64) -> Result<Spectrogram> {
    if !fft_size.is_power_of_two() || fft_size < 2 {
        return Err(Error::invalid(format!(
            "stft_magnitude: fft_size {fft_size} is not a power of two"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid(format!(
            "stft_magnitude: overlap {overlap} outside [0, 1)"
        )));
    }
    let hop = ((fft_size as f64) * (1.0 - overlap)).round() as usize;
    let len = audio.len();
    if len < hop || hop == 0 {
        return Err(Error::invalid(format!(
            "stft_magnitude: audio of {len} samples shorter than one hop ({hop})"
        )));
    }
    let frames = if len >= fft_size {
        (len - fft_size) / hop + 1
    } else {
        1
    };
    let bins = fft_size / 2 + 1;
    let window = hann_window(fft_size)?;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);

    let mut magnitudes = vec![0.0f32; frames * bins];
    let mut buf = vec![Complex::new(0.0f64, 0.0); fft_size];
    for frame in 0..frames {
        let start = frame * hop;
        for (j, slot) in buf.iter_mut().enumerate() {
            let s = start + j;
            let x = if s < len { audio.samples[s] as f64 } else { 0.0 };
            *slot = Complex::new(x * window[j], 0.0);
        }
        fft.process(&mut buf);
        let row = &mut magnitudes[frame * bins..(frame + 1) * bins];
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = buf[k].norm() as f32;
        }
    }
    Ok(Spectrogram {
        magnitudes,
        frames,
        bins,
        fft_size,
        hop,
    })
}

/// Bounded positive nonlinearity 2 sigmoid(x)^(ln 10) + 1e-7, applied to
/// amplitudes and filter responses. Range (1e-7, 2 + 1e-7), strictly
/// increasing.
pub fn exp_sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    2.0 * s.powf(std::f64::consts::LN_10) + 1e-7
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(n^2) linear convolution, the oracle for FFT paths.
    pub fn direct_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }

    /// Literal zero-stuff + convolve + crop oracle for the control upsampler.
    fn upsample_oracle(track: &[f64], u: usize) -> Vec<f64> {
        let frames = track.len();
        let pad_left = if frames > 1 { track[1] } else { track[0] };
        let pad_right = if frames > 1 { track[frames - 2] } else { track[0] };
        let mut padded = Vec::with_capacity(frames + 2);
        padded.push(pad_left);
        padded.extend_from_slice(track);
        padded.push(pad_right);

        // Zero-stuff: u-1 zeros between every two samples.
        let mut stuffed = vec![0.0; (padded.len() - 1) * u + 1];
        for (i, &v) in padded.iter().enumerate() {
            stuffed[i * u] = v;
        }
        let window = hann_window(2 * u + 1).unwrap();
        let full = direct_convolve(&stuffed, &window);
        // Padded source i peaks at i*u + u; frame n (source n+1) at n*u + 2u.
        full[2 * u..2 * u + frames * u].to_vec()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn hann_center_of_upsampling_window_is_one() {
        let w = hann_window(161).unwrap();
        assert_eq!(w[80], 1.0);
        assert_eq!(w[0], 0.0);
        assert!(w[160].abs() < 1e-15);
    }

    #[test]
    fn hann_length_three() {
        let w = hann_window(3).unwrap();
        assert!(max_abs_diff(&w, &[0.0, 1.0, 0.0]) < 1e-15);
    }

    #[test]
    fn hann_symmetry_128() {
        let w = hann_window(128).unwrap();
        for m in 0..128 {
            assert!((w[m] - w[127 - m]).abs() < 1e-12, "asym at {m}");
        }
    }

    #[test]
    fn hann_zero_length_rejected() {
        assert!(hann_window(0).is_err());
        assert_eq!(hann_window(1).unwrap(), vec![1.0]);
    }

    #[test]
    fn upsample_constant_track_is_constant() {
        let grid = FrameGrid::default();
        let track = vec![0.7; 9];
        let out = upsample_control(&track, &grid).unwrap();
        assert_eq!(out.len(), 9 * 80);
        // COLA at hop = half window length holds everywhere, including the
        // reflect-padded edges.
        for (n, &v) in out.iter().enumerate() {
            assert!((v - 0.7).abs() < 1e-6, "sample {n}: {v}");
        }
    }

    #[test]
    fn upsample_matches_zero_stuff_oracle() {
        let grid = FrameGrid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let frames = rng.gen_range(1..40);
            let track: Vec<f64> = (0..frames).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = upsample_control(&track, &grid).unwrap();
            let want = upsample_oracle(&track, 80);
            assert!(max_abs_diff(&got, &want) < 1e-9);
        }
    }

    #[test]
    fn upsample_impulse_is_hann_bump() {
        let grid = FrameGrid::default();
        let mut track = vec![0.0; 9];
        track[4] = 1.0;
        let out = upsample_control(&track, &grid).unwrap();
        let w = hann_window(161).unwrap();
        let center = 4 * 80;
        for (n, &v) in out.iter().enumerate() {
            let d = n as isize - center as isize;
            let want = if d.unsigned_abs() <= 80 {
                w[(d + 80) as usize]
            } else {
                0.0
            };
            assert!((v - want).abs() < 1e-12, "sample {n}");
        }
    }

    #[test]
    fn upsample_zero_track_and_errors() {
        let grid = FrameGrid::default();
        let out = upsample_control(&[0.0; 5], &grid).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(upsample_control(&[], &grid).is_err());
        assert!(upsample_control(&[f64::NAN], &grid).is_err());
    }

    #[test]
    fn fft_convolve_hand_example() {
        let got = fft_convolve(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!(max_abs_diff(&got, &[3.0, 10.0, 8.0]) < 1e-12);
    }

    #[test]
    fn fft_convolve_delta_identity() {
        let b: Vec<f64> = (0..33).map(|i| (i as f64 * 0.37).sin()).collect();
        let got = fft_convolve(&[1.0], &b).unwrap();
        assert!(max_abs_diff(&got, &b) < 1e-12);
    }

    #[test]
    fn fft_convolve_matches_direct_80x128() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = fft_convolve(&a, &b).unwrap();
        let want = direct_convolve(&a, &b);
        let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(max_abs_diff(&got, &want) / scale < 1e-9);
    }

    #[test]
    fn fft_convolve_empty_rejected() {
        assert!(fft_convolve(&[], &[1.0]).is_err());
        assert!(fft_convolve(&[1.0], &[]).is_err());
    }

    #[test]
    fn overlap_add_hand_example() {
        let frames = vec![1.0; 8]; // 2 frames of ones, len 4
        let got = overlap_add(&frames, 4, 2).unwrap();
        assert_eq!(got, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn overlap_add_hop_equals_len_is_concat() {
        let frames = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let got = overlap_add(&frames, 3, 3).unwrap();
        assert_eq!(got, frames);
    }

    #[test]
    fn overlap_add_matches_naive_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n_frames, frame_len, hop) = (10, 207, 80);
        let frames: Vec<f64> = (0..n_frames * frame_len)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let got = overlap_add(&frames, frame_len, hop).unwrap();
        // Sample-by-sample accumulation oracle.
        let mut want = vec![0.0; (n_frames - 1) * hop + frame_len];
        for n in 0..want.len() {
            let mut acc = 0.0;
            for f in 0..n_frames {
                let base = f * hop;
                if n >= base && n < base + frame_len {
                    acc += frames[f * frame_len + (n - base)];
                }
            }
            want[n] = acc;
        }
        assert!(max_abs_diff(&got, &want) < 1e-9);
    }

    #[test]
    fn overlap_add_rejects_bad_hop() {
        assert!(overlap_add(&[1.0; 8], 4, 5).is_err());
        assert!(overlap_add(&[1.0; 8], 4, 0).is_err());
    }

    #[test]
    fn stft_sine_peak_bin() {
        // 1 kHz sine -> argmax bin = 1000 * 2048 / 16000 = 128 in every frame.
        let samples: Vec<f32> = (0..16000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin() as f32)
            .collect();
        let audio = AudioBuffer::new(samples).unwrap();
        let spec = stft_magnitude(&audio, 2048, 0.75).unwrap();
        assert_eq!(spec.hop, 512);
        assert_eq!(spec.frames, (16000 - 2048) / 512 + 1);
        for frame in 0..spec.frames {
            let row = &spec.magnitudes[frame * spec.bins..(frame + 1) * spec.bins];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, 128, "frame {frame}");
        }
    }

    #[test]
    fn stft_zero_audio_and_hop_arithmetic() {
        let audio = AudioBuffer::new(vec![0.0; 400]).unwrap();
        let spec = stft_magnitude(&audio, 64, 0.75).unwrap();
        assert_eq!(spec.hop, 16);
        assert!(spec.magnitudes.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn stft_short_audio_zero_padded_single_frame() {
        let audio = AudioBuffer::new(vec![0.5; 100]).unwrap();
        let spec = stft_magnitude(&audio, 256, 0.75).unwrap();
        assert_eq!(spec.frames, 1);
        let too_short = AudioBuffer::new(vec![0.5; 10]).unwrap();
        assert!(stft_magnitude(&too_short, 256, 0.75).is_err());
    }

    #[test]
    fn exp_sigmoid_limits_and_zero() {
        assert!((exp_sigmoid(-100.0) - 1e-7).abs() < 1e-12);
        assert!((exp_sigmoid(100.0) - (2.0 + 1e-7)).abs() < 1e-9);
        // Frozen from direct evaluation of 2 * 0.5^(ln 10) + 1e-7.
        assert!((exp_sigmoid(0.0) - 0.40539923257303456).abs() < 1e-14);
    }

    #[test]
    fn exp_sigmoid_monotone_on_grid() {
        let mut prev = exp_sigmoid(-50.0);
        for i in 1..10_000 {
            let x = -50.0 + 100.0 * i as f64 / 10_000.0;
            let y = exp_sigmoid(x);
            assert!(y > prev, "not strictly increasing at x={x}");
            prev = y;
        }
    }

    proptest! {
        #[test]
        fn prop_fft_convolve_matches_direct(
            a in prop::collection::vec(-1.0f64..1.0, 1..48),
            b in prop::collection::vec(-1.0f64..1.0, 1..48),
        ) {
            let got = fft_convolve(&a, &b).unwrap();
            let want = direct_convolve(&a, &b);
            let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(max_abs_diff(&got, &want) / scale < 1e-9);
        }

        #[test]
        fn prop_overlap_add_is_linear(
            a in prop::collection::vec(-1.0f64..1.0, 12),
            b in prop::collection::vec(-1.0f64..1.0, 12),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let combined: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
            let lhs = overlap_add(&combined, 4, 2).unwrap();
            let oa = overlap_add(&a, 4, 2).unwrap();
            let ob = overlap_add(&b, 4, 2).unwrap();
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (alpha * oa[i] + beta * ob[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn prop_stft_nonnegative_and_scales(
            samples in prop::collection::vec(-1.0f32..1.0, 64..200),
        ) {
            let audio = AudioBuffer::new(samples.clone()).unwrap();
            let spec = stft_magnitude(&audio, 64, 0.5).unwrap();
            prop_assert!(spec.magnitudes.iter().all(|&m| m >= 0.0));
            let doubled = AudioBuffer::new(samples.iter().map(|s| s * 2.0).collect()).unwrap();
            let spec2 = stft_magnitude(&doubled, 64, 0.5).unwrap();
            for (m1, m2) in spec.magnitudes.iter().zip(&spec2.magnitudes) {
                prop_assert!((m2 - 2.0 * m1).abs() < 1e-3 * (1.0 + m1));
            }
        }
    }
}
