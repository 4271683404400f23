//! Log-mel filter-bank front end: Hann-windowed STFT power, triangular mel
//! projection, log compression with an energy floor, and fixed-length
//! segmentation. All feature math runs in f64; segments are emitted as f32
//! for the model.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{CoreError, Result};

/// Single-channel audio.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl WaveBuffer {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub win_len_s: f64,
    pub hop_s: f64,
    pub nfft: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            win_len_s: 0.025,
            hop_s: 0.010,
            nfft: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    /// Row-major [num_frames x num_bins].
    pub data: Vec<f64>,
    pub num_frames: usize,
    pub num_bins: usize,
    pub frame_shift_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// Row-major [num_mels x num_bins]; triangles with peak amplitude 1.
    pub weights: Vec<f64>,
    pub num_mels: usize,
    pub num_bins: usize,
    pub centers_hz: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmfbFrames {
    /// Row-major [num_frames x num_mels] log-mel energies.
    pub frames: Vec<f64>,
    pub num_frames: usize,
    pub num_mels: usize,
    pub frame_shift_s: f64,
}

/// A fixed-length feature slice ready for the model: mel-major
/// [num_mels x seg_len], stored as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub data: Vec<f32>,
    pub num_mels: usize,
    pub seg_len: usize,
    pub recording: String,
    pub index: usize,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// In-place iterative radix-2 FFT over (re, im); length must be a power of
/// two.
fn fft(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * core::f64::consts::PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cr - im[i + k + len / 2] * ci,
                    re[i + k + len / 2] * ci + im[i + k + len / 2] * cr,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Hann-windowed STFT power spectrogram: num_frames = floor((L − win)/hop) + 1,
/// window zero-padded to nfft, power = |DFT|² of the first nfft/2+1 bins.
pub fn stft_power(wave: &WaveBuffer, cfg: &StftConfig) -> Result<PowerSpectrogram> {
    if !cfg.nfft.is_power_of_two() || cfg.nfft < 2 {
        return Err(CoreError::Config(format!(
            "nfft must be a power of two, got {}",
            cfg.nfft
        )));
    }
    let sr = wave.sample_rate as f64;
    let win = (cfg.win_len_s * sr).floor() as usize;
    let hop = (cfg.hop_s * sr).floor() as usize;
    if win == 0 || hop == 0 {
        return Err(CoreError::Config("window and hop must span ≥ 1 sample".into()));
    }
    if win > cfg.nfft {
        return Err(CoreError::Config(format!(
            "window of {win} samples exceeds nfft {}",
            cfg.nfft
        )));
    }
    if wave.samples.len() < win {
        return Err(CoreError::Input(format!(
            "wave of {} samples shorter than one {win}-sample window",
            wave.samples.len()
        )));
    }
    let num_frames = (wave.samples.len() - win) / hop + 1;
    let num_bins = cfg.nfft / 2 + 1;
    let hann: Vec<f64> = (0..win)
        .map(|n| 0.5 * (1.0 - (2.0 * core::f64::consts::PI * n as f64 / win as f64).cos()))
        .collect();
    let mut data = vec![0.0f64; num_frames * num_bins];
    crate::parallel::for_each_chunk_mut(&mut data, num_bins, |t, row| {
        let start = t * hop;
        let mut re = vec![0.0f64; cfg.nfft];
        let mut im = vec![0.0f64; cfg.nfft];
        for n in 0..win {
            re[n] = wave.samples[start + n] * hann[n];
        }
        fft(&mut re, &mut im);
        for k in 0..num_bins {
            row[k] = re[k] * re[k] + im[k] * im[k];
        }
    });
    Ok(PowerSpectrogram {
        data,
        num_frames,
        num_bins,
        frame_shift_s: hop as f64 / sr,
    })
}

/// Triangular mel filters with peak amplitude 1, centers equally spaced on
/// the mel scale between f_min and f_max.
pub fn mel_filterbank(
    nfft: usize,
    sample_rate: u32,
    n_mels: usize,
    f_min: f64,
    f_max: f64,
) -> Result<MelFilterbank> {
    if n_mels < 2 {
        return Err(CoreError::Config("n_mels must be at least 2".into()));
    }
    if f_min < 0.0 || f_min >= f_max {
        return Err(CoreError::Config(format!(
            "need 0 <= f_min < f_max, got {f_min}..{f_max}"
        )));
    }
    let nyquist = sample_rate as f64 / 2.0;
    if f_max > nyquist + 1e-9 {
        return Err(CoreError::Config(format!(
            "f_max {f_max} exceeds Nyquist {nyquist}"
        )));
    }
    let num_bins = nfft / 2 + 1;
    let (mel_lo, mel_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let points_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / nfft as f64;
    let mut weights = vec![0.0f64; n_mels * num_bins];
    for m in 0..n_mels {
        let (left, center, right) = (points_hz[m], points_hz[m + 1], points_hz[m + 2]);
        for k in 0..num_bins {
            let f = k as f64 * bin_hz;
            let w = if f <= left || f >= right {
                0.0
            } else if f <= center {
                (f - left) / (center - left)
            } else {
                (right - f) / (right - center)
            };
            weights[m * num_bins + k] = w;
        }
    }
    Ok(MelFilterbank {
        weights,
        num_mels: n_mels,
        num_bins,
        centers_hz: points_hz[1..=n_mels].to_vec(),
    })
}

/// log(max(filterbank · powerᵀ, floor)), laid out [frames x mels].
pub fn log_mel(
    power: &PowerSpectrogram,
    filterbank: &MelFilterbank,
    floor: f64,
) -> Result<LmfbFrames> {
    if power.num_bins != filterbank.num_bins {
        return Err(CoreError::Input(format!(
            "power has {} bins but filterbank expects {}",
            power.num_bins, filterbank.num_bins
        )));
    }
    if floor <= 0.0 {
        return Err(CoreError::Config("energy floor must be positive".into()));
    }
    let (frames, bins, mels) = (power.num_frames, power.num_bins, filterbank.num_mels);
    let mut out = vec![0.0f64; frames * mels];
    crate::parallel::for_each_chunk_mut(&mut out, mels, |t, row| {
        let p = &power.data[t * bins..(t + 1) * bins];
        for (m, val) in row.iter_mut().enumerate() {
            let w = &filterbank.weights[m * bins..(m + 1) * bins];
            let mut acc = 0.0f64;
            for k in 0..bins {
                acc += w[k] * p[k];
            }
            *val = acc.max(floor).ln();
        }
    });
    Ok(LmfbFrames {
        frames: out,
        num_frames: frames,
        num_mels: mels,
        frame_shift_s: power.frame_shift_s,
    })
}

/// Optional per-recording mean/variance normalization (off by default in
/// the pipeline; exposed as a config flag).
pub fn normalize_frames(frames: &mut LmfbFrames) {
    let n = frames.frames.len();
    if n == 0 {
        return;
    }
    let mean = frames.frames.iter().sum::<f64>() / n as f64;
    let var = frames
        .frames
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    let inv_std = 1.0 / (var.sqrt() + 1e-12);
    for v in frames.frames.iter_mut() {
        *v = (*v - mean) * inv_std;
    }
}

/// Chop into consecutive non-overlapping segments of `seg_len` frames,
/// dropping the trailing remainder. Segments are transposed to mel-major.
pub fn segment_frames(frames: &LmfbFrames, seg_len: usize, recording: &str) -> Result<Vec<Segment>> {
    if seg_len == 0 {
        return Err(CoreError::Config("segment length must be positive".into()));
    }
    if frames.num_frames < seg_len {
        return Err(CoreError::Input(format!(
            "{} frames is fewer than segment length {seg_len}",
            frames.num_frames
        )));
    }
    let count = frames.num_frames / seg_len;
    let mels = frames.num_mels;
    let mut out = Vec::with_capacity(count);
    for s in 0..count {
        let mut data = vec![0.0f32; mels * seg_len];
        for t in 0..seg_len {
            let row = &frames.frames[(s * seg_len + t) * mels..(s * seg_len + t + 1) * mels];
            for m in 0..mels {
                data[m * seg_len + t] = row[m] as f32;
            }
        }
        out.push(Segment {
            data,
            num_mels: mels,
            seg_len,
            recording: String::from(recording),
            index: s,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn silent_wave(seconds: f64, sr: u32) -> WaveBuffer {
        WaveBuffer {
            samples: vec![0.0; (seconds * sr as f64) as usize],
            sample_rate: sr,
        }
    }

    #[test]
    fn frame_count_arithmetic() {
        // 1 s at 44100 Hz: win 1102, hop 441 -> 98 frames.
        let sp = stft_power(&silent_wave(1.0, 44100), &StftConfig::default()).unwrap();
        assert_eq!(sp.num_frames, 98);
        assert_eq!(sp.num_bins, 1025);
        assert!(sp.data.iter().all(|&v| v == 0.0));

        // 10 s -> 998 frames.
        let sp = stft_power(&silent_wave(10.0, 44100), &StftConfig::default()).unwrap();
        assert_eq!(sp.num_frames, 998);
    }

    #[test]
    fn wave_shorter_than_window_is_rejected() {
        let wave = WaveBuffer {
            samples: vec![0.0; 500],
            sample_rate: 44100,
        };
        assert!(stft_power(&wave, &StftConfig::default()).is_err());
    }

    #[test]
    fn pure_tone_at_bin_frequency_peaks_at_that_bin() {
        // Checked against a naive DFT on a short reference signal below.
        let sr = 44100u32;
        let cfg = StftConfig::default();
        let k = 100usize;
        let f = k as f64 * sr as f64 / cfg.nfft as f64;
        let samples: Vec<f64> = (0..sr as usize)
            .map(|n| (2.0 * core::f64::consts::PI * f * n as f64 / sr as f64).sin())
            .collect();
        let sp = stft_power(&WaveBuffer { samples, sample_rate: sr }, &cfg).unwrap();
        for t in 0..sp.num_frames {
            let row = &sp.data[t * sp.num_bins..(t + 1) * sp.num_bins];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, k, "frame {t} peaked at {argmax}");
        }
    }

    #[test]
    fn fft_matches_naive_dft() {
        let n = 64usize;
        let mut rng = crate::rng::stream_rng(3, "fft", 0);
        use rand::Rng;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut re = x.clone();
        let mut im = vec![0.0; n];
        fft(&mut re, &mut im);
        for k in 0..n {
            let mut dr = 0.0;
            let mut di = 0.0;
            for (t, &xt) in x.iter().enumerate() {
                let ang = -2.0 * core::f64::consts::PI * (k * t) as f64 / n as f64;
                dr += xt * ang.cos();
                di += xt * ang.sin();
            }
            assert_abs_diff_eq!(re[k], dr, epsilon = 1e-9);
            assert_abs_diff_eq!(im[k], di, epsilon = 1e-9);
        }
    }

    #[test]
    fn two_mel_filters_sit_at_thirds_of_the_mel_range() {
        let fb = mel_filterbank(2048, 44100, 2, 0.0, 8000.0).unwrap();
        let mel_max = hz_to_mel(8000.0);
        assert_abs_diff_eq!(hz_to_mel(fb.centers_hz[0]), mel_max / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(
            hz_to_mel(fb.centers_hz[1]),
            2.0 * mel_max / 3.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn filter_rows_are_nonnegative_unimodal_with_unit_peak_construction() {
        let fb = mel_filterbank(2048, 44100, 128, 0.0, 22050.0).unwrap();
        for m in 0..fb.num_mels {
            let row = &fb.weights[m * fb.num_bins..(m + 1) * fb.num_bins];
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // Unimodal: rises to the max then falls.
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            for wpair in row[..=peak].windows(2) {
                assert!(wpair[1] >= wpair[0] - 1e-12);
            }
            for wpair in row[peak..].windows(2) {
                assert!(wpair[1] <= wpair[0] + 1e-12);
            }
            assert!(row.iter().sum::<f64>() > 0.0, "row {m} is all-zero");
        }
    }

    #[test]
    fn interior_bins_are_covered() {
        let fb = mel_filterbank(2048, 44100, 128, 0.0, 22050.0).unwrap();
        let bin_hz = 44100.0 / 2048.0;
        let (first_center, last_center) = (fb.centers_hz[0], fb.centers_hz[127]);
        for k in 0..fb.num_bins {
            let f = k as f64 * bin_hz;
            if f > first_center && f < last_center {
                let total: f64 = (0..fb.num_mels).map(|m| fb.weights[m * fb.num_bins + k]).sum();
                assert!(total > 0.0, "bin {k} at {f} Hz uncovered");
            }
        }
    }

    #[test]
    fn f_max_beyond_nyquist_is_a_config_error() {
        assert!(mel_filterbank(2048, 44100, 128, 0.0, 23000.0).is_err());
    }

    #[test]
    fn log_mel_floor_and_scaling() {
        let sr = 44100u32;
        let fb = mel_filterbank(2048, sr, 16, 0.0, 22050.0).unwrap();
        let zero = stft_power(&silent_wave(0.5, sr), &StftConfig::default()).unwrap();
        let lm = log_mel(&zero, &fb, 1e-10).unwrap();
        for &v in &lm.frames {
            assert_abs_diff_eq!(v, 1e-10f64.ln(), epsilon = 1e-12);
        }

        // Doubling power adds ln 2 to every unclamped entry.
        let mut rng = crate::rng::stream_rng(5, "logmel", 0);
        use rand::Rng;
        let mut power = PowerSpectrogram {
            data: (0..3 * 1025).map(|_| rng.gen_range(0.1..2.0)).collect(),
            num_frames: 3,
            num_bins: 1025,
            frame_shift_s: 0.01,
        };
        let a = log_mel(&power, &fb, 1e-10).unwrap();
        for v in power.data.iter_mut() {
            *v *= 2.0;
        }
        let b = log_mel(&power, &fb, 1e-10).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_abs_diff_eq!(y - x, core::f64::consts::LN_2, epsilon = 1e-9);
        }
    }

    #[test]
    fn energy_monotonicity_under_amplitude_scaling() {
        let sr = 44100u32;
        let mut rng = crate::rng::stream_rng(6, "mono", 0);
        use rand::Rng;
        let samples: Vec<f64> = (0..sr as usize / 2).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let wave = WaveBuffer { samples: samples.clone(), sample_rate: sr };
        let scaled = WaveBuffer {
            samples: samples.iter().map(|s| s * 3.0).collect(),
            sample_rate: sr,
        };
        let fb = mel_filterbank(2048, sr, 32, 0.0, 22050.0).unwrap();
        let a = log_mel(&stft_power(&wave, &StftConfig::default()).unwrap(), &fb, 1e-10).unwrap();
        let b = log_mel(&stft_power(&scaled, &StftConfig::default()).unwrap(), &fb, 1e-10).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert!(y >= x, "scaling decreased a log-mel value: {x} -> {y}");
        }
    }

    #[test]
    fn feature_extraction_is_deterministic() {
        let sr = 44100u32;
        let mut rng = crate::rng::stream_rng(8, "det", 0);
        use rand::Rng;
        let samples: Vec<f64> = (0..sr as usize).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wave = WaveBuffer { samples, sample_rate: sr };
        let fb = mel_filterbank(2048, sr, 128, 0.0, 22050.0).unwrap();
        let a = log_mel(&stft_power(&wave, &StftConfig::default()).unwrap(), &fb, 1e-10).unwrap();
        let b = log_mel(&stft_power(&wave, &StftConfig::default()).unwrap(), &fb, 1e-10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn segmentation_counts_and_errors() {
        let mk = |frames: usize| LmfbFrames {
            frames: vec![0.0; frames * 4],
            num_frames: frames,
            num_mels: 4,
            frame_shift_s: 0.01,
        };
        assert_eq!(segment_frames(&mk(998), 20, "r").unwrap().len(), 49);
        assert_eq!(segment_frames(&mk(40), 20, "r").unwrap().len(), 2);
        assert!(segment_frames(&mk(19), 20, "r").is_err());

        let segs = segment_frames(&mk(98), 20, "rec7").unwrap();
        assert_eq!(segs.len(), 4);
        assert_eq!(segs[2].index, 2);
        assert_eq!(segs[2].recording, "rec7");
        assert_eq!(segs[2].data.len(), 4 * 20);
    }

    #[test]
    fn segments_are_transposed_views_of_frames() {
        // Frame t, mel m of segment s equals LmfbFrames[(s*20+t), m].
        let mels = 3;
        let frames: Vec<f64> = (0..40 * mels).map(|i| i as f64).collect();
        let lm = LmfbFrames {
            frames,
            num_frames: 40,
            num_mels: mels,
            frame_shift_s: 0.01,
        };
        let segs = segment_frames(&lm, 20, "r").unwrap();
        let s = 1;
        let (t, m) = (5, 2);
        let expected = lm.frames[(s * 20 + t) * mels + m] as f32;
        assert_eq!(segs[s].data[m * 20 + t], expected);
    }
}
