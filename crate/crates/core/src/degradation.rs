//! Brightness/noise judgment for the enhancement trigger, and the two degradation
//! synthesizers (Poisson–Gaussian sensor noise; additive noise with gamma darkening).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::{median3x3, Image, RgbImage};

/// Low-light threshold on mean 8-bit gray level.
pub const TAU_L: f64 = 80.0;
/// Noise threshold on residual variance (8-bit intensity²).
pub const TAU_N: f64 = 30.0;

/// Per-row stride in the counter-based RNG stream; far above any row's consumption.
const ROW_WORD_STRIDE: u128 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub mu_l: f64,
    pub sigma2_r: f64,
    pub low_light: bool,
    pub noisy: bool,
    pub trigger: bool,
}

impl DegradationReport {
    /// Apply the dual-condition rule to already measured statistics.
    pub fn from_stats(mu_l: f64, sigma2_r: f64) -> Self {
        let low_light = mu_l < TAU_L;
        let noisy = sigma2_r > TAU_N;
        Self {
            mu_l,
            sigma2_r,
            low_light,
            noisy,
            trigger: low_light || noisy,
        }
    }
}

/// Mean gray level and median-residual variance of an RGB image in `[0, 1]`.
pub fn judge(img: &RgbImage) -> DegradationReport {
    let y = img.map(|p| (p[0] + p[1] + p[2]) / 3.0 * 255.0);
    let n = y.len() as f64;
    let mu_l = y.data().iter().sum::<f64>() / n;
    let smoothed = median3x3(&y);
    let residual: Vec<f64> = y
        .data()
        .iter()
        .zip(smoothed.data())
        .map(|(a, b)| a - b)
        .collect();
    let mean_r = residual.iter().sum::<f64>() / n;
    let sigma2_r = residual.iter().map(|r| (r - mean_r).powi(2)).sum::<f64>() / n;
    DegradationReport::from_stats(mu_l, sigma2_r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Shot-noise variance per unit intensity (normalized intensity²).
    pub shot_var: f64,
    /// Signal-independent readout variance (normalized intensity²).
    pub read_var: f64,
    /// Additive Gaussian σ on the 8-bit scale.
    pub gauss_std_8bit: f64,
    /// Darkening exponent applied to `[0, 1]` intensities.
    pub gamma: f64,
    pub rng_seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            shot_var: 4e-4,
            read_var: 3e-5,
            gauss_std_8bit: 15.0,
            gamma: 1.55,
            rng_seed: 0,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> crate::Result<()> {
        if self.shot_var < 0.0 || self.read_var < 0.0 || self.gauss_std_8bit < 0.0 {
            return Err(crate::Error::Config("noise variances must be >= 0".into()));
        }
        if self.gamma < 1.0 {
            return Err(crate::Error::Config("gamma must be >= 1".into()));
        }
        Ok(())
    }
}

/// Apply `f(pixel, rng)` row-parallel with a counter-based generator keyed by
/// (seed, stream, row), so output is independent of thread count.
fn per_pixel_noise(
    img: &RgbImage,
    seed: u64,
    stream: u64,
    f: impl Fn([f64; 3], &mut ChaCha8Rng) -> [f64; 3] + Sync,
) -> RgbImage {
    let (w, h) = img.dims();
    let rows: Vec<Vec<[f64; 3]>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng.set_word_pos(y as u128 * ROW_WORD_STRIDE);
            (0..w).map(|x| f(*img.get(x, y), &mut rng)).collect()
        })
        .collect();
    Image::from_vec(w, h, rows.into_iter().flatten().collect()).expect("same dims")
}

/// Poisson–Gaussian sensor noise (heteroscedastic Gaussian approximation).
pub fn add_sensor_noise(img: &RgbImage, p: &NoiseParams) -> RgbImage {
    add_sensor_noise_at(img, p, 0)
}

/// [`add_sensor_noise`] for frame `frame` of a sequence (independent noise per frame).
pub fn add_sensor_noise_at(img: &RgbImage, p: &NoiseParams, frame: u64) -> RgbImage {
    if p.shot_var == 0.0 && p.read_var == 0.0 {
        return img.clone();
    }
    let read_std = p.read_var.sqrt();
    per_pixel_noise(img, p.rng_seed, frame, |px, rng| {
        let mut out = [0.0; 3];
        for c in 0..3 {
            let x = px[c];
            let shot: f64 = rng.sample(StandardNormal);
            let read: f64 = rng.sample(StandardNormal);
            let v = x + (p.shot_var * x.max(0.0)).sqrt() * shot + read_std * read;
            out[c] = v.clamp(0.0, 1.0);
        }
        out
    })
}

/// Gamma darkening followed by additive Gaussian noise.
pub fn add_lowlight_noise(img: &RgbImage, p: &NoiseParams) -> RgbImage {
    add_lowlight_noise_at(img, p, 0)
}

pub fn add_lowlight_noise_at(img: &RgbImage, p: &NoiseParams, frame: u64) -> RgbImage {
    let std = p.gauss_std_8bit / 255.0;
    if std == 0.0 {
        return img.map(|px| px.map(|x| x.max(0.0).powf(p.gamma).clamp(0.0, 1.0)));
    }
    per_pixel_noise(img, p.rng_seed, frame, |px, rng| {
        let mut out = [0.0; 3];
        for c in 0..3 {
            let n: f64 = rng.sample(StandardNormal);
            out[c] = (px[c].max(0.0).powf(p.gamma) + std * n).clamp(0.0, 1.0);
        }
        out
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = 0.55 + 0.25 * ((x as f64) * 0.3).sin() * ((y as f64) * 0.2).cos();
            [v, v * 0.9, v * 0.8]
        })
    }

    #[test]
    fn black_image_is_low_light_only() {
        let r = judge(&RgbImage::filled(16, 16, [0.0; 3]));
        assert_eq!(r.mu_l, 0.0);
        assert_eq!(r.sigma2_r, 0.0);
        assert!(r.low_light && !r.noisy && r.trigger);
    }

    #[test]
    fn mid_gray_does_not_trigger() {
        let r = judge(&RgbImage::filled(16, 16, [128.0 / 255.0; 3]));
        assert!((r.mu_l - 128.0).abs() < 1e-9);
        assert!(r.sigma2_r < 1e-18);
        assert!(!r.trigger);
    }

    #[test]
    fn additive_sigma_15_is_noisy() {
        let clean = textured(64, 48);
        let p = NoiseParams {
            gamma: 1.0,
            rng_seed: 3,
            ..NoiseParams::default()
        };
        let noisy = add_lowlight_noise(&clean, &p);
        // Oracle: residual variance recomputed directly from its definition.
        let y: Vec<f64> = noisy.data().iter().map(|p| (p[0] + p[1] + p[2]) / 3.0 * 255.0).collect();
        let (w, h) = noisy.dims();
        let mut res = Vec::new();
        for yy in 0..h as isize {
            for xx in 0..w as isize {
                let mut win = Vec::new();
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let cx = (xx + dx).clamp(0, w as isize - 1) as usize;
                        let cy = (yy + dy).clamp(0, h as isize - 1) as usize;
                        win.push(y[cy * w + cx]);
                    }
                }
                win.sort_by(|a, b| a.partial_cmp(b).unwrap());
                res.push(y[yy as usize * w + xx as usize] - win[4]);
            }
        }
        let m = res.iter().sum::<f64>() / res.len() as f64;
        let var = res.iter().map(|r| (r - m).powi(2)).sum::<f64>() / res.len() as f64;
        let r = judge(&noisy);
        assert!((r.sigma2_r - var).abs() < 1e-9);
        assert!(r.sigma2_r > TAU_N && r.noisy);
    }

    #[test]
    fn threshold_grid_is_strict() {
        for mu in [79.0, 80.0, 81.0] {
            for s in [29.0, 30.0, 31.0] {
                let r = DegradationReport::from_stats(mu, s);
                assert_eq!(r.low_light, mu < 80.0);
                assert_eq!(r.noisy, s > 30.0);
                assert_eq!(r.trigger, mu < 80.0 || s > 30.0);
            }
        }
    }

    #[test]
    fn zero_variance_sensor_noise_is_identity() {
        let img = textured(8, 8);
        let p = NoiseParams {
            shot_var: 0.0,
            read_var: 0.0,
            ..NoiseParams::default()
        };
        assert_eq!(add_sensor_noise(&img, &p), img);
    }

    #[test]
    fn black_pixels_have_no_shot_noise() {
        let img = RgbImage::filled(16, 16, [0.0; 3]);
        let p = NoiseParams {
            read_var: 0.0,
            ..NoiseParams::default()
        };
        assert!(add_sensor_noise(&img, &p).data().iter().all(|px| *px == [0.0; 3]));
    }

    #[test]
    fn sensor_noise_variance_matches_model() {
        // Oracle: sample variance over 1e5 draws vs shot_var·x + read_var.
        let p = NoiseParams {
            rng_seed: 17,
            ..NoiseParams::default()
        };
        let img = RgbImage::filled(200, 167, [0.5; 3]);
        let out = add_sensor_noise(&img, &p);
        let vals: Vec<f64> = out.data().iter().flat_map(|px| px.iter().copied()).collect();
        assert!(vals.len() >= 100_000);
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        let expected = p.shot_var * 0.5 + p.read_var;
        assert!((var / expected - 1.0).abs() < 0.2, "var {var} vs {expected}");
    }

    #[test]
    fn neutral_lowlight_is_identity() {
        let img = textured(8, 8);
        let p = NoiseParams {
            gamma: 1.0,
            gauss_std_8bit: 0.0,
            ..NoiseParams::default()
        };
        assert_eq!(add_lowlight_noise(&img, &p), img);
    }

    #[test]
    fn gamma_is_pointwise_power() {
        let p = NoiseParams {
            gauss_std_8bit: 0.0,
            ..NoiseParams::default()
        };
        let out = add_lowlight_noise(&RgbImage::filled(4, 4, [0.5; 3]), &p);
        for px in out.data() {
            assert!((px[0] - 0.5f64.powf(1.55)).abs() < 1e-15);
            assert!((px[0] - 0.342).abs() < 1e-3);
        }
    }

    #[test]
    fn bright_frame_with_lowlight_defaults_triggers() {
        let img = textured(64, 48);
        let out = add_lowlight_noise(&img, &NoiseParams::default());
        assert!(judge(&out).trigger);
    }

    #[test]
    fn judge_is_translation_invariant_in_residual() {
        let img = add_sensor_noise(&textured(32, 32), &NoiseParams::default());
        let shifted = img.map(|p| [p[0] * 0.5 + 0.1, p[1] * 0.5 + 0.1, p[2] * 0.5 + 0.1]);
        let base = img.map(|p| [p[0] * 0.5, p[1] * 0.5, p[2] * 0.5]);
        let a = judge(&base);
        let b = judge(&shifted);
        assert!((a.sigma2_r - b.sigma2_r).abs() < 1e-9);
        assert!((b.mu_l - a.mu_l - 25.5).abs() < 1e-9);
    }

    #[test]
    fn noise_is_reproducible_and_frame_dependent() {
        let img = textured(40, 30);
        let p = NoiseParams {
            rng_seed: 5,
            ..NoiseParams::default()
        };
        assert_eq!(add_sensor_noise_at(&img, &p, 2), add_sensor_noise_at(&img, &p, 2));
        assert_ne!(add_sensor_noise_at(&img, &p, 2), add_sensor_noise_at(&img, &p, 3));
        assert_eq!(add_lowlight_noise_at(&img, &p, 1), add_lowlight_noise_at(&img, &p, 1));
    }

    #[test]
    fn residual_variance_grows_with_gaussian_std() {
        // Statistical monotonicity over seeds: mean σ²_R per level, compared with a 3σ band.
        let img = textured(48, 48);
        let mut prev: Option<(f64, f64)> = None;
        for std in [0.0, 5.0, 10.0, 15.0, 20.0] {
            let samples: Vec<f64> = (0..8)
                .map(|seed| {
                    let p = NoiseParams {
                        gamma: 1.0,
                        gauss_std_8bit: std,
                        rng_seed: seed,
                        ..NoiseParams::default()
                    };
                    judge(&add_lowlight_noise(&img, &p)).sigma2_r
                })
                .collect();
            let m = samples.iter().sum::<f64>() / samples.len() as f64;
            let sd = (samples.iter().map(|s| (s - m).powi(2)).sum::<f64>()
                / (samples.len() - 1) as f64)
                .sqrt()
                / (samples.len() as f64).sqrt();
            if let Some((pm, psd)) = prev {
                assert!(m + 3.0 * (sd + psd) >= pm, "std {std}: {m} < {pm}");
            }
            prev = Some((m, sd));
        }
    }
}
