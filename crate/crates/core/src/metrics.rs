//! Trajectory and image-quality metrics: ATE RMSE, PSNR and SSIM.

use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::types::{CameraPose, Vec3};

/// Maximum timestamp gap (s) for associating two poses or two streams.
pub const MAX_ASSOCIATION_GAP: f64 = 0.02;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Timestamped poses, timestamps strictly increasing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    poses: Vec<(f64, CameraPose)>,
}

impl Trajectory {
    pub fn new(poses: Vec<(f64, CameraPose)>) -> Result<Self> {
        if poses.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Data(
                "trajectory timestamps must be strictly increasing".into(),
            ));
        }
        Ok(Self { poses })
    }

    pub fn push(&mut self, t: f64, pose: CameraPose) -> Result<()> {
        if let Some(&(last, _)) = self.poses.last() {
            if t <= last {
                return Err(Error::Data(format!(
                    "timestamp {t} does not follow {last}"
                )));
            }
        }
        self.poses.push((t, pose));
        Ok(())
    }

    pub fn poses(&self) -> &[(f64, CameraPose)] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Nearest pose by timestamp, if within `max_gap`.
    pub fn nearest(&self, t: f64, max_gap: f64) -> Option<&CameraPose> {
        let idx = self.poses.partition_point(|(s, _)| *s < t);
        let mut best: Option<(f64, &CameraPose)> = None;
        for i in [idx.wrapping_sub(1), idx] {
            if let Some((s, p)) = self.poses.get(i) {
                let gap = (s - t).abs();
                if gap <= max_gap && best.is_none_or(|(g, _)| gap < g) {
                    best = Some((gap, p));
                }
            }
        }
        best.map(|(_, p)| p)
    }

    /// Total camera-center path length (m).
    pub fn path_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].1.center() - w[0].1.center()).norm())
            .sum()
    }
}

/// Rigid alignment (no scale) `R, t` minimizing `Σ ‖R·src + t − dst‖²`.
pub fn align_rigid(src: &[Vec3], dst: &[Vec3]) -> (Matrix3<f64>, Vec3) {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - cd) * (s - cs).transpose();
    }
    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * v_t;
    (r, cd - r * cs)
}

/// Absolute trajectory error in centimetres, after rigid alignment of camera centers.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (t, p) in est.poses() {
        if let Some(g) = gt.nearest(*t, MAX_ASSOCIATION_GAP) {
            src.push(p.center());
            dst.push(g.center());
        }
    }
    match src.len() {
        0 => return Err(Error::Data("ATE needs at least one associated pose".into())),
        // A single center is always absorbed by the alignment.
        1 => return Ok(0.0),
        _ => {}
    }
    let (r, t) = align_rigid(&src, &dst);
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (r * s + t - d).norm_squared())
        .sum();
    Ok((sq / src.len() as f64).sqrt() * 100.0)
}

/// Peak signal-to-noise ratio with peak 1.0; identical images give `f64::INFINITY`.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    a.ensure_same_dims(b, "psnr")?;
    let mut se = 0.0;
    for (p, q) in a.data().iter().zip(b.data()) {
        for c in 0..3 {
            se += (p[c] - q[c]).powi(2);
        }
    }
    let mse = se / (3 * a.len()) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable correlation with the SSIM window.
fn filter_valid(data: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let row = &data[y * w + x..y * w + x + SSIM_WINDOW];
            tmp[y * ow + x] = row.iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += tmp[(y + i) * ow + x] * kv;
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatter window-position values back onto pixels.
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                tmp[(y + i) * ow + x] += v * kv;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += v * kv;
            }
        }
    }
    out
}

struct WindowStats {
    mu_x: f64,
    mu_y: f64,
    exx: f64,
    eyy: f64,
    exy: f64,
}

impl WindowStats {
    /// SSIM at this window and its partials w.r.t. (μx, E[x²], E[xy]).
    fn ssim_and_partials(&self) -> (f64, f64, f64, f64) {
        let (mx, my) = (self.mu_x, self.mu_y);
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * (self.exy - mx * my) + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = (self.exx - mx * mx) + (self.eyy - my * my) + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        let d_mu = (2.0 * my * a2 - 2.0 * my * a1) / (b1 * b2)
            - s * (2.0 * mx / b1 - 2.0 * mx / b2);
        let d_exy = 2.0 * a1 / (b1 * b2);
        let d_exx = -s / b2;
        (s, d_mu, d_exx, d_exy)
    }
}

/// SSIM of one channel and, optionally, its gradient w.r.t. `x`.
fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Vec<f64>) {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        // Single global window with uniform weights.
        let n = x.len() as f64;
        let stats = WindowStats {
            mu_x: x.iter().sum::<f64>() / n,
            mu_y: y.iter().sum::<f64>() / n,
            exx: x.iter().map(|v| v * v).sum::<f64>() / n,
            eyy: y.iter().map(|v| v * v).sum::<f64>() / n,
            exy: x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n,
        };
        let (s, d_mu, d_exx, d_exy) = stats.ssim_and_partials();
        let grad = if want_grad {
            x.iter()
                .zip(y)
                .map(|(xv, yv)| (d_mu + 2.0 * xv * d_exx + yv * d_exy) / n)
                .collect()
        } else {
            Vec::new()
        };
        return (s, grad);
    }
    let k = gaussian_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, w, h, &k);
    let mu_y = filter_valid(y, w, h, &k);
    let exx = filter_valid(&xx, w, h, &k);
    let eyy = filter_valid(&yy, w, h, &k);
    let exy = filter_valid(&xy, w, h, &k);
    let n = mu_x.len();
    let mut total = 0.0;
    let mut g_mu = vec![0.0; if want_grad { n } else { 0 }];
    let mut g_xx = g_mu.clone();
    let mut g_xy = g_mu.clone();
    for i in 0..n {
        let stats = WindowStats {
            mu_x: mu_x[i],
            mu_y: mu_y[i],
            exx: exx[i],
            eyy: eyy[i],
            exy: exy[i],
        };
        let (s, d_mu, d_exx, d_exy) = stats.ssim_and_partials();
        total += s;
        if want_grad {
            g_mu[i] = d_mu / n as f64;
            g_xx[i] = d_exx / n as f64;
            g_xy[i] = d_exy / n as f64;
        }
    }
    let grad = if want_grad {
        let a = filter_valid_adjoint(&g_mu, w, h, &k);
        let b = filter_valid_adjoint(&g_xx, w, h, &k);
        let c = filter_valid_adjoint(&g_xy, w, h, &k);
        (0..w * h)
            .map(|p| a[p] + 2.0 * x[p] * b[p] + y[p] * c[p])
            .collect()
    } else {
        Vec::new()
    };
    (total / n as f64, grad)
}

fn split_channels(img: &RgbImage) -> [Vec<f64>; 3] {
    let mut out: [Vec<f64>; 3] = Default::default();
    for c in 0..3 {
        out[c] = img.data().iter().map(|p| p[c]).collect();
    }
    out
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5), averaged over channels.
///
/// Images smaller than the window fall back to a single global window.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(ssim_with_grad(a, b, false)?.0)
}

/// SSIM together with its gradient w.r.t. the first image.
pub fn ssim_grad(a: &RgbImage, b: &RgbImage) -> Result<(f64, RgbImage)> {
    let (s, g) = ssim_with_grad(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

fn ssim_with_grad(a: &RgbImage, b: &RgbImage, want_grad: bool) -> Result<(f64, Option<RgbImage>)> {
    a.ensure_same_dims(b, "ssim")?;
    let (w, h) = a.dims();
    let ca = split_channels(a);
    let cb = split_channels(b);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| RgbImage::filled(w, h, [0.0; 3]));
    for c in 0..3 {
        let (s, g) = ssim_channel(&ca[c], &cb[c], w, h, want_grad);
        total += s / 3.0;
        if let Some(out) = grad.as_mut() {
            for (px, gv) in out.data_mut().iter_mut().zip(g) {
                px[c] = gv / 3.0;
            }
        }
    }
    Ok((total, grad))
}

/// One metrics record as emitted by `run`/`eval`. LPIPS is reported as `"n/a"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seq: String,
    pub condition: String,
    pub ate_cm: Option<f64>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips: String,
}

impl MetricsRecord {
    pub fn new(seq: impl Into<String>, condition: impl Into<String>) -> Self {
        Self {
            seq: seq.into(),
            condition: condition.into(),
            ate_cm: None,
            psnr_db: None,
            ssim: None,
            lpips: "n/a".into(),
        }
    }
}

fn cell(v: Option<f64>, prec: usize) -> String {
    match v {
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x:.prec$}"),
        None => "--".into(),
    }
}

/// Plain-text table in the Method/ATE/PSNR/SSIM/LPIPS column layout.
pub fn format_table(rows: &[(String, MetricsRecord)]) -> String {
    let mut s = format!(
        "{:<24} {:<16} {:>10} {:>10} {:>8} {:>8}\n",
        "Method", "Condition", "ATE[cm]", "PSNR[dB]", "SSIM", "LPIPS"
    );
    for (label, r) in rows {
        s.push_str(&format!(
            "{:<24} {:<16} {:>10} {:>10} {:>8} {:>8}\n",
            label,
            r.condition,
            cell(r.ate_cm, 2),
            cell(r.psnr_db, 2),
            cell(r.ssim, 3),
            r.lpips
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Quat;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(seed: u64, w: usize, h: usize) -> RgbImage {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| [r.random(), r.random(), r.random()])
    }

    fn traj(points: &[Vec3]) -> Trajectory {
        Trajectory::new(
            points
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let pose = CameraPose::new(Quat::identity(), -c);
                    (i as f64 * 0.1, pose)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = random_image(1, 8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_uniform_offset() {
        let a = RgbImage::filled(5, 4, [0.5; 3]);
        let b = RgbImage::filled(5, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_scalar_oracle() {
        let a = random_image(2, 7, 5);
        let b = random_image(3, 7, 5);
        let mut se = 0.0;
        let mut n = 0.0;
        for y in 0..5 {
            for x in 0..7 {
                for c in 0..3 {
                    se += (a.get(x, y)[c] - b.get(x, y)[c]).powi(2);
                    n += 1.0;
                }
            }
        }
        let oracle = -10.0 * (se / n).log10();
        assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn psnr_dimension_mismatch() {
        assert!(psnr(&random_image(1, 4, 4), &random_image(1, 4, 5)).is_err());
    }

    #[test]
    fn psnr_decreases_with_error() {
        let a = RgbImage::filled(4, 4, [0.2; 3]);
        let mut last = f64::INFINITY;
        for i in 1..10 {
            let b = RgbImage::filled(4, 4, [0.2 + 0.05 * i as f64; 3]);
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_self_is_one() {
        for (w, h) in [(32, 24), (6, 5)] {
            let a = random_image(4, w, h);
            assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ssim_anticorrelated_checkerboard() {
        // Oracle: direct windowed formula on a binary checkerboard and its complement.
        let a = RgbImage::from_fn(16, 16, |x, y| [((x + y) % 2) as f64; 3]);
        let b = a.map(|p| [1.0 - p[0], 1.0 - p[1], 1.0 - p[2]]);
        let k = gaussian_kernel();
        let mut total = 0.0;
        let mut n = 0.0;
        for oy in 0..6 {
            for ox in 0..6 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wgt = k[i] * k[j];
                        let xv = a.get(ox + i, oy + j)[0];
                        let yv = b.get(ox + i, oy + j)[0];
                        mx += wgt * xv;
                        my += wgt * yv;
                        xx += wgt * xv * xv;
                        yy += wgt * yv * yv;
                        xy += wgt * xv * yv;
                    }
                }
                let sx = xx - mx * mx;
                let sy = yy - my * my;
                let sxy = xy - mx * my;
                total += (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
                    / ((mx * mx + my * my + SSIM_C1) * (sx + sy + SSIM_C2));
                n += 1.0;
            }
        }
        let oracle = total / n;
        let s = ssim(&a, &b).unwrap();
        assert!(s <= 0.0);
        assert_relative_eq!(s, oracle, epsilon = 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        for (w, h, seed) in [(14, 12, 5u64), (7, 6, 6)] {
            let a = random_image(seed, w, h);
            let b = random_image(seed + 10, w, h);
            let (_, g) = ssim_grad(&a, &b).unwrap();
            let eps = 1e-6;
            for &(x, y, c) in &[(0, 0, 0), (3, 4, 1), (w - 1, h - 1, 2), (6, 5, 0)] {
                let mut p = a.clone();
                p.get_mut(x, y)[c] += eps;
                let mut m = a.clone();
                m.get_mut(x, y)[c] -= eps;
                let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * eps);
                assert_relative_eq!(g.get(x, y)[c], fd, epsilon = 1e-7, max_relative = 1e-5);
            }
        }
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = random_image(s1, 13, 12);
            let b = random_image(s2, 13, 12);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn ate_invariant_under_rigid_transform(r in prop::array::uniform3(-3.0f64..3.0), t in prop::array::uniform3(-5.0f64..5.0), seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec3> = (0..8).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
            let noisy: Vec<Vec3> = pts.iter().map(|p| p + Vec3::new(rng.random_range(-0.01..0.01), 0.0, rng.random_range(-0.01..0.01))).collect();
            let q = Quat::from_scaled_axis(Vec3::from(r));
            let moved: Vec<Vec3> = noisy.iter().map(|p| q * p + Vec3::from(t)).collect();
            let base = ate_rmse(&traj(&noisy), &traj(&pts)).unwrap();
            let after = ate_rmse(&traj(&moved), &traj(&pts)).unwrap();
            prop_assert!((base - after).abs() < 1e-9);
        }
    }

    #[test]
    fn ate_identical_and_rigid_copy_are_zero() {
        let pts: Vec<Vec3> = (0..6)
            .map(|i| Vec3::new(i as f64 * 0.1, (i as f64).sin(), 0.3 * i as f64))
            .collect();
        assert!(ate_rmse(&traj(&pts), &traj(&pts)).unwrap() < 1e-9);
        let q = Quat::from_euler_angles(0.4, -1.0, 2.0);
        let moved: Vec<Vec3> = pts.iter().map(|p| q * p + Vec3::new(3.0, -2.0, 1.0)).collect();
        assert!(ate_rmse(&traj(&moved), &traj(&pts)).unwrap() < 1e-9);
    }

    #[test]
    fn ate_square_with_displaced_corner_matches_brute_force() {
        let gt = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let mut est = gt;
        // Corner (1, 1) pushed 4 cm outward along the diagonal.
        est[2] += Vec3::new(1.0, 1.0, 0.0).normalize() * 0.04;
        let closed = ate_rmse(&traj(&est), &traj(&gt)).unwrap();
        // Brute force: dense grid over in-plane rotation, translation from centroids.
        let cg = gt.iter().sum::<Vec3>() / 4.0;
        let ce = est.iter().sum::<Vec3>() / 4.0;
        let mut best = f64::INFINITY;
        for i in 0..=200_000 {
            let ang = -0.1 + 0.2 * i as f64 / 200_000.0;
            let q = Quat::from_axis_angle(&Vec3::z_axis(), ang);
            let sq: f64 = est
                .iter()
                .zip(&gt)
                .map(|(e, g)| (q * (e - ce) + cg - g).norm_squared())
                .sum();
            best = best.min((sq / 4.0).sqrt() * 100.0);
        }
        // Radial displacement: no rotation helps; centering leaves residuals of
        // 3/4·d on the moved corner and 1/4·d on the others, so RMSE = √3 cm.
        assert_relative_eq!(closed, best, epsilon = 1e-6);
        assert_relative_eq!(closed, 3f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn ate_needs_an_association() {
        let a = traj(&[Vec3::zeros()]);
        let b = traj(&[Vec3::new(3.0, -1.0, 2.0)]);
        assert_eq!(ate_rmse(&a, &b).unwrap(), 0.0);
        let late = Trajectory::new(vec![
            (10.0, CameraPose::identity()),
            (11.0, CameraPose::identity()),
        ])
        .unwrap();
        let b = traj(&[Vec3::zeros(), Vec3::x()]);
        assert!(ate_rmse(&late, &b).is_err());
    }

    #[test]
    fn trajectory_rejects_non_increasing() {
        assert!(Trajectory::new(vec![
            (1.0, CameraPose::identity()),
            (1.0, CameraPose::identity())
        ])
        .is_err());
    }
}
