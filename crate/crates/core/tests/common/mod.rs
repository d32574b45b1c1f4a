//! Test-only oracles and scene builders shared by the integration suites.
#![allow(dead_code)]

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roger_core::rasterizer::{
    project, render_backward, render_with, RenderOptions, RenderGradients, ALPHA_CLAMP,
    ALPHA_CUTOFF,
};
use roger_core::types::{Quat, Vec3};
use roger_core::{CameraPose, Gaussian3D, GaussianMap, Intrinsics, RgbImage, ScalarMap};

pub struct NaiveRender {
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

/// Unoptimized compositor: every pixel visits every projected Gaussian, no tiling,
/// no early exit, its own sort and its own conic inversion.
pub fn naive_render(map: &GaussianMap, pose: &CameraPose, k: &Intrinsics) -> NaiveRender {
    let mut proj = project(map, pose, k);
    proj.sort_by(|a, b| {
        a.depth_cam
            .partial_cmp(&b.depth_cam)
            .unwrap()
            .then(a.source_index.cmp(&b.source_index))
    });
    let n = k.width * k.height;
    let mut out = NaiveRender {
        color: vec![[0.0; 3]; n],
        depth: vec![0.0; n],
        opacity: vec![0.0; n],
    };
    for y in 0..k.height {
        for x in 0..k.width {
            let mut t = 1.0;
            let i = y * k.width + x;
            for g in &proj {
                let inv = g.cov2d.try_inverse().unwrap();
                let d = nalgebra::Vector2::new(x as f64 - g.center2d.x, y as f64 - g.center2d.y);
                let raw = g.alpha * (-0.5 * (d.transpose() * inv * d)[0]).exp();
                if raw < ALPHA_CUTOFF {
                    continue;
                }
                let a = raw.min(ALPHA_CLAMP);
                for c in 0..3 {
                    out.color[i][c] += g.color[c] * a * t;
                }
                out.depth[i] += g.depth_cam * a * t;
                out.opacity[i] += a * t;
                t *= 1.0 - a;
            }
        }
    }
    out
}

pub fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> CameraPose {
    let axis = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let t = Vec3::new(
        rng.random_range(-trans..trans),
        rng.random_range(-trans..trans),
        rng.random_range(-trans..trans),
    );
    CameraPose::new(Quat::from_scaled_axis(axis.normalize() * rng.random_range(0.0..rot)), t)
}

/// `n` random Gaussians whose means project inside the image at depth 1.5–3 m.
pub fn random_scene(
    rng: &mut ChaCha8Rng,
    n: usize,
    pose: &CameraPose,
    k: &Intrinsics,
    px_scale: (f64, f64),
    opacity: (f64, f64),
) -> GaussianMap {
    let inv = pose.inverse();
    (0..n)
        .map(|_| {
            let z = rng.random_range(1.5..3.0);
            let u = rng.random_range(0.0..(k.width - 1) as f64);
            let v = rng.random_range(0.0..(k.height - 1) as f64);
            let p_cam = k.unproject(u, v, z);
            let mut log_scale = Vec3::zeros();
            for s in log_scale.iter_mut() {
                *s = (rng.random_range(px_scale.0..px_scale.1) * z / k.fx).ln();
            }
            let axis = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            Gaussian3D {
                mean: inv.transform_point(&p_cam),
                log_scale,
                rotation: Quat::from_scaled_axis(axis.normalize() * rng.random_range(0.0..3.0)),
                opacity_logit: roger_core::types::logit(rng.random_range(opacity.0..opacity.1)),
                color: Vector3::new(rng.random(), rng.random(), rng.random()),
            }
        })
        .collect()
}

/// Random linear readout of a render; its gradient images are the weights themselves.
pub struct LinearLoss {
    pub wc: RgbImage,
    pub wd: ScalarMap,
    pub wo: ScalarMap,
}

impl LinearLoss {
    pub fn random(rng: &mut ChaCha8Rng, k: &Intrinsics) -> Self {
        Self {
            wc: RgbImage::from_fn(k.width, k.height, |_, _| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            }),
            wd: ScalarMap::from_fn(k.width, k.height, |_, _| rng.random_range(-1.0..1.0)),
            wo: ScalarMap::from_fn(k.width, k.height, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    pub fn eval(&self, map: &GaussianMap, pose: &CameraPose, k: &Intrinsics) -> f64 {
        let out = render_with(map, pose, k, RenderOptions { early_exit: false });
        let mut l = 0.0;
        for i in 0..out.color.len() {
            let c = out.color.data()[i];
            let w = self.wc.data()[i];
            l += c[0] * w[0] + c[1] * w[1] + c[2] * w[2];
            l += out.depth.data()[i] * self.wd.data()[i];
            l += out.opacity.data()[i] * self.wo.data()[i];
        }
        l
    }

    pub fn analytic(&self, map: &GaussianMap, pose: &CameraPose, k: &Intrinsics) -> RenderGradients {
        let out = render_with(map, pose, k, RenderOptions { early_exit: false });
        render_backward(&out, &self.wc, &self.wd, &self.wo)
    }
}

/// Parameter classes checked by the gradient suite.
pub const CLASSES: [&str; 6] = ["mean", "log_scale", "rotation", "opacity_logit", "color", "pose"];

/// Central finite differences of `f` along every parameter, flattened per class.
pub fn finite_difference(
    loss: &LinearLoss,
    map: &GaussianMap,
    pose: &CameraPose,
    k: &Intrinsics,
    h: f64,
) -> [Vec<f64>; 6] {
    let mut out: [Vec<f64>; 6] = Default::default();
    let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * h);
    for i in 0..map.len() {
        for axis in 0..3 {
            let mut e = Vec3::zeros();
            e[axis] = h;
            let perturb = |f: &dyn Fn(&mut Gaussian3D)| {
                let mut m = map.clone();
                f(&mut m.gaussians[i]);
                loss.eval(&m, pose, k)
            };
            out[0].push(central(
                perturb(&|g| g.mean += e),
                perturb(&|g| g.mean -= e),
            ));
            out[1].push(central(
                perturb(&|g| g.log_scale += e),
                perturb(&|g| g.log_scale -= e),
            ));
            out[2].push(central(
                perturb(&|g| g.rotate_local(&e)),
                perturb(&|g| g.rotate_local(&-e)),
            ));
            out[4].push(central(
                perturb(&|g| g.color += e),
                perturb(&|g| g.color -= e),
            ));
        }
        let mut m = map.clone();
        m.gaussians[i].opacity_logit += h;
        let plus = loss.eval(&m, pose, k);
        m.gaussians[i].opacity_logit -= 2.0 * h;
        let minus = loss.eval(&m, pose, k);
        out[3].push(central(plus, minus));
    }
    for axis in 0..6 {
        let mut xi = Vector6::zeros();
        xi[axis] = h;
        out[5].push(central(
            loss.eval(map, &pose.retract(&xi), k),
            loss.eval(map, &pose.retract(&-xi), k),
        ));
    }
    out
}

pub fn flatten_analytic(g: &RenderGradients) -> [Vec<f64>; 6] {
    let mut out: [Vec<f64>; 6] = Default::default();
    for gg in &g.gaussians {
        out[0].extend(gg.mean.iter());
        out[1].extend(gg.log_scale.iter());
        out[2].extend(gg.rotation.iter());
        out[3].push(gg.opacity_logit);
        out[4].extend(gg.color.iter());
    }
    out[5].extend(g.pose.iter());
    out
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// `pose` moved by exactly `trans` meters and `rot` radians along random directions.
pub fn perturb(rng: &mut ChaCha8Rng, pose: &CameraPose, trans: f64, rot: f64) -> CameraPose {
    let dt = unit_vector(rng) * trans;
    let dr = unit_vector(rng) * rot;
    CameraPose::new(Quat::from_scaled_axis(dr) * pose.rotation, pose.translation + dt)
}

pub struct TrackingCase {
    pub map: GaussianMap,
    pub frame: roger_core::Frame,
    pub gt: CameraPose,
    pub init: CameraPose,
    pub k: Intrinsics,
}

/// Dense map of the 64×48 desk scene seen from frame `trial % frames`; the target
/// frame is rendered from that map at the true pose, the start is 1 cm / 1° off.
pub fn tracking_case(scene: &roger_core::dataset::SyntheticScene, trial: usize, rng: &mut ChaCha8Rng) -> TrackingCase {
    use roger_core::densify::{initialize_map, DensifyConfig};
    let k = scene.intrinsics();
    let gt_frame = scene.render_frame(trial % scene.frames, trial as u64).unwrap();
    let gt = gt_frame.gt_pose.unwrap();
    let dcfg = DensifyConfig { stride: 1, new_opacity: 0.9, ..DensifyConfig::default() };
    let map = initialize_map(&gt_frame, &gt, &k, &dcfg).unwrap();
    let out = roger_core::rasterizer::render(&map, &gt, &k);
    let frame = roger_core::Frame::new(out.color, out.depth, 0.0).unwrap();
    let init = perturb(rng, &gt, 0.01, 1f64.to_radians());
    TrackingCase { map, frame, gt, init, k }
}
