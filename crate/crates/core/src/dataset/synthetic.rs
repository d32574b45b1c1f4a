//! Procedural desk scenes rendered by an analytic ray-caster.
//!
//! The ray-caster shares nothing with the splat rasterizer: primitives are intersected
//! exactly, color is a solid texture times Lambertian shading, and each pixel averages
//! a 2×2 grid of sub-rays. Depth is the camera-z of the pixel-center ray.

use nalgebra::{Rotation3, UnitQuaternion};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{RgbImage, ScalarMap};
use crate::types::{CameraPose, Frame, Intrinsics, Vec3};

/// Solid texture: `albedo · (1 + checker_contrast·c(p)) · (1 + noise_amp·n(p))` where
/// `c` is a soft ±1 checker and `n` a seeded value noise in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub albedo: [f64; 3],
    pub checker_period: f64,
    pub checker_contrast: f64,
    pub noise_freq: f64,
    pub noise_amp: f64,
}

impl Texture {
    pub fn plain(albedo: [f64; 3]) -> Self {
        Self {
            albedo,
            checker_period: 1.0,
            checker_contrast: 0.0,
            noise_freq: 1.0,
            noise_amp: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Infinite plane through `point` with the given `normal`.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        texture: Texture,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        texture: Texture,
    },
    /// Axis-aligned box.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        texture: Texture,
    },
}

/// Camera paths; every pose looks at `target` with world `-y` up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    /// Arc of `arc_deg` degrees on a horizontal circle around `target`.
    Orbit {
        target: [f64; 3],
        radius: f64,
        height: f64,
        start_deg: f64,
        arc_deg: f64,
    },
    /// Camera center moves on a Lissajous figure in the plane `z = z`.
    Lissajous {
        target: [f64; 3],
        center: [f64; 3],
        amp: [f64; 2],
        freq: [f64; 2],
    },
    Linear {
        target: [f64; 3],
        start: [f64; 3],
        end: [f64; 3],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub trajectory: TrajectorySpec,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub hfov_deg: f64,
    /// Seconds between frames.
    pub frame_dt: f64,
    /// Direction towards the light (world frame).
    pub light_dir: [f64; 3],
    pub ambient: f64,
}

fn v(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl SyntheticScene {
    /// Desk-scale room: back wall, floor, a side wall, a sphere and two boxes, viewed
    /// by a short orbit.
    pub fn desk(frames: usize, width: usize, height: usize) -> Self {
        let tex = |albedo, period, contrast, freq, amp| Texture {
            albedo,
            checker_period: period,
            checker_contrast: contrast,
            noise_freq: freq,
            noise_amp: amp,
        };
        Self {
            name: "desk".into(),
            primitives: vec![
                Primitive::Plane {
                    point: [0.0, 0.0, 3.2],
                    normal: [0.0, 0.0, -1.0],
                    texture: tex([0.78, 0.72, 0.62], 0.9, 0.16, 4.0, 0.3),
                },
                Primitive::Plane {
                    point: [0.0, 0.55, 0.0],
                    normal: [0.0, -1.0, 0.0],
                    texture: tex([0.7, 0.6, 0.5], 0.8, 0.16, 4.0, 0.3),
                },
                Primitive::Plane {
                    point: [-1.6, 0.0, 0.0],
                    normal: [1.0, 0.0, 0.0],
                    texture: tex([0.62, 0.7, 0.72], 0.9, 0.14, 4.0, 0.3),
                },
                Primitive::Sphere {
                    center: [-0.45, 0.25, 2.1],
                    radius: 0.3,
                    texture: tex([0.85, 0.55, 0.45], 0.45, 0.1, 3.0, 0.2),
                },
                Primitive::Box {
                    min: [0.15, 0.05, 1.9],
                    max: [0.65, 0.55, 2.35],
                    texture: tex([0.55, 0.68, 0.85], 0.4, 0.12, 3.0, 0.2),
                },
                Primitive::Box {
                    min: [-0.1, 0.35, 1.5],
                    max: [0.15, 0.55, 1.75],
                    texture: tex([0.85, 0.8, 0.5], 0.3, 0.1, 4.0, 0.2),
                },
            ],
            trajectory: TrajectorySpec::Orbit {
                target: [0.0, 0.2, 2.2],
                radius: 2.2,
                height: -0.15,
                start_deg: -8.0,
                arc_deg: 16.0,
            },
            frames,
            width,
            height,
            hfov_deg: 58.0,
            frame_dt: 1.0 / 30.0,
            light_dir: [-0.4, -1.0, -0.6],
            ambient: 0.68,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene needs frames, width and height > 0".into()));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 179.0) || !(self.frame_dt > 0.0) {
            return Err(Error::Config("scene fov or frame_dt out of range".into()));
        }
        if self.primitives.is_empty() {
            return Err(Error::Config("scene has no primitives".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = 0.5 * self.width as f64 / (0.5 * self.hfov_deg.to_radians()).tan();
        Intrinsics {
            fx: f,
            fy: f,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }

    /// Ground-truth world→camera pose of frame `i`.
    pub fn pose(&self, i: usize) -> CameraPose {
        let s = if self.frames > 1 {
            i as f64 / (self.frames - 1) as f64
        } else {
            0.0
        };
        let (center, target) = match &self.trajectory {
            TrajectorySpec::Orbit {
                target,
                radius,
                height,
                start_deg,
                arc_deg,
            } => {
                let a = (start_deg + s * arc_deg).to_radians();
                let t = v(*target);
                (Vec3::new(t.x + radius * a.sin(), *height, t.z - radius * a.cos()), t)
            }
            TrajectorySpec::Lissajous {
                target,
                center,
                amp,
                freq,
            } => {
                let ph = std::f64::consts::TAU * s;
                let c = v(*center);
                (
                    Vec3::new(c.x + amp[0] * (freq[0] * ph).sin(), c.y + amp[1] * (freq[1] * ph).sin(), c.z),
                    v(*target),
                )
            }
            TrajectorySpec::Linear { target, start, end } => (v(*start) + s * (v(*end) - v(*start)), v(*target)),
        };
        look_at(&center, &target)
    }

    /// Render frame `i`; `seed` shifts the texture noise field.
    pub fn render_frame(&self, i: usize, seed: u64) -> Result<Frame> {
        let k = self.intrinsics();
        let pose = self.pose(i);
        let caster = Caster::new(self, seed);
        let r_wc = pose.rotation_matrix().transpose();
        let origin = pose.center();
        let w = self.width;
        let pixels: Vec<([f64; 3], f64)> = (0..w * self.height)
            .into_par_iter()
            .map(|idx| {
                let (x, y) = ((idx % w) as f64, (idx / w) as f64);
                let ray = |sx: f64, sy: f64| r_wc * Vec3::new((sx - k.cx) / k.fx, (sy - k.cy) / k.fy, 1.0);
                let depth = caster.hit(&origin, &ray(x, y)).map_or(0.0, |h| h.t);
                let mut color = [0.0; 3];
                for (ox, oy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                    let c = caster.shade(&origin, &ray(x + ox, y + oy));
                    for ch in 0..3 {
                        color[ch] += 0.25 * c[ch];
                    }
                }
                (color, depth)
            })
            .collect();
        if pixels.iter().all(|(_, d)| *d <= 0.0) {
            return Err(Error::EmptyView {
                index: i,
                message: "no primitive in view".into(),
            });
        }
        let rgb = RgbImage::from_vec(w, self.height, pixels.iter().map(|p| p.0).collect())?;
        let depth = ScalarMap::from_vec(w, self.height, pixels.iter().map(|p| p.1).collect())?;
        let mut frame = Frame::new(rgb, depth, i as f64 * self.frame_dt)?;
        frame.gt_pose = Some(pose);
        Ok(frame)
    }

    pub fn render_all(&self, seed: u64) -> Result<Vec<Frame>> {
        self.validate()?;
        (0..self.frames).map(|i| self.render_frame(i, seed)).collect()
    }
}

/// World→camera pose of a camera at `center` looking at `target` (camera y points
/// down, so world `-y` is up).
pub fn look_at(center: &Vec3, target: &Vec3) -> CameraPose {
    let z = (target - center).normalize();
    let down = Vec3::new(0.0, 1.0, 0.0);
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    // Rows are the camera axes in world coordinates.
    let r = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_rows(&[
        x.transpose(),
        y.transpose(),
        z.transpose(),
    ]));
    let q = UnitQuaternion::from_rotation_matrix(&r);
    CameraPose::new(q, -(r * center))
}

struct Hit {
    t: f64,
    point: Vec3,
    normal: Vec3,
    prim: usize,
}

struct Caster<'a> {
    scene: &'a SyntheticScene,
    light: Vec3,
    seed: u64,
}

impl<'a> Caster<'a> {
    fn new(scene: &'a SyntheticScene, seed: u64) -> Self {
        Self {
            scene,
            light: v(scene.light_dir).normalize(),
            seed,
        }
    }

    fn hit(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (idx, p) in self.scene.primitives.iter().enumerate() {
            if let Some((t, n)) = intersect(p, o, d) {
                if t > 1e-6 && best.as_ref().is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        point: o + d * t,
                        normal: n,
                        prim: idx,
                    });
                }
            }
        }
        best
    }

    fn shade(&self, o: &Vec3, d: &Vec3) -> [f64; 3] {
        let Some(h) = self.hit(o, d) else {
            return [0.0; 3];
        };
        let tex = match &self.scene.primitives[h.prim] {
            Primitive::Plane { texture, .. } | Primitive::Sphere { texture, .. } | Primitive::Box { texture, .. } => {
                texture
            }
        };
        let mut n = h.normal;
        if n.dot(d) > 0.0 {
            n = -n;
        }
        let light = self.scene.ambient + (1.0 - self.scene.ambient) * n.dot(&self.light).max(0.0);
        let checker = soft_checker(&h.point, tex.checker_period);
        let noise = value_noise(&(h.point * tex.noise_freq), self.seed ^ (h.prim as u64).wrapping_mul(0x9E37));
        let m = (1.0 + tex.checker_contrast * checker) * (1.0 + tex.noise_amp * noise) * light;
        tex.albedo.map(|a| (a * m).clamp(0.0, 1.0))
    }
}

/// Ray parameter and outward normal of the nearest intersection with `t > 0`.
fn intersect(p: &Primitive, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
    match p {
        Primitive::Plane { point, normal, .. } => {
            let n = v(*normal).normalize();
            let den = n.dot(d);
            if den.abs() < 1e-12 {
                return None;
            }
            let t = n.dot(&(v(*point) - o)) / den;
            (t > 0.0).then_some((t, n))
        }
        Primitive::Sphere { center, radius, .. } => {
            let c = v(*center);
            let oc = o - c;
            let a = d.dot(d);
            let b = oc.dot(d);
            let disc = b * b - a * (oc.dot(&oc) - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|t| *t > 0.0)?;
            Some((t, (o + d * t - c) / *radius))
        }
        Primitive::Box { min, max, .. } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut n0, mut n1) = (Vec3::zeros(), Vec3::zeros());
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a] < min[a] || o[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                let mut na = Vec3::zeros();
                na[a] = -1.0;
                let mut nb = -na;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                    std::mem::swap(&mut na, &mut nb);
                }
                if ta > t0 {
                    t0 = ta;
                    n0 = na;
                }
                if tb < t1 {
                    t1 = tb;
                    n1 = nb;
                }
            }
            if t0 > t1 {
                return None;
            }
            if t0 > 0.0 {
                Some((t0, n0))
            } else if t1 > 0.0 {
                Some((t1, n1))
            } else {
                None
            }
        }
    }
}

fn smoothstep(e: f64) -> f64 {
    let e = e.clamp(0.0, 1.0);
    e * e * (3.0 - 2.0 * e)
}

/// Smooth checker-like pattern in `[-1, 1]`: pairwise products of axis sines,
/// squashed by `tanh`. On an axis-aligned plane it reduces to a soft checkerboard.
fn soft_checker(p: &Vec3, period: f64) -> f64 {
    let w = std::f64::consts::PI / period;
    let (sx, sy, sz) = ((w * p.x).sin(), (w * p.y).sin(), (w * p.z).sin());
    (sx * sy + sy * sz + sz * sx).tanh()
}

fn hash(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x2545_F491_4F6C_DD1D;
    for c in [x, y, z] {
        h ^= c as u64;
        h = h.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h ^= h >> 31;
    }
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 29;
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Trilinear value noise with smoothstep weights, range `[-1, 1]`.
fn value_noise(p: &Vec3, seed: u64) -> f64 {
    let base = p.map(f64::floor);
    let f = p - base;
    let w = f.map(smoothstep);
    let (bx, by, bz) = (base.x as i64, base.y as i64, base.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let wx = if dx == 1 { w.x } else { 1.0 - w.x };
                let wy = if dy == 1 { w.y } else { 1.0 - w.y };
                let wz = if dz == 1 { w.z } else { 1.0 - w.z };
                acc += wx * wy * wz * hash(bx + dx, by + dy, bz + dz, seed);
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single(prim: Primitive) -> SyntheticScene {
        SyntheticScene {
            name: "t".into(),
            primitives: vec![prim],
            trajectory: TrajectorySpec::Linear {
                target: [0.0, 0.0, 1.0],
                start: [0.0, 0.0, 0.0],
                end: [0.0, 0.0, 0.0],
            },
            frames: 1,
            width: 21,
            height: 15,
            hfov_deg: 60.0,
            frame_dt: 0.1,
            light_dir: [0.0, 0.0, -1.0],
            ambient: 0.5,
        }
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let s = single(Primitive::Plane {
            point: [0.0, 0.0, 2.5],
            normal: [0.0, 0.0, -1.0],
            texture: Texture::plain([0.5; 3]),
        });
        let f = s.render_frame(0, 0).unwrap();
        assert!(f.depth.data().iter().all(|d| (d - 2.5).abs() < 1e-12));
        assert!(f.gt_pose.unwrap().distance(&CameraPose::identity()).0 < 1e-12);
    }

    #[test]
    fn sphere_min_depth_at_center() {
        let s = single(Primitive::Sphere {
            center: [0.0, 0.0, 3.0],
            radius: 0.5,
            texture: Texture::plain([0.5; 3]),
        });
        let f = s.render_frame(0, 0).unwrap();
        // Odd dims put pixel (10, 7) exactly on the optical axis.
        assert_relative_eq!(*f.depth.get(10, 7), 2.5, epsilon = 1e-12);
        let min = f.depth.data().iter().filter(|d| **d > 0.0).fold(f64::INFINITY, |a, b| a.min(*b));
        assert_relative_eq!(min, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn empty_view_names_pose() {
        let s = single(Primitive::Sphere {
            center: [0.0, 0.0, -3.0],
            radius: 0.5,
            texture: Texture::plain([0.5; 3]),
        });
        match s.render_frame(0, 0) {
            Err(Error::EmptyView { index, .. }) => assert_eq!(index, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn box_faces() {
        let s = single(Primitive::Box {
            min: [-5.0, -5.0, 2.0],
            max: [5.0, 5.0, 3.0],
            texture: Texture::plain([0.5; 3]),
        });
        let f = s.render_frame(0, 0).unwrap();
        assert!(f.depth.data().iter().all(|d| (d - 2.0).abs() < 1e-12));
    }

    #[test]
    fn look_at_points_camera_z_at_target() {
        let c = Vec3::new(0.3, -0.2, -1.0);
        let t = Vec3::new(0.0, 0.1, 2.0);
        let p = look_at(&c, &t);
        let tc = p.transform_point(&t);
        assert!(tc.x.abs() < 1e-12 && tc.y.abs() < 1e-12 && tc.z > 0.0);
        assert!((p.center() - c).norm() < 1e-12);
        // World up (-y) projects to camera -y.
        let up = p.rotation_matrix() * Vec3::new(0.0, -1.0, 0.0);
        assert!(up.y < 0.0);
    }

    #[test]
    fn desk_covers_every_pixel() {
        let s = SyntheticScene::desk(5, 32, 24);
        for f in s.render_all(3).unwrap() {
            assert!(f.depth.data().iter().all(|d| *d > 0.0));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let s = SyntheticScene::desk(2, 16, 12);
        assert_eq!(s.render_frame(1, 7).unwrap(), s.render_frame(1, 7).unwrap());
        assert_ne!(s.render_frame(1, 7).unwrap().rgb, s.render_frame(1, 8).unwrap().rgb);
    }
}
