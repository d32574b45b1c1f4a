//! Shared domain types: Gaussians, camera poses, intrinsics, frames and pyramids.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{RgbImage, ScalarMap};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Cross-product matrix `[v]×`.
#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Gradient of `tr(A·[δ]×)` with respect to `δ`.
#[inline]
pub(crate) fn vee_trace(a: &Mat3) -> Vec3 {
    Vec3::new(
        a[(1, 2)] - a[(2, 1)],
        a[(2, 0)] - a[(0, 2)],
        a[(0, 1)] - a[(1, 0)],
    )
}

/// One anisotropic 3D Gaussian.
///
/// Covariance is `R·diag(exp(2·log_scale))·Rᵀ` and opacity is `sigmoid(opacity_logit)`,
/// so every parameter setting is a valid Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub mean: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quat,
    pub opacity_logit: f64,
    pub color: Vec3,
}

impl Gaussian3D {
    pub fn isotropic(mean: Vec3, scale: f64, opacity: f64, color: Vec3) -> Self {
        Self {
            mean,
            log_scale: Vec3::repeat(scale.ln()),
            rotation: Quat::identity(),
            opacity_logit: logit(opacity),
            color,
        }
    }

    #[inline]
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    /// Per-axis variances `exp(2·log_scale)`.
    #[inline]
    pub fn variances(&self) -> Vec3 {
        self.log_scale.map(|s| (2.0 * s).exp())
    }

    pub fn covariance(&self) -> Mat3 {
        let r = self.rotation.to_rotation_matrix().into_inner();
        r * Mat3::from_diagonal(&self.variances()) * r.transpose()
    }

    /// Right-perturb the orientation: `q ← q·Exp(δ)`, renormalized.
    pub fn rotate_local(&mut self, delta: &Vec3) {
        let q = self.rotation * Quat::from_scaled_axis(*delta);
        self.rotation = Quat::new_normalize(q.into_inner());
    }
}

/// The scene: a flat collection of Gaussians.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianMap {
    pub gaussians: Vec<Gaussian3D>,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, g: Gaussian3D) {
        self.gaussians.push(g);
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian3D> {
        self.gaussians.iter()
    }
}

impl FromIterator<Gaussian3D> for GaussianMap {
    fn from_iter<I: IntoIterator<Item = Gaussian3D>>(iter: I) -> Self {
        Self {
            gaussians: iter.into_iter().collect(),
        }
    }
}

/// Rigid world-to-camera transform `x_cam = R·x_world + t`.
///
/// The camera center in world coordinates is `inverse().translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Quat::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// `a ∘ b`: apply `b` first, then `a`.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let inv = self.rotation.inverse();
        CameraPose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    /// Left retraction by a tangent `ξ = (ρ, φ)`: `R ← Exp(φ)·R`, `t ← Exp(φ)·t + ρ`.
    ///
    /// To first order a camera-frame point moves by `ρ + φ × p_cam`, which is the
    /// parameterization the rasterizer's pose gradient refers to.
    pub fn retract(&self, xi: &Vector6<f64>) -> CameraPose {
        let rho = Vec3::new(xi[0], xi[1], xi[2]);
        let phi = Vec3::new(xi[3], xi[4], xi[5]);
        let dq = Quat::from_scaled_axis(phi);
        CameraPose {
            rotation: renormalize(dq * self.rotation),
            translation: dq * self.translation + rho,
        }
    }

    /// Translation distance (m) and rotation angle (rad) between two poses.
    pub fn distance(&self, other: &CameraPose) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        let dc = (self.center() - other.center()).norm();
        (dc, rel.rotation.angle())
    }
}

pub(crate) fn renormalize(q: Quat) -> Quat {
    Quat::new_normalize(q.into_inner())
}

/// Pinhole intrinsics. Pixel `(x, y)` has its center at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image dimensions must be non-zero".into()));
        }
        Ok(())
    }

    /// Intrinsics for an image resampled by `s`; dims are `round(s × base)`.
    pub fn scaled(&self, s: f64) -> Intrinsics {
        Intrinsics {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: ((self.width as f64 * s).round() as usize).max(1),
            height: ((self.height as f64 * s).round() as usize).max(1),
        }
    }

    /// Back-project pixel `(x, y)` at depth `d` into the camera frame.
    pub fn unproject(&self, x: f64, y: f64, d: f64) -> Vec3 {
        Vec3::new((x - self.cx) / self.fx * d, (y - self.cy) / self.fy * d, d)
    }

    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }
}

/// A timestamped RGB-D observation. Depth `0` marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub rgb: RgbImage,
    pub depth: ScalarMap,
    pub gt_pose: Option<CameraPose>,
    pub timestamp: f64,
}

impl Frame {
    pub fn new(rgb: RgbImage, depth: ScalarMap, timestamp: f64) -> Result<Self> {
        rgb.ensure_same_dims(&depth, "frame rgb/depth")?;
        Ok(Self {
            rgb,
            depth,
            gt_pose: None,
            timestamp,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.rgb.dims()
    }

    pub fn validate(&self, k: &Intrinsics) -> Result<()> {
        self.rgb.ensure_same_dims(&self.depth, "frame rgb/depth")?;
        if self.rgb.dims() != (k.width, k.height) {
            return Err(Error::Dimension(format!(
                "frame is {}x{} but intrinsics are {}x{}",
                self.rgb.width(),
                self.rgb.height(),
                k.width,
                k.height
            )));
        }
        if self.depth.data().iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(Error::Data("depth must be finite and non-negative".into()));
        }
        Ok(())
    }
}

pub const DEFAULT_PYRAMID_SCALES: [f64; 3] = [1.0, 0.5, 0.25];

/// Multi-resolution stack of single-channel maps, ordered as rendered.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePyramid {
    pub levels: Vec<(f64, ScalarMap)>,
}

impl ImagePyramid {
    pub fn level(&self, scale: f64) -> Option<&ScalarMap> {
        self.levels
            .iter()
            .find(|(s, _)| (s - scale).abs() < 1e-12)
            .map(|(_, m)| m)
    }
}
