//! Camera tracking against a frozen map: constant-velocity initialization, adaptive
//! residual weights and a regularized L1 objective optimized on the pose tangent.

use nalgebra::{Matrix6, UnitQuaternion, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ImageLossGrad;
use crate::rasterizer::{render, render_backward, RenderOutput};
use crate::types::{CameraPose, Frame, GaussianMap, Intrinsics, Quat, Vec3};

/// Weights used when adaptive reweighting is switched off.
pub const FIXED_W_IM: f64 = 0.5;
pub const FIXED_W_DEPTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub gamma_im: f64,
    pub gamma_depth: f64,
    pub rho: f64,
    pub lambda_r: f64,
    pub opacity_gate: f64,
    /// Gate used when no pixel passes `opacity_gate`.
    pub fallback_gate: f64,
    pub iters: usize,
    /// Initial step bound on the pose tangent (meters / radians). The bound doubles
    /// after a full accepted step and halves after a rejected one.
    pub trust_radius: f64,
    pub adaptive: bool,
    /// Use the additive translation/quaternion extrapolation instead of composing
    /// the relative motion.
    pub additive_init: bool,
    /// Rotate about a pivot on the optical axis at the scene's median depth instead of
    /// the camera center, which decouples rotation from translation.
    pub pivot: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            gamma_im: 0.5,
            gamma_depth: 0.5,
            rho: 2.0,
            lambda_r: 0.1,
            opacity_gate: 0.99,
            fallback_gate: 0.5,
            iters: 40,
            trust_radius: 1e-2,
            adaptive: true,
            additive_init: false,
            pivot: true,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.gamma_im,
            self.gamma_depth,
            self.rho,
            self.lambda_r,
            self.trust_radius,
        ];
        if pos.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("tracker parameters must be > 0: {pos:?}")));
        }
        for g in [self.opacity_gate, self.fallback_gate] {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::Config(format!("opacity gate {g} outside (0, 1)")));
            }
        }
        if self.iters == 0 {
            return Err(Error::Config("tracker needs iters > 0".into()));
        }
        Ok(())
    }
}

/// Constant-velocity prediction from the two most recent poses (`prev` is newest).
pub fn init_pose(prev: &CameraPose, prev2: &CameraPose) -> CameraPose {
    prev.compose(&prev2.inverse().compose(prev))
}

/// Literal extrapolation `2·prev − prev2` on translation and (sign-aligned) quaternion.
pub fn init_pose_additive(prev: &CameraPose, prev2: &CameraPose) -> CameraPose {
    let q1 = prev.rotation.into_inner();
    let mut q0 = prev2.rotation.into_inner();
    if q0.dot(&q1) < 0.0 {
        q0 = -q0;
    }
    let q = UnitQuaternion::from_quaternion(q1 * 2.0 - q0);
    CameraPose::new(q, prev.translation * 2.0 - prev2.translation)
}

/// Prediction for the next frame from the estimated history (oldest first).
pub fn predict_pose(history: &[CameraPose], cfg: &TrackerConfig) -> CameraPose {
    match history {
        [] => CameraPose::identity(),
        [only] => *only,
        [.., a, b] if cfg.additive_init => init_pose_additive(b, a),
        [.., a, b] => init_pose(b, a),
    }
}

pub fn adaptive_weights(l_color: f64, l_depth: f64, cfg: &TrackerConfig) -> (f64, f64) {
    (
        cfg.gamma_im / (l_color + cfg.gamma_im),
        cfg.gamma_depth / (l_depth + cfg.gamma_depth),
    )
}

/// `λ_R·(ln(w_depth / w_im) − ln ρ)²`.
pub fn weight_regularizer(w_im: f64, w_depth: f64, cfg: &TrackerConfig) -> f64 {
    let r = (w_depth / w_im).ln() - cfg.rho.ln();
    cfg.lambda_r * r * r
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub loss: f64,
    pub l_color: f64,
    pub l_depth: f64,
    pub w_im: f64,
    pub w_depth: f64,
    pub regularizer: f64,
    pub masked_pixels: usize,
    /// The strict opacity gate was empty and the fallback gate was used.
    pub fallback_gate: bool,
}

pub fn tracking_loss(out: &RenderOutput, frame: &Frame, cfg: &TrackerConfig) -> Result<TrackingReport> {
    Ok(tracking_loss_with_grad(out, frame, cfg, false)?.0)
}

fn gate_mask(out: &RenderOutput, gate: f64) -> Vec<bool> {
    out.opacity.data().iter().map(|&o| o > gate).collect()
}

/// Tracking loss over the opacity-gated pixels and, if requested, its gradient w.r.t.
/// the render with the weights held fixed.
pub fn tracking_loss_with_grad(
    out: &RenderOutput,
    frame: &Frame,
    cfg: &TrackerConfig,
    want_grad: bool,
) -> Result<(TrackingReport, Option<ImageLossGrad>)> {
    out.color.ensure_same_dims(&frame.rgb, "tracking rgb")?;
    let mut fallback = false;
    let mut mask = gate_mask(out, cfg.opacity_gate);
    if !mask.iter().any(|&m| m) {
        mask = gate_mask(out, cfg.fallback_gate);
        fallback = true;
        if !mask.iter().any(|&m| m) {
            return Err(Error::Data("no pixel passes the tracking opacity gate".into()));
        }
    }
    let color = out.color.data();
    let gt = frame.rgb.data();
    let depth = out.depth.data();
    let gt_depth = frame.depth.data();

    let (mut l_color, mut n_color, mut l_depth, mut n_depth) = (0.0, 0usize, 0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        l_color += (0..3).map(|c| (color[i][c] - gt[i][c]).abs()).sum::<f64>() / 3.0;
        n_color += 1;
        if gt_depth[i] > 0.0 {
            l_depth += (depth[i] - gt_depth[i]).abs();
            n_depth += 1;
        }
    }
    l_color /= n_color as f64;
    if n_depth > 0 {
        l_depth /= n_depth as f64;
    }
    let (w_im, w_depth, regularizer) = if cfg.adaptive {
        let (a, b) = adaptive_weights(l_color, l_depth, cfg);
        (a, b, weight_regularizer(a, b, cfg))
    } else {
        (FIXED_W_IM, FIXED_W_DEPTH, 0.0)
    };
    let report = TrackingReport {
        loss: w_im * l_color + w_depth * l_depth + regularizer,
        l_color,
        l_depth,
        w_im,
        w_depth,
        regularizer,
        masked_pixels: n_color,
        fallback_gate: fallback,
    };
    if !want_grad {
        return Ok((report, None));
    }
    let (w, h) = out.color.dims();
    let mut grad = ImageLossGrad::zeros(w, h);
    let gc = w_im / (3.0 * n_color as f64);
    let gd = if n_depth > 0 { w_depth / n_depth as f64 } else { 0.0 };
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let g = &mut grad.color.data_mut()[i];
        for c in 0..3 {
            g[c] = gc * sign(color[i][c] - gt[i][c]);
        }
        if gt_depth[i] > 0.0 {
            grad.depth.data_mut()[i] = gd * sign(depth[i] - gt_depth[i]);
        }
    }
    Ok((report, Some(grad)))
}

/// Median of `D/O` over pixels with rendered opacity above one half (0 if none).
fn median_depth(out: &RenderOutput) -> f64 {
    let mut d: Vec<f64> = out
        .depth
        .data()
        .iter()
        .zip(out.opacity.data())
        .filter(|(_, o)| **o > 0.5)
        .map(|(d, o)| d / o)
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    *d.select_nth_unstable_by(mid, f64::total_cmp).1
}

fn pivot_retract(pose: &CameraPose, step: &Vector6<f64>, pivot: &Vec3) -> CameraPose {
    let phi = Vec3::new(step[3], step[4], step[5]);
    let rho = Vec3::new(step[0], step[1], step[2]) + pivot - Quat::from_scaled_axis(phi) * pivot;
    pose.retract(&Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z))
}

fn next_step(inv_h: &Matrix6<f64>, g: &Vector6<f64>, radius: f64) -> Vector6<f64> {
    let s = -(inv_h * g);
    let n = s.norm();
    if n > radius {
        s * (radius / n)
    } else {
        s
    }
}

/// Skips pairs without positive curvature so the inverse stays positive definite.
fn bfgs_update(inv_h: &mut Matrix6<f64>, s: &Vector6<f64>, y: &Vector6<f64>) {
    let sy = s.dot(y);
    if !(sy > 1e-12 * s.norm() * y.norm()) {
        return;
    }
    let r = 1.0 / sy;
    let i = Matrix6::<f64>::identity();
    *inv_h = (i - s * y.transpose() * r) * *inv_h * (i - y * s.transpose() * r) + s * s.transpose() * r;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub pose: CameraPose,
    pub init: CameraPose,
    pub init_loss: f64,
    pub best_loss: f64,
    /// Loss at each evaluated pose, starting with the initialization.
    pub trace: Vec<f64>,
    pub fallback_gate: bool,
    /// Optimization failed; `pose` is the initialization.
    pub diverged: bool,
}

/// Estimate the pose of `frame` against the frozen map.
pub fn track(
    map: &GaussianMap,
    frame: &Frame,
    k: &Intrinsics,
    history: &[CameraPose],
    cfg: &TrackerConfig,
) -> Result<TrackResult> {
    track_from(map, frame, k, &predict_pose(history, cfg), cfg)
}

/// Like [`track`] but starting from an explicit initial pose.
pub fn track_from(
    map: &GaussianMap,
    frame: &Frame,
    k: &Intrinsics,
    init: &CameraPose,
    cfg: &TrackerConfig,
) -> Result<TrackResult> {
    cfg.validate()?;
    frame.validate(k)?;
    if map.is_empty() {
        return Err(Error::Data("cannot track against an empty map".into()));
    }
    let mut result = TrackResult {
        pose: *init,
        init: *init,
        init_loss: f64::NAN,
        best_loss: f64::INFINITY,
        trace: Vec::with_capacity(cfg.iters + 1),
        fallback_gate: false,
        diverged: false,
    };
    let mut pose = *init;
    let mut pivot = Vec3::zeros();
    // Quasi-Newton (BFGS) on the tangent with a trust radius. Every iteration renders
    // one candidate; curvature pairs from rejected candidates are kept as well.
    let mut inv_h = Matrix6::<f64>::identity();
    let mut radius = cfg.trust_radius;
    let mut current: Option<(f64, Vector6<f64>)> = None;
    let mut step = Vector6::zeros();
    for it in 0..=cfg.iters {
        let cand = match current {
            None => pose,
            Some(_) => pivot_retract(&pose, &step, &pivot),
        };
        let out = render(map, &cand, k);
        if it == 0 && cfg.pivot {
            pivot = Vec3::new(0.0, 0.0, median_depth(&out));
        }
        let want_grad = it < cfg.iters;
        let (rep, grad) = match tracking_loss_with_grad(&out, frame, cfg, want_grad) {
            Ok(v) => v,
            Err(e) if it == 0 => {
                log::warn!("tracking failed at initialization: {e}");
                result.diverged = true;
                return Ok(result);
            }
            // Candidate left the map; treat as a rejected step.
            Err(_) => {
                radius = 0.5 * step.norm();
                if let Some((_, g)) = current {
                    step = next_step(&inv_h, &g, radius);
                }
                continue;
            }
        };
        result.fallback_gate |= rep.fallback_gate;
        result.trace.push(rep.loss);
        if it == 0 {
            result.init_loss = rep.loss;
        }
        if !rep.loss.is_finite() {
            log::warn!("tracking diverged at iter {it}");
            result.pose = *init;
            result.best_loss = result.init_loss;
            result.diverged = true;
            return Ok(result);
        }
        if rep.loss < result.best_loss {
            result.best_loss = rep.loss;
            result.pose = cand;
        }
        let Some(grad) = grad else { break };
        let g = render_backward(&out, &grad.color, &grad.depth, &grad.opacity).pose;
        let g_rho = Vec3::new(g[0], g[1], g[2]);
        // Chart x ← Exp(φ)(x − c) + c + ρ has ρ_left = ρ + c × φ.
        let g_phi = Vec3::new(g[3], g[4], g[5]) - pivot.cross(&g_rho);
        let g = Vector6::new(g_rho.x, g_rho.y, g_rho.z, g_phi.x, g_phi.y, g_phi.z);
        match current {
            None => {
                let n = g.norm();
                if n == 0.0 {
                    break;
                }
                inv_h *= cfg.trust_radius / n;
                current = Some((rep.loss, g));
            }
            Some((f0, g0)) => {
                bfgs_update(&mut inv_h, &step, &(g - g0));
                if rep.loss < f0 {
                    if step.norm() >= 0.99 * radius {
                        radius *= 2.0;
                    }
                    pose = cand;
                    current = Some((rep.loss, g));
                } else {
                    radius = 0.5 * step.norm();
                }
            }
        }
        let (_, g_cur) = current.expect("set above");
        step = next_step(&inv_h, &g_cur, radius);
    }
    Ok(result)
}
