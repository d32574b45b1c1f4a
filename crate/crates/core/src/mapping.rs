//! Per-frame map refinement against the robust mapping loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fused_target, mapping_loss_with_grad, FusionConfig, MappingLossReport};
use crate::image::RgbImage;
use crate::optim::Adam;
use crate::rasterizer::{render, render_backward};
use crate::types::{CameraPose, Frame, GaussianMap, Intrinsics};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub iters: usize,
    pub lr_means: f64,
    pub lr_colors: f64,
    pub lr_opacity: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    /// Abort when the loss exceeds this multiple of the first iteration's loss.
    pub divergence_factor: f64,
    pub fusion: FusionConfig,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            iters: 60,
            lr_means: 1e-3,
            lr_colors: 2e-3,
            lr_opacity: 5e-2,
            lr_log_scale: 1e-3,
            lr_rotation: 1e-3,
            divergence_factor: 10.0,
            fusion: FusionConfig::default(),
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.weights.validate()?;
        let lrs = [
            self.lr_means,
            self.lr_colors,
            self.lr_opacity,
            self.lr_log_scale,
            self.lr_rotation,
        ];
        if lrs.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("invalid mapping learning rates {lrs:?}")));
        }
        if !(self.fusion.tau >= 0.0) || !(self.divergence_factor > 1.0) {
            return Err(Error::Config("tau must be >= 0 and divergence factor > 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapStepReport {
    /// Loss at every iteration (before that iteration's update).
    pub losses: Vec<f64>,
    /// Running minimum of `losses`.
    pub smoothed: Vec<f64>,
    pub last: MappingLossReport,
}

struct MapAdam {
    means: Adam,
    colors: Adam,
    opacity: Adam,
    log_scale: Adam,
    rotation: Adam,
}

impl MapAdam {
    fn new(cfg: &MapperConfig, n: usize) -> Self {
        Self {
            means: Adam::new(cfg.lr_means, 3 * n),
            colors: Adam::new(cfg.lr_colors, 3 * n),
            opacity: Adam::new(cfg.lr_opacity, n),
            log_scale: Adam::new(cfg.lr_log_scale, 3 * n),
            rotation: Adam::new(cfg.lr_rotation, 3 * n),
        }
    }
}

/// Refine `map` on one keyframe with a fresh optimizer. On divergence the map is left
/// untouched and an error is returned.
pub fn map_step(
    map: &mut GaussianMap,
    frame: &Frame,
    pose: &CameraPose,
    k: &Intrinsics,
    cfg: &MapperConfig,
) -> Result<MapStepReport> {
    map_views(map, &[(frame, *pose)], k, cfg)
}

/// Like [`map_step`], but iterations cycle over several posed frames, starting with the
/// first. The reported losses mix views; the last entry belongs to the first view.
pub fn map_views(
    map: &mut GaussianMap,
    views: &[(&Frame, CameraPose)],
    k: &Intrinsics,
    cfg: &MapperConfig,
) -> Result<MapStepReport> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::Config("mapping needs at least one view".into()));
    }
    for (f, _) in views {
        f.validate(k)?;
    }
    let mut work = map.clone();
    let n = work.len();
    let mut adam = MapAdam::new(cfg, n);
    let mut report = MapStepReport::default();
    let mut fused: Vec<Option<RgbImage>> = vec![None; views.len()];
    let mut firsts: Vec<Option<f64>> = vec![None; views.len()];

    for it in 0..=cfg.iters {
        let v = if it == cfg.iters { 0 } else { it % views.len() };
        let (frame, pose) = (views[v].0, &views[v].1);
        let out = render(&work, pose, k);
        if cfg.fusion.fuse_every_iter || fused[v].is_none() {
            fused[v] = Some(fused_target(&out.color, frame, &cfg.fusion.weights)?);
        }
        let want_grad = it < cfg.iters;
        let (loss, grad) =
            mapping_loss_with_grad(&out, frame, fused[v].as_ref().unwrap(), &cfg.fusion, want_grad)?;
        if !loss.l_map.is_finite() {
            return Err(Error::Divergence(format!("non-finite mapping loss at iter {it}")));
        }
        let initial = *firsts[v].get_or_insert(loss.l_map);
        if loss.l_map > cfg.divergence_factor * initial && initial > 0.0 {
            log::warn!("mapping diverged at iter {it}: {} > {}x{}", loss.l_map, cfg.divergence_factor, initial);
            return Err(Error::Divergence(format!(
                "mapping loss {} exceeded {}x initial {}",
                loss.l_map, cfg.divergence_factor, initial
            )));
        }
        let smoothed = report.smoothed.last().map_or(loss.l_map, |s: &f64| s.min(loss.l_map));
        report.losses.push(loss.l_map);
        report.smoothed.push(smoothed);
        report.last = loss;
        let Some(grad) = grad else { break };
        if n == 0 {
            continue;
        }

        let g = render_backward(&out, &grad.color, &grad.depth, &grad.opacity);
        let flat3 = |f: &dyn Fn(usize) -> [f64; 3]| -> Vec<f64> { (0..n).flat_map(f).collect() };
        let d_means = adam.means.step(&flat3(&|i| g.gaussians[i].mean.into()));
        let d_colors = adam.colors.step(&flat3(&|i| g.gaussians[i].color.into()));
        let d_scale = adam.log_scale.step(&flat3(&|i| g.gaussians[i].log_scale.into()));
        let d_rot = adam.rotation.step(&flat3(&|i| g.gaussians[i].rotation.into()));
        let d_op = adam
            .opacity
            .step(&g.gaussians.iter().map(|gg| gg.opacity_logit).collect::<Vec<_>>());

        for (i, gs) in work.gaussians.iter_mut().enumerate() {
            for a in 0..3 {
                gs.mean[a] += d_means[3 * i + a];
                gs.color[a] = (gs.color[a] + d_colors[3 * i + a]).clamp(0.0, 1.0);
                gs.log_scale[a] += d_scale[3 * i + a];
            }
            gs.opacity_logit += d_op[i];
            gs.rotate_local(&crate::types::Vec3::new(d_rot[3 * i], d_rot[3 * i + 1], d_rot[3 * i + 2]));
        }
    }
    *map = work;
    Ok(report)
}
