//! Opacity-guided insertion of Gaussians and importance-based pruning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::rasterizer::RenderOutput;
use crate::types::{CameraPose, Frame, Gaussian3D, GaussianMap, ImagePyramid, Intrinsics, Vec3};

/// Which side of `imp_threshold` opens the densification gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDirection {
    /// Densify when the fused importance exceeds the threshold.
    #[default]
    Above,
    Below,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyConfig {
    pub opacity_threshold: f64,
    pub depth_error_factor: f64,
    /// `(scale, weight)` pairs; weights sum to one.
    pub scale_weights: Vec<(f64, f64)>,
    pub imp_threshold: f64,
    pub gate: GateDirection,
    pub prune_importance_floor: f64,
    /// Pixel stride of inserted Gaussians.
    pub stride: usize,
    pub new_opacity: f64,
    /// Scale of inserted Gaussians in pixels at their depth.
    pub footprint: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            opacity_threshold: 0.5,
            depth_error_factor: 50.0,
            scale_weights: vec![(1.0, 0.5), (0.5, 0.3), (0.25, 0.2)],
            imp_threshold: 0.01,
            gate: GateDirection::Above,
            prune_importance_floor: 0.005,
            stride: 2,
            new_opacity: 0.5,
            footprint: 1.0,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.scale_weights.iter().map(|(_, w)| w).sum();
        if self.scale_weights.is_empty()
            || (sum - 1.0).abs() > 1e-9
            || self.scale_weights.iter().any(|(s, w)| !(*s > 0.0) || *w < 0.0)
        {
            return Err(Error::Config(format!(
                "scale weights must be non-negative and sum to 1: {:?}",
                self.scale_weights
            )));
        }
        let pos = [
            self.opacity_threshold,
            self.depth_error_factor,
            self.imp_threshold,
            self.prune_importance_floor,
        ];
        if pos.iter().any(|v| !(*v > 0.0)) || self.stride == 0 || !(self.footprint > 0.0) {
            return Err(Error::Config(format!("densify thresholds must be > 0: {pos:?}")));
        }
        if !(self.new_opacity > 0.0 && self.new_opacity < 1.0) {
            return Err(Error::Config("new_opacity must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn scales(&self) -> Vec<f64> {
        self.scale_weights.iter().map(|(s, _)| *s).collect()
    }

    pub fn gate_open(&self, importance: f64) -> bool {
        match self.gate {
            GateDirection::Above => importance > self.imp_threshold,
            GateDirection::Below => importance < self.imp_threshold,
        }
    }
}

/// Weighted fusion of the per-scale mean opacity.
pub fn importance_score(pyr: &ImagePyramid, cfg: &DensifyConfig) -> Result<f64> {
    cfg.scale_weights.iter().try_fold(0.0, |acc, (s, w)| {
        let level = pyr
            .level(*s)
            .ok_or_else(|| Error::Config(format!("pyramid lacks scale {s}")))?;
        Ok(acc + w * level.mean())
    })
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Pixels with valid depth whose rendered opacity is low or whose depth error is an
/// outlier relative to the frame's median error.
pub fn densify_mask(out: &RenderOutput, frame: &Frame, cfg: &DensifyConfig) -> Result<Mask> {
    out.depth.ensure_same_dims(&frame.depth, "densify depth")?;
    let (w, h) = out.depth.dims();
    let errors: Vec<f64> = out
        .depth
        .data()
        .iter()
        .zip(frame.depth.data())
        .map(|(d, gt)| (d - gt).abs())
        .collect();
    let valid = |i: usize| frame.depth.data()[i] > 0.0;
    let Some(med) = median((0..errors.len()).filter(|&i| valid(i)).map(|i| errors[i]).collect()) else {
        return Ok(Mask::filled(w, h, false));
    };
    let limit = cfg.depth_error_factor * med;
    let data = (0..errors.len())
        .map(|i| valid(i) && (out.opacity.data()[i] < cfg.opacity_threshold || errors[i] > limit))
        .collect();
    Mask::from_vec(w, h, data)
}

/// Back-project masked pixels on the stride grid into new Gaussians colored from the
/// frame. Returns the number inserted.
pub fn insert_gaussians(
    map: &mut GaussianMap,
    mask: &Mask,
    frame: &Frame,
    pose: &CameraPose,
    k: &Intrinsics,
    cfg: &DensifyConfig,
) -> Result<usize> {
    mask.ensure_same_dims(&frame.depth, "insert mask")?;
    let c2w = pose.inverse();
    let before = map.len();
    for y in (0..mask.height()).step_by(cfg.stride) {
        for x in (0..mask.width()).step_by(cfg.stride) {
            let d = *frame.depth.get(x, y);
            if !*mask.get(x, y) || d <= 0.0 {
                continue;
            }
            let p_cam = k.unproject(x as f64, y as f64, d);
            let c = frame.rgb.get(x, y);
            let color = Vec3::new(c[0], c[1], c[2]).map(|v| v.clamp(0.0, 1.0));
            let scale = cfg.footprint * d / k.fx;
            map.push(Gaussian3D::isotropic(c2w.transform_point(&p_cam), scale, cfg.new_opacity, color));
        }
    }
    Ok(map.len() - before)
}

/// Seed a map from every valid-depth pixel of `frame` on the stride grid.
pub fn initialize_map(frame: &Frame, pose: &CameraPose, k: &Intrinsics, cfg: &DensifyConfig) -> Result<GaussianMap> {
    let mask = frame.depth.map(|d| *d > 0.0);
    let mut map = GaussianMap::new();
    insert_gaussians(&mut map, &mask, frame, pose, k, cfg)?;
    Ok(map)
}

/// Mean blend-weight importance over the views in which each Gaussian was projected.
/// `None` for Gaussians outside every view.
pub fn importance_per_gaussian(map_len: usize, renders: &[RenderOutput]) -> Result<Vec<Option<f64>>> {
    let mut sum = vec![0.0; map_len];
    let mut views = vec![0usize; map_len];
    for r in renders {
        if r.map_len() != map_len {
            return Err(Error::Dimension(format!(
                "render of a {}-Gaussian map used to prune a {map_len}-Gaussian map",
                r.map_len()
            )));
        }
        for (i, w) in r.blend_weight_sums().into_iter().enumerate() {
            if let Some(w) = w {
                sum[i] += w;
                views[i] += 1;
            }
        }
    }
    Ok(sum
        .into_iter()
        .zip(views)
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect())
}

/// Remove Gaussians whose importance falls below the floor. Gaussians that no render
/// saw are kept. Returns the number removed.
pub fn prune(map: &mut GaussianMap, renders: &[RenderOutput], cfg: &DensifyConfig) -> Result<usize> {
    if renders.is_empty() {
        return Err(Error::Data("prune needs at least one render".into()));
    }
    let imp = importance_per_gaussian(map.len(), renders)?;
    let before = map.len();
    let mut it = imp.iter();
    map.gaussians
        .retain(|_| it.next().unwrap().is_none_or(|v| v >= cfg.prune_importance_floor));
    Ok(before - map.len())
}
