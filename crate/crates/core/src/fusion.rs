//! Structure-preserving fused pseudo-target and the robust mapping loss.
//!
//! The fused target blends the rendered image with normalized sensor depth and the
//! Sobel edge magnitude of the render; the mapping loss combines color (L1 + SSIM),
//! masked depth L1 and an illumination term against the fused target whose weight
//! adapts to the color residual and is capped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, RgbImage, ScalarMap};
use crate::metrics::ssim_grad;
use crate::rasterizer::RenderOutput;
use crate::types::Frame;

/// Rendered depth is only supervised where rendered opacity reaches this.
pub const DEPTH_OPACITY_GATE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub lambda_r: f64,
    pub lambda_d: f64,
    pub lambda_g: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            lambda_r: 0.6,
            lambda_d: 0.2,
            lambda_g: 0.2,
        }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_r, self.lambda_d, self.lambda_g];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) || self.sum() <= 0.0 {
            return Err(Error::Config(format!(
                "fusion weights must be >= 0 with positive sum: {all:?}"
            )));
        }
        Ok(())
    }

    fn sum(&self) -> f64 {
        self.lambda_r + self.lambda_d + self.lambda_g
    }

    /// Weights rescaled to sum to one.
    pub fn normalized(&self) -> FusionWeights {
        let s = self.sum();
        FusionWeights {
            lambda_r: self.lambda_r / s,
            lambda_d: self.lambda_d / s,
            lambda_g: self.lambda_g / s,
        }
    }
}

/// Settings of the mapping loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub weights: FusionWeights,
    /// Cap on the illumination weight.
    pub tau: f64,
    pub epsilon: f64,
    /// When false the illumination term is dropped (weight 0), leaving the plain
    /// color + depth objective.
    pub enabled: bool,
    /// Rebuild the fused target at every mapping iteration (otherwise once per frame).
    pub fuse_every_iter: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            weights: FusionWeights::default(),
            tau: 0.5,
            epsilon: 1e-8,
            enabled: true,
            fuse_every_iter: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MappingLossReport {
    pub l_color: f64,
    pub l_depth: f64,
    pub l_illum: f64,
    pub omega_illum: f64,
    pub l_map: f64,
    /// Set when no pixel had valid depth under the opacity gate.
    pub no_valid_depth: bool,
}

/// Gradients of a scalar image loss w.r.t. the rendered buffers.
#[derive(Clone, Debug)]
pub struct ImageLossGrad {
    pub color: RgbImage,
    pub depth: ScalarMap,
    pub opacity: ScalarMap,
}

impl ImageLossGrad {
    pub fn zeros(w: usize, h: usize) -> Self {
        Self {
            color: RgbImage::filled(w, h, [0.0; 3]),
            depth: ScalarMap::filled(w, h, 0.0),
            opacity: ScalarMap::filled(w, h, 0.0),
        }
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel gradient magnitude of the channel-mean gray image, replicate borders.
pub fn sobel_edges(img: &RgbImage) -> ScalarMap {
    let gray = img.gray();
    let (w, h) = gray.dims();
    Image::from_fn(w, h, |x, y| {
        let (mut gx, mut gy) = (0.0, 0.0);
        for (j, (rx, ry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
            for i in 0..3 {
                let v = *gray.get_clamped(x as isize + i as isize - 1, y as isize + j as isize - 1);
                gx += rx[i] * v;
                gy += ry[i] * v;
            }
        }
        (gx * gx + gy * gy).sqrt()
    })
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn minmax_norm(map: &ScalarMap) -> ScalarMap {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if map.is_empty() || hi <= lo {
        return map.map(|_| 0.0);
    }
    map.map(|v| (v - lo) / (hi - lo))
}

/// Fused pseudo-target: weighted blend of the render, normalized depth and normalized
/// edges (each replicated to three channels), clamped to `[0, 1]`.
pub fn fuse(
    render: &RgbImage,
    depth_gt: &ScalarMap,
    edges: &ScalarMap,
    w: &FusionWeights,
) -> Result<RgbImage> {
    render.ensure_same_dims(depth_gt, "fuse depth")?;
    render.ensure_same_dims(edges, "fuse edges")?;
    let w = w.normalized();
    let d = minmax_norm(depth_gt);
    let g = minmax_norm(edges);
    let data = render
        .data()
        .iter()
        .zip(d.data().iter().zip(g.data()))
        .map(|(c, (dv, gv))| {
            let extra = w.lambda_d * dv + w.lambda_g * gv;
            c.map(|cv| (w.lambda_r * cv + extra).clamp(0.0, 1.0))
        })
        .collect();
    Image::from_vec(render.width(), render.height(), data)
}

/// Build the fused target for a render against the observed depth (edges from the render).
pub fn fused_target(render: &RgbImage, frame: &Frame, w: &FusionWeights) -> Result<RgbImage> {
    fuse(render, &frame.depth, &sobel_edges(render), w)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn mapping_loss(
    out: &RenderOutput,
    frame: &Frame,
    fused: &RgbImage,
    cfg: &FusionConfig,
) -> Result<MappingLossReport> {
    Ok(mapping_loss_with_grad(out, frame, fused, cfg, false)?.0)
}

/// Mapping loss and (optionally) its gradient w.r.t. the rendered buffers.
///
/// The fused target is differentiated through its render term only; the depth and
/// edge terms, the depth mask and the illumination weight are held fixed.
pub fn mapping_loss_with_grad(
    out: &RenderOutput,
    frame: &Frame,
    fused: &RgbImage,
    cfg: &FusionConfig,
    want_grad: bool,
) -> Result<(MappingLossReport, Option<ImageLossGrad>)> {
    let render = &out.color;
    render.ensure_same_dims(&frame.rgb, "mapping loss rgb")?;
    render.ensure_same_dims(fused, "mapping loss fused")?;
    let (w, h) = render.dims();
    let n3 = (3 * w * h) as f64;

    let mut l1_color = 0.0;
    let mut l_illum = 0.0;
    for ((c, gt), f) in render.data().iter().zip(frame.rgb.data()).zip(fused.data()) {
        for ch in 0..3 {
            l1_color += (c[ch] - gt[ch]).abs();
            l_illum += (c[ch] - f[ch]).abs();
        }
    }
    l1_color /= n3;
    l_illum /= n3;

    let (ssim, ssim_g) = ssim_grad(render, &frame.rgb)?;
    let l_color = 0.8 * l1_color + 0.2 * (1.0 - ssim);

    let mut depth_pixels = 0usize;
    let mut l_depth = 0.0;
    for ((d, gt), o) in out
        .depth
        .data()
        .iter()
        .zip(frame.depth.data())
        .zip(out.opacity.data())
    {
        if *gt > 0.0 && *o >= DEPTH_OPACITY_GATE {
            l_depth += (d - gt).abs();
            depth_pixels += 1;
        }
    }
    let no_valid_depth = depth_pixels == 0;
    if no_valid_depth {
        log::warn!("mapping loss: no valid depth pixel under the opacity gate");
    } else {
        l_depth /= depth_pixels as f64;
    }

    let (omega_illum, l_illum) = if cfg.enabled {
        ((l_illum / (l_color + cfg.epsilon)).min(cfg.tau), l_illum)
    } else {
        (0.0, 0.0)
    };
    let l_map = 0.5 * l_color + l_depth + omega_illum * l_illum;
    let report = MappingLossReport {
        l_color,
        l_depth,
        l_illum,
        omega_illum,
        l_map,
        no_valid_depth,
    };
    if !want_grad {
        return Ok((report, None));
    }

    let mut grad = ImageLossGrad::zeros(w, h);
    let lambda_r = cfg.weights.normalized().lambda_r;
    for (i, g) in grad.color.data_mut().iter_mut().enumerate() {
        let c = render.data()[i];
        let gt = frame.rgb.data()[i];
        let f = fused.data()[i];
        let sg = ssim_g.data()[i];
        for ch in 0..3 {
            let mut v = 0.5 * (0.8 * sign(c[ch] - gt[ch]) / n3 - 0.2 * sg[ch]);
            if omega_illum > 0.0 {
                let through = if f[ch] > 0.0 && f[ch] < 1.0 {
                    1.0 - lambda_r
                } else {
                    1.0
                };
                v += omega_illum * sign(c[ch] - f[ch]) * through / n3;
            }
            g[ch] = v;
        }
    }
    if !no_valid_depth {
        let nd = depth_pixels as f64;
        for (i, g) in grad.depth.data_mut().iter_mut().enumerate() {
            let gt = frame.depth.data()[i];
            if gt > 0.0 && out.opacity.data()[i] >= DEPTH_OPACITY_GATE {
                *g = sign(out.depth.data()[i] - gt) / nd;
            }
        }
    }
    Ok((report, Some(grad)))
}
