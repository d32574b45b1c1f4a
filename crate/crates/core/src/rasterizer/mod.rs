//! Differentiable splat rasterizer.
//!
//! Forward pass: project every Gaussian through the pinhole model, sort globally by
//! camera depth (ties by source index), bin into 16×16 pixel tiles and composite
//! front to back. Each pixel keeps its ordered list of `(gaussian, alpha, transmittance)`
//! records so [`render_backward`] can replay the blend without re-rendering.

mod backward;

pub use backward::{render_backward, GaussianGrad, RenderGradients};

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::image::{RgbImage, ScalarMap};
use crate::types::{CameraPose, GaussianMap, ImagePyramid, Intrinsics, Mat3, Vec3};

/// Gaussians whose camera-frame depth is at or below this are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Upper bound on any single per-pixel alpha.
pub const ALPHA_CLAMP: f64 = 0.999;
/// Contributions with unclamped alpha below this are treated as exactly zero.
pub const ALPHA_CUTOFF: f64 = 1e-10;
/// Added to both diagonal entries of every projected covariance (px²).
pub const COV2D_FLOOR: f64 = 0.3;
/// Compositing stops once transmittance drops below this (when early exit is on).
pub const EARLY_EXIT_TRANSMITTANCE: f64 = 1e-4;
pub const TILE_SIZE: usize = 16;

/// A Gaussian after projection into the image plane.
#[derive(Clone, Debug)]
pub struct ProjectedGaussian {
    pub center2d: Vector2<f64>,
    /// Regularized screen-space covariance.
    pub cov2d: Matrix2<f64>,
    pub depth_cam: f64,
    pub alpha: f64,
    pub color: Vec3,
    pub source_index: usize,
    pub(crate) conic: Matrix2<f64>,
    pub(crate) p_cam: Vec3,
    pub(crate) cov_cam: Mat3,
    pub(crate) jacobian: nalgebra::Matrix2x3<f64>,
    pub(crate) rot: Mat3,
    pub(crate) variances: Vec3,
    /// Inclusive pixel bounding box `(x0, y0, x1, y1)` of the support; `None` if off-image.
    pub(crate) bbox: Option<(usize, usize, usize, usize)>,
}

impl ProjectedGaussian {
    /// Unclamped alpha at pixel `(x, y)`, with the power term.
    #[inline]
    pub(crate) fn raw_alpha_at(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.center2d.x;
        let dy = y - self.center2d.y;
        let power = -0.5
            * (self.conic[(0, 0)] * dx * dx
                + 2.0 * self.conic[(0, 1)] * dx * dy
                + self.conic[(1, 1)] * dy * dy);
        (self.alpha * power.exp(), power)
    }
}

/// One entry of a pixel's compositing list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    /// Index into [`RenderOutput::projected`].
    pub projected: u32,
    /// Per-pixel alpha after the clamp.
    pub alpha: f64,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct TileContribs {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    /// Indices into `projected`, depth-sorted.
    pub gaussians: Vec<u32>,
    /// `offsets[i]..offsets[i + 1]` indexes `entries` for tile-local pixel `i`.
    pub offsets: Vec<u32>,
    pub entries: Vec<Contribution>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderOptions {
    pub early_exit: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { early_exit: true }
    }
}

/// Rendered color, raw alpha-weighted depth and opacity, plus backward-pass state.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: RgbImage,
    pub depth: ScalarMap,
    pub opacity: ScalarMap,
    /// Projected Gaussians in compositing (depth) order.
    pub projected: Vec<ProjectedGaussian>,
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
    pub(crate) map_len: usize,
    pub(crate) tiles: Vec<TileContribs>,
    pub(crate) tiles_x: usize,
}

impl RenderOutput {
    /// The ordered compositing list of pixel `(x, y)`.
    pub fn contributions(&self, x: usize, y: usize) -> &[Contribution] {
        let t = &self.tiles[(y / TILE_SIZE) * self.tiles_x + x / TILE_SIZE];
        let local = (y - t.y0) * t.w + (x - t.x0);
        &t.entries[t.offsets[local] as usize..t.offsets[local + 1] as usize]
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Number of Gaussians in the map this was rendered from.
    pub fn map_len(&self) -> usize {
        self.map_len
    }

    /// Per map Gaussian: `None` if it was not projected in this view, otherwise the
    /// sum over pixels of its blend weight `α̃·T`.
    pub fn blend_weight_sums(&self) -> Vec<Option<f64>> {
        let mut sums = vec![0.0; self.projected.len()];
        for tile in &self.tiles {
            for c in &tile.entries {
                sums[c.projected as usize] += c.alpha * c.transmittance;
            }
        }
        let mut out = vec![None; self.map_len];
        for (pg, s) in self.projected.iter().zip(sums) {
            out[pg.source_index] = Some(s);
        }
        out
    }
}

/// Project every Gaussian in front of the near plane. Output is in map order.
pub fn project(map: &GaussianMap, pose: &CameraPose, k: &Intrinsics) -> Vec<ProjectedGaussian> {
    let r_cw = pose.rotation_matrix();
    map.gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let p_cam = r_cw * g.mean + pose.translation;
            if p_cam.z <= NEAR_PLANE {
                return None;
            }
            let rot = g.rotation.to_rotation_matrix().into_inner();
            let variances = g.variances();
            let cov_world = rot * Mat3::from_diagonal(&variances) * rot.transpose();
            let cov_cam = r_cw * cov_world * r_cw.transpose();
            let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
            let jacobian = nalgebra::Matrix2x3::new(
                k.fx / z,
                0.0,
                -k.fx * x / (z * z),
                0.0,
                k.fy / z,
                -k.fy * y / (z * z),
            );
            let mut cov2d = jacobian * cov_cam * jacobian.transpose();
            cov2d = 0.5 * (cov2d + cov2d.transpose());
            cov2d[(0, 0)] += COV2D_FLOOR;
            cov2d[(1, 1)] += COV2D_FLOOR;
            let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
            let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)])
                / det;
            let center2d = Vector2::new(k.fx * x / z + k.cx, k.fy * y / z + k.cy);
            let alpha = g.opacity();
            let bbox = support_bbox(&center2d, &cov2d, alpha, k);
            Some(ProjectedGaussian {
                center2d,
                cov2d,
                depth_cam: z,
                alpha,
                color: g.color,
                source_index: i,
                conic,
                p_cam,
                cov_cam,
                jacobian,
                rot,
                variances,
                bbox,
            })
        })
        .collect()
}

/// Pixel box containing every pixel where the unclamped alpha reaches [`ALPHA_CUTOFF`].
fn support_bbox(
    center: &Vector2<f64>,
    cov2d: &Matrix2<f64>,
    alpha: f64,
    k: &Intrinsics,
) -> Option<(usize, usize, usize, usize)> {
    if alpha < ALPHA_CUTOFF {
        return None;
    }
    // dᵀΣ⁻¹d ≥ |d|²/λ_max, so |d|² ≤ λ_max·2·ln(α/cutoff) bounds the support.
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (lambda_max * 2.0 * (alpha / ALPHA_CUTOFF).ln()).sqrt() + 1e-9;
    let x0 = (center.x - radius).ceil();
    let x1 = (center.x + radius).floor();
    let y0 = (center.y - radius).ceil();
    let y1 = (center.y + radius).floor();
    if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
        return None;
    }
    if x1 < 0.0 || y1 < 0.0 || x0 > (k.width - 1) as f64 || y0 > (k.height - 1) as f64 {
        return None;
    }
    Some((
        x0.max(0.0) as usize,
        y0.max(0.0) as usize,
        (x1 as usize).min(k.width - 1),
        (y1 as usize).min(k.height - 1),
    ))
}

/// Sort by camera depth ascending, ties broken by source index.
pub(crate) fn sort_for_compositing(projected: &mut [ProjectedGaussian]) {
    projected.sort_by(|a, b| {
        a.depth_cam
            .total_cmp(&b.depth_cam)
            .then(a.source_index.cmp(&b.source_index))
    });
}

pub fn render(map: &GaussianMap, pose: &CameraPose, k: &Intrinsics) -> RenderOutput {
    render_with(map, pose, k, RenderOptions::default())
}

pub fn render_with(
    map: &GaussianMap,
    pose: &CameraPose,
    k: &Intrinsics,
    opts: RenderOptions,
) -> RenderOutput {
    let mut projected = project(map, pose, k);
    sort_for_compositing(&mut projected);

    let tiles_x = k.width.div_ceil(TILE_SIZE);
    let tiles_y = k.height.div_ceil(TILE_SIZE);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (idx, g) in projected.iter().enumerate() {
        if let Some((x0, y0, x1, y1)) = g.bbox {
            for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                    tile_lists[ty * tiles_x + tx].push(idx as u32);
                }
            }
        }
    }

    let tiles: Vec<(TileContribs, Vec<[f64; 5]>)> = tile_lists
        .into_par_iter()
        .enumerate()
        .map(|(t, gaussians)| {
            let x0 = (t % tiles_x) * TILE_SIZE;
            let y0 = (t / tiles_x) * TILE_SIZE;
            let w = TILE_SIZE.min(k.width - x0);
            let h = TILE_SIZE.min(k.height - y0);
            composite_tile(&projected, gaussians, x0, y0, w, h, opts)
        })
        .collect();

    let mut color = RgbImage::filled(k.width, k.height, [0.0; 3]);
    let mut depth = ScalarMap::filled(k.width, k.height, 0.0);
    let mut opacity = ScalarMap::filled(k.width, k.height, 0.0);
    let mut contribs = Vec::with_capacity(tiles.len());
    for (tile, pixels) in tiles {
        for ly in 0..tile.h {
            for lx in 0..tile.w {
                let px = &pixels[ly * tile.w + lx];
                let (x, y) = (tile.x0 + lx, tile.y0 + ly);
                *color.get_mut(x, y) = [px[0], px[1], px[2]];
                *depth.get_mut(x, y) = px[3];
                *opacity.get_mut(x, y) = px[4];
            }
        }
        contribs.push(tile);
    }

    RenderOutput {
        color,
        depth,
        opacity,
        projected,
        pose: *pose,
        intrinsics: *k,
        map_len: map.len(),
        tiles: contribs,
        tiles_x,
    }
}

fn composite_tile(
    projected: &[ProjectedGaussian],
    gaussians: Vec<u32>,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    opts: RenderOptions,
) -> (TileContribs, Vec<[f64; 5]>) {
    let mut offsets = Vec::with_capacity(w * h + 1);
    let mut entries = Vec::new();
    let mut pixels = Vec::with_capacity(w * h);
    offsets.push(0u32);
    for ly in 0..h {
        let y = y0 + ly;
        for lx in 0..w {
            let x = x0 + lx;
            let mut t = 1.0f64;
            let mut out = [0.0f64; 5];
            for &gi in &gaussians {
                let g = &projected[gi as usize];
                let (bx0, by0, bx1, by1) = g.bbox.expect("binned gaussians have a bbox");
                if x < bx0 || x > bx1 || y < by0 || y > by1 {
                    continue;
                }
                let (raw, _) = g.raw_alpha_at(x as f64, y as f64);
                if raw < ALPHA_CUTOFF {
                    continue;
                }
                let a = raw.min(ALPHA_CLAMP);
                let wgt = a * t;
                out[0] += g.color.x * wgt;
                out[1] += g.color.y * wgt;
                out[2] += g.color.z * wgt;
                out[3] += g.depth_cam * wgt;
                out[4] += wgt;
                entries.push(Contribution {
                    projected: gi,
                    alpha: a,
                    transmittance: t,
                });
                t *= 1.0 - a;
                if opts.early_exit && t < EARLY_EXIT_TRANSMITTANCE {
                    break;
                }
            }
            pixels.push(out);
            offsets.push(entries.len() as u32);
        }
    }
    (
        TileContribs {
            x0,
            y0,
            w,
            h,
            gaussians,
            offsets,
            entries,
        },
        pixels,
    )
}

/// Opacity maps rendered with intrinsics scaled by each entry of `scales`.
pub fn render_pyramid(
    map: &GaussianMap,
    pose: &CameraPose,
    k: &Intrinsics,
    scales: &[f64],
) -> ImagePyramid {
    ImagePyramid {
        levels: scales
            .iter()
            .map(|&s| (s, render(map, pose, &k.scaled(s)).opacity))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{logit, Gaussian3D, Quat};
    use approx::assert_relative_eq;

    fn k8() -> Intrinsics {
        Intrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap()
    }

    #[test]
    fn on_axis_gaussian_projects_to_principal_point() {
        let k = Intrinsics::new(50.0, 50.0, 31.5, 23.5, 64, 48).unwrap();
        let map: GaussianMap = [Gaussian3D::isotropic(
            Vec3::new(0.0, 0.0, 2.0),
            0.01,
            0.5,
            Vec3::zeros(),
        )]
        .into_iter()
        .collect();
        let p = project(&map, &CameraPose::identity(), &k);
        assert_eq!(p.len(), 1);
        assert_relative_eq!(p[0].center2d, Vector2::new(31.5, 23.5), epsilon = 1e-12);
        assert_eq!(p[0].depth_cam, 2.0);
    }

    #[test]
    fn isotropic_cov2d_matches_symbolic_jacobian() {
        // Oracle: on-axis J = diag(f/z, f/z) with zero third column, so JσI Jᵀ = (fσ/z)² I.
        let (f, sigma, z) = (40.0, 0.03, 1.5);
        let k = Intrinsics::new(f, f, 16.0, 16.0, 32, 32).unwrap();
        let map: GaussianMap = [Gaussian3D::isotropic(
            Vec3::new(0.0, 0.0, z),
            sigma,
            0.5,
            Vec3::zeros(),
        )]
        .into_iter()
        .collect();
        let p = project(&map, &CameraPose::identity(), &k);
        let expected = (f * sigma / z).powi(2) + COV2D_FLOOR;
        assert_relative_eq!(p[0].cov2d[(0, 0)], expected, epsilon = 1e-12);
        assert_relative_eq!(p[0].cov2d[(1, 1)], expected, epsilon = 1e-12);
        assert_relative_eq!(p[0].cov2d[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn behind_camera_is_culled() {
        let map: GaussianMap = [Gaussian3D::isotropic(
            Vec3::new(0.0, 0.0, -1.0),
            0.1,
            0.5,
            Vec3::zeros(),
        )]
        .into_iter()
        .collect();
        assert!(project(&map, &CameraPose::identity(), &k8()).is_empty());
        let out = render(&map, &CameraPose::identity(), &k8());
        assert!(out.opacity.data().iter().all(|&o| o == 0.0));
    }

    fn wall(z: f64, opacity: f64, color: Vec3) -> Gaussian3D {
        // Huge footprint so alpha is ~opacity at every pixel.
        Gaussian3D {
            mean: Vec3::new(0.0, 0.0, z),
            log_scale: Vec3::repeat(100f64.ln()),
            rotation: Quat::identity(),
            opacity_logit: logit(opacity),
            color,
        }
    }

    #[test]
    fn single_clamped_gaussian_composite() {
        let mut g = wall(2.0, 0.5, Vec3::new(1.0, 0.0, 0.0));
        g.opacity_logit = 30.0;
        let map: GaussianMap = [g].into_iter().collect();
        let out = render(&map, &CameraPose::identity(), &k8());
        let c = out.color.get(4, 4);
        assert_relative_eq!(c[0], 0.999, epsilon = 1e-9);
        assert_eq!(c[1], 0.0);
        assert_relative_eq!(*out.depth.get(4, 4), 1.998, epsilon = 1e-8);
        assert_relative_eq!(*out.opacity.get(4, 4), 0.999, epsilon = 1e-9);
    }

    #[test]
    fn two_coincident_half_alpha_gaussians() {
        // Center pixel: exp(0) = 1, so per-pixel alpha equals the opacity exactly.
        let map: GaussianMap = [
            wall(2.0, 0.5, Vec3::zeros()),
            wall(1.0, 0.5, Vec3::zeros()),
        ]
        .into_iter()
        .collect();
        let out = render(&map, &CameraPose::identity(), &k8());
        assert_relative_eq!(*out.opacity.get(4, 4), 0.75, epsilon = 1e-12);
        assert_relative_eq!(*out.depth.get(4, 4), 1.0, epsilon = 1e-12);
        let list = out.contributions(4, 4);
        assert_eq!(list.len(), 2);
        assert_eq!(out.projected[list[0].projected as usize].source_index, 1);
        assert_eq!(list[1].transmittance, 0.5);
    }

    #[test]
    fn empty_map_renders_zero_pyramid() {
        let pyr = render_pyramid(&GaussianMap::new(), &CameraPose::identity(), &k8(), &DEFAULT_SCALES);
        assert_eq!(pyr.levels.len(), 3);
        for (_, m) in &pyr.levels {
            assert!(m.data().iter().all(|&o| o == 0.0));
        }
        assert_eq!(pyr.level(0.25).unwrap().dims(), (2, 2));
    }

    const DEFAULT_SCALES: [f64; 3] = crate::types::DEFAULT_PYRAMID_SCALES;

    #[test]
    fn unit_pyramid_equals_render() {
        let map: GaussianMap = [wall(2.0, 0.6, Vec3::new(0.2, 0.3, 0.4))].into_iter().collect();
        let pyr = render_pyramid(&map, &CameraPose::identity(), &k8(), &[1.0]);
        let out = render(&map, &CameraPose::identity(), &k8());
        assert_eq!(pyr.levels[0].1, out.opacity);
    }

    #[test]
    fn dense_wall_is_opaque_at_every_scale() {
        let k = Intrinsics::new(40.0, 40.0, 31.5, 23.5, 64, 48).unwrap();
        let mut map = GaussianMap::new();
        let z = 2.0;
        for y in (0..48).step_by(2) {
            for x in (0..64).step_by(2) {
                let p = k.unproject(x as f64, y as f64, z);
                map.push(Gaussian3D::isotropic(p, 3.0 * z / k.fx, 0.99, Vec3::repeat(0.5)));
            }
        }
        let full = render(&map, &CameraPose::identity(), &k).opacity.mean();
        assert!(full >= 0.99, "full-res mean opacity {full}");
        let pyr = render_pyramid(&map, &CameraPose::identity(), &k, &DEFAULT_SCALES);
        for (s, m) in &pyr.levels {
            assert!(m.mean() >= 0.99, "scale {s}: {}", m.mean());
        }
    }

    #[test]
    fn transmittance_is_non_increasing_along_lists() {
        let map: GaussianMap = (0..10)
            .map(|i| wall(1.0 + i as f64 * 0.1, 0.3, Vec3::repeat(0.1 * i as f64)))
            .collect();
        let out = render(&map, &CameraPose::identity(), &k8());
        for y in 0..8 {
            for x in 0..8 {
                let list = out.contributions(x, y);
                for w in list.windows(2) {
                    assert!(w[1].transmittance <= w[0].transmittance);
                }
            }
        }
    }
}
