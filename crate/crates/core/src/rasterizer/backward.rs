use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector6};
use rayon::prelude::*;

use super::{RenderOutput, TileContribs, ALPHA_CLAMP};
use crate::image::{RgbImage, ScalarMap};
use crate::types::{vee_trace, Mat3, Vec3};

/// Loss gradient for one Gaussian. `rotation` is the local tangent of `q ← q·Exp(δ)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vec3,
    pub log_scale: Vec3,
    pub rotation: Vec3,
    pub opacity_logit: f64,
    pub color: Vec3,
}

/// Gradients for every Gaussian in the map (indexed like the map) and the pose tangent
/// `(ρ, φ)` of [`crate::types::CameraPose::retract`].
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub gaussians: Vec<GaussianGrad>,
    pub pose: Vector6<f64>,
}

/// Screen-space gradient accumulator for one projected Gaussian.
#[derive(Clone, Copy, Default)]
struct Grad2D {
    color: Vec3,
    depth: f64,
    alpha: f64,
    center: Vector2<f64>,
    conic: Matrix2<f64>,
}

impl Grad2D {
    fn add(&mut self, o: &Grad2D) {
        self.color += o.color;
        self.depth += o.depth;
        self.alpha += o.alpha;
        self.center += o.center;
        self.conic += o.conic;
    }
}

/// Backpropagate per-pixel output gradients through compositing and projection.
///
/// Tiles are processed in parallel into tile-local buffers which are then merged in
/// tile order, so results do not depend on thread scheduling.
pub fn render_backward(
    out: &RenderOutput,
    grad_color: &RgbImage,
    grad_depth: &ScalarMap,
    grad_opacity: &ScalarMap,
) -> RenderGradients {
    let tile_grads: Vec<Vec<Grad2D>> = out
        .tiles
        .par_iter()
        .map(|tile| backward_tile(out, tile, grad_color, grad_depth, grad_opacity))
        .collect();

    let mut screen = vec![Grad2D::default(); out.projected.len()];
    for (tile, grads) in out.tiles.iter().zip(&tile_grads) {
        for (&gi, g) in tile.gaussians.iter().zip(grads) {
            screen[gi as usize].add(g);
        }
    }

    let k = &out.intrinsics;
    let r_cw = out.pose.rotation_matrix();
    let per_gaussian: Vec<(usize, GaussianGrad, Vector6<f64>)> = out
        .projected
        .par_iter()
        .zip(screen.par_iter())
        .map(|(pg, sg)| {
            let (x, y, z) = (pg.p_cam.x, pg.p_cam.y, pg.p_cam.z);
            let a = &pg.conic;
            // conic = cov2d⁻¹
            let g_cov2d = -(a * sg.conic * a);
            let g_cov2d = 0.5 * (g_cov2d + g_cov2d.transpose());
            let j = &pg.jacobian;
            let g_cov_cam: Mat3 = j.transpose() * g_cov2d * j;
            let g_j: Matrix2x3<f64> = 2.0 * g_cov2d * j * pg.cov_cam;

            let mut g_p = Vec3::zeros();
            // center2d
            g_p.x += sg.center.x * k.fx / z;
            g_p.y += sg.center.y * k.fy / z;
            g_p.z += -sg.center.x * k.fx * x / (z * z) - sg.center.y * k.fy * y / (z * z);
            // depth
            g_p.z += sg.depth;
            // Jacobian entries
            let z2 = z * z;
            let z3 = z2 * z;
            g_p.x += g_j[(0, 2)] * (-k.fx / z2);
            g_p.y += g_j[(1, 2)] * (-k.fy / z2);
            g_p.z += g_j[(0, 0)] * (-k.fx / z2)
                + g_j[(1, 1)] * (-k.fy / z2)
                + g_j[(0, 2)] * (2.0 * k.fx * x / z3)
                + g_j[(1, 2)] * (2.0 * k.fy * y / z3);

            let mut g_pose = Vector6::zeros();
            let rho = g_p;
            let mut phi = pg.p_cam.cross(&g_p);
            phi += vee_trace(&(pg.cov_cam * g_cov_cam - g_cov_cam * pg.cov_cam));
            g_pose.fixed_rows_mut::<3>(0).copy_from(&rho);
            g_pose.fixed_rows_mut::<3>(3).copy_from(&phi);

            let mean = r_cw.transpose() * g_p;
            let g_cov_world = r_cw.transpose() * g_cov_cam * r_cw;
            let rot = &pg.rot;
            let g_diag = rot.transpose() * g_cov_world * rot;
            let log_scale = Vec3::new(
                g_diag[(0, 0)] * 2.0 * pg.variances.x,
                g_diag[(1, 1)] * 2.0 * pg.variances.y,
                g_diag[(2, 2)] * 2.0 * pg.variances.z,
            );
            let g_rot = 2.0 * g_cov_world * rot * Mat3::from_diagonal(&pg.variances);
            let rotation = vee_trace(&(g_rot.transpose() * rot));
            let opacity_logit = sg.alpha * pg.alpha * (1.0 - pg.alpha);

            (
                pg.source_index,
                GaussianGrad {
                    mean,
                    log_scale,
                    rotation,
                    opacity_logit,
                    color: sg.color,
                },
                g_pose,
            )
        })
        .collect();

    let mut gaussians = vec![GaussianGrad::default(); out.map_len];
    let mut pose = Vector6::zeros();
    for (idx, g, gp) in per_gaussian {
        gaussians[idx] = g;
        pose += gp;
    }
    RenderGradients { gaussians, pose }
}

fn backward_tile(
    out: &RenderOutput,
    tile: &TileContribs,
    grad_color: &RgbImage,
    grad_depth: &ScalarMap,
    grad_opacity: &ScalarMap,
) -> Vec<Grad2D> {
    let mut local = vec![Grad2D::default(); tile.gaussians.len()];
    if tile.entries.is_empty() {
        return local;
    }
    // tile.gaussians is sorted ascending, so a binary search maps projected → local slot.
    let slot = |gi: u32| {
        tile.gaussians
            .binary_search(&gi)
            .expect("contribution from a gaussian binned in this tile")
    };
    for ly in 0..tile.h {
        for lx in 0..tile.w {
            let (x, y) = (tile.x0 + lx, tile.y0 + ly);
            let li = ly * tile.w + lx;
            let list = &tile.entries[tile.offsets[li] as usize..tile.offsets[li + 1] as usize];
            if list.is_empty() {
                continue;
            }
            let gc = grad_color.get(x, y);
            let gc = Vec3::new(gc[0], gc[1], gc[2]);
            let gd = *grad_depth.get(x, y);
            let go = *grad_opacity.get(x, y);
            // Σ_{m>k} v_m·a_m·T_m, accumulated back to front.
            let mut behind = 0.0;
            for c in list.iter().rev() {
                let pg = &out.projected[c.projected as usize];
                let v = pg.color.dot(&gc) + pg.depth_cam * gd + go;
                let w = c.alpha * c.transmittance;
                let s = slot(c.projected);
                let g = &mut local[s];
                g.color += gc * w;
                g.depth += gd * w;
                let g_a = v * c.transmittance - behind / (1.0 - c.alpha);
                behind += v * w;

                let (raw, _) = pg.raw_alpha_at(x as f64, y as f64);
                if raw >= ALPHA_CLAMP {
                    continue;
                }
                g.alpha += g_a * raw / pg.alpha;
                let g_power = g_a * raw;
                let d = Vector2::new(x as f64 - pg.center2d.x, y as f64 - pg.center2d.y);
                g.center += g_power * (pg.conic * d);
                g.conic += -0.5 * g_power * (d * d.transpose());
            }
        }
    }
    local
}
