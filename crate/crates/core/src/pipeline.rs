//! The per-frame SLAM loop (judge → enhance → track → densify → map), its on-disk
//! artifacts, offline evaluation and the ablation switchboard.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    create_dir, format_trajectory, parse_groundtruth, read_rgb, read_to_string, write_file, write_rgb, Sequence,
};
use crate::degradation::{judge, DegradationReport};
use crate::densify::{densify_mask, importance_score, initialize_map, insert_gaussians, prune, DensifyConfig, GateDirection};
use crate::enhance::{maybe_enhance, EnhancerBinding, EnhancerMode, Provenance};
use crate::error::{Error, Result};
use crate::fusion::FusionWeights;
use crate::image::RgbImage;
use crate::mapping::{map_views, MapperConfig};
use crate::metrics::{ate_rmse, psnr, ssim, MetricsRecord, Trajectory};
use crate::rasterizer::{render, render_pyramid};
use crate::tracking::{track, TrackerConfig};
use crate::types::{CameraPose, Frame, GaussianMap};

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const METRICS_FILE: &str = "metrics.json";
pub const MAP_FILE: &str = "map.json";
pub const LOG_FILE: &str = "frames.jsonl";
pub const RENDER_DIR: &str = "renders";

/// Switches for the three contributions; all off is the plain splatting baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub adaptive_tracking: bool,
    pub sp_rofusion: bool,
    pub enhancement: bool,
}

impl AblationFlags {
    pub fn all() -> Self {
        Self { adaptive_tracking: true, sp_rofusion: true, enhancement: true }
    }

    pub fn none() -> Self {
        Self { adaptive_tracking: false, sp_rofusion: false, enhancement: false }
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::all()
    }
}

/// `all`, `none`, or a comma list of enabled flags out of
/// `adaptive_tracking`, `sp_rofusion`, `enhancement`.
impl FromStr for AblationFlags {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => return Ok(Self::all()),
            "none" | "" => return Ok(Self::none()),
            _ => {}
        }
        let mut f = Self::none();
        for name in s.split(',').map(str::trim) {
            match name {
                "adaptive_tracking" | "adaptive" => f.adaptive_tracking = true,
                "sp_rofusion" | "fusion" => f.sp_rofusion = true,
                "enhancement" | "enhance" => f.enhancement = true,
                _ => return Err(Error::Config(format!("unknown ablation flag {name:?}"))),
            }
        }
        Ok(f)
    }
}

impl fmt::Display for AblationFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = [
            (self.adaptive_tracking, "adaptive_tracking"),
            (self.sp_rofusion, "sp_rofusion"),
            (self.enhancement, "enhancement"),
        ]
        .into_iter()
        .filter_map(|(b, n)| b.then_some(n))
        .collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join(","))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tracker: TrackerConfig,
    pub densify: DensifyConfig,
    pub mapper: MapperConfig,
    pub enhancer: EnhancerBinding,
    pub flags: AblationFlags,
    /// Stride of the initial map built from frame 0.
    pub init_stride: usize,
    /// Prune every this many frames (0 disables).
    pub prune_every: usize,
    /// Number of most recent poses rendered to score Gaussians when pruning.
    pub prune_views: usize,
    /// Number of recent tracked frames, the current one included, each map step cycles over.
    pub map_window: usize,
    /// Abort once more than this fraction of the sequence failed to track.
    pub max_diverged_fraction: f64,
    /// Recorded with the outputs; the loop itself draws no random numbers.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tracker: TrackerConfig::default(),
            // Sub-pixel, nearly opaque seeds: wider ones overlap their neighbours in the
            // image and bias rendered depth towards the camera.
            densify: DensifyConfig { footprint: 0.7, new_opacity: 0.95, ..DensifyConfig::default() },
            mapper: MapperConfig::default(),
            enhancer: EnhancerBinding::classical(),
            flags: AblationFlags::all(),
            init_stride: 1,
            prune_every: 5,
            prune_views: 3,
            map_window: 4,
            max_diverged_fraction: 0.2,
            seed: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse {value:?} for {key} as a boolean"))),
    }
}

/// `1.0:0.5,0.5:0.3,0.25:0.2`
fn parse_scale_weights(key: &str, value: &str) -> Result<Vec<(f64, f64)>> {
    value
        .split(',')
        .map(|pair| {
            let (s, w) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("{key}: expected scale:weight, got {pair:?}")))?;
            Ok((parse_value(key, s.trim())?, parse_value(key, w.trim())?))
        })
        .collect()
}

impl PipelineConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.tracker;
        let d = &mut self.densify;
        let m = &mut self.mapper;
        let e = &mut self.enhancer;
        match key.trim() {
            "seed" => self.seed = parse_value(key, v)?,
            "ablation" => self.flags = v.parse()?,
            "ablation.adaptive_tracking" => self.flags.adaptive_tracking = parse_bool(key, v)?,
            "ablation.sp_rofusion" => self.flags.sp_rofusion = parse_bool(key, v)?,
            "ablation.enhancement" => self.flags.enhancement = parse_bool(key, v)?,
            "pipeline.init_stride" => self.init_stride = parse_value(key, v)?,
            "pipeline.prune_every" => self.prune_every = parse_value(key, v)?,
            "pipeline.prune_views" => self.prune_views = parse_value(key, v)?,
            "pipeline.map_window" => self.map_window = parse_value(key, v)?,
            "pipeline.max_diverged_fraction" => self.max_diverged_fraction = parse_value(key, v)?,
            "tracker.gamma_im" => t.gamma_im = parse_value(key, v)?,
            "tracker.gamma_depth" => t.gamma_depth = parse_value(key, v)?,
            "tracker.rho" => t.rho = parse_value(key, v)?,
            "tracker.lambda_r" => t.lambda_r = parse_value(key, v)?,
            "tracker.opacity_gate" => t.opacity_gate = parse_value(key, v)?,
            "tracker.fallback_gate" => t.fallback_gate = parse_value(key, v)?,
            "tracker.iters" => t.iters = parse_value(key, v)?,
            "tracker.trust_radius" => t.trust_radius = parse_value(key, v)?,
            "tracker.additive_init" => t.additive_init = parse_bool(key, v)?,
            "tracker.pivot" => t.pivot = parse_bool(key, v)?,
            "densify.opacity_threshold" => d.opacity_threshold = parse_value(key, v)?,
            "densify.depth_error_factor" => d.depth_error_factor = parse_value(key, v)?,
            "densify.scale_weights" => d.scale_weights = parse_scale_weights(key, v)?,
            "densify.imp_threshold" => d.imp_threshold = parse_value(key, v)?,
            "densify.gate" => {
                d.gate = match v {
                    "above" => GateDirection::Above,
                    "below" => GateDirection::Below,
                    _ => return Err(Error::Config(format!("{key}: expected above|below, got {v:?}"))),
                }
            }
            "densify.prune_importance_floor" => d.prune_importance_floor = parse_value(key, v)?,
            "densify.stride" => d.stride = parse_value(key, v)?,
            "densify.new_opacity" => d.new_opacity = parse_value(key, v)?,
            "densify.footprint" => d.footprint = parse_value(key, v)?,
            "mapping.iters" => m.iters = parse_value(key, v)?,
            "mapping.lr_means" => m.lr_means = parse_value(key, v)?,
            "mapping.lr_colors" => m.lr_colors = parse_value(key, v)?,
            "mapping.lr_opacity" => m.lr_opacity = parse_value(key, v)?,
            "mapping.lr_log_scale" => m.lr_log_scale = parse_value(key, v)?,
            "mapping.lr_rotation" => m.lr_rotation = parse_value(key, v)?,
            "mapping.divergence_factor" => m.divergence_factor = parse_value(key, v)?,
            "fusion.lambda_r" => m.fusion.weights.lambda_r = parse_value(key, v)?,
            "fusion.lambda_d" => m.fusion.weights.lambda_d = parse_value(key, v)?,
            "fusion.lambda_g" => m.fusion.weights.lambda_g = parse_value(key, v)?,
            "fusion.tau" => m.fusion.tau = parse_value(key, v)?,
            "fusion.epsilon" => m.fusion.epsilon = parse_value(key, v)?,
            "fusion.fuse_every_iter" => m.fusion.fuse_every_iter = parse_bool(key, v)?,
            "enhancer.mode" => e.mode = v.parse()?,
            "enhancer.endpoint" => e.endpoint = (!v.is_empty()).then(|| v.to_string()),
            "enhancer.timeout_ms" => e.timeout_ms = parse_value(key, v)?,
            "enhancer.fallback_on_error" => e.fallback_on_error = parse_bool(key, v)?,
            "enhancer.target_mu" => e.target_mu = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Apply a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { path: origin.to_path_buf(), line: no + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key = value, got {line:?}")))?;
            self.set(k, v).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&read_to_string(path)?, path)?;
        Ok(cfg)
    }

    /// Flat text that `apply_text` reads back into this configuration.
    pub fn to_text(&self) -> String {
        let (t, d, m, e) = (&self.tracker, &self.densify, &self.mapper, &self.enhancer);
        let w = &m.fusion.weights;
        let gate = match d.gate {
            GateDirection::Above => "above",
            GateDirection::Below => "below",
        };
        let mode = match e.mode {
            EnhancerMode::Off => "off",
            EnhancerMode::Classical => "classical",
            EnhancerMode::Sidecar => "sidecar",
        };
        let scales: Vec<String> = d.scale_weights.iter().map(|(s, w)| format!("{s}:{w}")).collect();
        let lines = [
            format!("seed = {}", self.seed),
            format!("ablation = {}", self.flags),
            format!("pipeline.init_stride = {}", self.init_stride),
            format!("pipeline.prune_every = {}", self.prune_every),
            format!("pipeline.prune_views = {}", self.prune_views),
            format!("pipeline.map_window = {}", self.map_window),
            format!("pipeline.max_diverged_fraction = {}", self.max_diverged_fraction),
            format!("tracker.gamma_im = {}", t.gamma_im),
            format!("tracker.gamma_depth = {}", t.gamma_depth),
            format!("tracker.rho = {}", t.rho),
            format!("tracker.lambda_r = {}", t.lambda_r),
            format!("tracker.opacity_gate = {}", t.opacity_gate),
            format!("tracker.fallback_gate = {}", t.fallback_gate),
            format!("tracker.iters = {}", t.iters),
            format!("tracker.trust_radius = {}", t.trust_radius),
            format!("tracker.additive_init = {}", t.additive_init),
            format!("tracker.pivot = {}", t.pivot),
            format!("densify.opacity_threshold = {}", d.opacity_threshold),
            format!("densify.depth_error_factor = {}", d.depth_error_factor),
            format!("densify.scale_weights = {}", scales.join(",")),
            format!("densify.imp_threshold = {}", d.imp_threshold),
            format!("densify.gate = {gate}"),
            format!("densify.prune_importance_floor = {}", d.prune_importance_floor),
            format!("densify.stride = {}", d.stride),
            format!("densify.new_opacity = {}", d.new_opacity),
            format!("densify.footprint = {}", d.footprint),
            format!("mapping.iters = {}", m.iters),
            format!("mapping.lr_means = {}", m.lr_means),
            format!("mapping.lr_colors = {}", m.lr_colors),
            format!("mapping.lr_opacity = {}", m.lr_opacity),
            format!("mapping.lr_log_scale = {}", m.lr_log_scale),
            format!("mapping.lr_rotation = {}", m.lr_rotation),
            format!("mapping.divergence_factor = {}", m.divergence_factor),
            format!("fusion.lambda_r = {}", w.lambda_r),
            format!("fusion.lambda_d = {}", w.lambda_d),
            format!("fusion.lambda_g = {}", w.lambda_g),
            format!("fusion.tau = {}", m.fusion.tau),
            format!("fusion.epsilon = {}", m.fusion.epsilon),
            format!("fusion.fuse_every_iter = {}", m.fusion.fuse_every_iter),
            format!("enhancer.mode = {mode}"),
            format!("enhancer.endpoint = {}", e.endpoint.as_deref().unwrap_or("")),
            format!("enhancer.timeout_ms = {}", e.timeout_ms),
            format!("enhancer.fallback_on_error = {}", e.fallback_on_error),
            format!("enhancer.target_mu = {}", e.target_mu),
        ];
        lines.join("\n") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.densify.validate()?;
        self.mapper.validate()?;
        self.enhancer.validate()?;
        if self.mapper.iters == 0 {
            return Err(Error::Config("mapping iters must be > 0".into()));
        }
        if self.init_stride == 0 || self.prune_views == 0 || self.map_window == 0 {
            return Err(Error::Config("init_stride, prune_views and map_window must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.max_diverged_fraction) {
            return Err(Error::Config("max_diverged_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Stage settings after the ablation flags are applied.
    pub fn effective(&self) -> (TrackerConfig, MapperConfig, EnhancerBinding) {
        let mut tracker = self.tracker;
        tracker.adaptive = self.flags.adaptive_tracking;
        let mut mapper = self.mapper;
        if !self.flags.sp_rofusion {
            mapper.fusion.weights = FusionWeights { lambda_r: 1.0, lambda_d: 0.0, lambda_g: 0.0 };
            mapper.fusion.enabled = false;
        }
        let mut enhancer = self.enhancer.clone();
        if !self.flags.enhancement {
            enhancer.mode = EnhancerMode::Off;
            enhancer.endpoint = None;
        }
        (tracker, mapper, enhancer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Judge,
    Enhance,
    Initialize,
    Track,
    Densify,
    Map,
    Prune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub init_loss: f64,
    pub best_loss: f64,
    pub iterations: usize,
    pub fallback_gate: bool,
    pub diverged: bool,
}

/// What happened to one frame, in stage order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub index: usize,
    pub timestamp: f64,
    pub stages: Vec<Stage>,
    pub judge: DegradationReport,
    pub provenance: Provenance,
    pub track: Option<TrackSummary>,
    pub importance: Option<f64>,
    pub densify_gate_open: bool,
    pub inserted: usize,
    pub map_loss: Option<f64>,
    pub pruned: usize,
    pub map_size: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    /// Final map rendered at every estimated pose.
    pub renders: Vec<RgbImage>,
    pub map: GaussianMap,
    pub log: Vec<FrameLog>,
    pub metrics: MetricsRecord,
    pub diverged_frames: usize,
}

impl RunOutput {
    /// Whether the degradation judge fired on any frame, enhancer bound or not.
    pub fn enhancement_triggered(&self) -> bool {
        self.log.iter().any(|f| f.judge.trigger)
    }
}

/// Run the full loop over `seq`. Metrics compare against the sequence itself; use
/// `evaluate` to score against a different reference (e.g. the clean source of a
/// degraded sequence).
pub fn run(seq: &Sequence, cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if seq.frames.is_empty() {
        return Err(Error::Data(format!("sequence {:?} has no frames", seq.manifest.name)));
    }
    let k = seq.manifest.intrinsics;
    let (tracker, mapper, enhancer) = cfg.effective();
    let n = seq.frames.len();
    let mut map = GaussianMap::new();
    let mut poses: Vec<CameraPose> = Vec::with_capacity(n);
    let mut log = Vec::with_capacity(n);
    let mut diverged = 0usize;
    let mut window: Vec<(Frame, CameraPose)> = Vec::new();

    for (i, raw) in seq.frames.iter().enumerate() {
        raw.validate(&k)?;
        let report = judge(&raw.rgb);
        let (frame, provenance) = maybe_enhance(raw, &report, &enhancer);
        let mut entry = FrameLog {
            index: i,
            timestamp: raw.timestamp,
            stages: vec![Stage::Judge, Stage::Enhance],
            judge: report,
            provenance,
            track: None,
            importance: None,
            densify_gate_open: false,
            inserted: 0,
            map_loss: None,
            pruned: 0,
            map_size: 0,
        };
        if i == 0 {
            let init = DensifyConfig { stride: cfg.init_stride, ..cfg.densify.clone() };
            map = initialize_map(&frame, &CameraPose::identity(), &k, &init)?;
            if map.is_empty() {
                return Err(Error::Data("first frame has no valid depth to initialize the map".into()));
            }
            entry.stages.push(Stage::Initialize);
            // Refine the seed map on its own frame so the first tracked frame sees an
            // opaque, fitted surface.
            match map_views(&mut map, &[(&frame, CameraPose::identity())], &k, &mapper) {
                Ok(rep) => entry.map_loss = Some(rep.last.l_map),
                Err(Error::Divergence(msg)) => log::warn!("frame 0: mapping skipped ({msg})"),
                Err(e) => return Err(e),
            }
            entry.stages.push(Stage::Map);
            poses.push(CameraPose::identity());
            window.push((frame, CameraPose::identity()));
            entry.map_size = map.len();
            log::info!("frame 0: initialized {} Gaussians", map.len());
            log.push(entry);
            continue;
        }

        let tr = track(&map, &frame, &k, &poses, &tracker)?;
        entry.stages.push(Stage::Track);
        entry.track = Some(TrackSummary {
            init_loss: tr.init_loss,
            best_loss: tr.best_loss,
            iterations: tr.trace.len(),
            fallback_gate: tr.fallback_gate,
            diverged: tr.diverged,
        });
        let pose = tr.pose;
        poses.push(pose);
        if tr.diverged {
            diverged += 1;
            log::warn!("frame {i}: tracking diverged ({diverged} so far)");
            if diverged as f64 > cfg.max_diverged_fraction * n as f64 {
                return Err(Error::Divergence(format!(
                    "tracking diverged on {diverged} of {n} frames (limit {:.0}%), last at frame {i}",
                    cfg.max_diverged_fraction * 100.0
                )));
            }
            entry.map_size = map.len();
            log.push(entry);
            continue;
        }

        let importance = importance_score(&render_pyramid(&map, &pose, &k, &cfg.densify.scales()), &cfg.densify)?;
        entry.importance = Some(importance);
        entry.densify_gate_open = cfg.densify.gate_open(importance);
        if entry.densify_gate_open {
            let out = render(&map, &pose, &k);
            let mask = densify_mask(&out, &frame, &cfg.densify)?;
            entry.inserted = insert_gaussians(&mut map, &mask, &frame, &pose, &k, &cfg.densify)?;
        }
        entry.stages.push(Stage::Densify);

        let views: Vec<(&Frame, CameraPose)> = std::iter::once((&frame, pose))
            .chain(window.iter().rev().take(cfg.map_window - 1).map(|(f, p)| (f, *p)))
            .collect();
        match map_views(&mut map, &views, &k, &mapper) {
            Ok(rep) => entry.map_loss = Some(rep.last.l_map),
            Err(Error::Divergence(msg)) => log::warn!("frame {i}: mapping skipped ({msg})"),
            Err(e) => return Err(e),
        }
        entry.stages.push(Stage::Map);
        window.push((frame, pose));
        if window.len() > cfg.map_window {
            window.remove(0);
        }

        if cfg.prune_every > 0 && i % cfg.prune_every == 0 {
            let renders: Vec<_> = poses.iter().rev().take(cfg.prune_views).map(|p| render(&map, p, &k)).collect();
            entry.pruned = prune(&mut map, &renders, &cfg.densify)?;
            entry.stages.push(Stage::Prune);
        }
        entry.map_size = map.len();
        log::info!(
            "frame {i}: track {:.4} -> {:.4}, imp {importance:.3}, +{} -{} = {}",
            tr.init_loss,
            tr.best_loss,
            entry.inserted,
            entry.pruned,
            entry.map_size
        );
        log.push(entry);
    }

    let trajectory = Trajectory::new(seq.frames.iter().map(|f| f.timestamp).zip(poses.iter().copied()).collect())?;
    let renders: Vec<RgbImage> = poses.iter().map(|p| render(&map, p, &k).color).collect();
    let mut out = RunOutput {
        trajectory,
        renders,
        map,
        log,
        metrics: MetricsRecord::new(&seq.manifest.name, seq.manifest.condition.as_str()),
        diverged_frames: diverged,
    };
    out.metrics = evaluate(&out.trajectory, &out.renders, seq)?;
    out.metrics.condition = seq.manifest.condition.as_str().to_string();
    Ok(out)
}

/// ATE against the reference's ground-truth poses and mean PSNR/SSIM of `renders`
/// against its frames, matched by index. ATE is `None` without ground truth.
pub fn evaluate(trajectory: &Trajectory, renders: &[RgbImage], reference: &Sequence) -> Result<MetricsRecord> {
    let mut rec = MetricsRecord::new(&reference.manifest.name, reference.manifest.condition.as_str());
    let gt: Vec<(f64, CameraPose)> = reference
        .frames
        .iter()
        .filter_map(|f| f.gt_pose.map(|p| (f.timestamp, p)))
        .collect();
    if !gt.is_empty() {
        rec.ate_cm = Some(ate_rmse(trajectory, &Trajectory::new(gt)?)?);
    }
    if !renders.is_empty() {
        if renders.len() != reference.frames.len() {
            return Err(Error::Data(format!(
                "{} renders for a {}-frame reference",
                renders.len(),
                reference.frames.len()
            )));
        }
        let (mut p, mut s) = (0.0, 0.0);
        for (r, f) in renders.iter().zip(&reference.frames) {
            p += psnr(r, &f.rgb)?;
            s += ssim(r, &f.rgb)?;
        }
        rec.psnr_db = Some(p / renders.len() as f64);
        rec.ssim = Some(s / renders.len() as f64);
    }
    Ok(rec)
}

fn render_name(i: usize) -> String {
    format!("{i:06}.png")
}

/// Write trajectory, renders, metrics, map checkpoint, per-frame log and config.
pub fn write_run(dir: &Path, out: &RunOutput, cfg: &PipelineConfig) -> Result<()> {
    create_dir(&dir.join(RENDER_DIR))?;
    write_file(&dir.join(TRAJECTORY_FILE), format_trajectory(out.trajectory.poses()))?;
    for (i, r) in out.renders.iter().enumerate() {
        write_rgb(&dir.join(RENDER_DIR).join(render_name(i)), r)?;
    }
    write_file(&dir.join(METRICS_FILE), serde_json::to_string_pretty(&out.metrics)?)?;
    write_file(&dir.join(MAP_FILE), serde_json::to_string(&out.map)?)?;
    let mut lines = String::new();
    for entry in &out.log {
        lines.push_str(&serde_json::to_string(entry)?);
        lines.push('\n');
    }
    write_file(&dir.join(LOG_FILE), lines)?;
    write_file(&dir.join("config.txt"), cfg.to_text())
}

/// Trajectory and renders of a run directory written by `write_run`.
pub fn load_run(dir: &Path) -> Result<(Trajectory, Vec<RgbImage>)> {
    let trajectory = Trajectory::new(parse_groundtruth(&dir.join(TRAJECTORY_FILE))?)?;
    let renders = (0..trajectory.len())
        .map(|i| read_rgb(&dir.join(RENDER_DIR).join(render_name(i))))
        .collect::<Result<Vec<_>>>()?;
    Ok((trajectory, renders))
}

/// Cumulative ablation rows: baseline, +adaptive_tracking, +sp_rofusion, and
/// +enhancement only when some input frame triggers the gate.
pub fn ablate(seq: &Sequence, base: &PipelineConfig) -> Result<Vec<(String, MetricsRecord)>> {
    let mut steps = vec![
        ("baseline", AblationFlags::none()),
        ("+adaptive_tracking", AblationFlags { adaptive_tracking: true, ..AblationFlags::none() }),
        ("+sp_rofusion", AblationFlags { enhancement: false, ..AblationFlags::all() }),
    ];
    if seq.frames.iter().any(|f| judge(&f.rgb).trigger) {
        steps.push(("+enhancement", AblationFlags::all()));
    }
    steps
        .into_iter()
        .map(|(label, flags)| {
            let cfg = PipelineConfig { flags, ..base.clone() };
            Ok((label.to_string(), run(seq, &cfg)?.metrics))
        })
        .collect()
}
