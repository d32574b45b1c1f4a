//! Sequence I/O in the TUM RGB-D layout plus a JSON manifest sidecar.
//!
//! Layout: `rgb/*.png` (8-bit RGB), `depth/*.png` (16-bit, `depth_scale` units per
//! meter, 0 = invalid), `rgb.txt`, `depth.txt`, optional `groundtruth.txt` with
//! camera→world lines `t tx ty tz qx qy qz qw`, and `manifest.json`.

pub mod synthetic;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use nalgebra::{Quaternion, UnitQuaternion};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degradation::{add_lowlight_noise_at, add_sensor_noise_at, NoiseParams};
use crate::error::{Error, Result};
use crate::image::{RgbImage, ScalarMap};
use crate::metrics::Trajectory;
use crate::types::{CameraPose, Frame, Intrinsics, Vec3};

pub use synthetic::{look_at, Primitive, SyntheticScene, Texture, TrajectorySpec};

pub const TUM_DEPTH_SCALE: f64 = 5000.0;
/// Maximum timestamp gap when associating rgb, depth and ground truth.
pub const MAX_ASSOC_GAP: f64 = 0.02;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    NaturalNoise,
    NoiseLowlight,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::NaturalNoise => "natural_noise",
            Condition::NoiseLowlight => "noise_lowlight",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub timestamp: f64,
    pub gt_pose: Option<CameraPose>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub name: String,
    pub intrinsics: Intrinsics,
    pub depth_scale: f64,
    pub condition: Condition,
    /// Paths relative to the sequence directory.
    pub frames: Vec<FrameRecord>,
}

impl SequenceManifest {
    pub fn gt_trajectory(&self) -> Result<Trajectory> {
        Trajectory::new(
            self.frames
                .iter()
                .filter_map(|f| f.gt_pose.map(|p| (f.timestamp, p)))
                .collect(),
        )
    }
}

/// A loaded sequence: manifest plus decoded frames.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub dir: PathBuf,
    pub manifest: SequenceManifest,
    pub frames: Vec<Frame>,
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Parse a TUM index file: `timestamp path` per line, `#` comments.
fn parse_index(path: &Path) -> Result<Vec<(f64, String)>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(t), Some(file)) = (it.next(), it.next()) else {
            return Err(parse_err(path, no, "expected `timestamp filename`"));
        };
        let t: f64 = t
            .parse()
            .map_err(|_| parse_err(path, no, &format!("bad timestamp {t:?}")))?;
        out.push((t, file.to_string()));
    }
    Ok(out)
}

fn parse_err(path: &Path, line0: usize, message: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line0 + 1,
        message: message.to_string(),
    }
}

/// Parse `t tx ty tz qx qy qz qw` (camera→world) into world→camera poses.
pub fn parse_groundtruth(path: &Path) -> Result<Vec<(f64, CameraPose)>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, no, &format!("bad number: {e}")))?;
        if vals.len() != 8 {
            return Err(parse_err(path, no, &format!("expected 8 fields, got {}", vals.len())));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if q.norm() < 1e-9 {
            return Err(parse_err(path, no, "zero quaternion"));
        }
        let c2w = CameraPose::new(UnitQuaternion::from_quaternion(q), Vec3::new(vals[1], vals[2], vals[3]));
        out.push((vals[0], c2w.inverse()));
    }
    Ok(out)
}

fn nearest<T>(list: &[(f64, T)], t: f64) -> Option<&(f64, T)> {
    list.iter()
        .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
        .filter(|e| (e.0 - t).abs() <= MAX_ASSOC_GAP)
}

/// Default intrinsics of the TUM freiburg1 sensor, used when no manifest is present.
pub fn tum_default_intrinsics(width: usize, height: usize) -> Intrinsics {
    Intrinsics {
        fx: 517.3,
        fy: 516.5,
        cx: 318.6,
        cy: 255.3,
        width,
        height,
    }
}

/// Read an 8-bit RGB PNG into `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    Ok(RgbImage::from_rgb8(&img))
}

/// Read a 16-bit depth PNG and convert to meters.
pub fn read_depth(path: &Path, scale: f64) -> Result<ScalarMap> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    ScalarMap::from_vec(w as usize, h as usize, img.pixels().map(|p| p.0[0] as f64 / scale).collect())
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.to_rgb8().save(path)?;
    Ok(())
}

pub fn write_depth(path: &Path, depth: &ScalarMap, scale: f64) -> Result<()> {
    let raw: Vec<u16> = depth
        .data()
        .iter()
        .map(|d| (d * scale).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, raw)
            .ok_or_else(|| Error::Dimension("depth buffer size".into()))?;
    buf.save(path)?;
    Ok(())
}

/// Load a sequence. With `manifest.json` its records are used verbatim; otherwise the
/// TUM index files are associated by nearest timestamp.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = if manifest_path.exists() {
        let m: SequenceManifest = serde_json::from_str(&read_to_string(&manifest_path)?)?;
        if !(m.depth_scale > 0.0) {
            return Err(Error::Data(format!("depth_scale {} must be > 0", m.depth_scale)));
        }
        m.intrinsics.validate()?;
        m
    } else {
        load_tum(dir)?
    };
    for f in &manifest.frames {
        for p in [&f.rgb, &f.depth] {
            if !dir.join(p).exists() {
                return Err(Error::Data(format!("referenced file missing: {}", dir.join(p).display())));
            }
        }
    }
    let frames = manifest
        .frames
        .par_iter()
        .map(|r| {
            let rgb = read_rgb(&dir.join(&r.rgb))?;
            let depth = read_depth(&dir.join(&r.depth), manifest.depth_scale)?;
            let mut f = Frame::new(rgb, depth, r.timestamp)?;
            f.gt_pose = r.gt_pose;
            f.validate(&manifest.intrinsics)?;
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence {
        dir: dir.to_path_buf(),
        manifest,
        frames,
    })
}

/// Build a manifest from TUM index files (no manifest sidecar).
pub fn load_tum(dir: &Path) -> Result<SequenceManifest> {
    let rgb = parse_index(&dir.join("rgb.txt"))?;
    let depth = parse_index(&dir.join("depth.txt"))?;
    let gt_path = dir.join("groundtruth.txt");
    let gt = if gt_path.exists() {
        parse_groundtruth(&gt_path)?
    } else {
        Vec::new()
    };
    let mut frames = Vec::new();
    for (t, file) in &rgb {
        let Some((_, dfile)) = nearest(&depth, *t) else {
            log::warn!("dropping rgb frame {t}: no depth within {MAX_ASSOC_GAP} s");
            continue;
        };
        frames.push(FrameRecord {
            rgb: file.into(),
            depth: dfile.into(),
            timestamp: *t,
            gt_pose: nearest(&gt, *t).map(|e| e.1),
        });
    }
    let first = frames
        .first()
        .ok_or_else(|| Error::Data(format!("no associated frames in {}", dir.display())))?;
    let dims = image::image_dimensions(dir.join(&first.rgb))?;
    let name = dir
        .file_name()
        .map_or_else(|| "sequence".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(SequenceManifest {
        name,
        intrinsics: tum_default_intrinsics(dims.0 as usize, dims.1 as usize),
        depth_scale: TUM_DEPTH_SCALE,
        condition: Condition::Clean,
        frames,
    })
}

fn stamp(t: f64) -> String {
    format!("{t:.6}")
}

/// Write frames in the TUM layout plus manifest; returns the manifest.
pub fn write_sequence(
    dir: &Path,
    name: &str,
    k: &Intrinsics,
    frames: &[Frame],
    condition: Condition,
) -> Result<SequenceManifest> {
    create_dir(&dir.join("rgb"))?;
    create_dir(&dir.join("depth"))?;
    let records: Vec<FrameRecord> = frames
        .iter()
        .map(|f| FrameRecord {
            rgb: PathBuf::from(format!("rgb/{}.png", stamp(f.timestamp))),
            depth: PathBuf::from(format!("depth/{}.png", stamp(f.timestamp))),
            timestamp: f.timestamp,
            gt_pose: f.gt_pose,
        })
        .collect();
    frames
        .par_iter()
        .zip(&records)
        .map(|(f, r)| {
            write_rgb(&dir.join(&r.rgb), &f.rgb)?;
            write_depth(&dir.join(&r.depth), &f.depth, TUM_DEPTH_SCALE)
        })
        .collect::<Result<()>>()?;
    let manifest = SequenceManifest {
        name: name.to_string(),
        intrinsics: *k,
        depth_scale: TUM_DEPTH_SCALE,
        condition,
        frames: records,
    };
    write_index_files(dir, &manifest)?;
    Ok(manifest)
}

/// TUM trajectory text (`t tx ty tz qx qy qz qw`, camera→world) for world→camera poses.
pub fn format_trajectory(poses: &[(f64, CameraPose)]) -> String {
    let mut gt = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (ts, p) in poses {
        let c2w = p.inverse();
        let (t, q) = (c2w.translation, c2w.rotation.quaternion());
        let _ = writeln!(
            gt,
            "{} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
            stamp(*ts),
            t.x,
            t.y,
            t.z,
            q.i,
            q.j,
            q.k,
            q.w
        );
    }
    gt
}

fn write_index_files(dir: &Path, m: &SequenceManifest) -> Result<()> {
    let mut rgb = String::from("# color images\n# timestamp filename\n");
    let mut depth = String::from("# depth maps\n# timestamp filename\n");
    for f in &m.frames {
        let _ = writeln!(rgb, "{} {}", stamp(f.timestamp), f.rgb.display());
        let _ = writeln!(depth, "{} {}", stamp(f.timestamp), f.depth.display());
    }
    write_file(&dir.join("rgb.txt"), rgb)?;
    write_file(&dir.join("depth.txt"), depth)?;
    let gt: Vec<_> = m.frames.iter().filter_map(|f| f.gt_pose.map(|p| (f.timestamp, p))).collect();
    if !gt.is_empty() {
        write_file(&dir.join("groundtruth.txt"), format!("# ground truth trajectory\n{}", format_trajectory(&gt)))?;
    }
    write_file(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(m)?)
}

/// Ray-cast `scene` and write it as a sequence under `dir`.
pub fn generate_scene(scene: &SyntheticScene, seed: u64, dir: &Path) -> Result<SequenceManifest> {
    let frames = scene.render_all(seed)?;
    write_sequence(dir, &scene.name, &scene.intrinsics(), &frames, Condition::Clean)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Natural,
    NoiseLowlight,
}

impl DegradationKind {
    pub fn condition(&self) -> Condition {
        match self {
            DegradationKind::Natural => Condition::NaturalNoise,
            DegradationKind::NoiseLowlight => Condition::NoiseLowlight,
        }
    }
}

/// Degrade the RGB of frame `index` in memory.
pub fn degrade_frame(rgb: &RgbImage, p: &NoiseParams, kind: DegradationKind, index: u64) -> RgbImage {
    match kind {
        DegradationKind::Natural => add_sensor_noise_at(rgb, p, index),
        DegradationKind::NoiseLowlight => add_lowlight_noise_at(rgb, p, index),
    }
}

/// Write a degraded copy of the sequence in `src` to `dst`. Depth files and the ground
/// truth are copied byte for byte.
pub fn degrade_sequence(src: &Path, dst: &Path, p: &NoiseParams, kind: DegradationKind) -> Result<SequenceManifest> {
    p.validate()?;
    let seq = load_sequence(src)?;
    create_dir(&dst.join("rgb"))?;
    create_dir(&dst.join("depth"))?;
    seq.frames
        .par_iter()
        .zip(&seq.manifest.frames)
        .enumerate()
        .map(|(i, (f, r))| {
            write_rgb(&dst.join(&r.rgb), &degrade_frame(&f.rgb, p, kind, i as u64))?;
            let (from, to) = (src.join(&r.depth), dst.join(&r.depth));
            if let Some(parent) = to.parent() {
                create_dir(parent)?;
            }
            fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
            Ok(())
        })
        .collect::<Result<()>>()?;
    let mut manifest = seq.manifest;
    manifest.condition = kind.condition();
    write_index_files(dst, &manifest)?;
    let gt = src.join("groundtruth.txt");
    if gt.exists() {
        fs::copy(&gt, dst.join("groundtruth.txt")).map_err(|e| Error::io(&gt, e))?;
    }
    Ok(manifest)
}
