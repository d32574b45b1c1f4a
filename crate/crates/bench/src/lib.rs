//! Fixtures shared by the benchmarks.

use roger_core::dataset::SyntheticScene;
use roger_core::densify::{initialize_map, DensifyConfig};
use roger_core::{CameraPose, Frame, GaussianMap, Intrinsics};

pub struct Fixture {
    pub map: GaussianMap,
    pub frame: Frame,
    pub k: Intrinsics,
    pub pose: CameraPose,
}

/// Map seeded from frame 0 of the desk scene at `stride`, and the ray-cast frame 1.
pub fn desk(width: usize, height: usize, stride: usize) -> Fixture {
    let scene = SyntheticScene::desk(20, width, height);
    let first = scene.render_frame(0, 0).expect("desk frame 0");
    let frame = scene.render_frame(1, 0).expect("desk frame 1");
    let g0 = first.gt_pose.expect("synthetic frames carry poses");
    let cfg = DensifyConfig { stride, ..DensifyConfig::default() };
    let k = scene.intrinsics();
    let map = initialize_map(&first, &CameraPose::identity(), &k, &cfg).expect("seed map");
    let pose = frame.gt_pose.expect("synthetic frames carry poses").compose(&g0.inverse());
    Fixture { map, frame, k, pose }
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixture_is_nonempty() {
        let f = super::desk(32, 24, 2);
        assert!(!f.map.is_empty());
        assert_eq!((f.k.width, f.k.height), (32, 24));
    }
}
