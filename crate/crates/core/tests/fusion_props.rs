mod common;

use std::f64::consts::PI;

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::seq::SliceRandom;

use coopfuse::fusion::{fuse_frame, Detection, PipelineConfig};
use coopfuse::geometry::{box_iou_3d, OrientedBox, Pose};
use coopfuse::rng;
use coopfuse::scenario::{
    generate_scene, observe, perturb_pose, to_local, visible_objects, Layout, NoiseSpec, Scene, SensorSpec,
};

struct Frame {
    scene: Scene,
    ego: Vec<Detection>,
    cav: Vec<Detection>,
    cav_pose: Pose,
}

fn frame(seed: u64, sensor: &SensorSpec, sigma_p: f64, sigma_phi: f64) -> Frame {
    let scene = generate_scene(20, Layout::Lane, seed).unwrap();
    let ego = observe(&scene, &scene.ego_pose, sensor, &mut rng::stream(seed, "ego", 0));
    let cav = observe(&scene, &scene.cav_pose, sensor, &mut rng::stream(seed, "cav", 0));
    let noise = NoiseSpec {
        sigma_p,
        sigma_phi,
        seed,
    };
    let cav_pose = perturb_pose(&scene.cav_pose, &noise, &mut rng::stream(seed, "pose", 0));
    Frame {
        scene,
        ego,
        cav,
        cav_pose,
    }
}

fn sorted_centers(dets: &[Detection]) -> Vec<Vector3<f64>> {
    let mut centers: Vec<Vector3<f64>> = dets.iter().map(|d| d.bbox.center).collect();
    centers.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    centers
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn output_is_bounded_and_deduplicated(seed in 0u64..10_000, sigma_p in 0.0..1.5f64, sigma_deg in 0.0..3.0f64) {
        let f = frame(seed, &SensorSpec::default(), sigma_p, sigma_deg.to_radians());
        let config = PipelineConfig::default();
        let out = fuse_frame(&f.scene.ego_pose, &f.cav_pose, &f.ego, &f.cav, &config).unwrap();
        prop_assert!(out.objects.len() <= f.ego.len() + f.cav.len());
        for (a, da) in out.objects.iter().enumerate() {
            for db in &out.objects[a + 1..] {
                prop_assert!(box_iou_3d(&da.bbox, &db.bbox) < config.nms_iou_threshold);
            }
        }
        prop_assert!(out.applied_transform.validate().is_ok());
        if out.correction_applied {
            prop_assert!(out.registration.as_ref().unwrap().inlier_ratio > 0.0);
        }
    }

    #[test]
    fn output_ignores_input_order(seed in 0u64..10_000, shuffle in any::<u64>()) {
        let f = frame(seed, &SensorSpec::default(), 0.8, 1.0f64.to_radians());
        let config = PipelineConfig::default();
        let base = fuse_frame(&f.scene.ego_pose, &f.cav_pose, &f.ego, &f.cav, &config).unwrap();
        let mut r = common::rng(shuffle);
        let (mut ego, mut cav) = (f.ego.clone(), f.cav.clone());
        ego.shuffle(&mut r);
        cav.shuffle(&mut r);
        let out = fuse_frame(&f.scene.ego_pose, &f.cav_pose, &ego, &cav, &config).unwrap();
        prop_assert_eq!(out.correction_applied, base.correction_applied);
        prop_assert!((out.applied_transform.translation - base.applied_transform.translation).norm() < 1e-9);
        prop_assert!((out.applied_transform.rotation - base.applied_transform.rotation).norm() < 1e-9);
        let (a, b) = (sorted_centers(&out.objects), sorted_centers(&base.objects));
        prop_assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).norm() < 1e-9);
        }
    }
}

#[test]
fn noiseless_output_matches_visible_ground_truth() {
    let sensor = SensorSpec::ideal(50.0, 2.0 * PI);
    let config = PipelineConfig::default();
    for seed in 0..50 {
        let f = frame(seed, &sensor, 0.0, 0.0);
        let out = fuse_frame(&f.scene.ego_pose, &f.scene.cav_pose, &f.ego, &f.cav, &config).unwrap();
        let mut visible = visible_objects(&f.scene, &f.scene.ego_pose, &sensor);
        visible.extend(visible_objects(&f.scene, &f.scene.cav_pose, &sensor));
        visible.sort_unstable();
        visible.dedup();
        let truth: Vec<Detection> = visible
            .iter()
            .map(|&k| Detection::new(to_local(&f.scene.ego_pose, &f.scene.objects[k]), 1.0))
            .collect();
        let (got, want) = (sorted_centers(&out.objects), sorted_centers(&truth));
        assert_eq!(got.len(), want.len(), "seed {seed}");
        for (p, q) in got.iter().zip(&want) {
            assert!((p - q).norm() < 1e-6, "seed {seed}: {p} vs {q}");
        }
    }
}

#[test]
fn correction_aligns_co_visible_boxes_under_position_noise() {
    let sensor = SensorSpec::ideal(50.0, 2.0 * PI);
    let config = PipelineConfig::default();
    let mut checked = 0;
    for seed in 0..40 {
        let f = frame(seed, &sensor, 1.0, 0.0);
        let ego_ids = visible_objects(&f.scene, &f.scene.ego_pose, &sensor);
        let cav_ids = visible_objects(&f.scene, &f.scene.cav_pose, &sensor);
        let shared: Vec<usize> = ego_ids.iter().copied().filter(|k| cav_ids.contains(k)).collect();
        if shared.len() < 8 {
            continue;
        }
        checked += 1;
        let out = fuse_frame(&f.scene.ego_pose, &f.cav_pose, &f.ego, &f.cav, &config).unwrap();
        assert!(out.correction_applied, "seed {seed}");
        for k in shared {
            let ego_box: &OrientedBox = &f.ego[ego_ids.iter().position(|&e| e == k).unwrap()].bbox;
            let cav_box = out
                .applied_transform
                .apply(&f.cav[cav_ids.iter().position(|&c| c == k).unwrap()].bbox);
            let miss = (ego_box.center - cav_box.center).norm();
            assert!(
                miss < config.registration.inlier_threshold,
                "seed {seed}, object {k}: {miss}"
            );
        }
    }
    assert!(checked >= 10, "only {checked} scenes with 8 co-visible objects");
}

#[test]
fn disabled_correction_keeps_pose_transform() {
    let f = frame(3, &SensorSpec::default(), 1.0, 0.0);
    let config = PipelineConfig {
        correction_enabled: false,
        ..PipelineConfig::default()
    };
    let out = fuse_frame(&f.scene.ego_pose, &f.cav_pose, &f.ego, &f.cav, &config).unwrap();
    assert!(!out.correction_applied);
    assert_eq!(out.applied_transform, out.pose_transform);
}
