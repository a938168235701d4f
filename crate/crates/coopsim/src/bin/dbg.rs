//! One-off debug dump for the recall investigation.

use coopsim::fusion::{ego_only_detections, PipelineConfig};
use coopsim::perception::rotated_iou_bev;
use coopsim::rng::{derive_rng, derive_seed};
use coopsim::scene::{generate_scenario, DetectionRange, ScenarioConfig, SensorConfig};

fn main() {
    let range = DetectionRange::new(-16.0, 16.0, -16.0, 16.0).unwrap();
    for i in 0..6u64 {
        let cfg = ScenarioConfig {
            num_cavs: 2,
            num_objects: 5 + (derive_seed(301, &[i]) % 3) as usize,
            range,
            sensor: SensorConfig {
                max_range: 50.0,
                azimuth_steps: 1440,
                noise_std: 0.02,
                height_samples: 10,
            },
            comm_range: 40.0,
            cav_distance: (14.0, 20.0),
            min_gap_m: 2.5,
        };
        let s = generate_scenario(&cfg, &mut derive_rng(301, &[i, 9])).unwrap();
        let mut pcfg = PipelineConfig::new(range);
        pcfg.detector.deflate = Some(0.4);
        pcfg.nms_iou = 0.5;
        let dets = ego_only_detections(&s, &pcfg).unwrap();
        for gt in &s.gt_boxes {
            if (gt.center[0] + 4.678).abs() < 0.01 {
                println!("scene {i}: target gt {:?}", gt);
                println!("ego pose {:?}", s.ego_pose);
                for d in &dets {
                    println!(
                        "  det c=({:+.2},{:+.2}) dims=({:.2},{:.2}) yaw={:+.2} score={:.2} iou={:.3}",
                        d.box_label.center[0],
                        d.box_label.center[1],
                        d.box_label.dims[0],
                        d.box_label.dims[1],
                        d.box_label.yaw,
                        d.score,
                        rotated_iou_bev(&d.box_label, gt)
                    );
                }
                for og in &s.gt_boxes {
                    println!(
                        "  gt c=({:+.2},{:+.2}) dims=({:.2},{:.2}) yaw={:+.2}",
                        og.center[0], og.center[1], og.dims[0], og.dims[1], og.yaw
                    );
                }
            }
        }
    }
}
