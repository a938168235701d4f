//! Scratch harness: prints acceptance-criterion margins for config variants.

use coopsim::channel::{ChannelParams, NoiseMode};
use coopsim::codec::{ae_train, AEConfig, TrainConfig};
use coopsim::fusion::ego_only_detections;
use coopsim::perception::{bev_collapse, voxel_features, voxelize};
use coopsim::scene::{crop_cloud_to_range, transform_to_ego};
use coopsim::eval::{match_detections, pooled_ap, MatchResult};
use coopsim::fusion::{run_pipeline, FeatureLevel, FusionScheme, PipelineConfig, Transport};
use coopsim::perception::Detection;
use coopsim::rng::{derive_rng, derive_seed};
use coopsim::scene::{generate_scenario, DetectionRange, Scenario, ScenarioConfig, SensorConfig};

thread_local! {
    static HEIGHTS: std::cell::RefCell<usize> = const { std::cell::RefCell::new(8) };
}

fn scene_set(n: usize) -> Vec<Scenario> {
    let range = DetectionRange::new(-24.0, 24.0, -24.0, 24.0).unwrap();
    (0..n)
        .map(|i| {
            let num_objects = 5 + (derive_seed(7000, &[i as u64]) % 6) as usize;
            let cfg = ScenarioConfig {
                num_cavs: 2,
                num_objects,
                range,
                sensor: SensorConfig {
                    max_range: 60.0,
                    azimuth_steps: 1440,
                    noise_std: 0.02,
                    height_samples: HEIGHTS.with(|h| *h.borrow()),
                },
                comm_range: 50.0,
                cav_distance: (18.0, 22.0),
                min_gap_m: 2.5,
            };
            generate_scenario(&cfg, &mut derive_rng(7100, &[i as u64])).unwrap()
        })
        .collect()
}

fn ap(scenes: &[Scenario], dets: &[Vec<Detection>], iou: f64) -> f64 {
    let ms: Vec<MatchResult> = scenes
        .iter()
        .zip(dets)
        .map(|(s, d)| match_detections(d, &s.gt_boxes, iou))
        .collect();
    pooled_ap(&ms).unwrap()
}

fn run_all(
    scenes: &[Scenario],
    scheme: FusionScheme,
    transport: &Transport,
    pcfg: &PipelineConfig,
    seed: u64,
) -> Vec<Vec<Detection>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            run_pipeline(s, scheme, transport, pcfg, derive_seed(seed, &[i as u64]))
                .unwrap()
                .detections
        })
        .collect()
}

fn channel(snr: f64, n: f64, csi: f64) -> Transport {
    Transport::Channel(ChannelParams::new(1.0, 20.0, n, 1.0, snr, csi).unwrap())
}

fn fixed_ref_channel(snr: f64, n: f64) -> Transport {
    Transport::Channel(
        ChannelParams::new(1.0, 20.0, n, 1.0, snr, 0.0)
            .unwrap()
            .with_noise_mode(NoiseMode::FixedReference {
                path_loss_factor: 2.0,
                distance_m: 20.0,
            }),
    )
}

fn main() {
    let range = DetectionRange::new(-24.0, 24.0, -24.0, 24.0).unwrap();

    let early = FusionScheme::Early;
    let inter = FusionScheme::Intermediate;
    let late = FusionScheme::Late;
    let conv3d = FusionScheme::ConvFeatureLate {
        feature: FeatureLevel::ThreeD,
        use_autoencoder: false,
    };
    let conv2d = FusionScheme::ConvFeatureLate {
        feature: FeatureLevel::TwoD,
        use_autoencoder: false,
    };

    if false {
        HEIGHTS.with(|h| *h.borrow_mut() = 10);
        let scenes = scene_set(30);
        let mut pcfg = PipelineConfig::new(range);
        pcfg.detector.deflate = Some(0.4);
        pcfg.nms_iou = 0.5;
        pcfg.fused_tau = 0.06;
        pcfg.fused_min_cells = 18;
        let spec = pcfg.grid_spec().unwrap();
        let mut maps = Vec::new();
        for s in scenes.iter().take(6) {
            let ego = crop_cloud_to_range(&s.clouds[0], &pcfg.range);
            maps.push(bev_collapse(&voxel_features(&voxelize(&ego, &spec))));
            for k in 0..s.num_cavs() {
                let c = transform_to_ego(&s.clouds[1 + k], &s.cav_poses[k], &s.ego_pose);
                let c = crop_cloud_to_range(&c, &pcfg.range);
                maps.push(bev_collapse(&voxel_features(&voxelize(&c, &spec))));
            }
        }
        println!("training codec on {} maps of {}x{}x{}...", maps.len(), maps[0].channels, maps[0].dims[0], maps[0].dims[1]);
        let mut cfg = AEConfig::new(maps[0].channels, maps[0].dims[0], maps[0].dims[1]).unwrap();
        cfg.hidden_channels = 12;
        let t0 = std::time::Instant::now();
        let trained = ae_train(&maps, cfg, &TrainConfig::default(), &mut derive_rng(500, &[])).unwrap();
        println!(
            "codec: initial {:.5} final {:.5} (ratio {:.3}) in {:.1}s",
            trained.initial_loss,
            trained.final_loss,
            trained.final_loss / trained.initial_loss,
            t0.elapsed().as_secs_f64()
        );
        pcfg.codec = Some(trained.params);
        let conv3d = FusionScheme::ConvFeatureLate { feature: FeatureLevel::ThreeD, use_autoencoder: false };
        let conv3d_ae = FusionScheme::ConvFeatureLate { feature: FeatureLevel::ThreeD, use_autoencoder: true };
        let ego_ap = {
            let dets: Vec<Vec<Detection>> = scenes.iter().map(|s| ego_only_detections(s, &pcfg).unwrap()).collect();
            (ap(&scenes, &dets, 0.3), ap(&scenes, &dets, 0.7))
        };
        println!("ego-only AP {:.3}/{:.3}", ego_ap.0, ego_ap.1);
        for snr in [10.0, 20.0, -10.0] {
            let plain = ap(&scenes, &run_all(&scenes, conv3d, &channel(snr, 2.0, 0.0), &pcfg, 9), 0.7);
            let ae = ap(&scenes, &run_all(&scenes, conv3d_ae, &channel(snr, 2.0, 0.0), &pcfg, 9), 0.7);
            println!("snr {snr}: conv3d {plain:.3} vs +ae {ae:.3} (gap {:+.3})", plain - ae);
        }
    }

    for heights in [10usize] {
        HEIGHTS.with(|h| *h.borrow_mut() = heights);
        let scenes = scene_set(30);
        for fused_tau in [0.065, 0.07] {
            let mut pcfg = PipelineConfig::new(range);
            pcfg.detector.deflate = Some(0.4);
            pcfg.nms_iou = 0.5;
            pcfg.fused_tau = fused_tau;
            pcfg.fused_min_cells = 18;
            pcfg.fused_deflate = 0.4;
            println!("\n=== heights {heights} fused_tau {fused_tau} ===");
            {
                let mut vals = String::new();
                for snr in [0.0, 5.0, 10.0, 20.0, 30.0] {
                    let v = ap(&scenes, &run_all(&scenes, inter, &channel(snr, 2.0, 0.0), &pcfg, 2), 0.7);
                    vals.push_str(&format!(" {snr}:{v:.3}"));
                }
                println!("inter per-snr@0.7:{vals}");
            }

            let ap7 = |scheme, transport: &Transport, seed| {
                ap(&scenes, &run_all(&scenes, scheme, transport, &pcfg, seed), 0.7)
            };
            let clean_early = ap7(early, &Transport::Direct, 1);
            let clean_inter = ap7(inter, &Transport::Direct, 1);
            let clean_late = ap7(late, &Transport::Direct, 1);
            let clean_conv3 = ap7(conv3d, &Transport::Direct, 1);
            println!(
                "clean@0.7: early {clean_early:.3} inter {clean_inter:.3} late {clean_late:.3} conv3d {clean_conv3:.3}"
            );

            // C7 intermediate stability over snr >= 0.
            let mut worst_dev: f64 = 0.0;
            for snr in [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0] {
                let v = ap7(inter, &channel(snr, 2.0, 0.0), 2);
                worst_dev = worst_dev.max((clean_inter - v).abs());
            }
            // C7 early/late swing.
            let early_gap =
                ap7(early, &channel(30.0, 2.0, 0.0), 2) - ap7(early, &channel(-10.0, 2.0, 0.0), 2);
            let late_m10 = ap7(late, &channel(-10.0, 2.0, 0.0), 2);
            let late_gap = ap7(late, &channel(30.0, 2.0, 0.0), 2) - late_m10;
            // C8 conv3d vs late at -10.
            let c8 = ap7(conv3d, &channel(-10.0, 2.0, 0.0), 2) - late_m10;
            let conv2_m10 = ap7(conv2d, &channel(-10.0, 2.0, 0.0), 2);
            println!(
                "C7 inter worst-dev {worst_dev:.3} (<=0.05) | early gap {early_gap:+.3} late gap {late_gap:+.3} (>=0.15) | C8 conv3d-late {c8:+.3} (>=0.10), conv2d@-10 {conv2_m10:.3}"
            );

            // C9 path-loss sweep at two base SNRs.
            for base in [-1.0, -2.0, -3.0] {
                let n1 = ap7(inter, &fixed_ref_channel(base, 1.0), 3);
                let n25 = ap7(inter, &fixed_ref_channel(base, 2.5), 3);
                let n3 = ap7(inter, &fixed_ref_channel(base, 3.0), 3);
                println!(
                    "C9 base {base}: n1 {n1:.3} n2.5 {n25:.3} (dev {:.3}<=0.05) n3 {n3:.3} (drop {:.3}>=0.20)",
                    (n1 - n25).abs(),
                    n1 - n3
                );
            }

            // C10 CSI at 10 dB.
            let perfect = ap7(inter, &channel(10.0, 2.0, 0.0), 4);
            let bad_csi = ap7(inter, &channel(10.0, 2.0, 0.1), 4);
            println!(
                "C10 csi drop {:.3} (>=0.05), perfect {perfect:.3}",
                perfect - bad_csi
            );
        }
    }
}
