//! Scratch probe: criteria 9/10 margins at the acceptance scale for
//! fused-head variants.

use coopsim::channel::ChannelParams;
use coopsim::eval::{match_detections, pooled_ap, MatchResult};
use coopsim::fusion::{run_pipeline, FusionScheme, Transport};
use coopsim::presets;
use coopsim::rng::derive_seed;
use coopsim::scene::Scenario;
use rayon::prelude::*;

const CHANNEL_SEEDS: [u64; 3] = [11, 12, 13];

fn ap_at(
    scenes: &[Scenario],
    scheme: FusionScheme,
    transport: &Transport,
    pcfg: &coopsim::fusion::PipelineConfig,
) -> f64 {
    let mut acc = 0.0;
    for &seed in &CHANNEL_SEEDS {
        let ms: Vec<MatchResult> = scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let r = run_pipeline(s, scheme, transport, pcfg, derive_seed(seed, &[i as u64]))
                    .unwrap();
                match_detections(&r.detections, &s.gt_boxes, 0.7)
            })
            .collect();
        acc += pooled_ap(&ms).unwrap();
    }
    acc / 3.0
}

fn main() {
    let scenes = presets::desk_scene_set(50, 20240);
    let inter = FusionScheme::Intermediate;
    for fused_tau in [0.055, 0.06, 0.065] {
        let mut pcfg = presets::desk_pipeline_config();
        pcfg.fused_tau = fused_tau;
        let clean = ap_at(&scenes, inter, &Transport::Direct, &pcfg);
        let mut per_snr = String::new();
        let mut worst_dev: f64 = 0.0;
        for snr in [0.0, 5.0, 10.0, 30.0] {
            let v = ap_at(
                &scenes,
                inter,
                &Transport::Channel(presets::desk_channel(snr)),
                &pcfg,
            );
            worst_dev = worst_dev.max((v - clean).abs());
            per_snr.push_str(&format!(" {snr}:{v:.3}"));
        }
        println!("tau {fused_tau}: clean {clean:.3} per-snr{per_snr} C7-dev {worst_dev:.3}");
        let perfect = ap_at(
            &scenes,
            inter,
            &Transport::Channel(presets::desk_channel(10.0)),
            &pcfg,
        );
        let csi = ap_at(
            &scenes,
            inter,
            &Transport::Channel(ChannelParams::new(1.0, 20.0, 2.0, 1.0, 10.0, 0.1).unwrap()),
            &pcfg,
        );
        println!("  C10: perfect {perfect:.3} csi {csi:.3} drop {:.3}", perfect - csi);
        for base in [-1.0, -2.0] {
            let apn = |n: f64| {
                ap_at(
                    &scenes,
                    inter,
                    &Transport::Channel(presets::desk_fixed_noise_channel(base, n)),
                    &pcfg,
                )
            };
            let n1 = apn(1.0);
            let dev = [1.5, 2.0, 2.5]
                .iter()
                .map(|&n| (n1 - apn(n)).abs())
                .fold(0.0f64, f64::max);
            let n3 = apn(3.0);
            println!(
                "  C9 base {base}: n1 {n1:.3} worst-dev {dev:.3} n3 {n3:.3} drop {:.3}",
                n1 - n3
            );
        }
    }
}
