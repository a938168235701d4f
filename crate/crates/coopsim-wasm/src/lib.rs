//! Browser demo bindings: simulate one cooperative perception frame, trace
//! an AP-vs-SNR curve, and inspect a single link draw. All functions return
//! JSON strings for a plain-JavaScript page to render.

use coopsim::channel::{
    pack_complex, path_loss_gain, sample_rician, transmit, ChannelParams,
};
use coopsim::eval::{match_detections, pooled_ap};
use coopsim::fusion::{run_pipeline, FusionScheme, Transport};
use coopsim::presets;
use coopsim::rng::{derive_rng, derive_seed};
use coopsim::scene::{generate_scenario, transform_to_ego, Scenario};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct BoxOut {
    x: f64,
    y: f64,
    l: f64,
    w: f64,
    yaw: f64,
    score: Option<f64>,
}

#[derive(Serialize)]
struct CloudOut {
    agent: String,
    points: Vec<[f64; 2]>,
}

#[derive(Serialize)]
struct DiagnosticOut {
    cav: u32,
    rms_error: Option<f64>,
    dropped: bool,
    elements: usize,
}

#[derive(Serialize)]
struct FrameOut {
    scheme: String,
    snr_db: f64,
    range_half_width: f64,
    gt_boxes: Vec<BoxOut>,
    detections: Vec<BoxOut>,
    clouds: Vec<CloudOut>,
    diagnostics: Vec<DiagnosticOut>,
    ap03: f64,
    ap07: f64,
    error: Option<String>,
}

#[derive(Serialize)]
struct CurveOut {
    scheme: String,
    iou: f64,
    points: Vec<[f64; 2]>,
    error: Option<String>,
}

#[derive(Serialize)]
struct LinkOut {
    lambda: f64,
    h_re: f64,
    h_im: f64,
    h_mag: f64,
    noise_variance: f64,
    rms_error_normalized: f64,
    symbols: usize,
    error: Option<String>,
}

fn scenario_for(seed: u32, num_objects: usize) -> Result<Scenario, String> {
    let num_objects = num_objects.clamp(1, 30);
    let cfg = presets::desk_scenario_config(num_objects);
    generate_scenario(&cfg, &mut derive_rng(seed as u64, &[7])).map_err(|e| e.to_string())
}

fn decimate(points: &[[f64; 3]], max_points: usize) -> Vec<[f64; 2]> {
    let stride = (points.len() / max_points.max(1)).max(1);
    points
        .iter()
        .step_by(stride)
        .map(|p| [p[0], p[1]])
        .collect()
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

/// Run one frame of the chosen fusion scheme over the impaired link and
/// return everything the page needs to draw it.
#[wasm_bindgen]
pub fn simulate_frame(
    scene_seed: u32,
    num_objects: u32,
    scheme: &str,
    snr_db: f64,
    csi_error_variance: f64,
    channel_seed: u32,
) -> String {
    let fail = |msg: String| {
        json(&FrameOut {
            scheme: scheme.to_string(),
            snr_db,
            range_half_width: presets::RANGE_HALF_WIDTH,
            gt_boxes: vec![],
            detections: vec![],
            clouds: vec![],
            diagnostics: vec![],
            ap03: 0.0,
            ap07: 0.0,
            error: Some(msg),
        })
    };
    let Some(scheme_parsed) = FusionScheme::parse(scheme) else {
        return fail(format!(
            "unknown scheme `{scheme}`; valid: {}",
            FusionScheme::ALL_LABELS.join(", ")
        ));
    };
    if matches!(scheme_parsed, FusionScheme::ConvFeatureLate { use_autoencoder: true, .. }) {
        return fail("the demo ships without trained codec weights; pick a non-ae scheme".into());
    }
    let scenario = match scenario_for(scene_seed, num_objects as usize) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let pcfg = presets::desk_pipeline_config();
    let mut channel = presets::desk_channel(snr_db);
    channel.csi_error_variance = csi_error_variance.max(0.0);
    let transport = Transport::Channel(channel);
    let frame_seed = derive_seed(channel_seed as u64, &[scene_seed as u64]);
    let frame = match run_pipeline(&scenario, scheme_parsed, &transport, &pcfg, frame_seed) {
        Ok(f) => f,
        Err(e) => return fail(e.to_string()),
    };

    let mut clouds = Vec::new();
    clouds.push(CloudOut {
        agent: "ego".into(),
        points: decimate(&scenario.clouds[0].points, 1200),
    });
    for k in 0..scenario.num_cavs() {
        let in_ego = transform_to_ego(&scenario.clouds[1 + k], &scenario.cav_poses[k], &scenario.ego_pose);
        clouds.push(CloudOut {
            agent: format!("cav{k}"),
            points: decimate(&in_ego.points, 1200),
        });
    }
    let to_box = |b: &coopsim::scene::BoxLabel, score: Option<f64>| BoxOut {
        x: b.center[0],
        y: b.center[1],
        l: b.dims[0],
        w: b.dims[1],
        yaw: b.yaw,
        score,
    };
    let ap = |iou: f64| {
        pooled_ap(&[match_detections(&frame.detections, &scenario.gt_boxes, iou)]).unwrap_or(0.0)
    };
    json(&FrameOut {
        scheme: scheme_parsed.label(),
        snr_db,
        range_half_width: presets::RANGE_HALF_WIDTH,
        gt_boxes: scenario.gt_boxes.iter().map(|b| to_box(b, None)).collect(),
        detections: frame
            .detections
            .iter()
            .map(|d| to_box(&d.box_label, Some(d.score)))
            .collect(),
        clouds,
        diagnostics: frame
            .diagnostics
            .iter()
            .map(|d| DiagnosticOut {
                cav: d.cav,
                rms_error: d.rms_error,
                dropped: d.dropped,
                elements: d.elements,
            })
            .collect(),
        ap03: ap(0.3),
        ap07: ap(0.7),
        error: None,
    })
}

/// AP over an SNR grid for one scheme, pooled over a few scenes.
/// Heavier than `simulate_frame`; call it from a worker or accept a pause.
#[wasm_bindgen]
pub fn sweep_curve(scheme: &str, iou: f64, num_scenes: u32, seed: u32) -> String {
    let Some(scheme_parsed) = FusionScheme::parse(scheme) else {
        return json(&CurveOut {
            scheme: scheme.into(),
            iou,
            points: vec![],
            error: Some(format!(
                "unknown scheme `{scheme}`; valid: {}",
                FusionScheme::ALL_LABELS.join(", ")
            )),
        });
    };
    if matches!(scheme_parsed, FusionScheme::ConvFeatureLate { use_autoencoder: true, .. }) {
        return json(&CurveOut {
            scheme: scheme.into(),
            iou,
            points: vec![],
            error: Some("the demo ships without trained codec weights".into()),
        });
    }
    let scenes: Vec<Scenario> = (0..num_scenes.clamp(1, 16))
        .filter_map(|i| scenario_for(seed.wrapping_add(i), 7).ok())
        .collect();
    let pcfg = presets::desk_pipeline_config();
    let mut points = Vec::new();
    for snr in [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0] {
        let transport = Transport::Channel(presets::desk_channel(snr));
        let matches: Vec<_> = scenes
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                let frame_seed = derive_seed(seed as u64, &[i as u64, snr.to_bits()]);
                run_pipeline(s, scheme_parsed, &transport, &pcfg, frame_seed)
                    .ok()
                    .map(|f| match_detections(&f.detections, &s.gt_boxes, iou))
            })
            .collect();
        let ap = pooled_ap(&matches).unwrap_or(0.0);
        points.push([snr, ap]);
    }
    json(&CurveOut {
        scheme: scheme_parsed.label(),
        iou,
        points,
        error: None,
    })
}

/// One link draw: path loss, fading sample, and the measured recovery
/// error of a probe payload at the requested SNR.
#[wasm_bindgen]
pub fn link_stats(snr_db: f64, rician_k: f64, path_loss_factor: f64, distance_m: f64, seed: u32) -> String {
    let fail = |msg: String| {
        json(&LinkOut {
            lambda: 0.0,
            h_re: 0.0,
            h_im: 0.0,
            h_mag: 0.0,
            noise_variance: 0.0,
            rms_error_normalized: 0.0,
            symbols: 0,
            error: Some(msg),
        })
    };
    let lambda = match path_loss_gain(1.0, distance_m, path_loss_factor) {
        Ok(v) => v,
        Err(e) => return fail(e.to_string()),
    };
    let mut rng = derive_rng(seed as u64, &[1]);
    let h = match sample_rician(rician_k, &mut rng) {
        Ok(v) => v,
        Err(e) => return fail(e.to_string()),
    };
    let params = match ChannelParams::new(1.0, distance_m, path_loss_factor, rician_k, snr_db, 0.0)
    {
        Ok(p) => p,
        Err(e) => return fail(e.to_string()),
    };
    let probe: Vec<f64> = (0..512).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
    let mut rng = derive_rng(seed as u64, &[2]);
    match transmit(&probe, 1, &params, &mut rng) {
        Ok(t) => json(&LinkOut {
            lambda,
            h_re: h.re,
            h_im: h.im,
            h_mag: h.norm(),
            noise_variance: t.realization.noise_variance,
            rms_error_normalized: t.normalized_rms_error,
            symbols: pack_complex(&probe).symbols.len(),
            error: None,
        }),
        Err(e) => fail(e.to_string()),
    }
}
