//! Desk-scale default configuration shared by the experiment harness, the
//! CLI and the browser demo.
//!
//! One coherent parameter set: a 48 m square scene with 5-10 vehicles,
//! two CAVs posted 18-22 m from the ego, a 0.25-degree ray-cast LiDAR,
//! and a 0.2 m BEV grid. The detector thresholds are calibrated against
//! the channel model so that the fusion-scheme trends are reproducible.

use crate::channel::{ChannelParams, NoiseMode};
use crate::eval::{default_iou_grid, default_n_grid, default_snr_grid, SweepConfig};
use crate::fusion::{FusionScheme, PipelineConfig};
use crate::rng::{derive_rng, derive_seed};
use crate::scene::{
    generate_scenario, DetectionRange, Scenario, ScenarioConfig, SensorConfig,
};

/// Half-width of the square detection range in meters.
pub const RANGE_HALF_WIDTH: f64 = 24.0;

/// Base SNR used for the fixed-noise path-loss-factor sweep.
pub const PATH_LOSS_SWEEP_SNR_DB: f64 = -1.0;

/// Reference geometry pinning the noise level of the path-loss sweep.
pub const PATH_LOSS_REF_N: f64 = 2.0;
pub const PATH_LOSS_REF_DISTANCE_M: f64 = 20.0;

pub fn desk_range() -> DetectionRange {
    DetectionRange::new(
        -RANGE_HALF_WIDTH,
        RANGE_HALF_WIDTH,
        -RANGE_HALF_WIDTH,
        RANGE_HALF_WIDTH,
    )
    .unwrap()
}

pub fn desk_sensor() -> SensorConfig {
    SensorConfig {
        max_range: 60.0,
        azimuth_steps: 1440,
        noise_std: 0.02,
        height_samples: 10,
    }
}

pub fn desk_scenario_config(num_objects: usize) -> ScenarioConfig {
    ScenarioConfig {
        num_cavs: 2,
        num_objects,
        range: desk_range(),
        sensor: desk_sensor(),
        comm_range: 50.0,
        cav_distance: (18.0, 22.0),
        min_gap_m: 2.5,
    }
}

pub fn desk_pipeline_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::new(desk_range());
    cfg.detector.deflate = Some(0.4);
    cfg.nms_iou = 0.5;
    cfg.fused_tau = 0.055;
    cfg.fused_min_cells = 18;
    cfg.fused_deflate = 0.4;
    cfg
}

/// Channel template for the desk experiments: unit reference gain, free
/// space path loss exponent, Rician K = 1, perfect CSI.
pub fn desk_channel(snr_db: f64) -> ChannelParams {
    ChannelParams::new(1.0, 20.0, 2.0, 1.0, snr_db, 0.0).unwrap()
}

/// Channel template for the path-loss-factor sweep: the noise level is
/// pinned to the n = 2, d = 20 m baseline so larger factors genuinely
/// degrade the link.
pub fn desk_fixed_noise_channel(snr_db: f64, path_loss_factor: f64) -> ChannelParams {
    ChannelParams::new(1.0, 20.0, path_loss_factor, 1.0, snr_db, 0.0)
        .unwrap()
        .with_noise_mode(NoiseMode::FixedReference {
            path_loss_factor: PATH_LOSS_REF_N,
            distance_m: PATH_LOSS_REF_DISTANCE_M,
        })
}

/// Deterministic scene set: object count drawn in 5..=10 per scene.
pub fn desk_scene_set(count: usize, master_seed: u64) -> Vec<Scenario> {
    (0..count)
        .map(|i| {
            let num_objects = 5 + (derive_seed(master_seed, &[i as u64, 0]) % 6) as usize;
            let cfg = desk_scenario_config(num_objects);
            generate_scenario(&cfg, &mut derive_rng(master_seed, &[i as u64, 1]))
                .expect("desk scenario generation")
        })
        .collect()
}

/// Default sweep over the full grids from the evaluation protocol.
pub fn desk_sweep_config(seeds: Vec<u64>) -> SweepConfig {
    SweepConfig {
        schemes: vec![
            FusionScheme::Early,
            FusionScheme::Intermediate,
            FusionScheme::Late,
            FusionScheme::ConvFeatureLate {
                feature: crate::fusion::FeatureLevel::ThreeD,
                use_autoencoder: false,
            },
        ],
        snr_grid: default_snr_grid(),
        n_grid: vec![2.0],
        iou_grid: default_iou_grid(),
        seeds,
        channel: desk_channel(10.0),
        pipeline: desk_pipeline_config(),
    }
}

/// Grid for the path-loss-factor experiment.
pub fn desk_path_loss_sweep_config(seeds: Vec<u64>) -> SweepConfig {
    let mut cfg = desk_sweep_config(seeds);
    cfg.snr_grid = vec![PATH_LOSS_SWEEP_SNR_DB];
    cfg.n_grid = default_n_grid();
    cfg.channel = desk_fixed_noise_channel(PATH_LOSS_SWEEP_SNR_DB, 2.0);
    cfg
}
