//! The four subcommands: generate, run, sweep, train-ae.

use crate::config::{LoadedConfig, ObjectCountRange};
use crate::CliError;
use coopsim::channel::ChannelParams;
use coopsim::codec::{ae_train, load_params, save_params, AEConfig, TrainConfig};
use coopsim::eval::{
    match_detections, pooled_ap, sweep, sweep_to_csv, SweepConfig, SweepResult,
};
use coopsim::fusion::{run_pipeline, FusionScheme, Transport};
use coopsim::perception::{bev_collapse, voxel_features, voxelize, FeatureMapBEV};
use coopsim::rng::{derive_rng, derive_seed};
use coopsim::scene::{
    crop_cloud_to_range, generate_scenario, parse_scenario, transform_to_ego, write_scenario,
    Scenario,
};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("cannot create directory {}: {e}", dir.display())))
}

/// Atomic write: temp file in the target directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    ensure_dir(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    fs::write(&tmp, bytes)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| CliError::Io(format!("cannot move into place {}: {e}", path.display())))
}

fn scenario_for_index(cfg: &LoadedConfig, seed: u64, index: u64) -> Result<Scenario, CliError> {
    let ObjectCountRange { min, max } = cfg.object_count;
    let span = (max - min + 1) as u64;
    let num_objects = min + (derive_seed(seed, &[index, 0]) % span) as usize;
    let mut scenario_cfg = cfg.experiment.scenario.clone();
    scenario_cfg.num_objects = num_objects;
    generate_scenario(&scenario_cfg, &mut derive_rng(seed, &[index, 1]))
        .map_err(|e| CliError::Runtime(format!("scenario generation failed: {e}")))
}

pub fn cmd_generate(cfg: &LoadedConfig, seed: u64, out: &Path, count: usize) -> Result<(), CliError> {
    ensure_dir(out)?;
    for i in 0..count {
        let scenario = scenario_for_index(cfg, seed, i as u64)?;
        let path = out.join(format!("scenario_{i:04}.txt"));
        write_atomic(&path, write_scenario(&scenario).as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn load_scenario_file(path: &Path) -> Result<Scenario, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read scenario {}: {e}", path.display())))?;
    parse_scenario(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_scenario_dir(dir: &Path, limit: Option<usize>) -> Result<Vec<Scenario>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Io(format!("cannot read directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "txt").unwrap_or(false))
        .collect();
    files.sort();
    if let Some(n) = limit {
        files.truncate(n);
    }
    if files.is_empty() {
        return Err(CliError::Runtime(format!(
            "no scenario .txt files in {}",
            dir.display()
        )));
    }
    files.iter().map(|p| load_scenario_file(p)).collect()
}

fn pipeline_with_codec(cfg: &LoadedConfig) -> Result<coopsim::fusion::PipelineConfig, CliError> {
    let mut pipeline = cfg.experiment.pipeline.clone();
    if cfg.experiment.codec.enabled {
        let path = cfg.experiment.codec.params_path.as_ref().unwrap();
        let bytes = fs::read(path)
            .map_err(|e| CliError::Io(format!("cannot read codec params {}: {e}", path.display())))?;
        let params =
            load_params(&bytes).map_err(|e| CliError::Runtime(format!("codec params: {e}")))?;
        pipeline.codec = Some(params);
    }
    Ok(pipeline)
}

pub fn cmd_run(
    cfg: &LoadedConfig,
    seed: u64,
    scenario_path: &Path,
    scheme: FusionScheme,
    snr_db: f64,
) -> Result<(), CliError> {
    let scenario = load_scenario_file(scenario_path)?;
    let pipeline = pipeline_with_codec(cfg)?;
    let mut channel = cfg.experiment.channel.clone();
    channel.snr_db = snr_db;
    let transport = Transport::Channel(channel);
    let frame_seed = derive_seed(seed, &[0]);
    let frame = run_pipeline(&scenario, scheme, &transport, &pipeline, frame_seed)
        .map_err(|e| CliError::Runtime(format!("pipeline: {e}")))?;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "scheme {} | snr {snr_db} dB | {} CAVs | {} ground-truth boxes",
        scheme.label(),
        scenario.num_cavs(),
        scenario.gt_boxes.len()
    );
    let _ = writeln!(out, "detections ({}):", frame.detections.len());
    for d in &frame.detections {
        let b = &d.box_label;
        let _ = writeln!(
            out,
            "  box c=({:+8.3},{:+8.3},{:+6.3}) dims=({:.3},{:.3},{:.3}) yaw={:+.3} score={:.3}",
            b.center[0], b.center[1], b.center[2], b.dims[0], b.dims[1], b.dims[2], b.yaw, d.score
        );
    }
    let _ = writeln!(out, "per-CAV diagnostics:");
    for d in &frame.diagnostics {
        let rms = d
            .rms_error
            .map(|r| format!("{r:.4}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "  cav {} | elements {} | normalized rms {} | dropped {}",
            d.cav, d.elements, rms, d.dropped
        );
    }
    for &iou in &cfg.experiment.sweep.iou_grid {
        let m = match_detections(&frame.detections, &scenario.gt_boxes, iou);
        let ap = pooled_ap(&[m]).map_err(|e| CliError::Runtime(e.to_string()))?;
        let _ = writeln!(out, "AP@{iou}: {ap:.6}");
    }
    print!("{out}");
    Ok(())
}

fn plot_files(result: &SweepResult, snr_grid: &[f64], n_grid: &[f64]) -> Vec<(String, String)> {
    // One two-column (x, AP) file per (scheme, iou) curve; when both grids
    // vary, one file per (scheme, iou, n) with x = snr. AP is averaged over
    // seeds at each grid point.
    let mut files = Vec::new();
    let mut schemes: Vec<String> = result.rows.iter().map(|r| r.scheme.clone()).collect();
    schemes.sort();
    schemes.dedup();
    let mut ious: Vec<f64> = result.rows.iter().map(|r| r.iou_thresh).collect();
    ious.sort_by(f64::total_cmp);
    ious.dedup();
    let snr_axis = snr_grid.len() > 1 || n_grid.len() == 1;
    for scheme in &schemes {
        for &iou in &ious {
            let fixed_values: Vec<f64> = if snr_axis { n_grid.to_vec() } else { snr_grid.to_vec() };
            for &fixed in &fixed_values {
                let mut content = String::new();
                let _ = writeln!(content, "# scheme {scheme} iou {iou}");
                if snr_axis {
                    let _ = writeln!(content, "# x = snr_db (path_loss_factor = {fixed}), y = AP pooled over scenes, mean over seeds");
                } else {
                    let _ = writeln!(content, "# x = path_loss_factor (snr_db = {fixed}), y = AP pooled over scenes, mean over seeds");
                }
                let xs: Vec<f64> = if snr_axis { snr_grid.to_vec() } else { n_grid.to_vec() };
                for &x in &xs {
                    let select: Vec<&coopsim::eval::SweepRow> = result
                        .rows
                        .iter()
                        .filter(|r| {
                            r.scheme == *scheme
                                && r.iou_thresh == iou
                                && if snr_axis {
                                    r.snr_db == x && r.path_loss_factor == fixed
                                } else {
                                    r.path_loss_factor == x && r.snr_db == fixed
                                }
                        })
                        .collect();
                    if select.is_empty() {
                        continue;
                    }
                    let ap = select.iter().map(|r| r.ap).sum::<f64>() / select.len() as f64;
                    let _ = writeln!(content, "{x} {ap:.6}");
                }
                let suffix = if (snr_axis && n_grid.len() > 1) || (!snr_axis && snr_grid.len() > 1) {
                    if snr_axis {
                        format!("_n{fixed}")
                    } else {
                        format!("_snr{fixed}")
                    }
                } else {
                    String::new()
                };
                let name = format!("curve_{}_iou{}{}.dat", scheme.replace('+', "_"), iou, suffix);
                files.push((name, content));
            }
        }
    }
    files
}

pub fn cmd_sweep(cfg: &LoadedConfig, seed: u64, out: &Path) -> Result<(), CliError> {
    let sweep_cfg = &cfg.experiment.sweep;
    let scenes = match &sweep_cfg.scenario_dir {
        Some(dir) => load_scenario_dir(dir, sweep_cfg.max_scenes)?,
        None => {
            let count = sweep_cfg.max_scenes.unwrap_or(50);
            (0..count)
                .map(|i| scenario_for_index(cfg, seed, i as u64))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let pipeline = pipeline_with_codec(cfg)?;
    let schemes: Vec<FusionScheme> = sweep_cfg
        .schemes
        .iter()
        .map(|&s| match s {
            FusionScheme::ConvFeatureLate { feature, .. } if cfg.experiment.codec.enabled => {
                FusionScheme::ConvFeatureLate {
                    feature,
                    use_autoencoder: true,
                }
            }
            other => other,
        })
        .collect();
    let config = SweepConfig {
        schemes,
        snr_grid: sweep_cfg.snr_grid.clone(),
        n_grid: sweep_cfg.n_grid.clone(),
        iou_grid: sweep_cfg.iou_grid.clone(),
        seeds: sweep_cfg.seeds.clone(),
        channel: cfg.experiment.channel.clone(),
        pipeline,
    };
    let result = sweep(&scenes, &config).map_err(|e| CliError::Runtime(e.to_string()))?;

    ensure_dir(out)?;
    let csv_path = out.join("results.csv");
    write_atomic(&csv_path, sweep_to_csv(&result).as_bytes())?;
    println!("wrote {} ({} rows)", csv_path.display(), result.rows.len());
    for (name, content) in plot_files(&result, &sweep_cfg.snr_grid, &sweep_cfg.n_grid) {
        let path = out.join(name);
        write_atomic(&path, content.as_bytes())?;
        println!("wrote {}", path.display());
    }
    if !result.excluded.is_empty() {
        let path = out.join("excluded.txt");
        write_atomic(&path, result.excluded.join("\n").as_bytes())?;
        println!(
            "wrote {} ({} excluded frames)",
            path.display(),
            result.excluded.len()
        );
    }
    Ok(())
}

pub fn cmd_train_ae(cfg: &LoadedConfig, seed: u64, out: &Path, dataset_dir: &Path) -> Result<(), CliError> {
    let scenes = load_scenario_dir(dataset_dir, None)?;
    let pipeline = &cfg.experiment.pipeline;
    let spec = pipeline
        .grid_spec()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut maps: Vec<FeatureMapBEV> = Vec::new();
    for s in &scenes {
        let ego = crop_cloud_to_range(&s.clouds[0], &pipeline.range);
        maps.push(bev_collapse(&voxel_features(&voxelize(&ego, &spec))));
        for k in 0..s.num_cavs() {
            let cloud = transform_to_ego(&s.clouds[1 + k], &s.cav_poses[k], &s.ego_pose);
            let cloud = crop_cloud_to_range(&cloud, &pipeline.range);
            maps.push(bev_collapse(&voxel_features(&voxelize(&cloud, &spec))));
        }
    }
    if maps.is_empty() {
        return Err(CliError::Runtime("dataset directory produced no feature maps".into()));
    }

    let mut ae_cfg = AEConfig::new(maps[0].channels, maps[0].dims[0], maps[0].dims[1])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(h) = cfg.experiment.codec.hidden_channels {
        ae_cfg.hidden_channels = h;
        ae_cfg
            .validate()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let channel_in_loop: Option<ChannelParams> = cfg
        .experiment
        .codec
        .channel_in_loop
        .then(|| cfg.experiment.channel.clone());
    let tc = TrainConfig {
        learning_rate: cfg.experiment.codec.learning_rate,
        epochs: cfg.experiment.codec.epochs,
        batch_size: cfg.experiment.codec.batch_size,
        channel_in_loop,
        ..TrainConfig::default()
    };
    println!(
        "training on {} feature maps of {}x{}x{} for {} epochs",
        maps.len(),
        maps[0].channels,
        maps[0].dims[0],
        maps[0].dims[1],
        tc.epochs
    );
    let trained = ae_train(&maps, ae_cfg, &tc, &mut derive_rng(seed, &[b'a' as u64]))
        .map_err(|e| CliError::Runtime(format!("training: {e}")))?;

    ensure_dir(out)?;
    let params_path = out.join("codec.bin");
    write_atomic(&params_path, &save_params(&trained.params))?;
    let mut loss_csv = String::from("epoch,loss\n");
    for (i, loss) in trained.epoch_losses.iter().enumerate() {
        let _ = writeln!(loss_csv, "{},{:.9e}", i + 1, loss);
    }
    let loss_path = out.join("training_loss.csv");
    write_atomic(&loss_path, loss_csv.as_bytes())?;
    println!(
        "wrote {} and {} (initial mse {:.6}, final mse {:.6})",
        params_path.display(),
        loss_path.display(),
        trained.initial_loss,
        trained.final_loss
    );
    Ok(())
}
