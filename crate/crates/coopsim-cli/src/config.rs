//! Flat key-value experiment configuration with `[section]` headers.
//!
//! Unknown sections or keys are hard errors with the offending line number;
//! silent typos in experiment configs are worse than friction.

use crate::CliError;
use coopsim::channel::{ChannelParams, NoiseMode};
use coopsim::fusion::{FusionScheme, PipelineConfig};
use coopsim::scene::{DetectionRange, ScenarioConfig, SensorConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scenario: ScenarioConfig,
    pub channel: ChannelParams,
    pub pipeline: PipelineConfig,
    pub sweep: SweepSection,
    pub codec: CodecSection,
}

#[derive(Debug, Clone)]
pub struct SweepSection {
    pub schemes: Vec<FusionScheme>,
    pub snr_grid: Vec<f64>,
    pub n_grid: Vec<f64>,
    pub iou_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub scenario_dir: Option<PathBuf>,
    pub max_scenes: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CodecSection {
    pub enabled: bool,
    pub params_path: Option<PathBuf>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub channel_in_loop: bool,
    pub hidden_channels: Option<usize>,
}

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

struct Sections {
    file: String,
    map: BTreeMap<String, Entry>,
}

impl Sections {
    fn parse(file: &str, text: &str) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') || line.len() < 3 {
                    return Err(CliError::Config(format!(
                        "{file}:{line_no}: malformed section header `{line}`"
                    )));
                }
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "{file}:{line_no}: expected `key = value`, got `{line}`"
                )));
            };
            if section.is_empty() {
                return Err(CliError::Config(format!(
                    "{file}:{line_no}: key `{}` appears before any [section]",
                    key.trim()
                )));
            }
            let full = format!("{section}.{}", key.trim());
            if map.contains_key(&full) {
                return Err(CliError::Config(format!(
                    "{file}:{line_no}: duplicate key `{full}`"
                )));
            }
            map.insert(
                full,
                Entry {
                    value: value.trim().to_string(),
                    line: line_no,
                    used: false,
                },
            );
        }
        Ok(Self {
            file: file.to_string(),
            map,
        })
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.map.get_mut(key).map(|e| {
            e.used = true;
            (e.value.clone(), e.line)
        })
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| {
                CliError::Config(format!("{}:{line}: `{key}` expects a number, got `{v}`", self.file))
            }),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| {
                CliError::Config(format!(
                    "{}:{line}: `{key}` expects an integer, got `{v}`",
                    self.file
                ))
            }),
        }
    }

    fn u64(&mut self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| {
                CliError::Config(format!(
                    "{}:{line}: `{key}` expects an integer, got `{v}`",
                    self.file
                ))
            }),
        }
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => match v.as_str() {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(CliError::Config(format!(
                    "{}:{line}: `{key}` expects true/false, got `{v}`",
                    self.file
                ))),
            },
        }
    }

    fn string(&mut self, key: &str) -> Option<String> {
        self.take(key).map(|(v, _)| v)
    }

    fn f64_list(&mut self, key: &str, default: Vec<f64>) -> Result<Vec<f64>, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v
                .split(',')
                .map(|t| {
                    t.trim().parse().map_err(|_| {
                        CliError::Config(format!(
                            "{}:{line}: `{key}` has a bad number `{t}`",
                            self.file
                        ))
                    })
                })
                .collect(),
        }
    }

    fn u64_list(&mut self, key: &str, default: Vec<u64>) -> Result<Vec<u64>, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v
                .split(',')
                .map(|t| {
                    t.trim().parse().map_err(|_| {
                        CliError::Config(format!(
                            "{}:{line}: `{key}` has a bad integer `{t}`",
                            self.file
                        ))
                    })
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<(), CliError> {
        for (key, entry) in &self.map {
            if !entry.used {
                return Err(CliError::Config(format!(
                    "{}:{}: unknown key `{key}`",
                    self.file, entry.line
                )));
            }
        }
        Ok(())
    }
}

/// Object-count bounds the generator draws from, carried next to the
/// scenario config.
#[derive(Debug, Clone, Copy)]
pub struct ObjectCountRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub experiment: ExperimentConfig,
    pub object_count: ObjectCountRange,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
    let file = path.display().to_string();
    let mut s = Sections::parse(&file, &text)?;

    let seed = s.u64("experiment.seed", 42)?;
    let out_dir = PathBuf::from(s.string("experiment.out").unwrap_or_else(|| "out".into()));

    let defaults = coopsim::presets::desk_scenario_config(8);
    let num_min = s.usize("scenario.num_objects_min", 5)?;
    let num_max = s.usize("scenario.num_objects_max", 10)?;
    if num_min == 0 || num_max < num_min || num_max > 30 {
        return Err(CliError::Config(format!(
            "{file}: num_objects range [{num_min}, {num_max}] must satisfy 1 <= min <= max <= 30"
        )));
    }
    let x_min = s.f64("scenario.x_min", defaults.range.x_min)?;
    let x_max = s.f64("scenario.x_max", defaults.range.x_max)?;
    let y_min = s.f64("scenario.y_min", defaults.range.y_min)?;
    let y_max = s.f64("scenario.y_max", defaults.range.y_max)?;
    let range = DetectionRange::new(x_min, x_max, y_min, y_max)
        .map_err(|e| CliError::Config(format!("{file}: invalid detection range: {e}")))?;
    let sensor = SensorConfig {
        max_range: s.f64("sensor.max_range", defaults.sensor.max_range)?,
        azimuth_steps: s.usize("sensor.azimuth_steps", defaults.sensor.azimuth_steps)?,
        noise_std: s.f64("sensor.noise_std", defaults.sensor.noise_std)?,
        height_samples: s.usize("sensor.height_samples", defaults.sensor.height_samples)?,
    };
    let scenario = ScenarioConfig {
        num_cavs: s.usize("scenario.num_cavs", defaults.num_cavs)?,
        num_objects: num_max,
        range,
        sensor,
        comm_range: s.f64("scenario.comm_range", defaults.comm_range)?,
        cav_distance: (
            s.f64("scenario.cav_distance_min", defaults.cav_distance.0)?,
            s.f64("scenario.cav_distance_max", defaults.cav_distance.1)?,
        ),
        min_gap_m: s.f64("scenario.min_gap", defaults.min_gap_m)?,
    };

    let channel_defaults = coopsim::presets::desk_channel(10.0);
    let mut channel = ChannelParams::new(
        s.f64("channel.p0", channel_defaults.p0)?,
        s.f64("channel.distance", channel_defaults.distance_m)?,
        s.f64("channel.path_loss_factor", channel_defaults.path_loss_factor)?,
        s.f64("channel.rician_k", channel_defaults.rician_k)?,
        s.f64("channel.snr_db", channel_defaults.snr_db)?,
        s.f64("channel.csi_error_variance", channel_defaults.csi_error_variance)?,
    )
    .map_err(|e| CliError::Config(format!("{file}: invalid channel parameters: {e}")))?;
    channel.processing_gain_db =
        s.f64("channel.processing_gain_db", channel_defaults.processing_gain_db)?;
    match s.string("channel.noise_reference").as_deref() {
        None | Some("receiver") => {}
        Some("fixed") => {
            channel = channel.with_noise_mode(NoiseMode::FixedReference {
                path_loss_factor: s.f64(
                    "channel.fixed_ref_path_loss_factor",
                    coopsim::presets::PATH_LOSS_REF_N,
                )?,
                distance_m: s.f64(
                    "channel.fixed_ref_distance",
                    coopsim::presets::PATH_LOSS_REF_DISTANCE_M,
                )?,
            });
        }
        Some(other) => {
            return Err(CliError::Config(format!(
                "{file}: channel.noise_reference must be `receiver` or `fixed`, got `{other}`"
            )));
        }
    }
    // Consume the fixed-reference keys even in receiver mode so they are
    // not reported as unknown when both are present.
    let _ = s.f64("channel.fixed_ref_path_loss_factor", coopsim::presets::PATH_LOSS_REF_N)?;
    let _ = s.f64("channel.fixed_ref_distance", coopsim::presets::PATH_LOSS_REF_DISTANCE_M)?;

    let pipe_defaults = {
        let mut p = coopsim::presets::desk_pipeline_config();
        p.range = range;
        p
    };
    let mut pipeline = pipe_defaults.clone();
    pipeline.cell_size = s.f64("pipeline.cell_size", pipe_defaults.cell_size)?;
    pipeline.z_origin = s.f64("pipeline.z_origin", pipe_defaults.z_origin)?;
    pipeline.z_cell_size = s.f64("pipeline.z_cell_size", pipe_defaults.z_cell_size)?;
    pipeline.depth_cells = s.usize("pipeline.depth_cells", pipe_defaults.depth_cells)?;
    pipeline.downsample_factor =
        s.usize("pipeline.downsample_factor", pipe_defaults.downsample_factor)?;
    pipeline.nms_iou = s.f64("pipeline.nms_iou", pipe_defaults.nms_iou)?;
    pipeline.fused_tau = s.f64("pipeline.fused_tau", pipe_defaults.fused_tau)?;
    pipeline.fused_min_cells =
        s.usize("pipeline.fused_min_cells", pipe_defaults.fused_min_cells)?;
    pipeline.fused_deflate = s.f64("pipeline.fused_deflate", pipe_defaults.fused_deflate)?;
    pipeline.detector.tau = s.f64("pipeline.tau", pipe_defaults.detector.tau)?;
    pipeline.detector.min_cells = s.usize("pipeline.min_cells", pipe_defaults.detector.min_cells)?;
    pipeline.detector.min_extent =
        s.f64("pipeline.min_extent", pipe_defaults.detector.min_extent)?;
    pipeline.detector.box_z = s.f64("pipeline.box_z", pipe_defaults.detector.box_z)?;
    pipeline.detector.box_height =
        s.f64("pipeline.box_height", pipe_defaults.detector.box_height)?;
    if let Some((v, line)) = s.take("pipeline.deflate") {
        let d: f64 = v.parse().map_err(|_| {
            CliError::Config(format!("{file}:{line}: `pipeline.deflate` expects a number"))
        })?;
        pipeline.detector.deflate = Some(d);
    }

    let scheme_list = s
        .string("sweep.schemes")
        .unwrap_or_else(|| "early,intermediate,late,conv3d".into());
    let mut schemes = Vec::new();
    for name in scheme_list.split(',') {
        let name = name.trim();
        let scheme = FusionScheme::parse(name).ok_or_else(|| {
            CliError::Config(format!(
                "{file}: unknown scheme `{name}` (valid: {})",
                FusionScheme::ALL_LABELS.join(", ")
            ))
        })?;
        schemes.push(scheme);
    }
    let sweep = SweepSection {
        schemes,
        snr_grid: s.f64_list("sweep.snr_db", coopsim::eval::default_snr_grid())?,
        n_grid: s.f64_list("sweep.path_loss_factor", vec![2.0])?,
        iou_grid: s.f64_list("sweep.iou", coopsim::eval::default_iou_grid())?,
        seeds: s.u64_list("sweep.seeds", vec![1, 2, 3])?,
        scenario_dir: s.string("sweep.scenario_dir").map(PathBuf::from),
        max_scenes: match s.take("sweep.scenes") {
            None => None,
            Some((v, line)) => Some(v.parse().map_err(|_| {
                CliError::Config(format!("{file}:{line}: `sweep.scenes` expects an integer"))
            })?),
        },
    };
    if sweep.snr_grid.is_empty() || sweep.n_grid.is_empty() || sweep.iou_grid.is_empty()
        || sweep.seeds.is_empty() || sweep.schemes.is_empty()
    {
        return Err(CliError::Config(format!("{file}: sweep grids must be non-empty")));
    }

    let codec = CodecSection {
        enabled: s.bool("codec.enabled", false)?,
        params_path: s.string("codec.params").map(PathBuf::from),
        epochs: s.usize("codec.epochs", 60)?,
        learning_rate: s.f64("codec.learning_rate", 0.002)?,
        batch_size: s.usize("codec.batch_size", 2)?,
        channel_in_loop: s.bool("codec.channel_in_loop", false)?,
        hidden_channels: match s.take("codec.hidden_channels") {
            None => None,
            Some((v, line)) => Some(v.parse().map_err(|_| {
                CliError::Config(format!(
                    "{file}:{line}: `codec.hidden_channels` expects an integer"
                ))
            })?),
        },
    };
    if codec.enabled {
        let Some(p) = &codec.params_path else {
            return Err(CliError::Config(format!(
                "{file}: codec.enabled requires codec.params"
            )));
        };
        if !p.exists() {
            return Err(CliError::Config(format!(
                "{file}: codec.params points at missing file {}",
                p.display()
            )));
        }
    }

    s.finish()?;
    Ok(LoadedConfig {
        experiment: ExperimentConfig {
            seed,
            out_dir,
            scenario,
            channel,
            pipeline,
            sweep,
            codec,
        },
        object_count: ObjectCountRange {
            min: num_min,
            max: num_max,
        },
    })
}
