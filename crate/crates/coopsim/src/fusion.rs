//! Fusion schemes and the end-to-end frame pipeline.
//!
//! Sensing, transmission, aggregation and detection for four schemes:
//! - early: CAVs share cropped raw point clouds, concatenated at the ego
//! - intermediate: agents share downsampled BEV features, aggregated per
//!   cell by dot-product attention with the ego feature as query
//! - late: agents share detection outputs, merged by range filter + NMS
//! - convolution-feature late fusion: CAVs share 3D or 2D convolution
//!   features (optionally autoencoder-compressed); the ego runs the
//!   detection head per CAV and merges the outputs like late fusion
//!
//! A CAV whose payload cannot be recovered (singular equalization) is
//! dropped for the frame with a diagnostic; the frame itself never aborts.

use crate::channel::{self, ChannelError, ChannelParams};
use crate::codec::{self, AEParams, CodecError};
use crate::perception::{
    bev_collapse, crop_detections_to_range, detect_head, downsample_feature, nms,
    merge_max, upsample_feature, voxel_features, voxelize, Detection, DetectorConfig,
    FeatureMap3D, FeatureMapBEV, PerceptionError, VoxelGridSpec, VOXEL_FEATURE_CHANNELS,
};
use crate::rng::derive_rng;
use crate::scene::{
    crop_cloud_to_range, transform_to_ego, BoxLabel, DetectionRange, Frame, PointCloud, Scenario,
    SceneError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("feature map shapes differ: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("scheme requires a trained codec but none is configured")]
    CodecMissing,
}

/// Which convolution feature a conv-feature late fusion transmits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLevel {
    /// Per-voxel 3D features; the ego collapses them after recovery.
    ThreeD,
    /// Already-collapsed BEV features.
    TwoD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionScheme {
    Early,
    Intermediate,
    Late,
    ConvFeatureLate {
        feature: FeatureLevel,
        use_autoencoder: bool,
    },
}

impl FusionScheme {
    /// Stable label used in reports and file names.
    pub fn label(&self) -> String {
        match self {
            FusionScheme::Early => "early".into(),
            FusionScheme::Intermediate => "intermediate".into(),
            FusionScheme::Late => "late".into(),
            FusionScheme::ConvFeatureLate {
                feature,
                use_autoencoder,
            } => {
                let base = match feature {
                    FeatureLevel::ThreeD => "conv3d",
                    FeatureLevel::TwoD => "conv2d",
                };
                if *use_autoencoder {
                    format!("{base}+ae")
                } else {
                    base.into()
                }
            }
        }
    }

    /// Parse a label as produced by [`FusionScheme::label`].
    pub fn parse(s: &str) -> Option<FusionScheme> {
        match s {
            "early" => Some(FusionScheme::Early),
            "intermediate" => Some(FusionScheme::Intermediate),
            "late" => Some(FusionScheme::Late),
            "conv3d" => Some(FusionScheme::ConvFeatureLate {
                feature: FeatureLevel::ThreeD,
                use_autoencoder: false,
            }),
            "conv2d" => Some(FusionScheme::ConvFeatureLate {
                feature: FeatureLevel::TwoD,
                use_autoencoder: false,
            }),
            "conv3d+ae" => Some(FusionScheme::ConvFeatureLate {
                feature: FeatureLevel::ThreeD,
                use_autoencoder: true,
            }),
            "conv2d+ae" => Some(FusionScheme::ConvFeatureLate {
                feature: FeatureLevel::TwoD,
                use_autoencoder: true,
            }),
            _ => None,
        }
    }

    pub const ALL_LABELS: [&'static str; 6] =
        ["early", "intermediate", "late", "conv3d", "conv2d", "conv3d+ae"];
}

/// How CAV payloads reach the ego.
#[derive(Debug, Clone)]
pub enum Transport {
    /// The full V2V link; per-CAV distance is filled from scenario geometry.
    Channel(ChannelParams),
    /// Hand data over directly (the no-communication oracle).
    Direct,
}

/// Everything the pipeline needs besides the scenario itself.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub range: DetectionRange,
    pub cell_size: f64,
    pub z_origin: f64,
    pub z_cell_size: f64,
    pub depth_cells: usize,
    pub detector: DetectorConfig,
    /// Occupancy threshold for the head on the attention-fused map.
    /// Attention is a convex combination over agents, so cooperative
    /// content is diluted by roughly the agent count; the fused head is
    /// calibrated accordingly (the paper trains each scheme's detector
    /// end to end, which absorbs the same scale shift).
    pub fused_tau: f64,
    /// Component-size floor for the fused head. Fused components are
    /// unions over agents and upsampled, hence large; small speckle from
    /// channel noise is not.
    pub fused_min_cells: usize,
    /// Deflate for the fused head; smaller than the full-resolution one
    /// because thresholding diluted features already erodes components.
    pub fused_deflate: f64,
    /// Downsampling factor for intermediate fusion features.
    pub downsample_factor: usize,
    /// NMS threshold used by every scheme's final merge.
    pub nms_iou: f64,
    /// Trained codec for the `+ae` schemes.
    pub codec: Option<AEParams>,
}

impl PipelineConfig {
    pub fn new(range: DetectionRange) -> Self {
        Self {
            range,
            cell_size: 0.2,
            z_origin: -0.2,
            z_cell_size: 0.2,
            depth_cells: 12,
            detector: DetectorConfig::default(),
            fused_tau: 0.07,
            fused_min_cells: 18,
            fused_deflate: 0.4,
            downsample_factor: 2,
            nms_iou: 0.3,
            codec: None,
        }
    }

    pub fn grid_spec(&self) -> Result<VoxelGridSpec, PerceptionError> {
        VoxelGridSpec::covering(
            &self.range,
            self.cell_size,
            self.z_origin,
            self.z_cell_size,
            self.depth_cells,
        )
    }
}

/// Per-CAV link outcome for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CavDiagnostic {
    pub cav: u32,
    /// RMS error of the recovered payload in normalized units; None when
    /// nothing was transmitted (direct transport or empty payload).
    pub rms_error: Option<f64>,
    /// True when the CAV's payload was unrecoverable and discarded.
    pub dropped: bool,
    /// Real elements handed to the link.
    pub elements: usize,
}

/// Final detections plus link diagnostics for one frame.
#[derive(Debug, Clone)]
pub struct FrameResult {
    pub detections: Vec<Detection>,
    pub diagnostics: Vec<CavDiagnostic>,
}

/// Concatenate clouds, ego first, then CAVs in id order.
pub fn early_fuse(ego_cloud: &PointCloud, recovered_clouds: &[PointCloud]) -> PointCloud {
    let mut points = ego_cloud.points.clone();
    for c in recovered_clouds {
        points.extend_from_slice(&c.points);
    }
    PointCloud {
        points,
        frame: Frame::Ego,
    }
}

/// Per-cell scaled dot-product attention with the ego feature as query:
/// weights = softmax over agents of <f_ego, f_a> / sqrt(C), output is the
/// weighted sum of agent features. Identity projections; one round.
///
/// Contributions are accumulated in a canonical order so the output is
/// exactly invariant under permutations of the CAV list.
pub fn attentive_fuse(
    ego_f: &FeatureMapBEV,
    cav_fs: &[FeatureMapBEV],
) -> Result<FeatureMapBEV, FusionError> {
    for (k, f) in cav_fs.iter().enumerate() {
        if !ego_f.same_shape(f) {
            return Err(FusionError::ShapeMismatch(format!(
                "cav {k} map is {}x{}x{}, ego is {}x{}x{}",
                f.channels, f.dims[0], f.dims[1], ego_f.channels, ego_f.dims[0], ego_f.dims[1]
            )));
        }
    }
    if cav_fs.is_empty() {
        return Ok(ego_f.clone());
    }
    let c_n = ego_f.channels;
    let scale = 1.0 / (c_n as f64).sqrt();
    let [hh, ww] = ego_f.dims;
    let mut out = FeatureMapBEV::zeros(c_n, ego_f.dims, ego_f.origin, ego_f.cell_size);
    let n_agents = 1 + cav_fs.len();
    let mut feats: Vec<Vec<f64>> = vec![vec![0.0; c_n]; n_agents];
    let mut logits = vec![0.0f64; n_agents];
    let mut order: Vec<usize> = Vec::with_capacity(n_agents);
    for h in 0..hh {
        for w in 0..ww {
            for c in 0..c_n {
                feats[0][c] = ego_f.get(c, h, w);
            }
            for (k, f) in cav_fs.iter().enumerate() {
                for c in 0..c_n {
                    feats[1 + k][c] = f.get(c, h, w);
                }
            }
            let mut max_logit = f64::NEG_INFINITY;
            for a in 0..n_agents {
                let dot: f64 = (0..c_n).map(|c| feats[0][c] * feats[a][c]).sum();
                logits[a] = dot * scale;
                max_logit = max_logit.max(logits[a]);
            }
            for a in 0..n_agents {
                logits[a] = (logits[a] - max_logit).exp();
            }
            // Canonical order (by weight, then feature values) so both the
            // softmax normalizer and the weighted sum accumulate the same
            // way under any permutation of the CAV list.
            order.clear();
            order.extend(0..n_agents);
            order.sort_by(|&a, &b| {
                logits[a].total_cmp(&logits[b]).then_with(|| {
                    for c in 0..c_n {
                        let ord = feats[a][c].total_cmp(&feats[b][c]);
                        if ord != std::cmp::Ordering::Equal {
                            return ord;
                        }
                    }
                    std::cmp::Ordering::Equal
                })
            });
            let mut denom = 0.0;
            for &a in &order {
                denom += logits[a];
            }
            for c in 0..c_n {
                let mut acc = 0.0;
                for &a in &order {
                    acc += (logits[a] / denom) * feats[a][c];
                }
                out.set(c, h, w, acc);
            }
        }
    }
    Ok(out)
}

/// Pool detections from all agents, filter by range, then NMS.
pub fn late_fuse(
    ego_dets: &[Detection],
    recovered_dets: &[Vec<Detection>],
    iou_thresh: f64,
    range: &DetectionRange,
) -> Vec<Detection> {
    let mut pool: Vec<Detection> = ego_dets.to_vec();
    for dets in recovered_dets {
        pool.extend_from_slice(dets);
    }
    let cropped = crop_detections_to_range(&pool, range);
    nms(cropped, iou_thresh)
}

/// Run the detection head on the ego map and on each recovered CAV map
/// (None = dropped CAV), then merge like late fusion.
pub fn conv_feature_late_fuse(
    ego_f: &FeatureMapBEV,
    recovered_fs: &[Option<FeatureMapBEV>],
    detector: &DetectorConfig,
    nms_iou: f64,
    range: &DetectionRange,
) -> Vec<Detection> {
    let ego_dets = detect_head(ego_f, detector);
    let cav_dets: Vec<Vec<Detection>> = recovered_fs
        .iter()
        .map(|f| f.as_ref().map(|m| detect_head(m, detector)).unwrap_or_default())
        .collect();
    late_fuse(&ego_dets, &cav_dets, nms_iou, range)
}

enum LinkOutcome {
    Skipped,
    Recovered { values: Vec<f64>, rms: f64 },
    Dropped,
}

/// Send one payload over the configured transport.
fn send<R: rand::Rng + ?Sized>(
    values: &[f64],
    arity: usize,
    transport: &Transport,
    distance_m: f64,
    rng: &mut R,
) -> Result<(LinkOutcome, usize), FusionError> {
    if values.is_empty() {
        return Ok((LinkOutcome::Skipped, 0));
    }
    match transport {
        Transport::Direct => Ok((
            LinkOutcome::Recovered {
                values: values.to_vec(),
                rms: 0.0,
            },
            values.len(),
        )),
        Transport::Channel(base) => {
            let params = base.clone().with_distance(distance_m);
            match channel::transmit(values, arity, &params, rng) {
                Ok(t) => Ok((
                    LinkOutcome::Recovered {
                        values: t.recovered,
                        rms: t.normalized_rms_error,
                    },
                    values.len(),
                )),
                Err(ChannelError::EqualizationSingular { .. }) => {
                    Ok((LinkOutcome::Dropped, values.len()))
                }
                Err(e) => Err(e.into()),
            }
        }
    }
}

fn flatten_cloud(cloud: &PointCloud) -> Vec<f64> {
    let mut out = Vec::with_capacity(cloud.points.len() * 3);
    for p in &cloud.points {
        out.extend_from_slice(p);
    }
    out
}

fn cloud_from_values(values: &[f64]) -> PointCloud {
    let points = values
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    PointCloud {
        points,
        frame: Frame::Ego,
    }
}

/// Box list <-> flat reals, 8 per detection: x y z l w h yaw score.
pub fn serialize_detections(dets: &[Detection]) -> Vec<f64> {
    let mut out = Vec::with_capacity(dets.len() * 8);
    for d in dets {
        out.extend_from_slice(&[
            d.box_label.center[0],
            d.box_label.center[1],
            d.box_label.center[2],
            d.box_label.dims[0],
            d.box_label.dims[1],
            d.box_label.dims[2],
            d.box_label.yaw,
            d.score,
        ]);
    }
    out
}

/// Parse recovered detection payloads; garbage boxes (non-positive or
/// non-finite dimensions) are discarded, scores clamp to [0, 1].
pub fn parse_detections(values: &[f64]) -> Vec<Detection> {
    values
        .chunks_exact(8)
        .filter_map(|c| {
            let box_label = BoxLabel::new([c[0], c[1], c[2]], [c[3], c[4], c[5]], c[6]).ok()?;
            Some(Detection {
                box_label,
                score: c[7].clamp(0.0, 1.0),
            })
        })
        .collect()
}

struct AgentData {
    /// CAV cloud transformed to the ego frame and sender-side cropped.
    cloud: PointCloud,
    distance: f64,
}

fn local_bev(
    cloud: &PointCloud,
    spec: &VoxelGridSpec,
) -> FeatureMapBEV {
    bev_collapse(&voxel_features(&voxelize(cloud, spec)))
}

fn local_f3d(cloud: &PointCloud, spec: &VoxelGridSpec) -> FeatureMap3D {
    voxel_features(&voxelize(cloud, spec))
}

/// Detections the ego produces from its own cloud alone.
pub fn ego_only_detections(s: &Scenario, pcfg: &PipelineConfig) -> Result<Vec<Detection>, FusionError> {
    let spec = pcfg.grid_spec()?;
    let ego_cloud = crop_cloud_to_range(&s.clouds[0], &pcfg.range);
    Ok(nms(
        detect_head(&local_bev(&ego_cloud, &spec), &pcfg.detector),
        pcfg.nms_iou,
    ))
}

/// Run one frame end to end for the chosen scheme and transport.
/// Per-CAV randomness derives from `frame_seed` and the CAV id, so frames
/// and CAV transmissions are reproducible and order-independent.
pub fn run_pipeline(
    s: &Scenario,
    scheme: FusionScheme,
    transport: &Transport,
    pcfg: &PipelineConfig,
    frame_seed: u64,
) -> Result<FrameResult, FusionError> {
    let spec = pcfg.grid_spec()?;
    let ego_cloud = crop_cloud_to_range(&s.clouds[0], &pcfg.range);
    let agents: Vec<AgentData> = (0..s.num_cavs())
        .map(|k| {
            let in_ego = transform_to_ego(&s.clouds[1 + k], &s.cav_poses[k], &s.ego_pose);
            AgentData {
                cloud: crop_cloud_to_range(&in_ego, &pcfg.range),
                distance: s.cav_distance(k),
            }
        })
        .collect();

    let mut diagnostics: Vec<CavDiagnostic> = Vec::with_capacity(agents.len());
    let mut record = |cav: usize, outcome: &LinkOutcome, elements: usize| match outcome {
        LinkOutcome::Skipped => diagnostics.push(CavDiagnostic {
            cav: cav as u32,
            rms_error: None,
            dropped: false,
            elements,
        }),
        LinkOutcome::Recovered { rms, .. } => diagnostics.push(CavDiagnostic {
            cav: cav as u32,
            rms_error: Some(*rms),
            dropped: false,
            elements,
        }),
        LinkOutcome::Dropped => diagnostics.push(CavDiagnostic {
            cav: cav as u32,
            rms_error: None,
            dropped: true,
            elements,
        }),
    };

    let detections = match scheme {
        FusionScheme::Early => {
            let mut recovered = Vec::new();
            for (k, a) in agents.iter().enumerate() {
                let flat = flatten_cloud(&a.cloud);
                let mut rng = derive_rng(frame_seed, &[k as u64]);
                let (outcome, n) = send(&flat, 3, transport, a.distance, &mut rng)?;
                record(k, &outcome, n);
                if let LinkOutcome::Recovered { values, .. } = outcome {
                    // Receiver-side crop filters large distortions away.
                    recovered.push(crop_cloud_to_range(&cloud_from_values(&values), &pcfg.range));
                }
            }
            let fused = early_fuse(&ego_cloud, &recovered);
            nms(
                detect_head(&local_bev(&fused, &spec), &pcfg.detector),
                pcfg.nms_iou,
            )
        }
        FusionScheme::Intermediate => {
            let ego_full = local_bev(&ego_cloud, &spec);
            let ego_ds = downsample_feature(&ego_full, pcfg.downsample_factor)?;
            let mut cav_maps = Vec::new();
            for (k, a) in agents.iter().enumerate() {
                let ds = downsample_feature(&local_bev(&a.cloud, &spec), pcfg.downsample_factor)?;
                let flat = ds.to_interleaved();
                let mut rng = derive_rng(frame_seed, &[k as u64]);
                let (outcome, n) = send(&flat, ds.channels, transport, a.distance, &mut rng)?;
                record(k, &outcome, n);
                if let LinkOutcome::Recovered { values, .. } = outcome {
                    cav_maps.push(FeatureMapBEV::from_interleaved(&values, &ds)?);
                }
            }
            // Attention runs at the downsampled level; the fused map is
            // then restored to full resolution and merged with the ego's
            // own full-resolution features, standing in for the
            // upsample-and-concatenate stage of the detection backbone.
            let fused = attentive_fuse(&ego_ds, &cav_maps)?;
            let restored = upsample_feature(&fused, pcfg.downsample_factor);
            let merged = merge_max(&restored, &ego_full)?;
            let fused_detector = DetectorConfig {
                tau: pcfg.fused_tau,
                min_cells: pcfg.fused_min_cells,
                deflate: Some(pcfg.fused_deflate),
                ..pcfg.detector
            };
            nms(detect_head(&merged, &fused_detector), pcfg.nms_iou)
        }
        FusionScheme::Late => {
            let ego_dets = nms(
                detect_head(&local_bev(&ego_cloud, &spec), &pcfg.detector),
                pcfg.nms_iou,
            );
            let mut recovered_dets = Vec::new();
            for (k, a) in agents.iter().enumerate() {
                let local = nms(
                    detect_head(&local_bev(&a.cloud, &spec), &pcfg.detector),
                    pcfg.nms_iou,
                );
                let flat = serialize_detections(&local);
                let mut rng = derive_rng(frame_seed, &[k as u64]);
                let (outcome, n) = send(&flat, 8, transport, a.distance, &mut rng)?;
                record(k, &outcome, n);
                if let LinkOutcome::Recovered { values, .. } = outcome {
                    recovered_dets.push(parse_detections(&values));
                }
            }
            late_fuse(&ego_dets, &recovered_dets, pcfg.nms_iou, &pcfg.range)
        }
        FusionScheme::ConvFeatureLate {
            feature,
            use_autoencoder,
        } => {
            let ego_bev = local_bev(&ego_cloud, &spec);
            let mut recovered_maps: Vec<Option<FeatureMapBEV>> = Vec::new();
            for (k, a) in agents.iter().enumerate() {
                let mut rng = derive_rng(frame_seed, &[k as u64]);
                let map = if use_autoencoder {
                    let codec_params = pcfg.codec.as_ref().ok_or(FusionError::CodecMissing)?;
                    // 3D maps are fused along height before encoding, so
                    // both feature levels compress the collapsed map.
                    let bev = local_bev(&a.cloud, &spec);
                    let z = codec::ae_encode(&bev, codec_params)?;
                    let flat = z.to_interleaved();
                    let (outcome, n) = send(&flat, z.channels, transport, a.distance, &mut rng)?;
                    record(k, &outcome, n);
                    match outcome {
                        LinkOutcome::Recovered { values, .. } => {
                            let z_hat = FeatureMapBEV::from_interleaved(&values, &z)?;
                            Some(codec::ae_decode(&z_hat, codec_params)?)
                        }
                        _ => None,
                    }
                } else {
                    match feature {
                        FeatureLevel::ThreeD => {
                            let f3d = local_f3d(&a.cloud, &spec);
                            let flat = f3d.to_interleaved();
                            let (outcome, n) = send(
                                &flat,
                                VOXEL_FEATURE_CHANNELS,
                                transport,
                                a.distance,
                                &mut rng,
                            )?;
                            record(k, &outcome, n);
                            match outcome {
                                LinkOutcome::Recovered { values, .. } => {
                                    let f3d_hat = FeatureMap3D::from_interleaved(&values, &f3d)?;
                                    Some(bev_collapse(&f3d_hat))
                                }
                                _ => None,
                            }
                        }
                        FeatureLevel::TwoD => {
                            let bev = local_bev(&a.cloud, &spec);
                            let flat = bev.to_interleaved();
                            let (outcome, n) =
                                send(&flat, bev.channels, transport, a.distance, &mut rng)?;
                            record(k, &outcome, n);
                            match outcome {
                                LinkOutcome::Recovered { values, .. } => {
                                    Some(FeatureMapBEV::from_interleaved(&values, &bev)?)
                                }
                                _ => None,
                            }
                        }
                    }
                };
                recovered_maps.push(map);
            }
            conv_feature_late_fuse(
                &ego_bev,
                &recovered_maps,
                &pcfg.detector,
                pcfg.nms_iou,
                &pcfg.range,
            )
        }
    };

    Ok(FrameResult {
        detections,
        diagnostics,
    })
}
