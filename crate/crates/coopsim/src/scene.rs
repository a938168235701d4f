//! Synthetic multi-vehicle scenarios.
//!
//! A scenario holds the ego pose, the connected vehicle (CAV) poses, the
//! ground-truth boxes (ego frame) and one simulated LiDAR cloud per agent in
//! that agent's own frame. The LiDAR model casts 2D azimuth rays against box
//! silhouettes: the nearest hit per ray wins (occlusion), hits beyond the
//! sensor range are dropped, and each hit is replicated at several heights
//! along the box side with additive Gaussian noise.

use crate::geom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("value `{name}` must be {requirement}, got {value}")]
    InvalidValue {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("scenario config invalid: {0}")]
    InvalidConfig(String),
    #[error("could not place object {index} without overlap after {attempts} attempts")]
    PlacementFailed { index: usize, attempts: usize },
    #[error("scenario parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Planar pose: position in meters, yaw wrapped to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Result<Self, SceneError> {
        for (name, v) in [("x", x), ("y", y), ("z", z), ("yaw", yaw)] {
            if !v.is_finite() {
                return Err(SceneError::InvalidValue {
                    name,
                    requirement: "finite",
                    value: v,
                });
            }
        }
        Ok(Self {
            x,
            y,
            z,
            yaw: geom::wrap_angle(yaw),
        })
    }

    pub fn origin() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            yaw: 0.0,
        }
    }

    /// Map a point from this pose's frame into the world frame.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.x + c * p[0] - s * p[1],
            self.y + s * p[0] + c * p[1],
            self.z + p[2],
        ]
    }

    /// Map a world point into this pose's frame.
    pub fn from_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.z]
    }
}

/// Oriented 3D box: center, full dimensions (length, width, height), yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLabel {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
}

impl BoxLabel {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Result<Self, SceneError> {
        for (name, v) in [
            ("cx", center[0]),
            ("cy", center[1]),
            ("cz", center[2]),
            ("yaw", yaw),
        ] {
            if !v.is_finite() {
                return Err(SceneError::InvalidValue {
                    name,
                    requirement: "finite",
                    value: v,
                });
            }
        }
        for (name, v) in [("length", dims[0]), ("width", dims[1]), ("height", dims[2])] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SceneError::InvalidValue {
                    name,
                    requirement: "> 0",
                    value: v,
                });
            }
        }
        Ok(Self {
            center,
            dims,
            yaw: geom::wrap_angle(yaw),
        })
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        geom::rect_corners(self.center[0], self.center[1], self.dims[0], self.dims[1], self.yaw)
    }

    pub fn z_span(&self) -> (f64, f64) {
        (
            self.center[2] - 0.5 * self.dims[2],
            self.center[2] + 0.5 * self.dims[2],
        )
    }

    /// The same box expressed in another frame (rigid yaw + translation).
    pub fn transformed(&self, src: &Pose, dst: &Pose) -> BoxLabel {
        let world = src.to_world(self.center);
        let center = dst.from_world(world);
        BoxLabel {
            center,
            dims: self.dims,
            yaw: geom::wrap_angle(self.yaw + src.yaw - dst.yaw),
        }
    }
}

/// Which agent's frame a cloud lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Ego,
    Cav(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Axis-aligned detection range rectangle in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionRange {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl DetectionRange {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self, SceneError> {
        if !(x_max > x_min) {
            return Err(SceneError::InvalidValue {
                name: "x_max - x_min",
                requirement: "> 0",
                value: x_max - x_min,
            });
        }
        if !(y_max > y_min) {
            return Err(SceneError::InvalidValue {
                name: "y_max - y_min",
                requirement: "> 0",
                value: y_max - y_min,
            });
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorConfig {
    /// Maximum sensing distance in meters.
    pub max_range: f64,
    /// Number of azimuth rays over the full circle.
    pub azimuth_steps: usize,
    /// Std of additive Gaussian noise per point coordinate.
    pub noise_std: f64,
    /// Points generated along the vertical box side per ray hit.
    pub height_samples: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            max_range: 60.0,
            azimuth_steps: 720,
            noise_std: 0.02,
            height_samples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub num_cavs: usize,
    pub num_objects: usize,
    pub range: DetectionRange,
    pub sensor: SensorConfig,
    /// Maximum ego-to-CAV distance.
    pub comm_range: f64,
    /// Ego-to-CAV distance band the poses are drawn from.
    pub cav_distance: (f64, f64),
    /// Minimum BEV gap enforced between ground-truth boxes.
    pub min_gap_m: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_cavs: 2,
            num_objects: 8,
            range: DetectionRange::new(-140.0, 140.0, -40.0, 40.0).unwrap(),
            sensor: SensorConfig::default(),
            comm_range: 50.0,
            cav_distance: (18.0, 22.0),
            min_gap_m: 1.2,
        }
    }
}

/// A full synthetic frame. Clouds are indexed agent-major: `clouds[0]` is
/// the ego cloud (ego frame), `clouds[1 + k]` is CAV k's cloud (its frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub ego_pose: Pose,
    pub cav_poses: Vec<Pose>,
    /// Ground truth in the ego frame.
    pub gt_boxes: Vec<BoxLabel>,
    pub clouds: Vec<PointCloud>,
}

impl Scenario {
    /// Ego-to-CAV ground distance, the `d_k` of the link model.
    pub fn cav_distance(&self, k: usize) -> f64 {
        let p = &self.cav_poses[k];
        ((p.x - self.ego_pose.x).powi(2) + (p.y - self.ego_pose.y).powi(2)).sqrt()
    }

    pub fn num_cavs(&self) -> usize {
        self.cav_poses.len()
    }
}

fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Ray hits with the index of the box they landed on; used internally and
/// by the occlusion tests.
pub(crate) fn sample_lidar_labeled<R: Rng + ?Sized>(
    pose: &Pose,
    boxes_world: &[BoxLabel],
    sensor: &SensorConfig,
    rng: &mut R,
) -> Vec<([f64; 3], usize)> {
    const MIN_RANGE: f64 = 0.2;
    let mut out = Vec::new();
    // Box silhouettes in the sensor frame.
    let world_pose = *pose;
    let local: Vec<BoxLabel> = boxes_world
        .iter()
        .map(|b| b.transformed(&Pose::origin(), &world_pose))
        .collect();
    let corners: Vec<[[f64; 2]; 4]> = local.iter().map(|b| b.bev_corners()).collect();
    for step in 0..sensor.azimuth_steps {
        let theta = 2.0 * std::f64::consts::PI * step as f64 / sensor.azimuth_steps as f64;
        let dir = [theta.cos(), theta.sin()];
        let mut nearest: Option<(f64, usize)> = None;
        for (bi, cs) in corners.iter().enumerate() {
            for side in 0..4 {
                let a = cs[side];
                let b = cs[(side + 1) % 4];
                if let Some(t) = geom::ray_segment_intersection([0.0, 0.0], dir, a, b) {
                    if t >= MIN_RANGE && t <= sensor.max_range {
                        if nearest.map_or(true, |(tn, _)| t < tn) {
                            nearest = Some((t, bi));
                        }
                    }
                }
            }
        }
        if let Some((t, bi)) = nearest {
            let hx = t * dir[0];
            let hy = t * dir[1];
            let (z_lo, z_hi) = local[bi].z_span();
            let n = sensor.height_samples.max(1);
            for j in 0..n {
                let z = z_lo + (j as f64 + 0.5) * (z_hi - z_lo) / n as f64;
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                let nz: f64 = rng.sample(StandardNormal);
                out.push((
                    [
                        hx + sensor.noise_std * nx,
                        hy + sensor.noise_std * ny,
                        z + sensor.noise_std * nz,
                    ],
                    bi,
                ));
            }
        }
    }
    out
}

/// Simulated LiDAR scan from `pose` against boxes given in the world frame.
/// The returned cloud is in the sensor's own frame.
pub fn sample_lidar<R: Rng + ?Sized>(
    pose: &Pose,
    boxes_world: &[BoxLabel],
    sensor: &SensorConfig,
    rng: &mut R,
) -> PointCloud {
    let points = sample_lidar_labeled(pose, boxes_world, sensor, rng)
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    PointCloud {
        points,
        frame: Frame::Ego, // caller re-tags; default tag for standalone scans
    }
}

/// Rigid transform of a cloud from `src`'s frame into `ego`'s frame.
pub fn transform_to_ego(cloud: &PointCloud, src: &Pose, ego: &Pose) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|&p| ego.from_world(src.to_world(p)))
        .collect();
    PointCloud {
        points,
        frame: Frame::Ego,
    }
}

/// Keep points whose (x, y) lie inside the range rectangle.
pub fn crop_cloud_to_range(cloud: &PointCloud, range: &DetectionRange) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .filter(|p| range.contains(p[0], p[1]))
            .copied()
            .collect(),
        frame: cloud.frame,
    }
}

fn boxes_too_close(a: &BoxLabel, b: &BoxLabel, gap: f64) -> bool {
    let inflate = |x: &BoxLabel| {
        geom::rect_corners(
            x.center[0],
            x.center[1],
            x.dims[0] + gap,
            x.dims[1] + gap,
            x.yaw,
        )
    };
    geom::rect_iou_from_corners(&inflate(a), &inflate(b)) > 0.0
}

fn point_near_box(x: f64, y: f64, b: &BoxLabel, margin: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let dx = x - b.center[0];
    let dy = y - b.center[1];
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= 0.5 * b.dims[0] + margin && v.abs() <= 0.5 * b.dims[1] + margin
}

/// Generate a scenario: ego + CAV poses, non-overlapping vehicle-sized
/// ground-truth boxes inside the detection range, and per-agent clouds.
pub fn generate_scenario<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<Scenario, SceneError> {
    if cfg.num_cavs > 6 {
        return Err(SceneError::InvalidConfig(format!(
            "num_cavs must be in [0, 6], got {}",
            cfg.num_cavs
        )));
    }
    if cfg.num_objects == 0 || cfg.num_objects > 30 {
        return Err(SceneError::InvalidConfig(format!(
            "num_objects must be in [1, 30], got {}",
            cfg.num_objects
        )));
    }
    if !(cfg.comm_range > 0.0) {
        return Err(SceneError::InvalidConfig(format!(
            "comm_range must be > 0, got {}",
            cfg.comm_range
        )));
    }

    let ego_pose = Pose::new(
        sample_uniform(rng, -10.0, 10.0),
        sample_uniform(rng, -10.0, 10.0),
        0.0,
        sample_uniform(rng, -std::f64::consts::PI, std::f64::consts::PI),
    )?;

    let (d_lo, d_hi) = cfg.cav_distance;
    if !(d_lo > 0.0) || !(d_hi >= d_lo) || d_hi > cfg.comm_range {
        return Err(SceneError::InvalidConfig(format!(
            "cav_distance band ({d_lo}, {d_hi}) must be positive and within comm_range"
        )));
    }
    let mut cav_poses = Vec::with_capacity(cfg.num_cavs);
    for _ in 0..cfg.num_cavs {
        let d = sample_uniform(rng, d_lo, d_hi);
        let angle = sample_uniform(rng, -std::f64::consts::PI, std::f64::consts::PI);
        cav_poses.push(Pose::new(
            ego_pose.x + d * angle.cos(),
            ego_pose.y + d * angle.sin(),
            0.0,
            sample_uniform(rng, -std::f64::consts::PI, std::f64::consts::PI),
        )?);
    }

    // Agent positions in the ego frame; objects must keep clear of them.
    let mut agent_xy = vec![[0.0, 0.0]];
    for p in &cav_poses {
        let local = ego_pose.from_world([p.x, p.y, p.z]);
        agent_xy.push([local[0], local[1]]);
    }

    let margin = 3.0;
    let (px_lo, px_hi) = (cfg.range.x_min + margin, cfg.range.x_max - margin);
    let (py_lo, py_hi) = (cfg.range.y_min + margin, cfg.range.y_max - margin);
    if !(px_hi > px_lo) || !(py_hi > py_lo) {
        return Err(SceneError::InvalidConfig(
            "detection range too small for object placement".into(),
        ));
    }

    let mut gt_boxes: Vec<BoxLabel> = Vec::with_capacity(cfg.num_objects);
    const MAX_ATTEMPTS: usize = 200;
    for index in 0..cfg.num_objects {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let l = sample_uniform(rng, 3.5, 5.5);
            let w = sample_uniform(rng, 1.6, 2.1);
            let h = sample_uniform(rng, 1.4, 1.8);
            let yaw = sample_uniform(rng, -std::f64::consts::PI, std::f64::consts::PI);
            let cx = sample_uniform(rng, px_lo, px_hi);
            let cy = sample_uniform(rng, py_lo, py_hi);
            let candidate = BoxLabel::new([cx, cy, 0.5 * h], [l, w, h], yaw)?;
            let clashes_box = gt_boxes
                .iter()
                .any(|b| boxes_too_close(b, &candidate, cfg.min_gap_m));
            let clashes_agent = agent_xy
                .iter()
                .any(|&[ax, ay]| point_near_box(ax, ay, &candidate, 1.5));
            if !clashes_box && !clashes_agent {
                gt_boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SceneError::PlacementFailed {
                index,
                attempts: MAX_ATTEMPTS,
            });
        }
    }

    // Boxes in the world frame for ray casting.
    let world_boxes: Vec<BoxLabel> = gt_boxes
        .iter()
        .map(|b| b.transformed(&ego_pose, &Pose::origin()))
        .collect();

    let mut clouds = Vec::with_capacity(1 + cfg.num_cavs);
    let mut ego_cloud = sample_lidar(&ego_pose, &world_boxes, &cfg.sensor, rng);
    ego_cloud.frame = Frame::Ego;
    clouds.push(ego_cloud);
    for (k, p) in cav_poses.iter().enumerate() {
        let mut c = sample_lidar(p, &world_boxes, &cfg.sensor, rng);
        c.frame = Frame::Cav(k as u32);
        clouds.push(c);
    }

    Ok(Scenario {
        ego_pose,
        cav_poses,
        gt_boxes,
        clouds,
    })
}

fn fmt_g9(v: f64) -> String {
    format!("{:.8e}", v)
}

/// Serialize a scenario to the line-delimited text format. Numbers carry 9
/// significant digits; write -> parse -> write is byte-identical.
pub fn write_scenario(s: &Scenario) -> String {
    let mut out = String::new();
    out.push_str("# coopsim scene v1\n");
    let _ = writeln!(
        out,
        "ego {} {} {} {}",
        fmt_g9(s.ego_pose.x),
        fmt_g9(s.ego_pose.y),
        fmt_g9(s.ego_pose.z),
        fmt_g9(s.ego_pose.yaw)
    );
    for (k, p) in s.cav_poses.iter().enumerate() {
        let _ = writeln!(
            out,
            "cav {} {} {} {} {}",
            k,
            fmt_g9(p.x),
            fmt_g9(p.y),
            fmt_g9(p.z),
            fmt_g9(p.yaw)
        );
    }
    for b in &s.gt_boxes {
        let _ = writeln!(
            out,
            "box {} {} {} {} {} {} {}",
            fmt_g9(b.center[0]),
            fmt_g9(b.center[1]),
            fmt_g9(b.center[2]),
            fmt_g9(b.dims[0]),
            fmt_g9(b.dims[1]),
            fmt_g9(b.dims[2]),
            fmt_g9(b.yaw)
        );
    }
    for (idx, cloud) in s.clouds.iter().enumerate() {
        let tag = if idx == 0 {
            "ego".to_string()
        } else {
            format!("{}", idx - 1)
        };
        for p in &cloud.points {
            let _ = writeln!(
                out,
                "pt {} {} {} {}",
                tag,
                fmt_g9(p[0]),
                fmt_g9(p[1]),
                fmt_g9(p[2])
            );
        }
    }
    out
}

/// Parse the scenario text format.
pub fn parse_scenario(text: &str) -> Result<Scenario, SceneError> {
    let mut ego_pose: Option<Pose> = None;
    let mut cav_poses: Vec<(usize, Pose)> = Vec::new();
    let mut gt_boxes: Vec<BoxLabel> = Vec::new();
    let mut ego_points: Vec<[f64; 3]> = Vec::new();
    let mut cav_points: Vec<(usize, [f64; 3])> = Vec::new();

    let err = |line: usize, message: String| SceneError::Parse { line, message };
    let parse_f64 = |tok: &str, line: usize| -> Result<f64, SceneError> {
        tok.parse::<f64>()
            .map_err(|e| err(line, format!("bad number `{tok}`: {e}")))
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "ego" => {
                if toks.len() != 5 {
                    return Err(err(line_no, "ego expects 4 fields".into()));
                }
                let vals: Vec<f64> = toks[1..]
                    .iter()
                    .map(|t| parse_f64(t, line_no))
                    .collect::<Result<_, _>>()?;
                ego_pose = Some(
                    Pose::new(vals[0], vals[1], vals[2], vals[3])
                        .map_err(|e| err(line_no, e.to_string()))?,
                );
            }
            "cav" => {
                if toks.len() != 6 {
                    return Err(err(line_no, "cav expects 5 fields".into()));
                }
                let id: usize = toks[1]
                    .parse()
                    .map_err(|_| err(line_no, format!("bad cav id `{}`", toks[1])))?;
                let vals: Vec<f64> = toks[2..]
                    .iter()
                    .map(|t| parse_f64(t, line_no))
                    .collect::<Result<_, _>>()?;
                cav_poses.push((
                    id,
                    Pose::new(vals[0], vals[1], vals[2], vals[3])
                        .map_err(|e| err(line_no, e.to_string()))?,
                ));
            }
            "box" => {
                if toks.len() != 8 {
                    return Err(err(line_no, "box expects 7 fields".into()));
                }
                let vals: Vec<f64> = toks[1..]
                    .iter()
                    .map(|t| parse_f64(t, line_no))
                    .collect::<Result<_, _>>()?;
                gt_boxes.push(
                    BoxLabel::new([vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]], vals[6])
                        .map_err(|e| err(line_no, e.to_string()))?,
                );
            }
            "pt" => {
                if toks.len() != 5 {
                    return Err(err(line_no, "pt expects 4 fields".into()));
                }
                let vals: Vec<f64> = toks[2..]
                    .iter()
                    .map(|t| parse_f64(t, line_no))
                    .collect::<Result<_, _>>()?;
                let p = [vals[0], vals[1], vals[2]];
                if toks[1] == "ego" {
                    ego_points.push(p);
                } else {
                    let id: usize = toks[1]
                        .parse()
                        .map_err(|_| err(line_no, format!("bad agent `{}`", toks[1])))?;
                    cav_points.push((id, p));
                }
            }
            other => return Err(err(line_no, format!("unknown record `{other}`"))),
        }
    }

    let ego_pose = ego_pose.ok_or_else(|| err(0, "missing ego record".into()))?;
    cav_poses.sort_by_key(|(id, _)| *id);
    for (expect, (id, _)) in cav_poses.iter().enumerate() {
        if *id != expect {
            return Err(err(0, format!("cav ids must be contiguous from 0, got {id}")));
        }
    }
    let num_cavs = cav_poses.len();
    let mut clouds = vec![PointCloud {
        points: ego_points,
        frame: Frame::Ego,
    }];
    for k in 0..num_cavs {
        clouds.push(PointCloud {
            points: Vec::new(),
            frame: Frame::Cav(k as u32),
        });
    }
    for (id, p) in cav_points {
        if id >= num_cavs {
            return Err(err(0, format!("point references unknown cav {id}")));
        }
        clouds[1 + id].points.push(p);
    }

    Ok(Scenario {
        ego_pose,
        cav_poses: cav_poses.into_iter().map(|(_, p)| p).collect(),
        gt_boxes,
        clouds,
    })
}
