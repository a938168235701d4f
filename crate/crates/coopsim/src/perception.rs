//! Deterministic toy perception stack.
//!
//! Point clouds are voxelized on a fixed grid, each voxel gets a hand-crafted
//! feature vector, the 3D map collapses to a bird's-eye-view map, and a
//! geometric detection head turns thresholded occupancy into oriented boxes.
//! No learned weights anywhere, so every downstream number is reproducible.
//!
//! Feature channels per voxel: `[log(1 + count), mean dx, mean dy, mean dz,
//! occupancy]`. The BEV collapse max-pools each channel over height and
//! appends an occupied-height-fraction channel; that appended channel is
//! what the detection head thresholds. Counting height cells above 0.5
//! rather than averaging raw values makes the fraction a majority vote when
//! the 3D map has been through a noisy channel.

use crate::geom;
use crate::scene::{BoxLabel, DetectionRange, PointCloud};
use thiserror::Error;

/// Index of the binary occupancy channel in a 3D feature map.
pub const OCCUPANCY_3D_CHANNEL: usize = 4;
/// Channels produced per voxel by [`voxel_features`].
pub const VOXEL_FEATURE_CHANNELS: usize = 5;
/// Channels of a collapsed BEV map (voxel channels + height fraction).
pub const BEV_CHANNELS: usize = VOXEL_FEATURE_CHANNELS + 1;

#[derive(Debug, Error, PartialEq)]
pub enum PerceptionError {
    #[error("grid spec invalid: {0}")]
    InvalidGrid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("downsample factor {factor} does not divide dims ({h}, {w})")]
    IndivisibleDims { factor: usize, h: usize, w: usize },
}

/// Geometry of a voxel grid: `dims = [D, H, W]` cells along (z, y, x).
/// The BEV plane uses `cell_size`; the vertical axis has its own
/// resolution so height binning can stay coarse when the plane is fine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub cell_size: f64,
    pub z_cell_size: f64,
    pub dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], cell_size: f64, dims: [usize; 3]) -> Result<Self, PerceptionError> {
        Self::with_z_cell(origin, cell_size, cell_size, dims)
    }

    pub fn with_z_cell(
        origin: [f64; 3],
        cell_size: f64,
        z_cell_size: f64,
        dims: [usize; 3],
    ) -> Result<Self, PerceptionError> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(PerceptionError::InvalidGrid(format!(
                "cell_size must be > 0, got {cell_size}"
            )));
        }
        if !(z_cell_size > 0.0) || !z_cell_size.is_finite() {
            return Err(PerceptionError::InvalidGrid(format!(
                "z_cell_size must be > 0, got {z_cell_size}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(PerceptionError::InvalidGrid(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        Ok(Self {
            origin,
            cell_size,
            z_cell_size,
            dims,
        })
    }

    /// Grid covering a detection range with the given vertical extent.
    pub fn covering(
        range: &DetectionRange,
        cell_size: f64,
        z_origin: f64,
        z_cell_size: f64,
        depth_cells: usize,
    ) -> Result<Self, PerceptionError> {
        let w = ((range.x_max - range.x_min) / cell_size).round() as usize;
        let h = ((range.y_max - range.y_min) / cell_size).round() as usize;
        Self::with_z_cell(
            [range.x_min, range.y_min, z_origin],
            cell_size,
            z_cell_size,
            [depth_cells, h.max(1), w.max(1)],
        )
    }

    fn cell_of(&self, p: &[f64; 3]) -> Option<[usize; 3]> {
        let wx = ((p[0] - self.origin[0]) / self.cell_size).floor();
        let hy = ((p[1] - self.origin[1]) / self.cell_size).floor();
        let dz = ((p[2] - self.origin[2]) / self.z_cell_size).floor();
        if wx < 0.0 || hy < 0.0 || dz < 0.0 {
            return None;
        }
        let (d, h, w) = (dz as usize, hy as usize, wx as usize);
        if d >= self.dims[0] || h >= self.dims[1] || w >= self.dims[2] {
            return None;
        }
        Some([d, h, w])
    }

    fn cell_center(&self, d: usize, h: usize, w: usize) -> [f64; 3] {
        [
            self.origin[0] + (w as f64 + 0.5) * self.cell_size,
            self.origin[1] + (h as f64 + 0.5) * self.cell_size,
            self.origin[2] + (d as f64 + 0.5) * self.z_cell_size,
        ]
    }

    fn num_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }
}

/// Per-voxel point count and centroid-offset accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: VoxelGridSpec,
    pub counts: Vec<u32>,
    pub offset_sums: Vec<[f64; 3]>,
}

impl VoxelGrid {
    pub fn total_count(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Dense 3D feature map, layout `[channel][d][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap3D {
    pub spec: VoxelGridSpec,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureMap3D {
    fn index(&self, c: usize, d: usize, h: usize, w: usize) -> usize {
        ((c * self.spec.dims[0] + d) * self.spec.dims[1] + h) * self.spec.dims[2] + w
    }

    pub fn get(&self, c: usize, d: usize, h: usize, w: usize) -> f64 {
        self.values[self.index(c, d, h, w)]
    }

    /// Flatten cell-major with channels interleaved, matching an axis
    /// arity of `channels` for per-channel payload normalization.
    pub fn to_interleaved(&self) -> Vec<f64> {
        let [dd, hh, ww] = self.spec.dims;
        let mut out = Vec::with_capacity(self.values.len());
        for d in 0..dd {
            for h in 0..hh {
                for w in 0..ww {
                    for c in 0..self.channels {
                        out.push(self.get(c, d, h, w));
                    }
                }
            }
        }
        out
    }

    /// Rebuild from the interleaved layout using `template` for geometry.
    pub fn from_interleaved(values: &[f64], template: &FeatureMap3D) -> Result<Self, PerceptionError> {
        if values.len() != template.values.len() {
            return Err(PerceptionError::ShapeMismatch(format!(
                "expected {} values, got {}",
                template.values.len(),
                values.len()
            )));
        }
        let mut map = FeatureMap3D {
            spec: template.spec,
            channels: template.channels,
            values: vec![0.0; values.len()],
        };
        let [dd, hh, ww] = map.spec.dims;
        let mut i = 0;
        for d in 0..dd {
            for h in 0..hh {
                for w in 0..ww {
                    for c in 0..map.channels {
                        let idx = map.index(c, d, h, w);
                        map.values[idx] = values[i];
                        i += 1;
                    }
                }
            }
        }
        Ok(map)
    }
}

/// Dense BEV feature map, layout `[channel][h][w]`, georeferenced so boxes
/// can be expressed in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapBEV {
    pub channels: usize,
    /// `[H, W]` cells along (y, x).
    pub dims: [usize; 2],
    /// World coordinates of cell (0, 0)'s low corner.
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub values: Vec<f64>,
}

impl FeatureMapBEV {
    pub fn zeros(channels: usize, dims: [usize; 2], origin: [f64; 2], cell_size: f64) -> Self {
        Self {
            channels,
            dims,
            origin,
            cell_size,
            values: vec![0.0; channels * dims[0] * dims[1]],
        }
    }

    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.dims[0] + h) * self.dims[1] + w
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.values[self.index(c, h, w)]
    }

    pub fn set(&mut self, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(c, h, w);
        self.values[i] = v;
    }

    pub fn num_elements(&self) -> usize {
        self.values.len()
    }

    pub fn same_shape(&self, other: &FeatureMapBEV) -> bool {
        self.channels == other.channels
            && self.dims == other.dims
            && (self.origin[0] - other.origin[0]).abs() < 1e-9
            && (self.origin[1] - other.origin[1]).abs() < 1e-9
            && (self.cell_size - other.cell_size).abs() < 1e-12
    }

    /// Cell-major, channel-interleaved flattening (axis arity = channels).
    pub fn to_interleaved(&self) -> Vec<f64> {
        let [hh, ww] = self.dims;
        let mut out = Vec::with_capacity(self.values.len());
        for h in 0..hh {
            for w in 0..ww {
                for c in 0..self.channels {
                    out.push(self.get(c, h, w));
                }
            }
        }
        out
    }

    pub fn from_interleaved(values: &[f64], template: &FeatureMapBEV) -> Result<Self, PerceptionError> {
        if values.len() != template.values.len() {
            return Err(PerceptionError::ShapeMismatch(format!(
                "expected {} values, got {}",
                template.values.len(),
                values.len()
            )));
        }
        let mut map = FeatureMapBEV::zeros(
            template.channels,
            template.dims,
            template.origin,
            template.cell_size,
        );
        let [hh, ww] = map.dims;
        let mut i = 0;
        for h in 0..hh {
            for w in 0..ww {
                for c in 0..map.channels {
                    map.set(c, h, w, values[i]);
                    i += 1;
                }
            }
        }
        Ok(map)
    }
}

/// An oriented box with a confidence score in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub box_label: BoxLabel,
    pub score: f64,
}

/// Detection head configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    /// Occupancy threshold in (0, 1).
    pub tau: f64,
    /// Components smaller than this many cells are dropped.
    pub min_cells: usize,
    /// Boxes get this fixed vertical center and height (scoring is BEV).
    pub box_z: f64,
    pub box_height: f64,
    /// Subtracted from each fitted box dimension to undo the half-cell
    /// dilation of cell-corner hulls. `None` uses the map's cell size.
    pub deflate: Option<f64>,
    /// Components whose fitted short side is below this are discarded:
    /// a sliver cannot be a vehicle footprint.
    pub min_extent: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            tau: 0.12,
            min_cells: 10,
            box_z: 0.8,
            box_height: 1.6,
            deflate: None,
            min_extent: 0.7,
        }
    }
}

/// Assign in-range points to voxels, accumulating counts and offsets from
/// cell centers. Out-of-range points are dropped.
pub fn voxelize(cloud: &PointCloud, spec: &VoxelGridSpec) -> VoxelGrid {
    let n = spec.num_cells();
    let mut counts = vec![0u32; n];
    let mut offset_sums = vec![[0.0; 3]; n];
    for p in &cloud.points {
        if let Some([d, h, w]) = spec.cell_of(p) {
            let i = spec.index(d, h, w);
            counts[i] += 1;
            let c = spec.cell_center(d, h, w);
            for k in 0..3 {
                offset_sums[i][k] += p[k] - c[k];
            }
        }
    }
    VoxelGrid {
        spec: *spec,
        counts,
        offset_sums,
    }
}

/// Hand-crafted voxel features:
/// `[log(1 + count), mean dx, mean dy, mean dz, occupancy indicator]`.
pub fn voxel_features(grid: &VoxelGrid) -> FeatureMap3D {
    let [dd, hh, ww] = grid.spec.dims;
    let mut map = FeatureMap3D {
        spec: grid.spec,
        channels: VOXEL_FEATURE_CHANNELS,
        values: vec![0.0; VOXEL_FEATURE_CHANNELS * dd * hh * ww],
    };
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                let i = grid.spec.index(d, h, w);
                let count = grid.counts[i];
                if count == 0 {
                    continue;
                }
                let inv = 1.0 / count as f64;
                let vals = [
                    (1.0 + count as f64).ln(),
                    grid.offset_sums[i][0] * inv,
                    grid.offset_sums[i][1] * inv,
                    grid.offset_sums[i][2] * inv,
                    1.0,
                ];
                for (c, v) in vals.iter().enumerate() {
                    let idx = map.index(c, d, h, w);
                    map.values[idx] = *v;
                }
            }
        }
    }
    map
}

/// Collapse a 3D map to BEV: max-pool over height per channel, plus an
/// appended occupied-height-fraction channel counting height cells whose
/// occupancy feature exceeds 0.5.
pub fn bev_collapse(f3d: &FeatureMap3D) -> FeatureMapBEV {
    let [dd, hh, ww] = f3d.spec.dims;
    let mut bev = FeatureMapBEV::zeros(
        f3d.channels + 1,
        [hh, ww],
        [f3d.spec.origin[0], f3d.spec.origin[1]],
        f3d.spec.cell_size,
    );
    let fraction_channel = f3d.channels;
    for h in 0..hh {
        for w in 0..ww {
            for c in 0..f3d.channels {
                let mut m = f64::NEG_INFINITY;
                for d in 0..dd {
                    m = m.max(f3d.get(c, d, h, w));
                }
                bev.set(c, h, w, m);
            }
            let occupied = (0..dd)
                .filter(|&d| f3d.get(OCCUPANCY_3D_CHANNEL, d, h, w) > 0.5)
                .count();
            bev.set(fraction_channel, h, w, occupied as f64 / dd as f64);
        }
    }
    bev
}

/// Non-overlapping average pooling per channel; georeference scales.
pub fn downsample_feature(f: &FeatureMapBEV, factor: usize) -> Result<FeatureMapBEV, PerceptionError> {
    if factor == 0 {
        return Err(PerceptionError::IndivisibleDims {
            factor,
            h: f.dims[0],
            w: f.dims[1],
        });
    }
    if factor == 1 {
        return Ok(f.clone());
    }
    if f.dims[0] % factor != 0 || f.dims[1] % factor != 0 {
        return Err(PerceptionError::IndivisibleDims {
            factor,
            h: f.dims[0],
            w: f.dims[1],
        });
    }
    let dims = [f.dims[0] / factor, f.dims[1] / factor];
    let mut out = FeatureMapBEV::zeros(f.channels, dims, f.origin, f.cell_size * factor as f64);
    let inv = 1.0 / (factor * factor) as f64;
    for c in 0..f.channels {
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                let mut acc = 0.0;
                for dh in 0..factor {
                    for dw in 0..factor {
                        acc += f.get(c, h * factor + dh, w * factor + dw);
                    }
                }
                out.set(c, h, w, acc * inv);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor upsampling per channel; georeference rescales. The
/// deterministic stand-in for the deconvolution that restores feature maps
/// to full resolution after downsampled processing.
pub fn upsample_feature(f: &FeatureMapBEV, factor: usize) -> FeatureMapBEV {
    if factor <= 1 {
        return f.clone();
    }
    let dims = [f.dims[0] * factor, f.dims[1] * factor];
    let mut out = FeatureMapBEV::zeros(f.channels, dims, f.origin, f.cell_size / factor as f64);
    for c in 0..f.channels {
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                out.set(c, h, w, f.get(c, h / factor, w / factor));
            }
        }
    }
    out
}

/// Element-wise max of two same-shaped maps; the stand-in for
/// concatenating feature levels before the detection head.
pub fn merge_max(a: &FeatureMapBEV, b: &FeatureMapBEV) -> Result<FeatureMapBEV, PerceptionError> {
    if !a.same_shape(b) {
        return Err(PerceptionError::ShapeMismatch(
            "merge_max operands differ in shape".into(),
        ));
    }
    let mut out = a.clone();
    for (o, v) in out.values.iter_mut().zip(&b.values) {
        *o = o.max(*v);
    }
    Ok(out)
}

/// Threshold the occupancy (height-fraction) channel, find 8-connected
/// components, and fit a minimum-area rotated rectangle to each component's
/// cell corners. Score is the mean occupancy over the component, clamped.
pub fn detect_head(f: &FeatureMapBEV, cfg: &DetectorConfig) -> Vec<Detection> {
    let occ = f.channels - 1;
    let [hh, ww] = f.dims;
    let deflate = cfg.deflate.unwrap_or(f.cell_size);
    let mut visited = vec![false; hh * ww];
    let mut detections = Vec::new();
    let mut stack = Vec::new();
    for h0 in 0..hh {
        for w0 in 0..ww {
            let start = h0 * ww + w0;
            if visited[start] || !(f.get(occ, h0, w0) > cfg.tau) {
                continue;
            }
            // Flood fill one component.
            let mut cells: Vec<(usize, usize)> = Vec::new();
            visited[start] = true;
            stack.push((h0, w0));
            while let Some((h, w)) = stack.pop() {
                cells.push((h, w));
                for dh in -1i64..=1 {
                    for dw in -1i64..=1 {
                        if dh == 0 && dw == 0 {
                            continue;
                        }
                        let nh = h as i64 + dh;
                        let nw = w as i64 + dw;
                        if nh < 0 || nw < 0 || nh >= hh as i64 || nw >= ww as i64 {
                            continue;
                        }
                        let (nh, nw) = (nh as usize, nw as usize);
                        let ni = nh * ww + nw;
                        if !visited[ni] && f.get(occ, nh, nw) > cfg.tau {
                            visited[ni] = true;
                            stack.push((nh, nw));
                        }
                    }
                }
            }
            if cells.len() < cfg.min_cells {
                continue;
            }
            // Cell-corner hull in world coordinates.
            let mut corners = Vec::with_capacity(cells.len() * 4);
            for &(h, w) in &cells {
                let x0 = f.origin[0] + w as f64 * f.cell_size;
                let y0 = f.origin[1] + h as f64 * f.cell_size;
                corners.push([x0, y0]);
                corners.push([x0 + f.cell_size, y0]);
                corners.push([x0, y0 + f.cell_size]);
                corners.push([x0 + f.cell_size, y0 + f.cell_size]);
            }
            let Some((cx, cy, l_raw, w_raw, yaw)) = geom::min_area_rect(&corners) else {
                continue;
            };
            let l = (l_raw - deflate).max(0.5 * f.cell_size);
            let w = (w_raw - deflate).max(0.5 * f.cell_size);
            if l.min(w) < cfg.min_extent {
                continue;
            }
            let score = (cells.iter().map(|&(h, w)| f.get(occ, h, w)).sum::<f64>()
                / cells.len() as f64)
                .clamp(0.0, 1.0);
            if let Ok(box_label) =
                BoxLabel::new([cx, cy, cfg.box_z], [l, w, cfg.box_height], yaw)
            {
                detections.push(Detection { box_label, score });
            }
        }
    }
    detections
}

/// BEV intersection-over-union of two oriented boxes.
pub fn rotated_iou_bev(a: &BoxLabel, b: &BoxLabel) -> f64 {
    geom::rect_iou_from_corners(&a.bev_corners(), &b.bev_corners())
}

/// Total order used by NMS and matching: score descending, then center x,
/// then center y ascending.
pub fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.box_label.center[0].total_cmp(&b.box_label.center[0]))
        .then(a.box_label.center[1].total_cmp(&b.box_label.center[1]))
}

/// Greedy non-maximum suppression at the given BEV IoU threshold.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    'outer: for d in dets {
        for k in &kept {
            if rotated_iou_bev(&d.box_label, &k.box_label) > iou_thresh {
                continue 'outer;
            }
        }
        kept.push(d);
    }
    kept
}

/// Keep detections whose box center lies inside the range rectangle.
pub fn crop_detections_to_range(dets: &[Detection], range: &DetectionRange) -> Vec<Detection> {
    dets.iter()
        .filter(|d| range.contains(d.box_label.center[0], d.box_label.center[1]))
        .copied()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use crate::scene::Frame;
    use rand::Rng;

    fn spec_16m() -> VoxelGridSpec {
        VoxelGridSpec::new([-16.0, -16.0, -0.4], 0.4, [8, 80, 80]).unwrap()
    }

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        PointCloud {
            points,
            frame: Frame::Ego,
        }
    }

    #[test]
    fn voxelize_empty_cloud() {
        let g = voxelize(&cloud(vec![]), &spec_16m());
        assert_eq!(g.total_count(), 0);
        assert!(g.offset_sums.iter().all(|o| o == &[0.0; 3]));
    }

    #[test]
    fn voxelize_centered_point() {
        let spec = spec_16m();
        let c = spec.cell_center(2, 40, 40);
        let g = voxelize(&cloud(vec![c]), &spec);
        assert_eq!(g.total_count(), 1);
        let i = spec.index(2, 40, 40);
        assert_eq!(g.counts[i], 1);
        for k in 0..3 {
            assert!(g.offset_sums[i][k].abs() < 1e-12);
        }
    }

    #[test]
    fn voxelize_counts_in_range_points() {
        let mut rng = derive_rng(40, &[]);
        let spec = spec_16m();
        let pts: Vec<[f64; 3]> = (0..5000)
            .map(|_| {
                [
                    rng.random::<f64>() * 50.0 - 25.0,
                    rng.random::<f64>() * 50.0 - 25.0,
                    rng.random::<f64>() * 5.0 - 1.0,
                ]
            })
            .collect();
        let in_range = pts
            .iter()
            .filter(|p| {
                p[0] >= -16.0
                    && p[0] < 16.0
                    && p[1] >= -16.0
                    && p[1] < 16.0
                    && p[2] >= -0.4
                    && p[2] < -0.4 + 8.0 * 0.4
            })
            .count() as u64;
        let g = voxelize(&cloud(pts), &spec);
        assert_eq!(g.total_count(), in_range);
    }

    #[test]
    fn features_of_single_point() {
        let spec = spec_16m();
        let c = spec.cell_center(1, 10, 10);
        let g = voxelize(&cloud(vec![c]), &spec);
        let f = voxel_features(&g);
        assert!((f.get(0, 1, 10, 10) - 2f64.ln()).abs() < 1e-12);
        for ch in 1..4 {
            assert_eq!(f.get(ch, 1, 10, 10), 0.0);
        }
        assert_eq!(f.get(4, 1, 10, 10), 1.0);
        // Empty voxel stays zero.
        assert_eq!(f.get(0, 0, 0, 0), 0.0);
        assert_eq!(f.get(4, 0, 0, 0), 0.0);
    }

    #[test]
    fn features_are_local_to_voxel() {
        // Features at a voxel depend only on that voxel's points.
        let spec = spec_16m();
        let a = vec![[1.05, 2.13, 0.41], [1.11, 2.02, 0.44]];
        let b = vec![[-5.0, -7.0, 0.9], [-5.1, -7.2, 1.0], [-4.9, -6.8, 0.8]];
        let merged: Vec<[f64; 3]> = a.iter().chain(b.iter()).copied().collect();
        let fm = voxel_features(&voxelize(&cloud(merged), &spec));
        let fa = voxel_features(&voxelize(&cloud(a.clone()), &spec));
        let cell = spec.cell_of(&a[0]).unwrap();
        for c in 0..VOXEL_FEATURE_CHANNELS {
            assert_eq!(
                fm.get(c, cell[0], cell[1], cell[2]),
                fa.get(c, cell[0], cell[1], cell[2])
            );
        }
    }

    #[test]
    fn collapse_zero_map() {
        let spec = VoxelGridSpec::new([0.0, 0.0, 0.0], 0.5, [4, 6, 6]).unwrap();
        let f3d = voxel_features(&voxelize(&cloud(vec![]), &spec));
        let bev = bev_collapse(&f3d);
        assert_eq!(bev.channels, BEV_CHANNELS);
        assert!(bev.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collapse_single_voxel() {
        let spec = VoxelGridSpec::new([0.0, 0.0, 0.0], 0.5, [4, 6, 6]).unwrap();
        let c = spec.cell_center(2, 3, 4);
        let f3d = voxel_features(&voxelize(&cloud(vec![c]), &spec));
        let bev = bev_collapse(&f3d);
        assert!((bev.get(0, 3, 4) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(bev.get(4, 3, 4), 1.0);
        assert!((bev.get(5, 3, 4) - 0.25).abs() < 1e-12); // 1 of 4 height cells
    }

    #[test]
    fn collapse_invariant_to_height_permutation() {
        let spec = VoxelGridSpec::new([0.0, 0.0, 0.0], 0.5, [4, 3, 3]).unwrap();
        let mut rng = derive_rng(41, &[]);
        let mut f3d = FeatureMap3D {
            spec,
            channels: VOXEL_FEATURE_CHANNELS,
            values: (0..VOXEL_FEATURE_CHANNELS * 4 * 9)
                .map(|_| rng.random::<f64>())
                .collect(),
        };
        let before = bev_collapse(&f3d);
        // Swap two height slices across all channels.
        for c in 0..VOXEL_FEATURE_CHANNELS {
            for h in 0..3 {
                for w in 0..3 {
                    let i = f3d.index(c, 0, h, w);
                    let j = f3d.index(c, 3, h, w);
                    f3d.values.swap(i, j);
                }
            }
        }
        let after = bev_collapse(&f3d);
        for (a, b) in before.values.iter().zip(&after.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_identity_and_constants() {
        let mut f = FeatureMapBEV::zeros(2, [4, 4], [0.0, 0.0], 0.4);
        for v in f.values.iter_mut() {
            *v = 3.5;
        }
        let same = downsample_feature(&f, 1).unwrap();
        assert_eq!(same, f);
        let half = downsample_feature(&f, 2).unwrap();
        assert_eq!(half.dims, [2, 2]);
        assert!((half.cell_size - 0.8).abs() < 1e-12);
        assert!(half.values.iter().all(|&v| (v - 3.5).abs() < 1e-12));
        assert!(matches!(
            downsample_feature(&f, 3),
            Err(PerceptionError::IndivisibleDims { .. })
        ));
    }

    #[test]
    fn downsample_preserves_global_mean() {
        let mut rng = derive_rng(42, &[]);
        let mut f = FeatureMapBEV::zeros(3, [8, 12], [0.0, 0.0], 0.4);
        for v in f.values.iter_mut() {
            *v = rng.random::<f64>() * 4.0 - 2.0;
        }
        let ds = downsample_feature(&f, 4).unwrap();
        let mean = |m: &FeatureMapBEV| m.values.iter().sum::<f64>() / m.values.len() as f64;
        assert!((mean(&f) - mean(&ds)).abs() < 1e-12);
    }

    #[test]
    fn head_empty_map() {
        let f = FeatureMapBEV::zeros(BEV_CHANNELS, [10, 10], [0.0, 0.0], 0.4);
        assert!(detect_head(&f, &DetectorConfig::default()).is_empty());
    }

    #[test]
    fn head_solid_block() {
        // A 10x4 cell block of occupancy 1 at cells (10..20, 6..10).
        let mut f = FeatureMapBEV::zeros(BEV_CHANNELS, [32, 32], [0.0, 0.0], 0.4);
        let occ = BEV_CHANNELS - 1;
        for w in 10..20 {
            for h in 6..10 {
                f.set(occ, h, w, 1.0);
            }
        }
        let dets = detect_head(&f, &DetectorConfig::default());
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert!((d.score - 1.0).abs() < 1e-12);
        // Block extent is 4.0 x 1.6 m; fitted box within one cell per side.
        let (lo, hi) = if d.box_label.dims[0] >= d.box_label.dims[1] {
            (d.box_label.dims[1], d.box_label.dims[0])
        } else {
            (d.box_label.dims[0], d.box_label.dims[1])
        };
        assert!((hi - 4.0).abs() <= 0.8, "long side {hi}");
        assert!((lo - 1.6).abs() <= 0.8, "short side {lo}");
        assert!((d.box_label.center[0] - (10.0 + 20.0) / 2.0 * 0.4).abs() < 0.2);
        assert!((d.box_label.center[1] - (6.0 + 10.0) / 2.0 * 0.4).abs() < 0.2);
    }

    #[test]
    fn head_min_cells_filter() {
        let mut f = FeatureMapBEV::zeros(BEV_CHANNELS, [16, 16], [0.0, 0.0], 0.4);
        let occ = BEV_CHANNELS - 1;
        f.set(occ, 3, 3, 1.0);
        f.set(occ, 3, 4, 1.0);
        let dets = detect_head(&f, &DetectorConfig::default());
        assert!(dets.is_empty(), "2-cell speck should be dropped");
    }

    #[test]
    fn head_score_monotone_in_added_points() {
        // Raising occupancy on an existing component never lowers its score.
        let mut f = FeatureMapBEV::zeros(BEV_CHANNELS, [16, 16], [0.0, 0.0], 0.4);
        let occ = BEV_CHANNELS - 1;
        for w in 4..9 {
            for h in 4..7 {
                f.set(occ, h, w, 0.5);
            }
        }
        let base = detect_head(&f, &DetectorConfig::default());
        assert_eq!(base.len(), 1);
        f.set(occ, 5, 5, 0.9);
        let more = detect_head(&f, &DetectorConfig::default());
        assert_eq!(more.len(), 1);
        assert!(more[0].score >= base[0].score);
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = BoxLabel::new([0.0, 0.0, 0.8], [4.0, 2.0, 1.6], 0.3).unwrap();
        assert!((rotated_iou_bev(&a, &a) - 1.0).abs() < 1e-12);
        let b = BoxLabel::new([100.0, 0.0, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap();
        assert_eq!(rotated_iou_bev(&a, &b), 0.0);
    }

    #[test]
    fn iou_against_monte_carlo_oracle() {
        // Area-sampling oracle, independent of the clipping code: sample
        // uniform points over a bounding region, classify by inverse
        // rotation, and estimate the IoU from the hit counts.
        let mut rng = derive_rng(43, &[]);
        let inside = |b: &BoxLabel, x: f64, y: f64| {
            let (s, c) = b.yaw.sin_cos();
            let dx = x - b.center[0];
            let dy = y - b.center[1];
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            u.abs() <= 0.5 * b.dims[0] && v.abs() <= 0.5 * b.dims[1]
        };
        let check = |a: BoxLabel, b: BoxLabel, samples: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let r = a.dims[0].max(a.dims[1]).max(b.dims[0]).max(b.dims[1]);
            let x_lo = a.center[0].min(b.center[0]) - r;
            let x_hi = a.center[0].max(b.center[0]) + r;
            let y_lo = a.center[1].min(b.center[1]) - r;
            let y_hi = a.center[1].max(b.center[1]) + r;
            let (mut na, mut nb, mut ni) = (0u64, 0u64, 0u64);
            for _ in 0..samples {
                let x = x_lo + (x_hi - x_lo) * rng.random::<f64>();
                let y = y_lo + (y_hi - y_lo) * rng.random::<f64>();
                let ia = inside(&a, x, y);
                let ib = inside(&b, x, y);
                na += ia as u64;
                nb += ib as u64;
                ni += (ia && ib) as u64;
            }
            let union = na + nb - ni;
            let mc = if union == 0 { 0.0 } else { ni as f64 / union as f64 };
            let exact = rotated_iou_bev(&a, &b);
            assert!(
                (exact - mc).abs() < 0.01,
                "iou {exact} vs mc {mc} for {a:?} {b:?}"
            );
        };
        // The 45-degree case: two unit squares, same center.
        check(
            BoxLabel::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0).unwrap(),
            BoxLabel::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], std::f64::consts::PI / 4.0).unwrap(),
            1_000_000,
            &mut rng,
        );
        for _ in 0..6 {
            let a = BoxLabel::new(
                [rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0, 0.0],
                [
                    0.5 + rng.random::<f64>() * 4.0,
                    0.5 + rng.random::<f64>() * 3.0,
                    1.0,
                ],
                rng.random::<f64>() * 6.0 - 3.0,
            )
            .unwrap();
            let b = BoxLabel::new(
                [rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0, 0.0],
                [
                    0.5 + rng.random::<f64>() * 4.0,
                    0.5 + rng.random::<f64>() * 3.0,
                    1.0,
                ],
                rng.random::<f64>() * 6.0 - 3.0,
            )
            .unwrap();
            check(a, b, 1_000_000, &mut rng);
        }
    }

    #[test]
    fn iou_symmetry_and_rigid_invariance() {
        let mut rng = derive_rng(44, &[]);
        for _ in 0..50 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                BoxLabel::new(
                    [rng.random::<f64>() * 6.0 - 3.0, rng.random::<f64>() * 6.0 - 3.0, 0.0],
                    [0.5 + rng.random::<f64>() * 4.0, 0.5 + rng.random::<f64>() * 2.0, 1.0],
                    rng.random::<f64>() * 6.0 - 3.0,
                )
                .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let ab = rotated_iou_bev(&a, &b);
            let ba = rotated_iou_bev(&b, &a);
            assert!((ab - ba).abs() < 1e-12);
            // Common rigid motion.
            let (tx, ty, dyaw) = (
                rng.random::<f64>() * 10.0 - 5.0,
                rng.random::<f64>() * 10.0 - 5.0,
                rng.random::<f64>() * 6.0 - 3.0,
            );
            let mv = |b: &BoxLabel| {
                let (s, c) = dyaw.sin_cos();
                BoxLabel::new(
                    [
                        c * b.center[0] - s * b.center[1] + tx,
                        s * b.center[0] + c * b.center[1] + ty,
                        b.center[2],
                    ],
                    b.dims,
                    b.yaw + dyaw,
                )
                .unwrap()
            };
            let moved = rotated_iou_bev(&mv(&a), &mv(&b));
            assert!((moved - ab).abs() < 1e-9, "iou changed under rigid motion");
        }
    }

    #[test]
    fn nms_trivial_cases() {
        let d = |x: f64, score: f64| Detection {
            box_label: BoxLabel::new([x, 0.0, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap(),
            score,
        };
        let single = nms(vec![d(0.0, 0.7)], 0.5);
        assert_eq!(single.len(), 1);
        let duo = nms(vec![d(0.0, 0.9), d(0.0, 0.8)], 0.5);
        assert_eq!(duo.len(), 1);
        assert_eq!(duo[0].score, 0.9);
    }

    fn brute_force_nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
        // Reference: repeatedly pick the global best by the total order and
        // delete everything overlapping it.
        let mut pool: Vec<Detection> = dets.to_vec();
        let mut kept = Vec::new();
        while !pool.is_empty() {
            let best_idx = (0..pool.len())
                .min_by(|&i, &j| detection_order(&pool[i], &pool[j]))
                .unwrap();
            let best = pool.remove(best_idx);
            pool.retain(|d| rotated_iou_bev(&d.box_label, &best.box_label) <= iou_thresh);
            kept.push(best);
        }
        kept
    }

    #[test]
    fn nms_matches_brute_force() {
        let mut rng = derive_rng(45, &[]);
        for case in 0..100 {
            let n = 1 + (rng.random::<u32>() % 10) as usize;
            let dets: Vec<Detection> = (0..n)
                .map(|_| Detection {
                    box_label: BoxLabel::new(
                        [rng.random::<f64>() * 12.0 - 6.0, rng.random::<f64>() * 12.0 - 6.0, 0.8],
                        [2.0 + rng.random::<f64>() * 3.0, 1.0 + rng.random::<f64>() * 2.0, 1.6],
                        rng.random::<f64>() * 6.0 - 3.0,
                    )
                    .unwrap(),
                    score: (rng.random::<u32>() % 10) as f64 / 10.0, // force score ties
                })
                .collect();
            let thresh = rng.random::<f64>() * 0.8;
            let fast = nms(dets.clone(), thresh);
            let slow = brute_force_nms(&dets, thresh);
            assert_eq!(fast.len(), slow.len(), "case {case}");
            for (a, b) in fast.iter().zip(&slow) {
                assert_eq!(a, b, "case {case}");
            }
            // Antichain property: no kept pair exceeds the threshold.
            for i in 0..fast.len() {
                for j in i + 1..fast.len() {
                    assert!(
                        rotated_iou_bev(&fast[i].box_label, &fast[j].box_label) <= thresh
                    );
                }
            }
        }
    }

    #[test]
    fn crop_detections_by_center() {
        let range = DetectionRange::new(-10.0, 10.0, -10.0, 10.0).unwrap();
        let d = |x: f64| Detection {
            box_label: BoxLabel::new([x, 0.0, 0.8], [4.0, 2.0, 1.6], 0.0).unwrap(),
            score: 0.5,
        };
        let kept = crop_detections_to_range(&[d(0.0), d(11.0), d(-9.9)], &range);
        assert_eq!(kept.len(), 2);
    }
}
