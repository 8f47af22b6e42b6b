//! Coordinate plumbing between point clouds and diffusion states.
//!
//! Range images index elevation by row (`v`, top row = `fov_up`) and azimuth by
//! column (`u`, column 0 = +π, increasing clockwise seen from above). Depth is
//! stored as `r / r_max`; a pixel with depth 0 carries no return.

use std::f64::consts::PI;

use crate::error::{config_err, validation_err, Result};

/// Containment slack applied on box faces, in meters.
const FACE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks that every value is finite and intensities lie in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite()) {
                return validation_err(format!("point {i} has a non-finite value"));
            }
            if !(0.0..=1.0).contains(&p.intensity) {
                return validation_err(format!(
                    "point {i} intensity {} outside [0, 1]",
                    p.intensity
                ));
            }
        }
        Ok(())
    }

    /// Flattens to `N×4` rows of `(x, y, z, intensity)`.
    pub fn to_rows(&self) -> Vec<f64> {
        self.points
            .iter()
            .flat_map(|p| [p.x, p.y, p.z, p.intensity])
            .collect()
    }

    pub fn from_rows(rows: &[f64]) -> Self {
        Self::new(
            rows.chunks_exact(4)
                .map(|c| Point::new(c[0], c[1], c[2], c[3]))
                .collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorConfig {
    pub height: usize,
    pub width: usize,
    pub fov_up: f64,
    pub fov_down: f64,
    pub r_max: f64,
}

impl SensorConfig {
    /// 64-beam sensor: 64×1024, +3° to −25°, 80 m.
    pub fn kitti_like() -> Self {
        Self {
            height: 64,
            width: 1024,
            fov_up: 3f64.to_radians(),
            fov_down: (-25f64).to_radians(),
            r_max: 80.0,
        }
    }

    /// 32-beam sensor with the same angular limits.
    pub fn nuscenes_like() -> Self {
        Self {
            height: 32,
            ..Self::kitti_like()
        }
    }

    pub fn with_size(self, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return config_err(format!(
                "sensor resolution {}x{} below 2x2",
                self.height, self.width
            ));
        }
        if !(self.fov_up > self.fov_down) {
            return config_err("fov_up must exceed fov_down");
        }
        if !(self.r_max > 0.0) {
            return config_err("r_max must be positive");
        }
        Ok(())
    }

    pub fn fov(&self) -> f64 {
        self.fov_up - self.fov_down
    }

    /// Azimuth of the center of column `u`.
    pub fn column_azimuth(&self, u: usize) -> f64 {
        PI * (1.0 - 2.0 * (u as f64 + 0.5) / self.width as f64)
    }

    /// Elevation of the center of row `v`.
    pub fn row_elevation(&self, v: usize) -> f64 {
        self.fov_down + (1.0 - (v as f64 + 0.5) / self.height as f64) * self.fov()
    }

    /// Unit direction through the center of pixel `(v, u)`.
    pub fn pixel_direction(&self, v: usize, u: usize) -> [f64; 3] {
        let theta = self.column_azimuth(u);
        let phi = self.row_elevation(v);
        [phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()]
    }
}

/// Two-channel range image, stored row-major with the channel fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RangeImage {
    pub const CHANNELS: usize = 2;

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * Self::CHANNELS],
        }
    }

    pub fn for_sensor(cfg: &SensorConfig) -> Self {
        Self::zeros(cfg.height, cfg.width)
    }

    pub fn depth(&self, v: usize, u: usize) -> f64 {
        self.data[(v * self.width + u) * 2]
    }

    pub fn intensity(&self, v: usize, u: usize) -> f64 {
        self.data[(v * self.width + u) * 2 + 1]
    }

    pub fn set(&mut self, v: usize, u: usize, depth: f64, intensity: f64) {
        let i = (v * self.width + u) * 2;
        self.data[i] = depth;
        self.data[i + 1] = intensity;
    }

    pub fn is_valid(&self, v: usize, u: usize) -> bool {
        self.depth(v, u) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.data.chunks_exact(2).filter(|c| c[0] > 0.0).count()
    }

    pub fn matches(&self, cfg: &SensorConfig) -> bool {
        self.height == cfg.height && self.width == cfg.width
    }

    /// Channel-major copy `[2, H, W]`, the layout the scene networks consume.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 2 * hw];
        for (p, px) in self.data.chunks_exact(2).enumerate() {
            out[p] = px[0];
            out[hw + p] = px[1];
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, chw: &[f64]) -> Self {
        let hw = height * width;
        assert_eq!(chw.len(), 2 * hw, "channel-major buffer has wrong length");
        let mut data = vec![0.0; 2 * hw];
        for p in 0..hw {
            data[2 * p] = chw[p];
            data[2 * p + 1] = chw[hw + p];
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Bookkeeping from a projection pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    /// Points that landed on a pixel (including those that lost a collision).
    pub projected: usize,
    pub dropped_out_of_fov: usize,
    pub dropped_zero_range: usize,
    /// Points that lost a pixel to a nearer point.
    pub collisions: usize,
}

/// A projected image together with the index of the point that won each pixel.
#[derive(Clone, Debug)]
pub struct Projection {
    pub image: RangeImage,
    pub winners: Vec<Option<usize>>,
    pub stats: ProjectionStats,
}

fn clamp_index(value: f64, len: usize) -> Option<usize> {
    let upper = len as f64;
    if value < -0.5 || value > upper + 0.5 || !value.is_finite() {
        return None;
    }
    let idx = value.floor();
    if idx < 0.0 {
        Some(0)
    } else if idx >= upper {
        Some(len - 1)
    } else {
        Some(idx as usize)
    }
}

/// Pixel `(v, u)` of a point, or `None` when it falls outside the field of view.
pub fn pixel_of(p: &Point, cfg: &SensorConfig) -> Option<(usize, usize)> {
    let r = p.range();
    if r == 0.0 {
        return None;
    }
    let theta = p.y.atan2(p.x);
    let phi = (p.z / r).clamp(-1.0, 1.0).asin();
    let u = 0.5 * (1.0 - theta / PI) * cfg.width as f64;
    let v = (1.0 - (phi - cfg.fov_down) / cfg.fov()) * cfg.height as f64;
    Some((clamp_index(v, cfg.height)?, clamp_index(u, cfg.width)?))
}

/// Spherical projection keeping, per pixel, the nearest point.
pub fn project_with_winners(cloud: &PointCloud, cfg: &SensorConfig) -> Projection {
    let mut image = RangeImage::for_sensor(cfg);
    let mut winners: Vec<Option<usize>> = vec![None; cfg.height * cfg.width];
    let mut best = vec![f64::INFINITY; cfg.height * cfg.width];
    let mut stats = ProjectionStats::default();
    for (i, p) in cloud.points.iter().enumerate() {
        let r = p.range();
        if r == 0.0 {
            stats.dropped_zero_range += 1;
            continue;
        }
        let Some((v, u)) = pixel_of(p, cfg) else {
            stats.dropped_out_of_fov += 1;
            continue;
        };
        stats.projected += 1;
        let pix = v * cfg.width + u;
        if winners[pix].is_some() {
            stats.collisions += 1;
        }
        if r < best[pix] {
            best[pix] = r;
            winners[pix] = Some(i);
            image.set(v, u, (r / cfg.r_max).min(1.0), p.intensity);
        }
    }
    Projection {
        image,
        winners,
        stats,
    }
}

pub fn project_to_range(cloud: &PointCloud, cfg: &SensorConfig) -> (RangeImage, ProjectionStats) {
    let proj = project_with_winners(cloud, cfg);
    (proj.image, proj.stats)
}

pub fn unproject_range(img: &RangeImage, cfg: &SensorConfig) -> Result<PointCloud> {
    if !img.matches(cfg) {
        return config_err(format!(
            "range image is {}x{} but sensor is {}x{}",
            img.height, img.width, cfg.height, cfg.width
        ));
    }
    let mut points = Vec::new();
    for v in 0..img.height {
        for u in 0..img.width {
            if !img.is_valid(v, u) {
                continue;
            }
            let r = img.depth(v, u) * cfg.r_max;
            let d = cfg.pixel_direction(v, u);
            points.push(Point::new(
                r * d[0],
                r * d[1],
                r * d[2],
                img.intensity(v, u),
            ));
        }
    }
    Ok(PointCloud::new(points))
}

/// Normalized bird's-eye-view occupancy, indexed `[ix * grid + iy]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BevHistogram {
    pub grid: usize,
    pub extent: f64,
    pub bins: Vec<f64>,
}

impl BevHistogram {
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.bins[ix * self.grid + iy]
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().sum()
    }
}

pub fn bev_histogram(cloud: &PointCloud, grid: usize, extent: f64) -> Result<BevHistogram> {
    if grid == 0 || !(extent > 0.0) {
        return config_err("BEV grid must be >= 1 and extent > 0");
    }
    let mut bins = vec![0.0; grid * grid];
    let scale = grid as f64 / (2.0 * extent);
    let mut kept = 0usize;
    for p in &cloud.points {
        if p.x < -extent || p.x >= extent || p.y < -extent || p.y >= extent {
            continue;
        }
        let ix = (((p.x + extent) * scale).floor() as usize).min(grid - 1);
        let iy = (((p.y + extent) * scale).floor() as usize).min(grid - 1);
        bins[ix * grid + iy] += 1.0;
        kept += 1;
    }
    if kept > 0 {
        let inv = 1.0 / kept as f64;
        bins.iter_mut().for_each(|b| *b *= inv);
    }
    Ok(BevHistogram { grid, extent, bins })
}

/// `V³` cells of (occupancy, mean fourth coordinate), indexed `(ix * V + iy) * V + iz`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub resolution: usize,
    pub occupancy: Vec<f64>,
    pub mean_intensity: Vec<f64>,
}

impl VoxelGrid {
    pub fn cell(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.resolution + iy) * self.resolution + iz
    }
}

/// Cell index along one axis for a coordinate in `[-1, 1]`.
pub fn voxel_coord(c: f64, resolution: usize) -> usize {
    let idx = ((c + 1.0) * 0.5 * resolution as f64).floor();
    if idx.is_nan() || idx < 0.0 {
        0
    } else {
        (idx as usize).min(resolution - 1)
    }
}

pub fn voxel_index(xyz: [f64; 3], resolution: usize) -> [usize; 3] {
    xyz.map(|c| voxel_coord(c, resolution))
}

/// Voxelizes `N×4` rows whose first three columns lie in `[-1, 1]`; the fourth
/// column is averaged per cell.
pub fn voxelize_rows(rows: &[f64], resolution: usize) -> VoxelGrid {
    let v3 = resolution * resolution * resolution;
    let mut counts = vec![0.0; v3];
    let mut sums = vec![0.0; v3];
    for r in rows.chunks_exact(4) {
        let [ix, iy, iz] = voxel_index([r[0], r[1], r[2]], resolution);
        let c = (ix * resolution + iy) * resolution + iz;
        counts[c] += 1.0;
        sums[c] += r[3];
    }
    let max = counts.iter().cloned().fold(0.0, f64::max);
    let mut occupancy = vec![0.0; v3];
    let mut mean_intensity = vec![0.0; v3];
    if max > 0.0 {
        for c in 0..v3 {
            if counts[c] > 0.0 {
                occupancy[c] = counts[c] / max;
                mean_intensity[c] = sums[c] / counts[c];
            }
        }
    }
    VoxelGrid {
        resolution,
        occupancy,
        mean_intensity,
    }
}

pub fn voxelize(cloud: &PointCloud, resolution: usize) -> VoxelGrid {
    voxelize_rows(&cloud.to_rows(), resolution)
}

/// Oriented 3D box. `l` spans the heading axis, `w` the lateral axis, `h` the vertical.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectBox {
    pub x_c: f64,
    pub y_c: f64,
    pub z_c: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub r: f64,
}

impl ObjectBox {
    pub fn new(x_c: f64, y_c: f64, z_c: f64, w: f64, l: f64, h: f64, r: f64) -> Self {
        Self {
            x_c,
            y_c,
            z_c,
            w,
            l,
            h,
            r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.l > 0.0 && self.h > 0.0) {
            return validation_err(format!(
                "box dimensions must be positive, got w={} l={} h={}",
                self.w, self.l, self.h
            ));
        }
        Ok(())
    }

    pub fn fields(&self) -> [f64; 7] {
        [self.x_c, self.y_c, self.z_c, self.w, self.l, self.h, self.r]
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x_c, self.y_c, self.z_c]
    }

    /// World offset from the center expressed in the box frame.
    pub fn to_local(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let (s, c) = self.r.sin_cos();
        let dx = x - self.x_c;
        let dy = y - self.y_c;
        [c * dx + s * dy, -s * dx + c * dy, z - self.z_c]
    }

    pub fn to_world(&self, local: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.r.sin_cos();
        [
            c * local[0] - s * local[1] + self.x_c,
            s * local[0] + c * local[1] + self.y_c,
            local[2] + self.z_c,
        ]
    }

    /// Closed-interval containment.
    pub fn contains(&self, p: &Point) -> bool {
        let [lx, ly, lz] = self.to_local(p.x, p.y, p.z);
        lx.abs() <= 0.5 * self.l + FACE_TOLERANCE
            && ly.abs() <= 0.5 * self.w + FACE_TOLERANCE
            && lz.abs() <= 0.5 * self.h + FACE_TOLERANCE
    }

    /// Ground-plane footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let hl = 0.5 * self.l;
        let hw = 0.5 * self.w;
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|[a, b]| {
            let w = self.to_world([a, b, 0.0]);
            [w[0], w[1]]
        })
    }
}

fn check_scale(cat_scale: [f64; 3]) -> Result<()> {
    if cat_scale.iter().any(|s| !(*s > 0.0)) {
        return config_err(format!(
            "category scale must be positive, got {cat_scale:?}"
        ));
    }
    Ok(())
}

/// Maps a world-frame object into its box frame, scaled to `[-1, 1]³`, with
/// intensity remapped to `[-1, 1]`.
pub fn normalize_object(
    cloud: &PointCloud,
    bx: &ObjectBox,
    cat_scale: [f64; 3],
) -> Result<PointCloud> {
    check_scale(cat_scale)?;
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let local = bx.to_local(p.x, p.y, p.z);
            Point::new(
                (local[0] / cat_scale[0]).clamp(-1.0, 1.0),
                (local[1] / cat_scale[1]).clamp(-1.0, 1.0),
                (local[2] / cat_scale[2]).clamp(-1.0, 1.0),
                2.0 * p.intensity - 1.0,
            )
        })
        .collect();
    Ok(PointCloud::new(points))
}

pub fn denormalize_object(
    cloud: &PointCloud,
    bx: &ObjectBox,
    cat_scale: [f64; 3],
) -> Result<PointCloud> {
    check_scale(cat_scale)?;
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let w = bx.to_world([p.x * cat_scale[0], p.y * cat_scale[1], p.z * cat_scale[2]]);
            Point::new(w[0], w[1], w[2], 0.5 * (p.intensity + 1.0))
        })
        .collect();
    Ok(PointCloud::new(points))
}

/// Per-category binary pixel masks, stored channel-major `[c][v][u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStack {
    pub height: usize,
    pub width: usize,
    pub categories: Vec<String>,
    pub data: Vec<u8>,
}

impl MaskStack {
    pub fn zeros(height: usize, width: usize, categories: Vec<String>) -> Result<Self> {
        if categories.is_empty() {
            return config_err("a mask stack needs at least one category");
        }
        let data = vec![0; categories.len() * height * width];
        Ok(Self {
            height,
            width,
            categories,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.categories.len()
    }

    pub fn category_index(&self, name: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| crate::Error::Config(format!("unknown category `{name}`")))
    }

    pub fn get(&self, c: usize, v: usize, u: usize) -> u8 {
        self.data[(c * self.height + v) * self.width + u]
    }

    pub fn set(&mut self, c: usize, v: usize, u: usize, value: u8) {
        self.data[(c * self.height + v) * self.width + u] = value;
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn area(&self, c: usize) -> usize {
        self.channel(c).iter().map(|&m| m as usize).sum()
    }

    /// Pixelwise union over categories.
    pub fn union(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = vec![0u8; hw];
        for c in 0..self.channels() {
            for (o, &m) in out.iter_mut().zip(self.channel(c)) {
                *o |= m;
            }
        }
        out
    }
}

/// Marks each pixel whose winning point lies inside a box with that box's
/// category. The first containing box in list order decides.
pub fn rasterize_boxes(
    boxes: &[(ObjectBox, String)],
    cloud: &PointCloud,
    cfg: &SensorConfig,
    categories: &[String],
) -> Result<MaskStack> {
    let projection = project_with_winners(cloud, cfg);
    rasterize_with_winners(boxes, cloud, &projection.winners, cfg, categories)
}

pub fn rasterize_with_winners(
    boxes: &[(ObjectBox, String)],
    cloud: &PointCloud,
    winners: &[Option<usize>],
    cfg: &SensorConfig,
    categories: &[String],
) -> Result<MaskStack> {
    let mut masks = MaskStack::zeros(cfg.height, cfg.width, categories.to_vec())?;
    let channel_of: Vec<usize> = boxes
        .iter()
        .map(|(_, cat)| masks.category_index(cat))
        .collect::<Result<_>>()?;
    if boxes.is_empty() {
        return Ok(masks);
    }
    for (pix, winner) in winners.iter().enumerate() {
        let Some(i) = winner else { continue };
        let p = &cloud.points[*i];
        if let Some(b) = boxes.iter().position(|(bx, _)| bx.contains(p)) {
            masks.set(channel_of[b], pix / cfg.width, pix % cfg.width, 1);
        }
    }
    Ok(masks)
}
