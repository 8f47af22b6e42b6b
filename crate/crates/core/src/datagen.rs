//! Synthetic LiDAR sweeps: a ground plane plus yaw-rotated cuboids, ray cast
//! once per range-image pixel.

use log::warn;
use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::geometry::{MaskStack, ObjectBox, Point, PointCloud, SensorConfig};

pub const GROUND_INTENSITY: f64 = 0.2;
pub const BOX_INTENSITY: f64 = 0.7;
pub const INTENSITY_NOISE: f64 = 0.05;

/// Ray parameter at which a unit ray from the origin enters `bx`, if it does.
pub fn ray_box_entry(dir: [f64; 3], bx: &ObjectBox) -> Option<f64> {
    let origin = bx.to_local(0.0, 0.0, 0.0);
    let (s, c) = bx.r.sin_cos();
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [0.5 * bx.l, 0.5 * bx.w, 0.5 * bx.h];
    let (mut t_in, mut t_out) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if origin[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - origin[k]) / d[k];
        let b = (half[k] - origin[k]) / d[k];
        t_in = t_in.max(a.min(b));
        t_out = t_out.min(a.max(b));
    }
    (t_in <= t_out && t_in > 0.0).then_some(t_in)
}

/// Ray parameter of the ground plane `z = ground_z` for a downward ray.
pub fn ray_ground(dir: [f64; 3], ground_z: f64) -> Option<f64> {
    (dir[2] < 0.0 && ground_z < 0.0).then(|| ground_z / dir[2])
}

fn noisy<R: Rng + ?Sized>(base: f64, rng: &mut R) -> f64 {
    (base + rng.random_range(-INTENSITY_NOISE..=INTENSITY_NOISE)).clamp(0.0, 1.0)
}

fn cast<R, F>(
    cfg: &SensorConfig,
    rng: &mut R,
    mut hit: F,
) -> Vec<(usize, usize, Point, Option<usize>)>
where
    R: Rng + ?Sized,
    F: FnMut([f64; 3]) -> Option<(f64, Option<usize>)>,
{
    let mut out = Vec::new();
    for v in 0..cfg.height {
        for u in 0..cfg.width {
            let d = cfg.pixel_direction(v, u);
            let Some((t, which)) = hit(d) else { continue };
            if t > cfg.r_max {
                continue;
            }
            let base = if which.is_some() {
                BOX_INTENSITY
            } else {
                GROUND_INTENSITY
            };
            let p = Point::new(t * d[0], t * d[1], t * d[2], noisy(base, rng));
            out.push((v, u, p, which));
        }
    }
    out
}

/// One sweep over the layout. Points are emitted in row-major pixel order; the
/// masks mark the pixels whose nearest hit is a box of that category.
pub fn synth_scene<R: Rng + ?Sized>(
    cfg: &SensorConfig,
    layout: &[(ObjectBox, String)],
    categories: &[String],
    ground_z: f64,
    rng: &mut R,
) -> Result<(PointCloud, MaskStack)> {
    cfg.validate()?;
    let mut masks = MaskStack::zeros(cfg.height, cfg.width, categories.to_vec())?;
    let channel_of: Vec<usize> = layout
        .iter()
        .map(|(_, c)| masks.category_index(c))
        .collect::<Result<_>>()?;
    let hits = cast(cfg, rng, |d| {
        let mut best = ray_ground(d, ground_z).map(|t| (t, None));
        for (i, (bx, _)) in layout.iter().enumerate() {
            if let Some(t) = ray_box_entry(d, bx) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, Some(i)));
                }
            }
        }
        best
    });
    let mut points = Vec::with_capacity(hits.len());
    for (v, u, p, which) in hits {
        if let Some(i) = which {
            masks.set(channel_of[i], v, u, 1);
        }
        points.push(p);
    }
    Ok((PointCloud::new(points), masks))
}

/// The points a sweep would return from `bx` alone, in world coordinates.
pub fn synth_object<R: Rng + ?Sized>(
    category: &str,
    bx: &ObjectBox,
    cfg: &SensorConfig,
    rng: &mut R,
) -> PointCloud {
    let hits = cast(cfg, rng, |d| ray_box_entry(d, bx).map(|t| (t, Some(0))));
    if hits.is_empty() {
        warn!(
            "{category} box at ({:.1}, {:.1}, {:.1}) returned no points",
            bx.x_c, bx.y_c, bx.z_c
        );
    }
    PointCloud::new(hits.into_iter().map(|h| h.2).collect())
}

/// Exactly `n` points: a random subset when the cloud is large enough,
/// otherwise every point followed by random repeats.
pub fn resample_points<R: Rng + ?Sized>(cloud: &PointCloud, n: usize, rng: &mut R) -> PointCloud {
    let m = cloud.len();
    if m == 0 {
        return PointCloud::default();
    }
    let points = if m >= n {
        let mut idx = sample(rng, m, n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| cloud.points[i]).collect()
    } else {
        let mut pts = cloud.points.clone();
        pts.extend((0..n - m).map(|_| cloud.points[rng.random_range(0..m)]));
        pts
    };
    PointCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pixel_of;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const GROUND: f64 = -1.73;

    fn cfg() -> SensorConfig {
        SensorConfig::kitti_like().with_size(32, 256)
    }

    fn car(x: f64) -> ObjectBox {
        ObjectBox::new(x, 0.0, GROUND + 0.75, 1.8, 4.2, 1.5, 0.3)
    }

    fn on_box_surface(p: &Point, bx: &ObjectBox) -> bool {
        let l = bx.to_local(p.x, p.y, p.z);
        let half = [0.5 * bx.l, 0.5 * bx.w, 0.5 * bx.h];
        let inside = (0..3).all(|k| l[k].abs() <= half[k] + 1e-6);
        inside && (0..3).any(|k| (l[k].abs() - half[k]).abs() <= 1e-6)
    }

    #[test]
    fn ground_only_sweep() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cloud, masks) = synth_scene(&c, &[], &["car".into()], GROUND, &mut rng).unwrap();
        assert_eq!(masks.area(0), 0);
        for p in &cloud.points {
            assert!((p.z - GROUND).abs() < 1e-6);
            assert!((p.intensity - GROUND_INTENSITY).abs() <= INTENSITY_NOISE + 1e-12);
            let (v, _) = pixel_of(p, &c).unwrap();
            assert!(c.row_elevation(v) < 0.0);
        }
        // Bottom row, first column: hand-evaluated ray-plane range.
        let v = c.height - 1;
        let phi = c.row_elevation(v);
        let expected = GROUND.abs() / (-phi).sin();
        let d = c.pixel_direction(v, 0);
        let p = cloud
            .points
            .iter()
            .find(|p| pixel_of(p, &c) == Some((v, 0)))
            .unwrap();
        assert!((p.range() - expected).abs() < 1e-9);
        assert!((p.x - expected * d[0]).abs() < 1e-9);
        // Upward rows return nothing.
        assert!(cloud.points.iter().all(|p| p.z < 0.0));
    }

    #[test]
    fn boxes_occlude_ground_and_fill_masks() {
        let c = cfg();
        let layout = vec![
            (car(8.0), "car".to_string()),
            (
                ObjectBox::new(-6.0, 3.0, GROUND + 0.9, 0.6, 0.6, 1.8, 0.0),
                "pedestrian".into(),
            ),
        ];
        let cats = vec!["car".to_string(), "pedestrian".to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cloud, masks) = synth_scene(&c, &layout, &cats, GROUND, &mut rng).unwrap();
        assert!(masks.area(0) > 0 && masks.area(1) > 0);
        let mut box_pixels = 0;
        for p in &cloud.points {
            let (v, u) = pixel_of(p, &c).unwrap();
            let which = layout.iter().position(|(bx, _)| on_box_surface(p, bx));
            match which {
                Some(i) => {
                    box_pixels += 1;
                    assert_eq!(masks.get(i, v, u), 1);
                    assert!((p.intensity - BOX_INTENSITY).abs() <= INTENSITY_NOISE + 1e-12);
                }
                None => {
                    assert!((p.z - GROUND).abs() < 1e-6);
                    assert_eq!(masks.get(0, v, u) + masks.get(1, v, u), 0);
                    // Nothing nearer along this ray.
                    let d = c.pixel_direction(v, u);
                    assert!(layout
                        .iter()
                        .all(|(bx, _)| ray_box_entry(d, bx).is_none_or(|t| t > p.range())));
                }
            }
        }
        assert_eq!(box_pixels, masks.area(0) + masks.area(1));
    }

    #[test]
    fn object_sparsity_and_determinism() {
        let c = SensorConfig::kitti_like();
        let (mut near, mut far) = (0usize, 0usize);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            near += synth_object("car", &car(10.0), &c, &mut rng).len();
            far += synth_object("car", &car(40.0), &c, &mut rng).len();
        }
        assert!(near > far && far > 0);
        let a = synth_object("car", &car(10.0), &c, &mut ChaCha8Rng::seed_from_u64(3));
        let b = synth_object("car", &car(10.0), &c, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let below = ObjectBox::new(2.0, 0.0, -40.0, 1.0, 1.0, 1.0, 0.0);
        assert!(synth_object("car", &below, &c, &mut ChaCha8Rng::seed_from_u64(3)).is_empty());
    }

    #[test]
    fn resampling_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = PointCloud::new(
            (0..10)
                .map(|i| Point::new(i as f64, 0.0, 0.0, 0.5))
                .collect(),
        );
        let down = resample_points(&cloud, 4, &mut rng);
        assert_eq!(down.len(), 4);
        assert!(down.points.iter().all(|p| cloud.points.contains(p)));
        let up = resample_points(&cloud, 25, &mut rng);
        assert_eq!(up.len(), 25);
        assert_eq!(&up.points[..10], &cloud.points[..]);
        assert!(resample_points(&PointCloud::default(), 5, &mut rng).is_empty());
    }
}
