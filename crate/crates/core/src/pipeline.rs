//! Object-first, scene-later generation, completion, object placement and
//! scene augmentation, plus the glue that turns synthetic sweeps into
//! training examples.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::conditioning::{
    encode_text, format_prompt, fourier_embed, BoxNormalization, TextEncoder, TextPrompt,
};
use crate::datagen::{resample_points, synth_object, synth_scene};
use crate::diffusion::{repaint_loop, sample_loop, standard_normal, NoiseSchedule};
use crate::error::{config_err, validation_err, Error, Result};
use crate::geometry::{
    denormalize_object, normalize_object, project_to_range, project_with_winners,
    rasterize_with_winners, unproject_range, MaskStack, ObjectBox, PointCloud, RangeImage,
    SensorConfig,
};
use crate::networks::object::{
    object_denoiser_forward, object_loss_grads, ObjectCondition, ObjectDenoiserConfig, ObjectSample,
};
use crate::networks::params::ParamStore;
use crate::networks::scene::{scene_denoiser_forward, SceneNetConfig};
use crate::networks::train::{train, TrainConfig, TrainReport};
use crate::osa::{combined_scene_loss, SceneExample};

/// Mean box size and normalization scale for one object category.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryPrior {
    pub name: String,
    /// Mean `(w, l, h)` in meters.
    pub size: [f64; 3],
    /// Relative half-width of the uniform size jitter.
    pub jitter: f64,
}

impl CategoryPrior {
    pub fn new(name: &str, size: [f64; 3], jitter: f64) -> Self {
        Self {
            name: name.to_string(),
            size,
            jitter,
        }
    }

    /// Half-extents along the box `(l, w, h)` axes with 20% headroom over the
    /// largest jittered size.
    pub fn cat_scale(&self) -> [f64; 3] {
        let k = 0.5 * (1.0 + self.jitter) * 1.2;
        [k * self.size[1], k * self.size[0], k * self.size[2]]
    }

    pub fn sample_size<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        self.size
            .map(|s| s * (1.0 + self.jitter * rng.random_range(-1.0..=1.0)))
    }
}

pub fn default_priors() -> Vec<CategoryPrior> {
    vec![
        CategoryPrior::new("car", [1.8, 4.2, 1.6], 0.1),
        CategoryPrior::new("pedestrian", [0.7, 0.8, 1.8], 0.1),
        CategoryPrior::new("cyclist", [0.7, 1.8, 1.7], 0.1),
    ]
}

pub fn prior_for<'a>(priors: &'a [CategoryPrior], category: &str) -> Result<&'a CategoryPrior> {
    priors
        .iter()
        .find(|p| p.name == category)
        .ok_or_else(|| Error::Config(format!("unknown category `{category}`")))
}

pub fn category_names(priors: &[CategoryPrior]) -> Vec<String> {
    priors.iter().map(|p| p.name.clone()).collect()
}

/// One line of a scenario file.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioEntry {
    pub category: String,
    pub bx: ObjectBox,
    pub description: String,
}

impl ScenarioEntry {
    pub fn prompt(&self) -> Result<TextPrompt> {
        format_prompt(&self.category, &self.description)
    }
}

/// Parses `category x y z w l h r "description"` lines; blank lines and `#`
/// comments are skipped.
pub fn parse_scenario(text: &str) -> Result<Vec<ScenarioEntry>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::Format(format!("scenario line {}: {msg}", n + 1));
        let (head, description) = match line.find('"') {
            Some(q) => {
                let rest = &line[q + 1..];
                let end = rest
                    .rfind('"')
                    .ok_or_else(|| bad("unterminated description"))?;
                if !rest[end + 1..].trim().is_empty() {
                    return Err(bad("text after the closing quote"));
                }
                (&line[..q], rest[..end].to_string())
            }
            None => (line, String::new()),
        };
        let fields: Vec<&str> = head.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(bad(&format!(
                "expected 8 fields before the description, found {}",
                fields.len()
            )));
        }
        let v: Vec<f64> = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| bad(&format!("`{f}` is not a number")))
            })
            .collect::<Result<_>>()?;
        let bx = ObjectBox::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6]);
        bx.validate().map_err(|e| bad(&e.to_string()))?;
        out.push(ScenarioEntry {
            category: fields[0].to_string(),
            bx,
            description,
        });
    }
    Ok(out)
}

pub fn format_scenario(entries: &[ScenarioEntry]) -> String {
    entries
        .iter()
        .map(|e| {
            let b = &e.bx;
            format!(
                "{} {} {} {} {} {} {} {} \"{}\"\n",
                e.category, b.x_c, b.y_c, b.z_c, b.w, b.l, b.h, b.r, e.description
            )
        })
        .collect()
}

pub fn read_scenario(path: &Path) -> Result<Vec<ScenarioEntry>> {
    parse_scenario(&fs::read_to_string(path)?)
}

pub fn write_scenario(path: &Path, entries: &[ScenarioEntry]) -> Result<()> {
    fs::write(path, format_scenario(entries))?;
    Ok(())
}

/// Everything object sampling needs besides the conditions.
#[derive(Clone, Copy)]
pub struct ObjectModel<'a> {
    pub store: &'a ParamStore,
    pub cfg: &'a ObjectDenoiserConfig,
    pub sched: &'a NoiseSchedule,
    pub encoder: &'a dyn TextEncoder,
    pub norm: BoxNormalization,
    pub priors: &'a [CategoryPrior],
}

pub fn object_condition(
    prompt: &TextPrompt,
    bx: &ObjectBox,
    encoder: &dyn TextEncoder,
    norm: &BoxNormalization,
    cfg: &ObjectDenoiserConfig,
) -> Result<ObjectCondition> {
    let text_emb = encode_text(prompt, encoder)?;
    if text_emb.0.len() != cfg.text_dim {
        return config_err(format!(
            "text encoder gives {} dims, model expects {}",
            text_emb.0.len(),
            cfg.text_dim
        ));
    }
    Ok(ObjectCondition {
        box_emb: fourier_embed(bx, norm, cfg.fourier_freqs)?,
        text_emb,
    })
}

/// Samples one world-frame cloud of `cfg.num_points` points per condition.
/// The state is clamped to `[-1, 1]` before leaving the normalized frame.
pub fn generate_objects<R: Rng + ?Sized>(
    conds: &[(TextPrompt, ObjectBox)],
    model: &ObjectModel<'_>,
    rng: &mut R,
) -> Result<Vec<PointCloud>> {
    let mut out = Vec::with_capacity(conds.len());
    for (prompt, bx) in conds {
        let prior = prior_for(model.priors, &prompt.category)?;
        let cond = object_condition(prompt, bx, model.encoder, &model.norm, model.cfg)?;
        let x0 = sample_loop(
            4 * model.cfg.num_points,
            |x, t| object_denoiser_forward(model.store, model.cfg, x, t, &cond),
            model.sched,
            rng,
        )?;
        let local =
            PointCloud::from_rows(&x0.iter().map(|v| v.clamp(-1.0, 1.0)).collect::<Vec<_>>());
        out.push(denormalize_object(&local, bx, prior.cat_scale())?);
    }
    Ok(out)
}

/// Projects all objects together and rasterizes their boxes from the same
/// winning points.
pub fn compose_object_image(
    objects: &[(PointCloud, ObjectBox, String)],
    cfg: &SensorConfig,
    labels: &[String],
) -> Result<(RangeImage, MaskStack)> {
    let all = PointCloud::new(
        objects
            .iter()
            .flat_map(|(c, _, _)| c.points.iter().copied())
            .collect(),
    );
    let boxes: Vec<(ObjectBox, String)> = objects.iter().map(|(_, b, c)| (*b, c.clone())).collect();
    let projection = project_with_winners(&all, cfg);
    let masks = rasterize_with_winners(&boxes, &all, &projection.winners, cfg, labels)?;
    Ok((projection.image, masks))
}

#[derive(Clone, Copy)]
pub struct SceneModel<'a> {
    pub store: &'a ParamStore,
    pub cfg: &'a SceneNetConfig,
    pub sched: &'a NoiseSchedule,
}

/// Samples a scene, steered by the controller when an object image is given.
/// The final image is clamped to `[0, 1]` and unprojected.
pub fn generate_scene<R: Rng + ?Sized>(
    obj_img: Option<&RangeImage>,
    model: &SceneModel<'_>,
    sensor: &SensorConfig,
    rng: &mut R,
) -> Result<(RangeImage, PointCloud)> {
    let (h, w) = (sensor.height, sensor.width);
    let obj = match obj_img {
        Some(img) if !img.matches(sensor) => {
            return validation_err("object image does not match the sensor")
        }
        Some(img) => Some(img.to_chw()),
        None => None,
    };
    let x0 = sample_loop(
        2 * h * w,
        |x, t| scene_denoiser_forward(model.store, model.cfg, x, h, w, t, obj.as_deref()),
        model.sched,
        rng,
    )?;
    let mut img = RangeImage::from_chw(h, w, &x0);
    img.clamp_unit();
    let cloud = unproject_range(&img, sensor)?;
    Ok((img, cloud))
}

/// Rows kept by the 16-of-64 beam subsampling.
pub fn sparse_rows(height: usize) -> Vec<usize> {
    (0..height).filter(|v| v % 4 == 0).collect()
}

fn repaint_image<R: Rng + ?Sized>(
    img: &RangeImage,
    known: &[u8],
    model: &SceneModel<'_>,
    rng: &mut R,
) -> Result<RangeImage> {
    let (h, w) = (img.height, img.width);
    if known.len() != h * w {
        return validation_err(format!(
            "mask has {} pixels, image has {}",
            known.len(),
            h * w
        ));
    }
    if known.iter().any(|&m| m > 1) {
        return validation_err("mask must be binary");
    }
    let mask: Vec<f64> = known.iter().chain(known).map(|&m| m as f64).collect();
    let x0 = img.to_chw();
    let mut x = repaint_loop(
        &x0,
        &mask,
        |x, t| scene_denoiser_forward(model.store, model.cfg, x, h, w, t, None),
        model.sched,
        rng,
    )?;
    for (v, &m) in x.iter_mut().zip(&mask) {
        if m == 0.0 {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(RangeImage::from_chw(h, w, &x))
}

/// Fills the rows not in [`sparse_rows`]; the kept rows come back unchanged.
pub fn sparse_to_dense<R: Rng + ?Sized>(
    sparse: &RangeImage,
    model: &SceneModel<'_>,
    rng: &mut R,
) -> Result<RangeImage> {
    if sparse.height == 0 || !sparse.height.is_multiple_of(4) {
        return validation_err(format!(
            "image height {} is not a positive multiple of 4",
            sparse.height
        ));
    }
    let mut known = vec![0u8; sparse.height * sparse.width];
    for v in sparse_rows(sparse.height) {
        known[v * sparse.width..(v + 1) * sparse.width].fill(1);
    }
    repaint_image(sparse, &known, model, rng)
}

/// Repaint completion with an arbitrary `H×W` known-pixel mask.
pub fn partial_completion<R: Rng + ?Sized>(
    partial: &RangeImage,
    known_mask: &[u8],
    model: &SceneModel<'_>,
    rng: &mut R,
) -> Result<RangeImage> {
    repaint_image(partial, known_mask, model, rng)
}

/// Rectangle on the ground plane where boxes may be placed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacementArea {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub ground_z: f64,
    /// Box centers closer than this to the sensor are rejected.
    pub keep_out: f64,
}

pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

fn project_onto(corners: &[[f64; 2]; 4], axis: [f64; 2]) -> (f64, f64) {
    corners
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            let d = c[0] * axis[0] + c[1] * axis[1];
            (lo.min(d), hi.max(d))
        })
}

/// Whether two footprints overlap with positive area (separating axis test).
pub fn bev_overlap(a: &ObjectBox, b: &ObjectBox) -> bool {
    let (ca, cb) = (a.bev_corners(), b.bev_corners());
    for corners in [&ca, &cb] {
        for i in 0..2 {
            let e = [
                corners[i + 1][0] - corners[i][0],
                corners[i + 1][1] - corners[i][1],
            ];
            let axis = [-e[1], e[0]];
            let (a0, a1) = project_onto(&ca, axis);
            let (b0, b1) = project_onto(&cb, axis);
            let tol = 1e-9 * (axis[0].abs() + axis[1].abs());
            if a1 <= b0 + tol || b1 <= a0 + tol {
                return false;
            }
        }
    }
    true
}

/// Rejection-samples `n` non-overlapping boxes with categories drawn uniformly.
pub fn place_objects_uniform<R: Rng + ?Sized>(
    n: usize,
    area: &PlacementArea,
    priors: &[CategoryPrior],
    rng: &mut R,
) -> Result<Vec<(ObjectBox, String)>> {
    if n > 0 && priors.is_empty() {
        return config_err("no category priors to sample from");
    }
    if !(area.x_range.0 < area.x_range.1 && area.y_range.0 < area.y_range.1) {
        return config_err("placement area is empty");
    }
    let mut placed: Vec<(ObjectBox, String)> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut found = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let prior = &priors[rng.random_range(0..priors.len())];
            let [w, l, h] = prior.sample_size(rng);
            let x = rng.random_range(area.x_range.0..area.x_range.1);
            let y = rng.random_range(area.y_range.0..area.y_range.1);
            let r = PI - rng.random_range(0.0..2.0 * PI);
            let bx = ObjectBox::new(x, y, area.ground_z + 0.5 * h, w, l, h, r);
            if x.hypot(y) < area.keep_out || placed.iter().any(|(other, _)| bev_overlap(&bx, other))
            {
                continue;
            }
            found = Some((bx, prior.name.clone()));
            break;
        }
        match found {
            Some(item) => placed.push(item),
            None => {
                return Err(Error::Capacity {
                    achieved: placed.len(),
                    requested: n,
                })
            }
        }
    }
    Ok(placed)
}

/// Drops scene points inside any insert box, then appends the inserts in order.
pub fn augment_scene(scene: &PointCloud, inserts: &[(PointCloud, ObjectBox)]) -> PointCloud {
    let mut points: Vec<_> = scene
        .points
        .iter()
        .filter(|p| !inserts.iter().any(|(_, b)| b.contains(p)))
        .copied()
        .collect();
    for (cloud, _) in inserts {
        points.extend_from_slice(&cloud.points);
    }
    PointCloud::new(points)
}

/// A scene training example: the sweep image, its object-only image and the
/// per-category masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneItem {
    pub image: RangeImage,
    pub obj_image: RangeImage,
    pub masks: MaskStack,
}

/// Ray casts `layout` and keeps, as the object image, the pixels that hit a box.
pub fn synth_scene_item<R: Rng + ?Sized>(
    sensor: &SensorConfig,
    layout: &[(ObjectBox, String)],
    categories: &[String],
    ground_z: f64,
    rng: &mut R,
) -> Result<SceneItem> {
    let (cloud, masks) = synth_scene(sensor, layout, categories, ground_z, rng)?;
    let (image, _) = project_to_range(&cloud, sensor);
    let mut obj_image = RangeImage::for_sensor(sensor);
    for (pix, &m) in masks.union().iter().enumerate() {
        if m == 1 {
            let (v, u) = (pix / sensor.width, pix % sensor.width);
            obj_image.set(v, u, image.depth(v, u), image.intensity(v, u));
        }
    }
    Ok(SceneItem {
        image,
        obj_image,
        masks,
    })
}

/// A normalized, resampled object example, or `None` when the box is not seen.
pub fn synth_object_sample<R: Rng + ?Sized>(
    entry: &ScenarioEntry,
    sensor: &SensorConfig,
    model_cfg: &ObjectDenoiserConfig,
    priors: &[CategoryPrior],
    encoder: &dyn TextEncoder,
    norm: &BoxNormalization,
    rng: &mut R,
) -> Result<Option<ObjectSample>> {
    let prior = prior_for(priors, &entry.category)?;
    let cloud = synth_object(&entry.category, &entry.bx, sensor, rng);
    if cloud.is_empty() {
        return Ok(None);
    }
    let local = normalize_object(&cloud, &entry.bx, prior.cat_scale())?;
    let points = resample_points(&local, model_cfg.num_points, rng).to_rows();
    let cond = object_condition(&entry.prompt()?, &entry.bx, encoder, norm, model_cfg)?;
    Ok(Some(ObjectSample { points, cond }))
}

/// Object-stage training: each batch item draws an example, a timestep and noise.
pub fn train_object_stage<C>(
    store: &mut ParamStore,
    cfg: &ObjectDenoiserConfig,
    sched: &NoiseSchedule,
    samples: &[ObjectSample],
    tcfg: &TrainConfig,
    on_checkpoint: C,
) -> Result<TrainReport>
where
    C: FnMut(usize, &ParamStore) -> Result<()>,
{
    if samples.is_empty() {
        return validation_err("no object training samples");
    }
    train(
        store,
        tcfg,
        |s, _, _, rng| {
            let sample = &samples[rng.random_range(0..samples.len())];
            let t = rng.random_range(1..=sched.steps());
            let eps = standard_normal(rng, sample.points.len());
            object_loss_grads(s, cfg, sched, sample, t, &eps)
        },
        on_checkpoint,
    )
}

/// Scene-stage training on `scene_loss + lambda · osa_loss`.
pub fn train_scene_stage<C>(
    store: &mut ParamStore,
    cfg: &SceneNetConfig,
    sched: &NoiseSchedule,
    items: &[SceneItem],
    tcfg: &TrainConfig,
    lambda_osa: f64,
    on_checkpoint: C,
) -> Result<TrainReport>
where
    C: FnMut(usize, &ParamStore) -> Result<()>,
{
    if items.is_empty() {
        return validation_err("no scene training items");
    }
    if !(lambda_osa >= 0.0) {
        return config_err(format!("OSA weight must be non-negative, got {lambda_osa}"));
    }
    train(
        store,
        tcfg,
        |s, _, _, rng| {
            let item = &items[rng.random_range(0..items.len())];
            let t = rng.random_range(1..=sched.steps());
            let ex = SceneExample {
                img0: &item.image,
                obj_img: &item.obj_image,
                masks: &item.masks,
            };
            combined_scene_loss(s, cfg, sched, ex, t, rng, lambda_osa)
        },
        on_checkpoint,
    )
}
