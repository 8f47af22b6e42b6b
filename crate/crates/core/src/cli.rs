//! The `lidiff` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use sha2::{Digest, Sha256};

use crate::conditioning::{FileEncoder, HashEncoder, TextEncoder};
use crate::config::Config;
use crate::datagen::synth_object;
use crate::error::{validation_err, Error, Result};
use crate::geometry::{bev_histogram, BevHistogram, PointCloud};
use crate::io::{
    mask_from_tensor, mask_to_tensor, read_point_cloud, read_range_image, read_range_tensor,
    write_point_cloud, write_range_image, write_range_tensor,
};
use crate::metrics::{
    chamfer_distance, extract_features, frechet_distance, jsd, mmd, semantic_similarity,
};
use crate::networks::params::ParamStore;
use crate::pipeline::{
    augment_scene, category_names, compose_object_image, generate_objects, generate_scene,
    partial_completion, place_objects_uniform, read_scenario, sparse_rows, sparse_to_dense,
    synth_scene_item, train_object_stage, train_scene_stage, write_scenario, ObjectModel,
    ScenarioEntry, SceneItem, SceneModel,
};
use crate::seeds::rng_for;

const STREAM_SCENES: u64 = 1;
const STREAM_OBJECTS: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_OBJECT_DATA: u64 = 4;
const STREAM_GENERATE: u64 = 5;
const STREAM_COMPLETE: u64 = 6;

/// Exit status for configuration and validation failures, including usage errors.
pub const EXIT_INVALID: i32 = 1;
/// Exit status for filesystem and file-format failures.
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lidiff", version, about = "Object-aware LiDAR scene diffusion")]
pub struct Cli {
    /// Sectioned key = value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker thread cap.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ray cast synthetic scenes and objects into `<out>/data`.
    Synth,
    /// Train the object denoiser on `<data>/objects`.
    TrainObject {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the scene denoiser and controller on `<data>/scenes`.
    TrainScene {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        osa_lambda: Option<f64>,
    },
    /// Sample one object per scenario line.
    GenObjects {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sample scenes, steered by a directory of objects when given.
    GenScene {
        #[arg(long)]
        objects: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Fill in the unknown part of a range image.
    Complete {
        #[arg(long, value_enum)]
        mode: CompletionMode,
        #[arg(long)]
        input: PathBuf,
        /// Single-channel 0/1 range tensor, required for `partial`.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Insert generated objects into a scene point cloud.
    Augment {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare two directories of point clouds.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(
            long,
            value_enum,
            value_delimiter = ',',
            default_value = "cd,jsd,mmd,fpd,ss"
        )]
        metrics: Vec<Metric>,
        /// Report JSD ×10 and MMD ×10⁴.
        #[arg(long)]
        paper_scale: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CompletionMode {
    #[value(name = "sparse2dense")]
    SparseToDense,
    Partial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Metric {
    Cd,
    Jsd,
    Mmd,
    Fpd,
    Ss,
}

impl Metric {
    fn key(self) -> &'static str {
        match self {
            Metric::Cd => "cd",
            Metric::Jsd => "jsd",
            Metric::Mmd => "mmd",
            Metric::Fpd => "fpd",
            Metric::Ss => "ss",
        }
    }
}

/// Parses arguments, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                EXIT_IO
            } else {
                EXIT_INVALID
            }
        }
    }
}

/// Hashes of files read and written by one command.
#[derive(Default)]
struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    fn record(&mut self, key: String, path: &Path) -> Result<()> {
        let digest = hex::encode(Sha256::digest(fs::read(path)?));
        self.entries.insert(key, digest);
        Ok(())
    }

    fn output(&mut self, out: &Path, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(out)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        self.record(format!("output.{rel}"), path)
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: Config,
    manifest: Manifest,
}

impl Ctx<'_> {
    fn out(&self, rel: &str) -> Result<PathBuf> {
        let p = self.cli.out.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn wrote(&mut self, path: &Path) -> Result<()> {
        self.manifest.output(&self.cli.out, path)
    }

    fn encoder(&self) -> Result<Box<dyn TextEncoder>> {
        Ok(match &self.cfg.text.embeddings {
            Some(path) => Box::new(FileEncoder::load(path)?),
            None => Box::new(HashEncoder {
                dim: self.cfg.text.dim,
            }),
        })
    }

    fn checkpoint(
        &mut self,
        given: &Option<PathBuf>,
        default: &str,
        key: &str,
    ) -> Result<ParamStore> {
        let path = given
            .clone()
            .unwrap_or_else(|| self.cli.out.join("checkpoints").join(default));
        let store = ParamStore::load(&path)?;
        self.manifest.record(format!("checkpoint.{key}"), &path)?;
        Ok(store)
    }
}

fn execute(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return validation_err("--threads must be at least 1");
    }
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut ctx = Ctx {
        cli,
        cfg,
        manifest: Manifest::default(),
    };
    let name = match &cli.command {
        Command::Synth => {
            synth(&mut ctx)?;
            "synth"
        }
        Command::TrainObject { data } => {
            train_object(&mut ctx, data)?;
            "train-object"
        }
        Command::TrainScene { data, osa_lambda } => {
            train_scene(&mut ctx, data, *osa_lambda)?;
            "train-scene"
        }
        Command::GenObjects {
            scenario,
            checkpoint,
        } => {
            gen_objects(&mut ctx, scenario, checkpoint)?;
            "gen-objects"
        }
        Command::GenScene {
            objects,
            checkpoint,
            count,
        } => {
            gen_scene(&mut ctx, objects, checkpoint, *count)?;
            "gen-scene"
        }
        Command::Complete {
            mode,
            input,
            mask,
            checkpoint,
        } => {
            complete(&mut ctx, *mode, input, mask, checkpoint)?;
            "complete"
        }
        Command::Augment {
            scene,
            scenario,
            checkpoint,
        } => {
            augment(&mut ctx, scene, scenario, checkpoint)?;
            "augment"
        }
        Command::Eval {
            real,
            generated,
            metrics,
            paper_scale,
        } => {
            eval(&mut ctx, real, generated, metrics, *paper_scale)?;
            "eval"
        }
    };
    let mut text = format!(
        "command={name}\nseed={}\nthreads={}\nconfig_sha256={}\n",
        cli.seed,
        cli.threads,
        ctx.cfg.hash()
    );
    for (k, v) in &ctx.manifest.entries {
        text.push_str(&format!("{k}={v}\n"));
    }
    let path = ctx.out(&format!("manifest_{name}.txt"))?;
    fs::write(path, text)?;
    Ok(())
}

fn synth(ctx: &mut Ctx<'_>) -> Result<()> {
    let seed = ctx.cli.seed;
    let sensor = ctx.cfg.sensor.sensor()?;
    let object_sensor = ctx.cfg.object_sensor.sensor()?;
    let s = ctx.cfg.synth.clone();
    let priors = s.priors();
    let labels = category_names(&priors);
    let area = s.area();
    for i in 0..s.scenes {
        let mut rng = rng_for(seed, &[STREAM_SCENES, i as u64]);
        let layout = place_objects_uniform(s.objects_per_scene, &area, &priors, &mut rng)?;
        let item = synth_scene_item(&sensor, &layout, &labels, s.ground_z, &mut rng)?;
        let base = format!("data/scenes/scene_{i:03}");
        let entries: Vec<ScenarioEntry> = layout
            .iter()
            .map(|(bx, c)| ScenarioEntry {
                category: c.clone(),
                bx: *bx,
                description: String::new(),
            })
            .collect();
        let p = ctx.out(&format!("{base}.bin"))?;
        write_point_cloud(&p, &crate::geometry::unproject_range(&item.image, &sensor)?)?;
        ctx.wrote(&p)?;
        let p = ctx.out(&format!("{base}.ri"))?;
        write_range_image(&p, &item.image)?;
        ctx.wrote(&p)?;
        let p = ctx.out(&format!("{base}.obj.ri"))?;
        write_range_image(&p, &item.obj_image)?;
        ctx.wrote(&p)?;
        let p = ctx.out(&format!("{base}.mask"))?;
        write_range_tensor(&p, &mask_to_tensor(&item.masks))?;
        ctx.wrote(&p)?;
        let p = ctx.out(&format!("{base}.txt"))?;
        write_scenario(&p, &entries)?;
        ctx.wrote(&p)?;
    }
    let mut entries = Vec::new();
    let mut attempts = 0;
    while entries.len() < s.objects {
        attempts += 1;
        if attempts > 100 * s.objects.max(1) {
            return Err(Error::Capacity {
                achieved: entries.len(),
                requested: s.objects,
            });
        }
        let mut rng = rng_for(seed, &[STREAM_OBJECTS, attempts as u64]);
        let (bx, category) = place_objects_uniform(1, &area, &priors, &mut rng)?.remove(0);
        let cloud = synth_object(&category, &bx, &object_sensor, &mut rng);
        if cloud.is_empty() {
            continue;
        }
        let p = ctx.out(&format!("data/objects/object_{:03}.bin", entries.len()))?;
        write_point_cloud(&p, &cloud)?;
        ctx.wrote(&p)?;
        entries.push(ScenarioEntry {
            category,
            bx,
            description: String::new(),
        });
    }
    let p = ctx.out("data/objects/scenario.txt")?;
    write_scenario(&p, &entries)?;
    ctx.wrote(&p)?;
    info!("wrote {} scenes and {} objects", s.scenes, entries.len());
    Ok(())
}

fn data_dir(ctx: &Ctx<'_>, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| ctx.cli.out.join("data"))
}

fn write_losses(ctx: &mut Ctx<'_>, rel: &str, losses: &[f64]) -> Result<()> {
    let text: String = losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i} {l}\n"))
        .collect();
    let p = ctx.out(rel)?;
    fs::write(&p, text)?;
    ctx.wrote(&p)
}

fn save_checkpoint(ctx: &mut Ctx<'_>, rel: &str, store: &ParamStore) -> Result<()> {
    let p = ctx.out(rel)?;
    store.save(&p)?;
    ctx.wrote(&p)
}

fn train_object(ctx: &mut Ctx<'_>, data: &Option<PathBuf>) -> Result<()> {
    let seed = ctx.cli.seed;
    let dir = data_dir(ctx, data).join("objects");
    let encoder = ctx.encoder()?;
    let model_cfg = ctx.cfg.object.model(encoder.dim())?;
    let priors = ctx.cfg.synth.priors();
    let norm = ctx.cfg.object.norm();
    let sched = ctx.cfg.diffusion.schedule()?;
    let scenario_path = dir.join("scenario.txt");
    let entries = read_scenario(&scenario_path)?;
    ctx.manifest
        .record("input.objects/scenario.txt".into(), &scenario_path)?;
    let mut samples = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let path = dir.join(format!("object_{i:03}.bin"));
        let cloud = read_point_cloud(&path)?;
        ctx.manifest
            .record(format!("input.objects/object_{i:03}.bin"), &path)?;
        let mut rng = rng_for(seed, &[STREAM_OBJECT_DATA, i as u64]);
        let sample = object_sample_from_cloud(
            &cloud,
            entry,
            &model_cfg,
            &priors,
            encoder.as_ref(),
            &norm,
            &mut rng,
        )?;
        samples.extend(sample);
    }
    let mut store = model_cfg.build_params(&mut rng_for(seed, &[STREAM_INIT, 0]))?;
    let tcfg = ctx.cfg.object_train.train_config(seed);
    let mut periodic = Vec::new();
    let report = train_object_stage(
        &mut store,
        &model_cfg,
        &sched,
        &samples,
        &tcfg,
        |step, s| {
            periodic.push((step, s.to_bytes()));
            Ok(())
        },
    )?;
    for (step, bytes) in periodic {
        let p = ctx.out(&format!("checkpoints/object_step{step:06}.ckpt"))?;
        fs::write(&p, bytes)?;
        ctx.wrote(&p)?;
    }
    save_checkpoint(ctx, "checkpoints/object.ckpt", &store)?;
    write_losses(ctx, "logs/object_loss.txt", &report.losses)
}

/// Normalizes a stored world-frame object and resamples it to the model's point count.
fn object_sample_from_cloud(
    cloud: &PointCloud,
    entry: &ScenarioEntry,
    model_cfg: &crate::networks::ObjectDenoiserConfig,
    priors: &[crate::pipeline::CategoryPrior],
    encoder: &dyn TextEncoder,
    norm: &crate::conditioning::BoxNormalization,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Option<crate::networks::ObjectSample>> {
    if cloud.is_empty() {
        return Ok(None);
    }
    let prior = crate::pipeline::prior_for(priors, &entry.category)?;
    let local = crate::geometry::normalize_object(cloud, &entry.bx, prior.cat_scale())?;
    let points = crate::datagen::resample_points(&local, model_cfg.num_points, rng).to_rows();
    let cond =
        crate::pipeline::object_condition(&entry.prompt()?, &entry.bx, encoder, norm, model_cfg)?;
    Ok(Some(crate::networks::ObjectSample { points, cond }))
}

fn train_scene(ctx: &mut Ctx<'_>, data: &Option<PathBuf>, osa_lambda: Option<f64>) -> Result<()> {
    let seed = ctx.cli.seed;
    let dir = data_dir(ctx, data).join("scenes");
    let sensor = ctx.cfg.sensor.sensor()?;
    let model_cfg = ctx.cfg.scene.model()?;
    model_cfg.check_image(sensor.height, sensor.width)?;
    let labels = category_names(&ctx.cfg.synth.priors());
    let sched = ctx.cfg.diffusion.schedule()?;
    let lambda = osa_lambda.unwrap_or(ctx.cfg.scene.osa_lambda);
    let mut items = Vec::new();
    for i in 0.. {
        let base = dir.join(format!("scene_{i:03}"));
        let image_path = base.with_extension("ri");
        if !image_path.exists() {
            break;
        }
        let obj_path = base.with_extension("obj.ri");
        let mask_path = base.with_extension("mask");
        let image = read_range_image(&image_path)?;
        let obj_image = read_range_image(&obj_path)?;
        let masks = mask_from_tensor(&read_range_tensor(&mask_path)?, labels.clone())?;
        for p in [&image_path, &obj_path, &mask_path] {
            let name = p.file_name().unwrap_or_default().to_string_lossy();
            ctx.manifest.record(format!("input.scenes/{name}"), p)?;
        }
        if !image.matches(&sensor) {
            return validation_err(format!(
                "{} does not match the configured sensor",
                image_path.display()
            ));
        }
        items.push(SceneItem {
            image,
            obj_image,
            masks,
        });
    }
    let mut rng = rng_for(seed, &[STREAM_INIT, 1]);
    let mut store = model_cfg.build_all(&mut rng)?;
    let tcfg = ctx.cfg.scene_train.train_config(seed);
    let mut periodic = Vec::new();
    let report = train_scene_stage(
        &mut store,
        &model_cfg,
        &sched,
        &items,
        &tcfg,
        lambda,
        |step, s| {
            periodic.push((step, s.to_bytes()));
            Ok(())
        },
    )?;
    for (step, bytes) in periodic {
        let p = ctx.out(&format!("checkpoints/scene_step{step:06}.ckpt"))?;
        fs::write(&p, bytes)?;
        ctx.wrote(&p)?;
    }
    save_checkpoint(ctx, "checkpoints/scene.ckpt", &store)?;
    write_losses(ctx, "logs/scene_loss.txt", &report.losses)
}

fn load_object_store(
    ctx: &mut Ctx<'_>,
    checkpoint: &Option<PathBuf>,
    text_dim: usize,
) -> Result<ParamStore> {
    let model_cfg = ctx.cfg.object.model(text_dim)?;
    let loaded = ctx.checkpoint(checkpoint, "object.ckpt", "object")?;
    let mut store = model_cfg.build_params(&mut rng_for(0, &[STREAM_INIT, 0]))?;
    store.load_values_from(&loaded)?;
    Ok(store)
}

fn load_scene_store(ctx: &mut Ctx<'_>, checkpoint: &Option<PathBuf>) -> Result<ParamStore> {
    let model_cfg = ctx.cfg.scene.model()?;
    let loaded = ctx.checkpoint(checkpoint, "scene.ckpt", "scene")?;
    let mut store = model_cfg.build_all(&mut rng_for(0, &[STREAM_INIT, 1]))?;
    store.load_values_from(&loaded)?;
    Ok(store)
}

fn sample_objects(
    ctx: &mut Ctx<'_>,
    entries: &[ScenarioEntry],
    checkpoint: &Option<PathBuf>,
) -> Result<Vec<PointCloud>> {
    let encoder = ctx.encoder()?;
    let store = load_object_store(ctx, checkpoint, encoder.dim())?;
    let model_cfg = ctx.cfg.object.model(encoder.dim())?;
    let sched = ctx.cfg.diffusion.schedule()?;
    let priors = ctx.cfg.synth.priors();
    let model = ObjectModel {
        store: &store,
        cfg: &model_cfg,
        sched: &sched,
        encoder: encoder.as_ref(),
        norm: ctx.cfg.object.norm(),
        priors: &priors,
    };
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let mut rng = rng_for(ctx.cli.seed, &[STREAM_GENERATE, 0, i as u64]);
        out.extend(generate_objects(&[(e.prompt()?, e.bx)], &model, &mut rng)?);
    }
    Ok(out)
}

fn gen_objects(ctx: &mut Ctx<'_>, scenario: &Path, checkpoint: &Option<PathBuf>) -> Result<()> {
    let entries = read_scenario(scenario)?;
    ctx.manifest.record("input.scenario".into(), scenario)?;
    let clouds = sample_objects(ctx, &entries, checkpoint)?;
    for (i, cloud) in clouds.iter().enumerate() {
        let p = ctx.out(&format!("objects/object_{i:03}.bin"))?;
        write_point_cloud(&p, cloud)?;
        ctx.wrote(&p)?;
    }
    let p = ctx.out("objects/scenario.txt")?;
    write_scenario(&p, &entries)?;
    ctx.wrote(&p)
}

/// Reads `scenario.txt` and the matching `object_NNN.bin` files of a directory.
fn read_object_dir(
    ctx: &mut Ctx<'_>,
    dir: &Path,
) -> Result<Vec<(PointCloud, crate::geometry::ObjectBox, String)>> {
    let scenario = dir.join("scenario.txt");
    let entries = read_scenario(&scenario)?;
    ctx.manifest
        .record("input.objects/scenario.txt".into(), &scenario)?;
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.into_iter().enumerate() {
        let p = dir.join(format!("object_{i:03}.bin"));
        let cloud = read_point_cloud(&p)?;
        ctx.manifest
            .record(format!("input.objects/object_{i:03}.bin"), &p)?;
        out.push((cloud, e.bx, e.category));
    }
    Ok(out)
}

fn gen_scene(
    ctx: &mut Ctx<'_>,
    objects: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    count: usize,
) -> Result<()> {
    let sensor = ctx.cfg.sensor.sensor()?;
    let model_cfg = ctx.cfg.scene.model()?;
    model_cfg.check_image(sensor.height, sensor.width)?;
    let sched = ctx.cfg.diffusion.schedule()?;
    let store = load_scene_store(ctx, checkpoint)?;
    let obj_img = match objects {
        Some(dir) => {
            let objs = read_object_dir(ctx, dir)?;
            let labels = category_names(&ctx.cfg.synth.priors());
            let (img, masks) = compose_object_image(&objs, &sensor, &labels)?;
            let p = ctx.out("scenes/object_image.ri")?;
            write_range_image(&p, &img)?;
            ctx.wrote(&p)?;
            let p = ctx.out("scenes/object_masks.mask")?;
            write_range_tensor(&p, &mask_to_tensor(&masks))?;
            ctx.wrote(&p)?;
            Some(img)
        }
        None => None,
    };
    let model = SceneModel {
        store: &store,
        cfg: &model_cfg,
        sched: &sched,
    };
    for i in 0..count {
        let mut rng = rng_for(ctx.cli.seed, &[STREAM_GENERATE, 1, i as u64]);
        let (img, cloud) = generate_scene(obj_img.as_ref(), &model, &sensor, &mut rng)?;
        let p = ctx.out(&format!("scenes/scene_{i:03}.ri"))?;
        write_range_image(&p, &img)?;
        ctx.wrote(&p)?;
        let p = ctx.out(&format!("scenes/scene_{i:03}.bin"))?;
        write_point_cloud(&p, &cloud)?;
        ctx.wrote(&p)?;
    }
    Ok(())
}

fn complete(
    ctx: &mut Ctx<'_>,
    mode: CompletionMode,
    input: &Path,
    mask: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
) -> Result<()> {
    let model_cfg = ctx.cfg.scene.model()?;
    let sched = ctx.cfg.diffusion.schedule()?;
    let img = read_range_image(input)?;
    ctx.manifest.record("input.image".into(), input)?;
    model_cfg.check_image(img.height, img.width)?;
    let store = load_scene_store(ctx, checkpoint)?;
    let model = SceneModel {
        store: &store,
        cfg: &model_cfg,
        sched: &sched,
    };
    let mut rng = rng_for(ctx.cli.seed, &[STREAM_COMPLETE]);
    let (out, report) = match mode {
        CompletionMode::SparseToDense => {
            let rows = sparse_rows(img.height);
            let out = sparse_to_dense(&img, &model, &mut rng)?;
            (
                out,
                format!(
                    "mode=sparse2dense\nconditioning_rows={}\nknown_pixels={}\n",
                    rows.len(),
                    rows.len() * img.width
                ),
            )
        }
        CompletionMode::Partial => {
            let Some(mask_path) = mask else {
                return validation_err("--mask is required for partial completion");
            };
            let t = read_range_tensor(mask_path)?;
            ctx.manifest.record("input.mask".into(), mask_path)?;
            if t.channels != 1 || t.height != img.height || t.width != img.width {
                return validation_err("mask must be a single-channel tensor matching the image");
            }
            let known = mask_from_tensor(&t, vec!["known".into()])?.data;
            let n = known.iter().filter(|&&m| m == 1).count();
            let out = partial_completion(&img, &known, &model, &mut rng)?;
            (out, format!("mode=partial\nknown_pixels={n}\n"))
        }
    };
    let p = ctx.out("completion/completed.ri")?;
    write_range_image(&p, &out)?;
    ctx.wrote(&p)?;
    let p = ctx.out("completion/report.txt")?;
    fs::write(&p, report)?;
    ctx.wrote(&p)
}

fn augment(
    ctx: &mut Ctx<'_>,
    scene: &Path,
    scenario: &Path,
    checkpoint: &Option<PathBuf>,
) -> Result<()> {
    let cloud = read_point_cloud(scene)?;
    ctx.manifest.record("input.scene".into(), scene)?;
    let entries = read_scenario(scenario)?;
    ctx.manifest.record("input.scenario".into(), scenario)?;
    let objects = sample_objects(ctx, &entries, checkpoint)?;
    let inserts: Vec<_> = objects
        .into_iter()
        .zip(entries.iter().map(|e| e.bx))
        .collect();
    let p = ctx.out("augmented/scene.bin")?;
    write_point_cloud(&p, &augment_scene(&cloud, &inserts))?;
    ctx.wrote(&p)
}

fn read_cloud_dir(ctx: &mut Ctx<'_>, dir: &Path, key: &str) -> Result<Vec<PointCloud>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "bin"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!(
            "no .bin point clouds in {}",
            dir.display()
        )));
    }
    let mut clouds = Vec::with_capacity(paths.len());
    for p in &paths {
        clouds.push(read_point_cloud(p)?);
        let name = p.file_name().unwrap_or_default().to_string_lossy();
        ctx.manifest.record(format!("input.{key}/{name}"), p)?;
    }
    Ok(clouds)
}

fn mean_histogram(hists: &[BevHistogram]) -> Result<BevHistogram> {
    let used: Vec<&BevHistogram> = hists.iter().filter(|h| h.total() > 0.0).collect();
    let Some(first) = used.first() else {
        return Err(Error::UndefinedInput(
            "no points inside the BEV extent".into(),
        ));
    };
    let mut bins = vec![0.0; first.bins.len()];
    for h in &used {
        for (b, v) in bins.iter_mut().zip(&h.bins) {
            *b += v / used.len() as f64;
        }
    }
    Ok(BevHistogram {
        grid: first.grid,
        extent: first.extent,
        bins,
    })
}

/// Metric values in report order; `None` where the inputs leave a metric undefined.
pub fn evaluate_sets(
    real: &[PointCloud],
    generated: &[PointCloud],
    metrics: &[Metric],
    bev_grid: usize,
    bev_extent: f64,
) -> Result<Vec<(Metric, Option<f64>)>> {
    let pairs = real.len().min(generated.len());
    let mut wanted = metrics.to_vec();
    wanted.sort();
    wanted.dedup();
    let hist = |set: &[PointCloud]| {
        set.iter()
            .map(|c| bev_histogram(c, bev_grid, bev_extent))
            .collect::<Result<Vec<_>>>()
    };
    let feats = |set: &[PointCloud]| set.iter().map(extract_features).collect::<Result<Vec<_>>>();
    let mut out = Vec::new();
    for m in wanted {
        let value = (|| -> Result<f64> {
            Ok(match m {
                Metric::Cd => {
                    let mut acc = 0.0;
                    for i in 0..pairs {
                        acc += chamfer_distance(&real[i], &generated[i])?;
                    }
                    acc / pairs as f64
                }
                Metric::Jsd => jsd(
                    &mean_histogram(&hist(real)?)?,
                    &mean_histogram(&hist(generated)?)?,
                )?,
                Metric::Mmd => mmd(&hist(real)?, &hist(generated)?)?,
                Metric::Fpd => frechet_distance(&feats(real)?, &feats(generated)?)?,
                Metric::Ss => {
                    let (a, b) = (feats(&real[..pairs])?, feats(&generated[..pairs])?);
                    let mut acc = 0.0;
                    for (x, y) in a.iter().zip(&b) {
                        acc += semantic_similarity(x, y)?;
                    }
                    acc / pairs as f64
                }
            })
        })();
        match value {
            Ok(v) => out.push((m, Some(v))),
            Err(Error::UndefinedInput(why)) => {
                warn!("{} is undefined: {why}", m.key());
                out.push((m, None));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn eval(
    ctx: &mut Ctx<'_>,
    real: &Path,
    generated: &Path,
    metrics: &[Metric],
    paper_scale: bool,
) -> Result<()> {
    let a = read_cloud_dir(ctx, real, "real")?;
    let b = read_cloud_dir(ctx, generated, "generated")?;
    let values = evaluate_sets(
        &a,
        &b,
        metrics,
        ctx.cfg.eval.bev_grid,
        ctx.cfg.eval.bev_extent,
    )?;
    let mut table = format!("{:<6} {:>16}\n", "metric", "value");
    let mut kv = format!(
        "real_count={}\ngenerated_count={}\npaper_scale={paper_scale}\n",
        a.len(),
        b.len()
    );
    for (m, v) in values {
        let Some(v) = v else {
            table.push_str(&format!("{:<6} {:>16}\n", m.key(), "undefined"));
            kv.push_str(&format!("{}=undefined\n", m.key()));
            continue;
        };
        let shown = match (m, paper_scale) {
            (Metric::Jsd, true) => v * 10.0,
            (Metric::Mmd, true) => v * 1e4,
            _ => v,
        };
        table.push_str(&format!("{:<6} {:>16.6}\n", m.key(), shown));
        kv.push_str(&format!("{}={shown}\n", m.key()));
    }
    print!("{table}");
    let p = ctx.out("eval/report.txt")?;
    fs::write(&p, table)?;
    ctx.wrote(&p)?;
    let p = ctx.out("eval/metrics.txt")?;
    fs::write(&p, kv)?;
    ctx.wrote(&p)
}
