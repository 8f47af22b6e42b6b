//! Object semantic alignment: per-category masked copies of the range image
//! and the auxiliary diffusion loss computed on them.

use log::warn;
use rand::Rng;

use crate::autograd::{Gradients, Graph, Tensor, Var};
use crate::diffusion::{forward_sample, standard_normal, NoiseSchedule};
use crate::error::{config_err, validation_err, Result};
use crate::geometry::{MaskStack, RangeImage};
use crate::networks::params::ParamStore;
use crate::networks::scene::{scene_forward_graph, scene_loss_graph, SceneNetConfig};

/// `C` channel-major `[2, H, W]` images, group `i` equal to `I ⊙ M_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedRangeTensor {
    pub height: usize,
    pub width: usize,
    pub groups: Vec<Vec<f64>>,
    pub masks: MaskStack,
}

impl MaskedRangeTensor {
    /// Mask of group `i` broadcast over both channels, as 0/1 floats.
    pub fn channel_weights(&self, i: usize) -> Vec<f64> {
        let m: Vec<f64> = self.masks.channel(i).iter().map(|&v| v as f64).collect();
        let mut w = m.clone();
        w.extend_from_slice(&m);
        w
    }
}

pub fn build_masked_channels(img: &RangeImage, masks: &MaskStack) -> Result<MaskedRangeTensor> {
    if img.height != masks.height || img.width != masks.width {
        return validation_err(format!(
            "image {}x{} and masks {}x{} differ",
            img.height, img.width, masks.height, masks.width
        ));
    }
    let chw = img.to_chw();
    let hw = img.height * img.width;
    let groups = (0..masks.channels())
        .map(|c| {
            let m = masks.channel(c);
            chw.iter()
                .enumerate()
                .map(|(i, &v)| if m[i % hw] == 1 { v } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(MaskedRangeTensor {
        height: img.height,
        width: img.width,
        groups,
        masks: masks.clone(),
    })
}

/// Records the mask-normalized OSA loss; `None` when every mask is empty.
pub fn osa_loss_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &SceneNetConfig,
    sched: &NoiseSchedule,
    masked: &MaskedRangeTensor,
    t: usize,
    eps_per_group: &[Vec<f64>],
) -> Result<Option<Var>> {
    if eps_per_group.len() != masked.groups.len() {
        return validation_err(format!(
            "{} noise arrays for {} groups",
            eps_per_group.len(),
            masked.groups.len()
        ));
    }
    let mut terms = Vec::new();
    for (i, (group, eps)) in masked.groups.iter().zip(eps_per_group).enumerate() {
        let area = masked.masks.area(i);
        if area == 0 {
            continue;
        }
        let x_t = forward_sample(group, t, eps, sched)?;
        let x = g.constant(Tensor::new(vec![2, masked.height, masked.width], x_t));
        let out = scene_forward_graph(g, store, cfg, x, t, None)?;
        terms.push(g.weighted_sse(out, eps, Some(masked.channel_weights(i)), area as f64));
    }
    let Some(&first) = terms.first() else {
        return Ok(None);
    };
    let mut total = first;
    for &term in &terms[1..] {
        total = g.add(total, term);
    }
    Ok(Some(g.scale(total, 1.0 / terms.len() as f64)))
}

/// OSA loss and exact gradients. All-empty masks give zero loss and zero gradients.
pub fn osa_loss_grads(
    store: &ParamStore,
    cfg: &SceneNetConfig,
    sched: &NoiseSchedule,
    masked: &MaskedRangeTensor,
    t: usize,
    eps_per_group: &[Vec<f64>],
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    match osa_loss_graph(&mut g, store, cfg, sched, masked, t, eps_per_group)? {
        Some(loss) => Ok((g.value(loss).item(), g.backward(loss))),
        None => {
            warn!("all OSA masks are empty; loss is zero");
            Ok((0.0, zero_grads(store)))
        }
    }
}

fn zero_grads(store: &ParamStore) -> Gradients {
    store
        .entries()
        .map(|(n, e)| (n.clone(), Tensor::zeros(&e.value.shape)))
        .collect()
}

/// Inputs of one combined scene + OSA evaluation.
#[derive(Clone, Copy, Debug)]
pub struct SceneExample<'a> {
    pub img0: &'a RangeImage,
    pub obj_img: &'a RangeImage,
    pub masks: &'a MaskStack,
}

/// `scene_loss + lambda · osa_loss`. The scene noise is drawn first, then one
/// array per mask group, all from `rng`.
pub fn combined_scene_loss<R: Rng + ?Sized>(
    store: &ParamStore,
    cfg: &SceneNetConfig,
    sched: &NoiseSchedule,
    ex: SceneExample<'_>,
    t: usize,
    rng: &mut R,
    lambda_osa: f64,
) -> Result<(f64, Gradients)> {
    if !(lambda_osa >= 0.0) {
        return config_err(format!("OSA weight must be non-negative, got {lambda_osa}"));
    }
    let (h, w) = (ex.img0.height, ex.img0.width);
    if ex.obj_img.height != h || ex.obj_img.width != w {
        return validation_err("object image and scene image differ in size");
    }
    let n = 2 * h * w;
    let eps = standard_normal(rng, n);
    let group_eps: Vec<Vec<f64>> = (0..ex.masks.channels())
        .map(|_| standard_normal(rng, n))
        .collect();
    let mut g = Graph::new();
    let scene = scene_loss_graph(
        &mut g,
        store,
        cfg,
        sched,
        &ex.img0.to_chw(),
        &ex.obj_img.to_chw(),
        h,
        w,
        t,
        &eps,
    )?;
    let mut total = scene;
    if lambda_osa > 0.0 {
        let masked = build_masked_channels(ex.img0, ex.masks)?;
        if let Some(osa) = osa_loss_graph(&mut g, store, cfg, sched, &masked, t, &group_eps)? {
            let weighted = g.scale(osa, lambda_osa);
            total = g.add(scene, weighted);
        }
    }
    Ok((g.value(total).item(), g.backward(total)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::networks::scene::{scene_denoiser_forward, scene_loss_grads};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RangeImage {
        RangeImage {
            height: h,
            width: w,
            data: (0..2 * h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
        }
    }

    fn cats(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn masked_channel_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let img = random_image(&mut rng, 4, 6);
        let zero = MaskStack::zeros(4, 6, cats(2)).unwrap();
        let m = build_masked_channels(&img, &zero).unwrap();
        assert!(m.groups.iter().all(|g| g.iter().all(|&v| v == 0.0)));

        let mut full = MaskStack::zeros(4, 6, cats(1)).unwrap();
        full.data.iter_mut().for_each(|v| *v = 1);
        assert_eq!(
            build_masked_channels(&img, &full).unwrap().groups[0],
            img.to_chw()
        );

        let mut part = MaskStack::zeros(4, 6, cats(3)).unwrap();
        for p in 0..24 {
            part.data[(p % 3) * 24 + p] = 1;
        }
        let m = build_masked_channels(&img, &part).unwrap();
        let chw = img.to_chw();
        for i in 0..chw.len() {
            let sum: f64 = m.groups.iter().map(|g| g[i]).sum();
            assert_eq!(sum, chw[i]);
        }
        let other = MaskStack::zeros(3, 6, cats(1)).unwrap();
        assert!(build_masked_channels(&img, &other).is_err());
    }

    #[test]
    fn empty_masks_give_zero_loss() {
        let cfg = SceneNetConfig {
            base_width: 2,
            depth: 1,
            temb_dim: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let s = cfg.build_all(&mut rng).unwrap();
        let sched = make_schedule(5, 1e-2, 0.2).unwrap();
        let img = random_image(&mut rng, 4, 4);
        let masked =
            build_masked_channels(&img, &MaskStack::zeros(4, 4, cats(2)).unwrap()).unwrap();
        let eps = vec![standard_normal(&mut rng, 32), standard_normal(&mut rng, 32)];
        let (loss, grads) = osa_loss_grads(&s, &cfg, &sched, &masked, 2, &eps).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.values().all(|g| g.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn full_mask_zero_noise_is_output_energy_per_pixel() {
        let cfg = SceneNetConfig {
            base_width: 2,
            depth: 1,
            temb_dim: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut s = cfg.build_all(&mut rng).unwrap();
        s.randomize(&mut rng, 0.5);
        let sched = make_schedule(5, 1e-2, 0.2).unwrap();
        let img = random_image(&mut rng, 4, 4);
        let mut full = MaskStack::zeros(4, 4, cats(1)).unwrap();
        full.data.iter_mut().for_each(|v| *v = 1);
        let masked = build_masked_channels(&img, &full).unwrap();
        let eps = vec![vec![0.0; 32]];
        let (loss, _) = osa_loss_grads(&s, &cfg, &sched, &masked, 3, &eps).unwrap();
        let x_t = forward_sample(&img.to_chw(), 3, &eps[0], &sched).unwrap();
        let out = scene_denoiser_forward(&s, &cfg, &x_t, 4, 4, 3, None).unwrap();
        let energy = out.iter().map(|v| v * v).sum::<f64>() / 16.0;
        assert!((loss - energy).abs() < 1e-14);
    }

    #[test]
    fn combined_loss_lambda_rules() {
        let cfg = SceneNetConfig {
            base_width: 2,
            depth: 1,
            temb_dim: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut s = cfg.build_all(&mut rng).unwrap();
        s.randomize(&mut rng, 0.5);
        let sched = make_schedule(5, 1e-2, 0.2).unwrap();
        let img = random_image(&mut rng, 4, 4);
        let obj = random_image(&mut rng, 4, 4);
        let mut masks = MaskStack::zeros(4, 4, cats(2)).unwrap();
        masks.set(0, 1, 1, 1);
        masks.set(1, 2, 3, 1);
        let ex = SceneExample {
            img0: &img,
            obj_img: &obj,
            masks: &masks,
        };
        let run = |lambda: f64, ex: SceneExample<'_>| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            combined_scene_loss(&s, &cfg, &sched, ex, 3, &mut r, lambda)
                .unwrap()
                .0
        };
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let eps = standard_normal(&mut r, 32);
        let (scene, _) = scene_loss_grads(
            &s,
            &cfg,
            &sched,
            &img.to_chw(),
            &obj.to_chw(),
            4,
            4,
            3,
            &eps,
        )
        .unwrap();
        assert_eq!(run(0.0, ex), scene);
        let l1 = run(1.0, ex);
        let l2 = run(2.0, ex);
        assert!(((l2 - scene) - 2.0 * (l1 - scene)).abs() < 1e-12);
        assert!(l1 > scene);

        let empty = MaskStack::zeros(4, 4, cats(2)).unwrap();
        assert_eq!(
            run(
                1.0,
                SceneExample {
                    masks: &empty,
                    ..ex
                }
            ),
            scene
        );
        let mut r = ChaCha8Rng::seed_from_u64(1);
        assert!(combined_scene_loss(&s, &cfg, &sched, ex, 3, &mut r, -1.0).is_err());
    }
}
