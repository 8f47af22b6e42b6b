//! Object denoiser: voxel patch tokens refined by condition cross-attention,
//! read back out per point.
//!
//! The noisy `N×4` state is voxelized, cut into `p³` patches and embedded as
//! tokens. Each block adds cross-attention against `c + f_t` and a GELU
//! feed-forward, both residual. Every point then gathers the token of the patch
//! it falls in, concatenates its own noisy coordinates, and a two-layer head
//! predicts its noise.

use crate::autograd::{Activation, Gradients, Graph, Tensor, Var};
use crate::conditioning::{
    box_embedding_dim, combine_in_graph, timestep_embedding, BoxEmbedding, TextEmbedding,
    DEFAULT_COND_DIM, DEFAULT_FOURIER_FREQS, DEFAULT_TEXT_DIM,
};
use crate::diffusion::{forward_sample, NoiseSchedule};
use crate::error::{config_err, validation_err, Result};
use crate::geometry::{voxel_index, voxelize_rows, VoxelGrid};
use crate::networks::params::{Init, ParamStore};

const PREFIX: &str = "obj";

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectDenoiserConfig {
    pub voxel_res: usize,
    pub patch: usize,
    pub dim: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub cond_dim: usize,
    pub text_dim: usize,
    pub fourier_freqs: usize,
    pub num_points: usize,
    /// Divide attention logits by `sqrt(dim)`.
    pub scaled_attention: bool,
}

impl Default for ObjectDenoiserConfig {
    fn default() -> Self {
        Self {
            voxel_res: 16,
            patch: 4,
            dim: 32,
            blocks: 2,
            ffn_hidden: 64,
            head_hidden: 32,
            cond_dim: DEFAULT_COND_DIM,
            text_dim: DEFAULT_TEXT_DIM,
            fourier_freqs: DEFAULT_FOURIER_FREQS,
            num_points: 1024,
            scaled_attention: true,
        }
    }
}

impl ObjectDenoiserConfig {
    /// Layer counts and widths of the full-size model.
    pub fn full_scale() -> Self {
        Self {
            voxel_res: 32,
            blocks: 12,
            dim: 64,
            ffn_hidden: 256,
            head_hidden: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.voxel_res.is_multiple_of(self.patch) {
            return config_err(format!(
                "voxel resolution {} not divisible by patch {}",
                self.voxel_res, self.patch
            ));
        }
        if self.voxel_res < 2 {
            return config_err("voxel resolution must be >= 2");
        }
        if !self.cond_dim.is_multiple_of(2) {
            return config_err("condition dimension must be even for the timestep embedding");
        }
        if self.dim == 0 || self.ffn_hidden == 0 || self.head_hidden == 0 || self.num_points == 0 {
            return config_err("object denoiser widths must be positive");
        }
        Ok(())
    }

    pub fn patches_per_axis(&self) -> usize {
        self.voxel_res / self.patch
    }

    pub fn num_tokens(&self) -> usize {
        self.patches_per_axis().pow(3)
    }

    pub fn token_features(&self) -> usize {
        2 * self.patch.pow(3)
    }

    /// Allocates and initializes parameters.
    pub fn build_params<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let mut s = ParamStore::new();
        let n = |s: &str| format!("{PREFIX}.{s}");
        let com_in = box_embedding_dim(self.fourier_freqs) + self.text_dim;
        s.add(&n("com.w"), &[self.cond_dim, com_in], Init::fan_in(com_in))?;
        s.add(&n("com.b"), &[self.cond_dim], Init::fan_in(com_in))?;
        let tf = self.token_features();
        s.add(&n("embed.w"), &[tf, self.dim], Init::fan_in(tf))?;
        s.add(&n("embed.b"), &[self.dim], Init::fan_in(tf))?;
        s.add(
            &n("pos"),
            &[self.num_tokens(), self.dim],
            Init::fan_in(self.dim),
        )?;
        for b in 0..self.blocks {
            let p = |x: &str| format!("{PREFIX}.block{b}.{x}");
            s.add(&p("q.w"), &[self.dim, self.dim], Init::fan_in(self.dim))?;
            s.add(&p("q.b"), &[self.dim], Init::fan_in(self.dim))?;
            s.add(
                &p("k.w"),
                &[self.cond_dim, self.dim],
                Init::fan_in(self.cond_dim),
            )?;
            s.add(&p("k.b"), &[self.dim], Init::fan_in(self.cond_dim))?;
            s.add(
                &p("v.w"),
                &[self.cond_dim, self.dim],
                Init::fan_in(self.cond_dim),
            )?;
            s.add(&p("v.b"), &[self.dim], Init::fan_in(self.cond_dim))?;
            s.add(
                &p("ff1.w"),
                &[self.dim, self.ffn_hidden],
                Init::fan_in(self.dim),
            )?;
            s.add(&p("ff1.b"), &[self.ffn_hidden], Init::fan_in(self.dim))?;
            s.add(
                &p("ff2.w"),
                &[self.ffn_hidden, self.dim],
                Init::fan_in(self.ffn_hidden),
            )?;
            s.add(&p("ff2.b"), &[self.dim], Init::fan_in(self.ffn_hidden))?;
        }
        let hin = 4 + self.dim;
        s.add(&n("head1.w"), &[hin, self.head_hidden], Init::fan_in(hin))?;
        s.add(&n("head1.b"), &[self.head_hidden], Init::fan_in(hin))?;
        s.add(&n("head2.w"), &[self.head_hidden, 4], Init::Zeros)?;
        s.add(&n("head2.b"), &[4], Init::Zeros)?;
        s.initialize(rng);
        Ok(s)
    }
}

/// Flattens each `p³` patch of the grid into one token row.
pub fn patchify(grid: &VoxelGrid, patch: usize) -> Result<Tensor> {
    let v = grid.resolution;
    if patch == 0 || !v.is_multiple_of(patch) {
        return config_err(format!(
            "grid resolution {v} not divisible by patch {patch}"
        ));
    }
    let per = v / patch;
    let feat = 2 * patch.pow(3);
    let mut data = Vec::with_capacity(per.pow(3) * feat);
    for px in 0..per {
        for py in 0..per {
            for pz in 0..per {
                for a in 0..patch {
                    for b in 0..patch {
                        for c in 0..patch {
                            let cell = grid.cell(px * patch + a, py * patch + b, pz * patch + c);
                            data.push(grid.occupancy[cell]);
                            data.push(grid.mean_intensity[cell]);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![per.pow(3), feat], data))
}

/// Token index of the patch containing each point of an `N×4` state.
pub fn point_patches(rows: &[f64], voxel_res: usize, patch: usize) -> Vec<usize> {
    let per = voxel_res / patch;
    rows.chunks_exact(4)
        .map(|r| {
            let [ix, iy, iz] = voxel_index([r[0], r[1], r[2]], voxel_res);
            ((ix / patch) * per + iy / patch) * per + iz / patch
        })
        .collect()
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let w = store.var(g, &format!("{name}.w"))?;
    let b = store.var(g, &format!("{name}.b"))?;
    let h = g.matmul(x, w);
    Ok(g.add_bias(h, b))
}

/// Residual single-head cross-attention of `tokens [T, d]` over condition rows
/// `cond [K, D_c]` using the projections under `prefix` (`q`, `k`, `v`).
pub fn cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    tokens: Var,
    cond: Var,
    scaled: bool,
) -> Result<Var> {
    let d = g.shape(tokens)[1];
    if store.get(&format!("{prefix}.q.w"))?.shape[0] != d {
        return config_err(format!(
            "{prefix}: query projection expects a different token width"
        ));
    }
    if store.get(&format!("{prefix}.k.w"))?.shape[0] != g.shape(cond)[1] {
        return config_err(format!(
            "{prefix}: key projection expects a different condition width"
        ));
    }
    let q = linear(g, store, tokens, &format!("{prefix}.q"))?;
    let k = linear(g, store, cond, &format!("{prefix}.k"))?;
    let v = linear(g, store, cond, &format!("{prefix}.v"))?;
    let kt = g.transpose(k);
    let mut scores = g.matmul(q, kt);
    if scaled {
        let kd = g.shape(q)[1] as f64;
        scores = g.scale(scores, 1.0 / kd.sqrt());
    }
    let weights = g.softmax_rows(scores);
    let attended = g.matmul(weights, v);
    Ok(g.add(tokens, attended))
}

/// Inputs that stay fixed while sampling one object.
#[derive(Clone, Debug)]
pub struct ObjectCondition {
    pub box_emb: BoxEmbedding,
    pub text_emb: TextEmbedding,
}

/// Records the denoiser on `g` and returns the `[N, 4]` noise estimate.
pub fn object_forward_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ObjectDenoiserConfig,
    state: &[f64],
    t: usize,
    cond: &ObjectCondition,
) -> Result<Var> {
    if !state.len().is_multiple_of(4) || state.is_empty() {
        return validation_err("object state must be a nonempty N×4 array");
    }
    let grid = voxelize_rows(state, cfg.voxel_res);
    let tokens_in = g.constant(patchify(&grid, cfg.patch)?);
    let mut h = linear(g, store, tokens_in, &format!("{PREFIX}.embed"))?;
    let pos = store.var(g, &format!("{PREFIX}.pos"))?;
    if g.shape(pos)[0] != g.shape(h)[0] {
        return config_err("positional table does not match the token count");
    }
    h = g.add(h, pos);

    let com_w = store.var(g, &format!("{PREFIX}.com.w"))?;
    let com_b = store.var(g, &format!("{PREFIX}.com.b"))?;
    let c = combine_in_graph(g, com_w, com_b, &cond.box_emb, &cond.text_emb)?;
    let temb = g.constant(Tensor::new(
        vec![cfg.cond_dim],
        timestep_embedding(t, cfg.cond_dim)?.0,
    ));
    let ct = g.add(c, temb);
    let ct = g.reshape(ct, vec![1, cfg.cond_dim]);

    for b in 0..cfg.blocks {
        let prefix = format!("{PREFIX}.block{b}");
        h = cross_attention(g, store, &prefix, h, ct, cfg.scaled_attention)?;
        let f = linear(g, store, h, &format!("{prefix}.ff1"))?;
        let f = g.activation(f, Activation::Gelu);
        let f = linear(g, store, f, &format!("{prefix}.ff2"))?;
        h = g.add(h, f);
    }

    let n = state.len() / 4;
    let gathered = g.gather_rows(h, point_patches(state, cfg.voxel_res, cfg.patch));
    let own = g.constant(Tensor::new(vec![n, 4], state.to_vec()));
    let z = g.concat_cols(own, gathered);
    let z = linear(g, store, z, &format!("{PREFIX}.head1"))?;
    let z = g.activation(z, Activation::Gelu);
    linear(g, store, z, &format!("{PREFIX}.head2"))
}

/// Noise estimate for an `N×4` state, flattened row-major.
pub fn object_denoiser_forward(
    store: &ParamStore,
    cfg: &ObjectDenoiserConfig,
    state: &[f64],
    t: usize,
    cond: &ObjectCondition,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let out = object_forward_graph(&mut g, store, cfg, state, t, cond)?;
    Ok(g.value(out).data.clone())
}

/// One training example in the normalized object frame.
#[derive(Clone, Debug)]
pub struct ObjectSample {
    /// `N×4` rows in `[-1, 1]`.
    pub points: Vec<f64>,
    pub cond: ObjectCondition,
}

/// Noise-prediction MSE and exact parameter gradients.
pub fn object_loss_grads(
    store: &ParamStore,
    cfg: &ObjectDenoiserConfig,
    sched: &NoiseSchedule,
    sample: &ObjectSample,
    t: usize,
    eps: &[f64],
) -> Result<(f64, Gradients)> {
    let x_t = forward_sample(&sample.points, t, eps, sched)?;
    let mut g = Graph::new();
    let out = object_forward_graph(&mut g, store, cfg, &x_t, t, &sample.cond)?;
    let loss = g.mse(out, eps);
    Ok((g.value(loss).item(), g.backward(loss)))
}

/// Like [`object_loss_grads`], accumulating into the store's gradient slots.
pub fn object_loss(
    store: &mut ParamStore,
    cfg: &ObjectDenoiserConfig,
    sched: &NoiseSchedule,
    sample: &ObjectSample,
    t: usize,
    eps: &[f64],
) -> Result<f64> {
    let (loss, grads) = object_loss_grads(store, cfg, sched, sample, t, eps)?;
    store.accumulate(&grads, 1.0)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ObjectDenoiserConfig {
        ObjectDenoiserConfig {
            voxel_res: 4,
            patch: 2,
            dim: 4,
            blocks: 1,
            ffn_hidden: 6,
            head_hidden: 5,
            cond_dim: 4,
            text_dim: 3,
            fourier_freqs: 1,
            num_points: 6,
            scaled_attention: true,
        }
    }

    fn condition(rng: &mut ChaCha8Rng, cfg: &ObjectDenoiserConfig) -> ObjectCondition {
        ObjectCondition {
            box_emb: BoxEmbedding(
                (0..box_embedding_dim(cfg.fourier_freqs))
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            ),
            text_emb: TextEmbedding(
                (0..cfg.text_dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            ),
        }
    }

    fn state(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..4 * n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Explicit-loop attention for one condition row.
    fn naive_attention(
        tokens: &[Vec<f64>],
        cond: &[f64],
        s: &ParamStore,
        p: &str,
        scaled: bool,
    ) -> Vec<Vec<f64>> {
        let proj = |x: &[f64], name: &str| {
            let w = s.get(&format!("{p}.{name}.w")).unwrap();
            let b = s.get(&format!("{p}.{name}.b")).unwrap();
            let (rows, cols) = (w.shape[0], w.shape[1]);
            (0..cols)
                .map(|j| b.data[j] + (0..rows).map(|i| x[i] * w.data[i * cols + j]).sum::<f64>())
                .collect::<Vec<f64>>()
        };
        let k = proj(cond, "k");
        let v = proj(cond, "v");
        tokens
            .iter()
            .map(|tok| {
                let q = proj(tok, "q");
                let mut logit: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                if scaled {
                    logit /= (q.len() as f64).sqrt();
                }
                let weight = logit.exp() / logit.exp();
                tok.iter().zip(&v).map(|(t, vv)| t + weight * vv).collect()
            })
            .collect()
    }

    fn attention_store(rng: &mut ChaCha8Rng, d: usize, dc: usize) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, shape) in [
            ("q.w", vec![d, d]),
            ("q.b", vec![d]),
            ("k.w", vec![dc, d]),
            ("k.b", vec![d]),
            ("v.w", vec![dc, d]),
            ("v.b", vec![d]),
        ] {
            s.add(&format!("att.{n}"), &shape, Init::Uniform(1.0))
                .unwrap();
        }
        s.initialize(rng);
        s
    }

    #[test]
    fn attention_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = attention_store(&mut rng, 4, 5);
        let tokens: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let cond: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let tv = g.constant(Tensor::new(vec![3, 4], tokens.concat()));
        let cv = g.constant(Tensor::new(vec![1, 5], cond.clone()));
        let out = cross_attention(&mut g, &s, "att", tv, cv, true).unwrap();
        let want = naive_attention(&tokens, &cond, &s, "att", true);
        for (got, w) in g.value(out).data.iter().zip(want.concat()) {
            assert!((got - w).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_with_zero_values_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut s = attention_store(&mut rng, 4, 5);
        s.get_mut("att.v.w")
            .unwrap()
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
        s.get_mut("att.v.b")
            .unwrap()
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let tokens = Tensor::new(vec![2, 4], (0..8).map(|i| i as f64 * 0.3).collect());
        let mut g = Graph::new();
        let tv = g.constant(tokens.clone());
        let cv = g.constant(Tensor::new(vec![1, 5], vec![0.2; 5]));
        let out = cross_attention(&mut g, &s, "att", tv, cv, false).unwrap();
        assert_eq!(g.value(out), &tokens);
        let wrong = g.constant(Tensor::new(vec![1, 3], vec![0.0; 3]));
        assert!(cross_attention(&mut g, &s, "att", tv, wrong, false).is_err());
    }

    #[test]
    fn fresh_head_outputs_zero_with_right_shape() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = cfg.build_params(&mut rng).unwrap();
        let cond = condition(&mut rng, &cfg);
        let x = state(&mut rng, 9);
        let out = object_denoiser_forward(&s, &cfg, &x, 3, &cond).unwrap();
        assert_eq!(out.len(), 9 * 4);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_pure() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut s = cfg.build_params(&mut rng).unwrap();
        s.randomize(&mut rng, 0.5);
        let cond = condition(&mut rng, &cfg);
        let x = state(&mut rng, 7);
        let a = object_denoiser_forward(&s, &cfg, &x, 2, &cond).unwrap();
        let b = object_denoiser_forward(&s, &cfg, &x, 2, &cond).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn patch_mismatch_is_config_error() {
        let cfg = ObjectDenoiserConfig {
            voxel_res: 6,
            patch: 4,
            ..tiny()
        };
        assert!(matches!(cfg.validate(), Err(crate::Error::Config(_))));
        let grid = voxelize_rows(&[0.0; 4], 6);
        assert!(patchify(&grid, 4).is_err());
    }

    #[test]
    fn loss_is_zero_for_zero_head_and_zero_noise() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut s = cfg.build_params(&mut rng).unwrap();
        let sched = make_schedule(10, 1e-3, 0.2).unwrap();
        let sample = ObjectSample {
            points: state(&mut rng, 6),
            cond: condition(&mut rng, &cfg),
        };
        let loss = object_loss(&mut s, &cfg, &sched, &sample, 5, &[0.0; 24]).unwrap();
        assert_eq!(loss, 0.0);
        let eps: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(object_loss(&mut s, &cfg, &sched, &sample, 5, &eps).unwrap() > 0.0);
    }
}
