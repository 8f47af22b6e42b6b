//! Scene denoiser (small U-Net over `[2, H, W]` range images) and the
//! zero-convolution controller that steers it from an object range image.
//!
//! Encoder level `l` runs a 3×3 conv at width `base << l`, adds a projected
//! timestep embedding, applies SiLU, stores a skip and average-pools. The
//! decoder upsamples, concatenates the skip and mirrors the encoder. Control
//! features are added to the skips and to the bottleneck.

use crate::autograd::{Activation, Graph, Tensor, Var};
use crate::conditioning::timestep_embedding;
use crate::diffusion::{forward_sample, NoiseSchedule};
use crate::error::{config_err, validation_err, Result};
use crate::networks::params::{Init, ParamStore};

pub const DENOISER_PREFIX: &str = "scene";
pub const CONTROLLER_PREFIX: &str = "ctrl";
const IN_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneNetConfig {
    pub base_width: usize,
    pub depth: usize,
    pub temb_dim: usize,
}

impl Default for SceneNetConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            depth: 3,
            temb_dim: 32,
        }
    }
}

impl SceneNetConfig {
    /// Four levels down and four up at width 64.
    pub fn full_scale() -> Self {
        Self {
            base_width: 64,
            depth: 4,
            temb_dim: 128,
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.depth == 0 {
            return config_err("scene network needs positive width and depth");
        }
        if !self.temb_dim.is_multiple_of(2) {
            return config_err("scene timestep embedding dimension must be even");
        }
        Ok(())
    }

    pub fn check_image(&self, height: usize, width: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return config_err(format!(
                "image {height}x{width} not divisible by 2^{} = {m}",
                self.depth
            ));
        }
        Ok(())
    }

    fn mid_width(&self) -> usize {
        self.width(self.depth - 1)
    }

    fn add_encoder(&self, s: &mut ParamStore, p: &str) -> Result<()> {
        let mut cin = self.base_width;
        for l in 0..self.depth {
            let c = self.width(l);
            add_conv(s, &format!("{p}.enc{l}"), c, cin, 3, false)?;
            add_temb(s, &format!("{p}.enc{l}.t"), self.temb_dim, c)?;
            cin = c;
        }
        let m = self.mid_width();
        add_conv(s, &format!("{p}.mid"), m, m, 3, false)?;
        add_temb(s, &format!("{p}.mid.t"), self.temb_dim, m)
    }

    /// Denoiser parameters under `scene.`; the output conv starts at zero.
    pub fn build_denoiser<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let p = DENOISER_PREFIX;
        let mut s = ParamStore::new();
        add_conv(
            &mut s,
            &format!("{p}.stem"),
            self.base_width,
            IN_CHANNELS,
            3,
            false,
        )?;
        self.add_encoder(&mut s, p)?;
        for l in 0..self.depth {
            let c = self.width(l);
            let up = if l + 1 == self.depth {
                self.mid_width()
            } else {
                self.width(l + 1)
            };
            add_conv(&mut s, &format!("{p}.dec{l}"), c, up + c, 3, false)?;
            add_temb(&mut s, &format!("{p}.dec{l}.t"), self.temb_dim, c)?;
        }
        add_conv(
            &mut s,
            &format!("{p}.out"),
            IN_CHANNELS,
            self.base_width,
            3,
            true,
        )?;
        s.initialize(rng);
        Ok(s)
    }

    /// Controller parameters under `ctrl.`; every zero convolution starts at zero.
    pub fn build_controller<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        self.validate()?;
        let p = CONTROLLER_PREFIX;
        let c0 = self.base_width;
        let mut s = ParamStore::new();
        add_conv(&mut s, &format!("{p}.stem_obj"), c0, IN_CHANNELS, 3, false)?;
        add_conv(&mut s, &format!("{p}.stem_x"), c0, IN_CHANNELS, 3, false)?;
        add_conv(&mut s, &format!("{p}.zin_obj"), c0, c0, 1, true)?;
        add_conv(&mut s, &format!("{p}.zin_x"), c0, c0, 1, true)?;
        self.add_encoder(&mut s, p)?;
        for l in 0..self.depth {
            let c = self.width(l);
            add_conv(&mut s, &format!("{p}.zout{l}"), c, c, 1, true)?;
        }
        let m = self.mid_width();
        add_conv(&mut s, &format!("{p}.zmid"), m, m, 1, true)?;
        s.initialize(rng);
        Ok(s)
    }

    /// Denoiser and controller in one store.
    pub fn build_all<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        let mut s = self.build_denoiser(rng)?;
        s.merge(self.build_controller(rng)?)?;
        Ok(s)
    }
}

fn add_conv(
    s: &mut ParamStore,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    zero: bool,
) -> Result<()> {
    let init = if zero {
        Init::Zeros
    } else {
        Init::fan_in(inp * k * k)
    };
    s.add(&format!("{name}.w"), &[out, inp, k, k], init)?;
    s.add(&format!("{name}.b"), &[out], init)
}

fn add_temb(s: &mut ParamStore, name: &str, temb: usize, out: usize) -> Result<()> {
    s.add(&format!("{name}.w"), &[temb, out], Init::fan_in(temb))?;
    s.add(&format!("{name}.b"), &[out], Init::fan_in(temb))
}

/// Per-scale features emitted by the controller.
#[derive(Clone, Debug)]
pub struct ControlFeatures {
    /// One map per encoder level, matching the denoiser skips.
    pub skips: Vec<Var>,
    pub mid: Var,
}

fn conv(g: &mut Graph, s: &ParamStore, x: Var, name: &str) -> Result<Var> {
    let w = s.var(g, &format!("{name}.w"))?;
    let b = s.var(g, &format!("{name}.b"))?;
    let cin = g.shape(x)[0];
    if g.shape(w)[1] != cin {
        return config_err(format!(
            "{name} expects {} input channels, got {cin}",
            g.shape(w)[1]
        ));
    }
    Ok(g.conv2d(x, w, b))
}

fn temb_shift(g: &mut Graph, s: &ParamStore, temb: Var, name: &str) -> Result<Var> {
    let w = s.var(g, &format!("{name}.w"))?;
    let b = s.var(g, &format!("{name}.b"))?;
    let h = g.matmul(temb, w);
    let n = g.shape(h)[1];
    let h = g.reshape(h, vec![n]);
    Ok(g.add_bias(h, b))
}

fn block(g: &mut Graph, s: &ParamStore, x: Var, temb: Var, name: &str) -> Result<Var> {
    let h = conv(g, s, x, name)?;
    let shift = temb_shift(g, s, temb, &format!("{name}.t"))?;
    let h = g.add_channel(h, shift);
    Ok(g.activation(h, Activation::Silu))
}

fn temb_var(g: &mut Graph, cfg: &SceneNetConfig, t: usize) -> Result<Var> {
    let e = timestep_embedding(t, cfg.temb_dim)?;
    Ok(g.constant(Tensor::new(vec![1, cfg.temb_dim], e.0)))
}

fn encoder(
    g: &mut Graph,
    s: &ParamStore,
    cfg: &SceneNetConfig,
    prefix: &str,
    mut h: Var,
    temb: Var,
) -> Result<(Vec<Var>, Var)> {
    let mut skips = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        h = block(g, s, h, temb, &format!("{prefix}.enc{l}"))?;
        skips.push(h);
        h = g.avg_pool2(h);
    }
    let mid = block(g, s, h, temb, &format!("{prefix}.mid"))?;
    Ok((skips, mid))
}

fn check_input(g: &Graph, cfg: &SceneNetConfig, x: Var) -> Result<(usize, usize)> {
    match g.shape(x) {
        [c, h, w] if *c == IN_CHANNELS => {
            cfg.check_image(*h, *w)?;
            Ok((*h, *w))
        }
        s => validation_err(format!("scene input must be [2, H, W], got {s:?}")),
    }
}

/// Records the denoiser; `x` is `[2, H, W]`.
pub fn scene_forward_graph(
    g: &mut Graph,
    s: &ParamStore,
    cfg: &SceneNetConfig,
    x: Var,
    t: usize,
    control: Option<&ControlFeatures>,
) -> Result<Var> {
    check_input(g, cfg, x)?;
    let p = DENOISER_PREFIX;
    let temb = temb_var(g, cfg, t)?;
    let stem = conv(g, s, x, &format!("{p}.stem"))?;
    let (mut skips, mut h) = encoder(g, s, cfg, p, stem, temb)?;
    if let Some(ctrl) = control {
        if ctrl.skips.len() != skips.len() {
            return validation_err("control features do not match the denoiser depth");
        }
        for (skip, c) in skips.iter_mut().zip(&ctrl.skips) {
            if g.shape(*skip) != g.shape(*c) {
                return validation_err("control feature shape mismatch");
            }
            *skip = g.add(*skip, *c);
        }
        h = g.add(h, ctrl.mid);
    }
    for l in (0..cfg.depth).rev() {
        let up = g.upsample2(h);
        let cat = g.concat_channels(up, skips[l]);
        h = block(g, s, cat, temb, &format!("{p}.dec{l}"))?;
    }
    conv(g, s, h, &format!("{p}.out"))
}

/// Records the controller for object image `obj` and noisy scene `x_t`.
pub fn controller_forward_graph(
    g: &mut Graph,
    s: &ParamStore,
    cfg: &SceneNetConfig,
    obj: Var,
    x_t: Var,
    t: usize,
) -> Result<ControlFeatures> {
    if g.shape(obj) != g.shape(x_t) {
        return validation_err(format!(
            "object image {:?} and scene state {:?} differ",
            g.shape(obj),
            g.shape(x_t)
        ));
    }
    check_input(g, cfg, x_t)?;
    let p = CONTROLLER_PREFIX;
    let temb = temb_var(g, cfg, t)?;
    let a = conv(g, s, obj, &format!("{p}.stem_obj"))?;
    let a = conv(g, s, a, &format!("{p}.zin_obj"))?;
    let b = conv(g, s, x_t, &format!("{p}.stem_x"))?;
    let b = conv(g, s, b, &format!("{p}.zin_x"))?;
    let h = g.add(a, b);
    let (skips, mid) = encoder(g, s, cfg, p, h, temb)?;
    let skips = skips
        .into_iter()
        .enumerate()
        .map(|(l, sk)| conv(g, s, sk, &format!("{p}.zout{l}")))
        .collect::<Result<Vec<_>>>()?;
    let mid = conv(g, s, mid, &format!("{p}.zmid"))?;
    Ok(ControlFeatures { skips, mid })
}

fn image_var(g: &mut Graph, chw: &[f64], height: usize, width: usize) -> Result<Var> {
    if chw.len() != IN_CHANNELS * height * width {
        return validation_err(format!(
            "image buffer has {} values, expected 2x{height}x{width}",
            chw.len()
        ));
    }
    Ok(g.constant(Tensor::new(vec![IN_CHANNELS, height, width], chw.to_vec())))
}

/// Noise estimate for a channel-major `[2, H, W]` state, optionally controlled
/// by a channel-major object image.
pub fn scene_denoiser_forward(
    s: &ParamStore,
    cfg: &SceneNetConfig,
    x_t: &[f64],
    height: usize,
    width: usize,
    t: usize,
    obj: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = image_var(&mut g, x_t, height, width)?;
    let ctrl = match obj {
        Some(o) => {
            let o = image_var(&mut g, o, height, width)?;
            Some(controller_forward_graph(&mut g, s, cfg, o, x, t)?)
        }
        None => None,
    };
    let out = scene_forward_graph(&mut g, s, cfg, x, t, ctrl.as_ref())?;
    Ok(g.value(out).data.clone())
}

/// Controller feature values, skips first then the bottleneck.
pub fn controller_forward(
    s: &ParamStore,
    cfg: &SceneNetConfig,
    obj: &[f64],
    x_t: &[f64],
    height: usize,
    width: usize,
    t: usize,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let o = image_var(&mut g, obj, height, width)?;
    let x = image_var(&mut g, x_t, height, width)?;
    let f = controller_forward_graph(&mut g, s, cfg, o, x, t)?;
    Ok(f.skips
        .iter()
        .chain(std::iter::once(&f.mid))
        .map(|v| g.value(*v).clone())
        .collect())
}

/// Scene noise-prediction loss recorded on `g`; returns the scalar node.
#[allow(clippy::too_many_arguments)]
pub fn scene_loss_graph(
    g: &mut Graph,
    s: &ParamStore,
    cfg: &SceneNetConfig,
    sched: &NoiseSchedule,
    img0: &[f64],
    obj: &[f64],
    height: usize,
    width: usize,
    t: usize,
    eps: &[f64],
) -> Result<Var> {
    let x_t = forward_sample(img0, t, eps, sched)?;
    let x = image_var(g, &x_t, height, width)?;
    let o = image_var(g, obj, height, width)?;
    let ctrl = controller_forward_graph(g, s, cfg, o, x, t)?;
    let out = scene_forward_graph(g, s, cfg, x, t, Some(&ctrl))?;
    Ok(g.mse(out, eps))
}

/// Scene loss with exact gradients for denoiser and controller parameters.
#[allow(clippy::too_many_arguments)]
pub fn scene_loss_grads(
    s: &ParamStore,
    cfg: &SceneNetConfig,
    sched: &NoiseSchedule,
    img0: &[f64],
    obj: &[f64],
    height: usize,
    width: usize,
    t: usize,
    eps: &[f64],
) -> Result<(f64, crate::autograd::Gradients)> {
    let mut g = Graph::new();
    let loss = scene_loss_graph(&mut g, s, cfg, sched, img0, obj, height, width, t, eps)?;
    Ok((g.value(loss).item(), g.backward(loss)))
}
