//! Condition embeddings: prompt text, Fourier box features, their affine
//! combination, and sinusoidal timestep features.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{config_err, validation_err, Error, Result};
use crate::geometry::ObjectBox;

pub const DEFAULT_TEXT_DIM: usize = 64;
pub const DEFAULT_FOURIER_FREQS: usize = 8;
pub const DEFAULT_COND_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextPrompt {
    pub category: String,
    pub description: String,
    pub rendered: String,
}

pub fn format_prompt(category: &str, description: &str) -> Result<TextPrompt> {
    let category = category.trim();
    if category.is_empty() {
        return validation_err("prompt category is empty");
    }
    let description = description.trim();
    let rendered = if description.is_empty() {
        format!("An object from class {category}.")
    } else {
        format!("An object from class {category}, {description}.")
    };
    Ok(TextPrompt {
        category: category.to_string(),
        description: description.to_string(),
        rendered,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct BoxEmbedding(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct TimestepEmbedding(pub Vec<f64>);

/// Source of sentence embeddings for prompts.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, prompt: &TextPrompt) -> Result<TextEmbedding>;
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Deterministic bag-of-tokens encoder: each token seeds a Gaussian vector,
/// the sentence vector is their normalized mean.
#[derive(Clone, Copy, Debug)]
pub struct HashEncoder {
    pub dim: usize,
}

impl Default for HashEncoder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_TEXT_DIM,
        }
    }
}

impl HashEncoder {
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(token.as_bytes()));
        (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

impl TextEncoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &TextPrompt) -> Result<TextEmbedding> {
        let tokens = tokenize(&prompt.rendered);
        if tokens.is_empty() {
            return validation_err("prompt has no tokens");
        }
        let mut acc = vec![0.0; self.dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return validation_err("prompt embedding has zero norm");
        }
        Ok(TextEmbedding(acc.into_iter().map(|v| v / norm).collect()))
    }
}

/// Precomputed embeddings, one `prompt<TAB>values` line each.
#[derive(Clone, Debug, Default)]
pub struct FileEncoder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl FileEncoder {
    pub fn parse(text: &str) -> Result<Self> {
        let mut dim = None;
        let mut table = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (prompt, values) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!(
                    "embedding line {} has no tab separator",
                    lineno + 1
                ))
            })?;
            let vec: Vec<f64> = values
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("embedding line {}: {e}", lineno + 1)))?;
            match dim {
                None => dim = Some(vec.len()),
                Some(d) if d != vec.len() => {
                    return Err(Error::Format(format!(
                        "embedding line {} has {} values, expected {d}",
                        lineno + 1,
                        vec.len()
                    )))
                }
                _ => {}
            }
            table.insert(prompt.to_string(), vec);
        }
        Ok(Self {
            dim: dim.unwrap_or(0),
            table,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn render(entries: &[(String, Vec<f64>)]) -> String {
        let mut out = String::new();
        for (prompt, v) in entries {
            let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
            out.push_str(&format!("{prompt}\t{}\n", vals.join(" ")));
        }
        out
    }
}

impl TextEncoder for FileEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &TextPrompt) -> Result<TextEmbedding> {
        self.table
            .get(&prompt.rendered)
            .map(|v| TextEmbedding(v.clone()))
            .ok_or_else(|| Error::MissingEmbedding(prompt.rendered.clone()))
    }
}

pub fn encode_text(prompt: &TextPrompt, encoder: &dyn TextEncoder) -> Result<TextEmbedding> {
    encoder.encode(prompt)
}

/// Scales that map box fields into `[-1, 1]` before the Fourier features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxNormalization {
    /// Divides the center coordinates, meters.
    pub scene_half_extent: f64,
    /// Divides w, l, h, meters.
    pub size_scale: f64,
}

impl Default for BoxNormalization {
    fn default() -> Self {
        Self {
            scene_half_extent: 50.0,
            size_scale: 10.0,
        }
    }
}

pub fn box_embedding_dim(freqs: usize) -> usize {
    14 * freqs
}

pub fn fourier_embed(
    bx: &ObjectBox,
    norm: &BoxNormalization,
    freqs: usize,
) -> Result<BoxEmbedding> {
    if !(norm.scene_half_extent > 0.0 && norm.size_scale > 0.0) {
        return config_err("box normalization constants must be positive");
    }
    let scales = [
        norm.scene_half_extent,
        norm.scene_half_extent,
        norm.scene_half_extent,
        norm.size_scale,
        norm.size_scale,
        norm.size_scale,
        PI,
    ];
    let mut out = Vec::with_capacity(box_embedding_dim(freqs));
    for (value, scale) in bx.fields().iter().zip(scales) {
        let p = (value / scale).clamp(-1.0, 1.0);
        for k in 0..freqs {
            let arg = (1u64 << k) as f64 * PI * p;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    Ok(BoxEmbedding(out))
}

/// `W·[f_B; f_T] + b` recorded on a graph.
pub fn combine_in_graph(
    g: &mut Graph,
    weight: Var,
    bias: Var,
    fb: &BoxEmbedding,
    ft: &TextEmbedding,
) -> Result<Var> {
    let input_dim = fb.0.len() + ft.0.len();
    let (rows, cols) = match g.shape(weight) {
        [r, c] => (*r, *c),
        s => return config_err(format!("combiner weight must be a matrix, got shape {s:?}")),
    };
    if cols != input_dim {
        return config_err(format!("combiner expects {cols} inputs, got {input_dim}"));
    }
    if g.shape(bias) != [rows] {
        return config_err(format!("combiner bias must have length {rows}"));
    }
    let mut x = fb.0.clone();
    x.extend_from_slice(&ft.0);
    let x = g.constant(Tensor::new(vec![input_dim, 1], x));
    let c = g.matmul(weight, x);
    let c = g.reshape(c, vec![rows]);
    Ok(g.add_bias(c, bias))
}

pub fn combine_conditions(
    fb: &BoxEmbedding,
    ft: &TextEmbedding,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<ConditionEmbedding> {
    let mut g = Graph::new();
    let w = g.constant(weight.clone());
    let b = g.constant(bias.clone());
    let c = combine_in_graph(&mut g, w, b, fb, ft)?;
    Ok(ConditionEmbedding(g.value(c).data.clone()))
}

pub fn timestep_embedding(t: usize, dim: usize) -> Result<TimestepEmbedding> {
    if !dim.is_multiple_of(2) {
        return config_err(format!("timestep embedding dimension {dim} must be even"));
    }
    if t == 0 {
        return validation_err("timestep must be >= 1");
    }
    let mut out = vec![0.0; dim];
    for j in 0..dim / 2 {
        let freq = 10000f64.powf(-(2.0 * j as f64) / dim as f64);
        let arg = t as f64 * freq;
        out[2 * j] = arg.sin();
        out[2 * j + 1] = arg.cos();
    }
    Ok(TimestepEmbedding(out))
}
