//! Dense `f64` tensors and a reverse-mode tape sized for the denoisers here.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse, accumulating adjoints only
//! along paths that reach a parameter leaf.

use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Tanh-approximated GELU.
    Gelu,
    Silu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    /// `[.., n] + [n]` broadcast over leading dimensions.
    AddBias(Var, Var),
    /// `[C, H, W] + [C]`.
    AddChannel(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Act(Var, Activation),
    SoftmaxRows(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    ConcatChannels(Var, Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
    /// `Σ weight·(x − target)² / norm`; `weight = None` means all ones.
    WeightedSse {
        x: Var,
        target: Vec<f64>,
        weight: Option<Vec<f64>>,
        norm: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Per-parameter gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf; repeated names return the same node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            needs_grad: true,
            param: Some(name.to_string()),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape.clone(), data);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "sub shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.shape.clone(), data);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape.clone(), x.data.iter().map(|v| v * s).collect());
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = bv.len();
        assert_eq!(*xv.shape.last().unwrap(), n, "bias length mismatch");
        let mut data = xv.data.clone();
        for row in data.chunks_exact_mut(n) {
            for (r, bb) in row.iter_mut().zip(&bv.data) {
                *r += bb;
            }
        }
        let t = Tensor::new(xv.shape.clone(), data);
        self.push(t, Op::AddBias(x, b), &[x, b])
    }

    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        assert_eq!(xv.shape.len(), 3);
        let c = xv.shape[0];
        assert_eq!(vv.len(), c, "channel vector length mismatch");
        let hw = xv.shape[1] * xv.shape[2];
        let mut data = xv.data.clone();
        for (ch, plane) in data.chunks_exact_mut(hw).enumerate() {
            let add = vv.data[ch];
            plane.iter_mut().for_each(|p| *p += add);
        }
        let t = Tensor::new(xv.shape.clone(), data);
        self.push(t, Op::AddChannel(x, v), &[x, v])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape.len(), 2);
        assert_eq!(bv.shape.len(), 2);
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        assert_eq!(bv.shape[0], k, "matmul inner dimension mismatch");
        let data = matmul_raw(&av.data, &bv.data, m, k, n);
        self.push(Tensor::new(vec![m, n], data), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.shape[0], av.shape[1]);
        let data = transpose_raw(&av.data, m, n);
        self.push(Tensor::new(vec![n, m], data), Op::Transpose(a), &[a])
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let x = self.value(a);
        let t = Tensor::new(
            x.shape.clone(),
            x.data.iter().map(|&v| act.apply(v)).collect(),
        );
        self.push(t, Op::Act(a, act), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.shape[1];
        let mut data = x.data.clone();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            row.iter_mut().for_each(|r| *r /= sum);
        }
        let t = Tensor::new(x.shape.clone(), data);
        self.push(t, Op::SoftmaxRows(a), &[a])
    }

    /// `[m, n] → [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.shape[0], x.shape[1]);
        let mut data = vec![0.0; n];
        for row in x.data.chunks_exact(n) {
            for (d, r) in data.iter_mut().zip(row) {
                *d += r;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        self.push(Tensor::new(vec![n], data), Op::MeanRows(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        let n = x.shape[1];
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            data.extend_from_slice(&x.data[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![idx.len(), n], data);
        self.push(t, Op::GatherRows(a, idx), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, p, q) = (av.shape[0], av.shape[1], bv.shape[1]);
        assert_eq!(bv.shape[0], m, "concat row mismatch");
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&av.data[i * p..(i + 1) * p]);
            data.extend_from_slice(&bv.data[i * q..(i + 1) * q]);
        }
        self.push(
            Tensor::new(vec![m, p + q], data),
            Op::ConcatCols(a, b),
            &[a, b],
        )
    }

    /// `[C1, H, W] ++ [C2, H, W] → [C1 + C2, H, W]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape[1..], bv.shape[1..], "concat spatial mismatch");
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let shape = vec![av.shape[0] + bv.shape[0], av.shape[1], av.shape[2]];
        self.push(Tensor::new(shape, data), Op::ConcatChannels(a, b), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let x = self.value(a);
        let t = Tensor::new(shape, x.data.clone());
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Same-padded 2D convolution: `x [C, H, W]`, `w [O, C, k, k]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let [c, h, wd] = xv.shape[..] else {
            panic!("conv2d input must be rank 3")
        };
        let [o, ci, k, k2] = wv.shape[..] else {
            panic!("conv2d weight must be rank 4")
        };
        assert_eq!(ci, c, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d kernel must be square");
        assert!(k % 2 == 1, "conv2d kernel must be odd");
        assert_eq!(bv.len(), o);
        let pad = k / 2;
        let data = conv_forward(&xv.data, &wv.data, &bv.data, c, h, wd, o, k, pad);
        self.push(
            Tensor::new(vec![o, h, wd], data),
            Op::Conv2d { x, w, b, pad },
            &[x, w, b],
        )
    }

    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [c, h, w] = x.shape[..] else {
            panic!("avg_pool2 input must be rank 3")
        };
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "avg_pool2 needs even spatial dims"
        );
        let (ho, wo) = (h / 2, w / 2);
        let mut data = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = ch * h * w;
                    let s = x.data[base + 2 * y * w + 2 * xx]
                        + x.data[base + 2 * y * w + 2 * xx + 1]
                        + x.data[base + (2 * y + 1) * w + 2 * xx]
                        + x.data[base + (2 * y + 1) * w + 2 * xx + 1];
                    data[(ch * ho + y) * wo + xx] = 0.25 * s;
                }
            }
        }
        self.push(Tensor::new(vec![c, ho, wo], data), Op::AvgPool2(a), &[a])
    }

    pub fn upsample2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [c, h, w] = x.shape[..] else {
            panic!("upsample2 input must be rank 3")
        };
        let (ho, wo) = (2 * h, 2 * w);
        let mut data = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    data[(ch * ho + y) * wo + xx] = x.data[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::new(vec![c, ho, wo], data), Op::Upsample2(a), &[a])
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Var {
        let n = self.value(x).len() as f64;
        self.weighted_sse(x, target, None, n)
    }

    pub fn weighted_sse(
        &mut self,
        x: Var,
        target: &[f64],
        weight: Option<Vec<f64>>,
        norm: f64,
    ) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), target.len(), "loss target length mismatch");
        if let Some(w) = &weight {
            assert_eq!(w.len(), target.len(), "loss weight length mismatch");
        }
        let mut sum = 0.0;
        for (i, (a, t)) in xv.data.iter().zip(target).enumerate() {
            let d = a - t;
            let wgt = weight.as_ref().map_or(1.0, |w| w[i]);
            sum += wgt * d * d;
        }
        let op = Op::WeightedSse {
            x,
            target: target.to_vec(),
            weight,
            norm,
        };
        self.push(Tensor::scalar(sum / norm), op, &[x])
    }

    /// Reverse accumulation from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape.clone(), vec![1.0]));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if node.param.is_some() {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let mut out = Gradients::new();
        for (name, v) in &self.params {
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(&self.nodes[v.0].value.shape));
            out.insert(name.clone(), g);
        }
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        self.accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let neg = Tensor::new(g.shape.clone(), g.data.iter().map(|v| -v).collect());
                    self.accumulate(grads, *b, neg);
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    self.accumulate(
                        grads,
                        *a,
                        Tensor::new(g.shape.clone(), g.data.iter().map(|v| v * s).collect()),
                    );
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut gb = vec![0.0; n];
                    for row in g.data.chunks_exact(n) {
                        for (d, r) in gb.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    let shape = self.value(*b).shape.clone();
                    self.accumulate(grads, *b, Tensor::new(shape, gb));
                }
            }
            Op::AddChannel(x, v) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.clone());
                }
                if self.wants(*v) {
                    let c = g.shape[0];
                    let hw = g.len() / c;
                    let gv: Vec<f64> = g.data.chunks_exact(hw).map(|p| p.iter().sum()).collect();
                    let shape = self.value(*v).shape.clone();
                    self.accumulate(grads, *v, Tensor::new(shape, gv));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                if self.wants(*a) {
                    let bt = transpose_raw(&bv.data, k, n);
                    let ga = matmul_raw(&g.data, &bt, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga));
                }
                if self.wants(*b) {
                    let at = transpose_raw(&av.data, m, k);
                    let gb = matmul_raw(&at, &g.data, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb));
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let (n, m) = (g.shape[0], g.shape[1]);
                    self.accumulate(
                        grads,
                        *a,
                        Tensor::new(vec![m, n], transpose_raw(&g.data, n, m)),
                    );
                }
            }
            Op::Act(a, act) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let data = x
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&xi, gi)| act.derivative(xi) * gi)
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(x.shape.clone(), data));
                }
            }
            Op::SoftmaxRows(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let n = y.shape[1];
                    let mut data = vec![0.0; y.len()];
                    for ((out, yr), gr) in data
                        .chunks_exact_mut(n)
                        .zip(y.data.chunks_exact(n))
                        .zip(g.data.chunks_exact(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, yi), gi) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(y.shape.clone(), data));
                }
            }
            Op::MeanRows(a) => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape.clone();
                    let m = shape[0] as f64;
                    let mut data = Vec::with_capacity(shape[0] * shape[1]);
                    for _ in 0..shape[0] {
                        data.extend(g.data.iter().map(|v| v / m));
                    }
                    self.accumulate(grads, *a, Tensor::new(shape, data));
                }
            }
            Op::GatherRows(a, idx) => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape.clone();
                    let n = shape[1];
                    let mut data = vec![0.0; shape[0] * n];
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, s) in data[i * n..(i + 1) * n]
                            .iter_mut()
                            .zip(&g.data[r * n..(r + 1) * n])
                        {
                            *d += s;
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(shape, data));
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.value(*a).shape[1], self.value(*b).shape[1]);
                let m = g.shape[0];
                if self.wants(*a) {
                    let data = (0..m)
                        .flat_map(|i| g.data[i * (p + q)..i * (p + q) + p].iter().copied())
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(vec![m, p], data));
                }
                if self.wants(*b) {
                    let data = (0..m)
                        .flat_map(|i| g.data[i * (p + q) + p..(i + 1) * (p + q)].iter().copied())
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(vec![m, q], data));
                }
            }
            Op::ConcatChannels(a, b) => {
                let split = self.value(*a).len();
                if self.wants(*a) {
                    let shape = self.value(*a).shape.clone();
                    self.accumulate(grads, *a, Tensor::new(shape, g.data[..split].to_vec()));
                }
                if self.wants(*b) {
                    let shape = self.value(*b).shape.clone();
                    self.accumulate(grads, *b, Tensor::new(shape, g.data[split..].to_vec()));
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape.clone();
                    self.accumulate(grads, *a, Tensor::new(shape, g.data.clone()));
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [c, h, wd] = xv.shape[..] else {
                    unreachable!()
                };
                let [o, _, k, _] = wv.shape[..] else {
                    unreachable!()
                };
                if self.wants(*b) {
                    let hw = h * wd;
                    let gb = g.data.chunks_exact(hw).map(|p| p.iter().sum()).collect();
                    self.accumulate(grads, *b, Tensor::new(vec![o], gb));
                }
                if self.wants(*w) {
                    let gw = conv_weight_grad(&xv.data, &g.data, c, h, wd, o, k, *pad);
                    self.accumulate(grads, *w, Tensor::new(wv.shape.clone(), gw));
                }
                if self.wants(*x) {
                    let gx = conv_input_grad(&wv.data, &g.data, c, h, wd, o, k, *pad);
                    self.accumulate(grads, *x, Tensor::new(xv.shape.clone(), gx));
                }
            }
            Op::AvgPool2(a) => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape.clone();
                    let [c, h, w] = shape[..] else { unreachable!() };
                    let (ho, wo) = (h / 2, w / 2);
                    let mut data = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                data[(ch * h + y) * w + xx] =
                                    0.25 * g.data[(ch * ho + y / 2) * wo + xx / 2];
                            }
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(shape, data));
                }
            }
            Op::Upsample2(a) => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape.clone();
                    let [c, h, w] = shape[..] else { unreachable!() };
                    let (ho, wo) = (2 * h, 2 * w);
                    let mut data = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                data[(ch * h + y / 2) * w + xx / 2] +=
                                    g.data[(ch * ho + y) * wo + xx];
                            }
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(shape, data));
                }
            }
            Op::WeightedSse {
                x,
                target,
                weight,
                norm,
            } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let scale = 2.0 * g.item() / norm;
                    let data = xv
                        .data
                        .iter()
                        .zip(target)
                        .enumerate()
                        .map(|(i, (a, t))| scale * weight.as_ref().map_or(1.0, |w| w[i]) * (a - t))
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(xv.shape.clone(), data));
                }
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `d`.
#[inline]
fn span(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let hw = h * wd;
    let mut out = vec![0.0; o * hw];
    for oc in 0..o {
        let plane = &mut out[oc * hw..(oc + 1) * hw];
        plane.iter_mut().for_each(|v| *v = b[oc]);
        for ic in 0..c {
            let src = &x[ic * hw..(ic + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let wv = w[((oc * c + ic) * k + ky) * k + kx];
                    let dx = kx as isize - pad as isize;
                    let (x0, x1) = span(wd, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut plane[y * wd + x0..y * wd + x1];
                        let s0 = (x0 as isize + dx) as usize;
                        let srow = &src[sy * wd + s0..sy * wd + s0 + (x1 - x0)];
                        for (d, s) in dst.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_weight_grad(
    x: &[f64],
    g: &[f64],
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let hw = h * wd;
    let mut gw = vec![0.0; o * c * k * k];
    for oc in 0..o {
        let gp = &g[oc * hw..(oc + 1) * hw];
        for ic in 0..c {
            let src = &x[ic * hw..(ic + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad as isize;
                    let (x0, x1) = span(wd, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (x0 as isize + dx) as usize;
                        let grow = &gp[y * wd + x0..y * wd + x1];
                        let srow = &src[sy * wd + s0..sy * wd + s0 + (x1 - x0)];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw[((oc * c + ic) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    gw
}

#[allow(clippy::too_many_arguments)]
fn conv_input_grad(
    w: &[f64],
    g: &[f64],
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let hw = h * wd;
    let mut gx = vec![0.0; c * hw];
    for oc in 0..o {
        let gp = &g[oc * hw..(oc + 1) * hw];
        for ic in 0..c {
            let dst = &mut gx[ic * hw..(ic + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad as isize;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let wv = w[((oc * c + ic) * k + ky) * k + kx];
                    let dx = kx as isize - pad as isize;
                    let (x0, x1) = span(wd, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (x0 as isize + dx) as usize;
                        let grow = &gp[y * wd + x0..y * wd + x1];
                        let drow = &mut dst[sy * wd + s0..sy * wd + s0 + (x1 - x0)];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
    }
    gx
}
