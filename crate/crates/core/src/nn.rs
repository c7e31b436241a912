//! Minimal NHWC layer library with explicit backward passes.
//!
//! Activations are `f32` feature maps laid out as `rows × channels`, where a
//! row is one spatial position of one sample. Convolutions lower to a single
//! GEMM through im2col, so a 1×1 spatial map is an ordinary dense batch.
//! Parameters are looked up by name in a [`ParamStore`]; gradients come back
//! keyed by the same names.

use std::collections::{BTreeMap, HashMap};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch of feature maps in NHWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), batch * height * width * channels, "feature map size mismatch");
        Self { batch, height, width, channels, data }
    }

    pub fn zeros(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Self::new(batch, height, width, channels, vec![0.0; batch * height * width * channels])
    }

    /// Dense `batch × channels` matrix.
    pub fn dense(batch: usize, channels: usize, data: Vec<f32>) -> Self {
        Self::new(batch, 1, 1, channels, data)
    }

    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.channels..(r + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.batch == other.batch
            && self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
    }
}

/// `c = a·b + beta·c` for row-major matrices, `a` is `m×k`, `b` is `k×n`.
/// With `a_t` the buffer holds `aᵀ` (`k×m`); with `b_t` it holds `bᵀ` (`n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: dimensions and strides describe in-bounds views of the slices checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Read-only `f32` parameters and running statistics keyed by entry name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    values: HashMap<String, Vec<f32>>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f32>) {
        self.values.insert(name.into(), values);
    }

    pub fn get(&self, name: &str) -> &[f32] {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f32>> {
        self.values.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Gradients of learnable parameters keyed by entry name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub values: BTreeMap<String, Vec<f32>>,
}

impl Gradients {
    pub fn accumulate(&mut self, name: &str, grad: Vec<f32>) {
        match self.values.get_mut(name) {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            None => {
                self.values.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.values.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.values.values_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Which statistics batch normalization uses in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Current-batch statistics; running estimates are reported back for updating.
    Batch,
    /// Stored running statistics.
    Running,
}

/// Batch statistics observed by one normalization layer in [`NormMode::Batch`].
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Per-forward bookkeeping: normalization mode, whether to record a tape,
/// and the batch statistics collected along the way.
#[derive(Debug)]
pub struct ForwardCtx {
    pub mode: NormMode,
    pub record: bool,
    pub stats: Vec<StatUpdate>,
}

impl ForwardCtx {
    pub fn new(mode: NormMode, record: bool) -> Self {
        Self { mode, record, stats: Vec::new() }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Clone, Debug)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Residual bottleneck: 1×1 → 3×3 (strided) → 1×1 with optional projection shortcut.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub main: Sequential,
    pub shortcut: Option<Sequential>,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    Norm(BatchNorm),
    Relu,
    MaxPool(MaxPool),
    GlobalAvgPool,
    Linear(Linear),
    Bottleneck(Box<Bottleneck>),
}

#[derive(Debug)]
pub enum Cache {
    Conv { cols: Vec<f32>, input_shape: (usize, usize, usize, usize), out_hw: (usize, usize) },
    Norm { xhat: Vec<f32>, inv_std: Vec<f32>, batch_stats: bool },
    Relu { output: Vec<f32> },
    MaxPool { argmax: Vec<u32>, input_shape: (usize, usize, usize, usize) },
    GlobalAvgPool { height: usize, width: usize },
    Linear { input: Vec<f32> },
    Bottleneck { main: Vec<Cache>, shortcut: Option<Vec<Cache>>, output: Vec<f32> },
}

/// Shape and value-kind of one parameter slot a layer needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
    pub learnable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamInit {
    /// He-normal over `fan` inputs.
    KaimingNormal { fan: usize },
    /// `U(-1/√fan, 1/√fan)`.
    Uniform { fan: usize },
    Constant(f64),
}

impl Conv2d {
    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &FeatureMap, ho: usize, wo: usize) -> Vec<f32> {
        let k = self.kernel;
        let c = x.channels;
        let kk = k * k * c;
        let mut cols = vec![0.0f32; x.batch * ho * wo * kk];
        for b in 0..x.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    let dst = &mut cols[row * kk..(row + 1) * kk];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= x.width as isize {
                                continue;
                            }
                            let src = ((b * x.height + iy as usize) * x.width + ix as usize) * c;
                            let off = (ky * k + kx) * c;
                            dst[off..off + c].copy_from_slice(&x.data[src..src + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f32], shape: (usize, usize, usize, usize), ho: usize, wo: usize) -> FeatureMap {
        let (batch, height, width, c) = shape;
        let k = self.kernel;
        let kk = k * k * c;
        let mut dx = FeatureMap::zeros(batch, height, width, c);
        for b in 0..batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    let src = &dcols[row * kk..(row + 1) * kk];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= width as isize {
                                continue;
                            }
                            let dst = ((b * height + iy as usize) * width + ix as usize) * c;
                            let off = (ky * k + kx) * c;
                            for (d, s) in dx.data[dst..dst + c].iter_mut().zip(&src[off..off + c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn forward(&self, params: &ParamStore, x: &FeatureMap, record: bool) -> (FeatureMap, Option<Cache>) {
        assert_eq!(x.channels, self.in_channels, "{}: channel mismatch", self.name);
        let ho = self.out_size(x.height);
        let wo = self.out_size(x.width);
        let kk = self.kernel * self.kernel * self.in_channels;
        let cols = if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            x.data.clone()
        } else {
            self.im2col(x, ho, wo)
        };
        let m = x.batch * ho * wo;
        let mut out = vec![0.0f32; m * self.out_channels];
        gemm(m, kk, self.out_channels, &cols, false, params.get(&self.weight_name()), false, 0.0, &mut out);
        let y = FeatureMap::new(x.batch, ho, wo, self.out_channels, out);
        let cache = record.then(|| Cache::Conv {
            cols,
            input_shape: (x.batch, x.height, x.width, x.channels),
            out_hw: (ho, wo),
        });
        (y, cache)
    }

    fn backward(
        &self,
        params: &ParamStore,
        cols: &[f32],
        input_shape: (usize, usize, usize, usize),
        out_hw: (usize, usize),
        dy: &FeatureMap,
        grads: &mut Gradients,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        let (ho, wo) = out_hw;
        let m = dy.rows();
        let kk = self.kernel * self.kernel * self.in_channels;
        let mut dw = vec![0.0f32; kk * self.out_channels];
        gemm(kk, m, self.out_channels, cols, true, &dy.data, false, 0.0, &mut dw);
        grads.accumulate(&self.weight_name(), dw);
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![0.0f32; m * kk];
        gemm(m, self.out_channels, kk, &dy.data, false, params.get(&self.weight_name()), true, 0.0, &mut dcols);
        if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            let (b, h, w, c) = input_shape;
            return Some(FeatureMap::new(b, h, w, c, dcols));
        }
        Some(self.col2im(&dcols, input_shape, ho, wo))
    }
}

impl BatchNorm {
    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.name)
    }
    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.name)
    }
    pub fn mean_name(&self) -> String {
        format!("{}.running_mean", self.name)
    }
    pub fn var_name(&self) -> String {
        format!("{}.running_var", self.name)
    }

    fn forward(&self, params: &ParamStore, x: &FeatureMap, ctx: &mut ForwardCtx) -> (FeatureMap, Option<Cache>) {
        let c = self.channels;
        assert_eq!(x.channels, c, "{}: channel mismatch", self.name);
        let rows = x.rows();
        let gamma = params.get(&self.gamma_name());
        let beta = params.get(&self.beta_name());
        // A single sample has no batch variance; fall back to running statistics.
        let batch_stats = ctx.mode == NormMode::Batch && x.batch > 1;
        let (mean, inv_std): (Vec<f32>, Vec<f32>) = if batch_stats {
            let mut sum = vec![0.0f64; c];
            let mut sq = vec![0.0f64; c];
            for r in 0..rows {
                for (j, &v) in x.row(r).iter().enumerate() {
                    sum[j] += v as f64;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
            for r in 0..rows {
                for (j, &v) in x.row(r).iter().enumerate() {
                    let d = v as f64 - mean[j];
                    sq[j] += d * d;
                }
            }
            let var: Vec<f64> = sq.iter().map(|s| s / rows as f64).collect();
            let unbiased = if rows > 1 {
                sq.iter().map(|s| s / (rows - 1) as f64).collect()
            } else {
                var.clone()
            };
            ctx.stats.push(StatUpdate { layer: self.name.clone(), mean: mean.clone(), var: unbiased });
            (
                mean.iter().map(|&m| m as f32).collect(),
                var.iter().map(|&v| (1.0 / (v + BN_EPS as f64).sqrt()) as f32).collect(),
            )
        } else {
            let rm = params.get(&self.mean_name());
            let rv = params.get(&self.var_name());
            (rm.to_vec(), rv.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect())
        };
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut out = vec![0.0f32; x.data.len()];
        for r in 0..rows {
            let base = r * c;
            for j in 0..c {
                let h = (x.data[base + j] - mean[j]) * inv_std[j];
                xhat[base + j] = h;
                out[base + j] = gamma[j] * h + beta[j];
            }
        }
        let y = FeatureMap::new(x.batch, x.height, x.width, c, out);
        let cache = ctx.record.then_some(Cache::Norm { xhat, inv_std, batch_stats });
        (y, cache)
    }

    fn backward(
        &self,
        params: &ParamStore,
        xhat: &[f32],
        inv_std: &[f32],
        batch_stats: bool,
        dy: &FeatureMap,
        grads: &mut Gradients,
    ) -> FeatureMap {
        let c = self.channels;
        let rows = dy.rows();
        let gamma = params.get(&self.gamma_name());
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for r in 0..rows {
            let base = r * c;
            for j in 0..c {
                let g = dy.data[base + j] as f64;
                dbeta[j] += g;
                dgamma[j] += g * xhat[base + j] as f64;
            }
        }
        let mut dx = vec![0.0f32; dy.data.len()];
        if batch_stats {
            let n = rows as f32;
            for r in 0..rows {
                let base = r * c;
                for j in 0..c {
                    let scale = gamma[j] * inv_std[j] / n;
                    dx[base + j] = scale
                        * (n * dy.data[base + j] - dbeta[j] as f32 - xhat[base + j] * dgamma[j] as f32);
                }
            }
        } else {
            for r in 0..rows {
                let base = r * c;
                for j in 0..c {
                    dx[base + j] = dy.data[base + j] * gamma[j] * inv_std[j];
                }
            }
        }
        grads.accumulate(&self.gamma_name(), dgamma.iter().map(|&v| v as f32).collect());
        grads.accumulate(&self.beta_name(), dbeta.iter().map(|&v| v as f32).collect());
        FeatureMap::new(dy.batch, dy.height, dy.width, c, dx)
    }
}

impl Linear {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }
    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn forward(&self, params: &ParamStore, x: &FeatureMap, record: bool) -> (FeatureMap, Option<Cache>) {
        let rows = x.rows();
        assert_eq!(x.channels, self.in_features, "{}: feature mismatch", self.name);
        let bias = params.get(&self.bias_name());
        let mut out = Vec::with_capacity(rows * self.out_features);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(rows, self.in_features, self.out_features, &x.data, false, params.get(&self.weight_name()), false, 1.0, &mut out);
        let y = FeatureMap::new(x.batch, x.height, x.width, self.out_features, out);
        (y, record.then(|| Cache::Linear { input: x.data.clone() }))
    }

    fn backward(
        &self,
        params: &ParamStore,
        input: &[f32],
        dy: &FeatureMap,
        grads: &mut Gradients,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        let rows = dy.rows();
        let mut dw = vec![0.0f32; self.in_features * self.out_features];
        gemm(self.in_features, rows, self.out_features, input, true, &dy.data, false, 0.0, &mut dw);
        let mut db = vec![0.0f32; self.out_features];
        for r in 0..rows {
            for (d, g) in db.iter_mut().zip(dy.row(r)) {
                *d += g;
            }
        }
        grads.accumulate(&self.weight_name(), dw);
        grads.accumulate(&self.bias_name(), db);
        if !need_input_grad {
            return None;
        }
        let mut dx = vec![0.0f32; rows * self.in_features];
        gemm(rows, self.out_features, self.in_features, &dy.data, false, params.get(&self.weight_name()), true, 0.0, &mut dx);
        Some(FeatureMap::new(dy.batch, dy.height, dy.width, self.in_features, dx))
    }
}

impl MaxPool {
    fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn forward(&self, x: &FeatureMap, record: bool) -> (FeatureMap, Option<Cache>) {
        let ho = self.out_size(x.height);
        let wo = self.out_size(x.width);
        let c = x.channels;
        let mut out = vec![f32::NEG_INFINITY; x.batch * ho * wo * c];
        let mut argmax = vec![0u32; out.len()];
        for b in 0..x.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = ((b * ho + oy) * wo + ox) * c;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= x.width as isize {
                                continue;
                            }
                            let i = ((b * x.height + iy as usize) * x.width + ix as usize) * c;
                            for j in 0..c {
                                let v = x.data[i + j];
                                if v > out[o + j] || v.is_nan() {
                                    out[o + j] = v;
                                    argmax[o + j] = (i + j) as u32;
                                }
                            }
                        }
                    }
                }
            }
        }
        let y = FeatureMap::new(x.batch, ho, wo, c, out);
        let cache = record.then_some(Cache::MaxPool {
            argmax,
            input_shape: (x.batch, x.height, x.width, x.channels),
        });
        (y, cache)
    }
}

/// `max(v, 0)` that keeps NaN, so divergence reaches the loss check.
fn relu(v: f32) -> f32 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

fn relu_forward(x: FeatureMap, record: bool) -> (FeatureMap, Option<Cache>) {
    let mut y = x;
    y.data.iter_mut().for_each(|v| *v = relu(*v));
    let cache = record.then(|| Cache::Relu { output: y.data.clone() });
    (y, cache)
}

fn relu_backward(output: &[f32], mut dy: FeatureMap) -> FeatureMap {
    for (g, &o) in dy.data.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
    dy
}

fn gap_forward(x: &FeatureMap) -> FeatureMap {
    let c = x.channels;
    let hw = x.height * x.width;
    let mut out = vec![0.0f32; x.batch * c];
    for b in 0..x.batch {
        let dst = &mut out[b * c..(b + 1) * c];
        for p in 0..hw {
            for (d, v) in dst.iter_mut().zip(x.row(b * hw + p)) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|v| *v /= hw as f32);
    }
    FeatureMap::dense(x.batch, c, out)
}

fn gap_backward(dy: &FeatureMap, height: usize, width: usize) -> FeatureMap {
    let c = dy.channels;
    let hw = height * width;
    let mut dx = FeatureMap::zeros(dy.batch, height, width, c);
    for b in 0..dy.batch {
        let g = dy.row(b);
        for p in 0..hw {
            let base = (b * hw + p) * c;
            for j in 0..c {
                dx.data[base + j] = g[j] / hw as f32;
            }
        }
    }
    dx
}

impl Layer {
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        match self {
            Layer::Conv(conv) => {
                let fan_out = conv.kernel * conv.kernel * conv.out_channels;
                vec![ParamSlot {
                    name: conv.weight_name(),
                    shape: vec![conv.kernel, conv.kernel, conv.in_channels, conv.out_channels],
                    init: ParamInit::KaimingNormal { fan: fan_out },
                    learnable: true,
                }]
            }
            Layer::Norm(bn) => vec![
                ParamSlot { name: bn.gamma_name(), shape: vec![bn.channels], init: ParamInit::Constant(1.0), learnable: true },
                ParamSlot { name: bn.beta_name(), shape: vec![bn.channels], init: ParamInit::Constant(0.0), learnable: true },
                ParamSlot { name: bn.mean_name(), shape: vec![bn.channels], init: ParamInit::Constant(0.0), learnable: false },
                ParamSlot { name: bn.var_name(), shape: vec![bn.channels], init: ParamInit::Constant(1.0), learnable: false },
            ],
            Layer::Linear(lin) => vec![
                ParamSlot {
                    name: lin.weight_name(),
                    shape: vec![lin.in_features, lin.out_features],
                    init: ParamInit::Uniform { fan: lin.in_features },
                    learnable: true,
                },
                ParamSlot {
                    name: lin.bias_name(),
                    shape: vec![lin.out_features],
                    init: ParamInit::Uniform { fan: lin.in_features },
                    learnable: true,
                },
            ],
            Layer::Bottleneck(block) => {
                let mut slots = block.main.param_slots();
                if let Some(sc) = &block.shortcut {
                    slots.extend(sc.param_slots());
                }
                slots
            }
            Layer::Relu | Layer::MaxPool(_) | Layer::GlobalAvgPool => Vec::new(),
        }
    }

    fn forward(&self, params: &ParamStore, x: FeatureMap, ctx: &mut ForwardCtx) -> (FeatureMap, Option<Cache>) {
        match self {
            Layer::Conv(conv) => conv.forward(params, &x, ctx.record),
            Layer::Norm(bn) => bn.forward(params, &x, ctx),
            Layer::Relu => relu_forward(x, ctx.record),
            Layer::MaxPool(pool) => pool.forward(&x, ctx.record),
            Layer::GlobalAvgPool => {
                let cache = ctx.record.then_some(Cache::GlobalAvgPool { height: x.height, width: x.width });
                (gap_forward(&x), cache)
            }
            Layer::Linear(lin) => lin.forward(params, &x, ctx.record),
            Layer::Bottleneck(block) => {
                let (shortcut_out, sc_tape) = match &block.shortcut {
                    Some(sc) => {
                        let (y, tape) = sc.forward(params, x.clone(), ctx);
                        (y, Some(tape))
                    }
                    None => (x.clone(), None),
                };
                let (mut y, main_tape) = block.main.forward(params, x, ctx);
                assert!(y.same_shape(&shortcut_out), "bottleneck shortcut shape mismatch");
                for (a, b) in y.data.iter_mut().zip(&shortcut_out.data) {
                    *a = relu(*a + b);
                }
                let cache = ctx.record.then(|| Cache::Bottleneck {
                    main: main_tape,
                    shortcut: sc_tape,
                    output: y.data.clone(),
                });
                (y, cache)
            }
        }
    }

    fn backward(
        &self,
        params: &ParamStore,
        cache: Cache,
        dy: FeatureMap,
        grads: &mut Gradients,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Conv { cols, input_shape, out_hw }) => {
                conv.backward(params, &cols, input_shape, out_hw, &dy, grads, need_input_grad)
            }
            (Layer::Norm(bn), Cache::Norm { xhat, inv_std, batch_stats }) => {
                Some(bn.backward(params, &xhat, &inv_std, batch_stats, &dy, grads))
            }
            (Layer::Relu, Cache::Relu { output }) => Some(relu_backward(&output, dy)),
            (Layer::MaxPool(_), Cache::MaxPool { argmax, input_shape }) => {
                let (b, h, w, c) = input_shape;
                let mut dx = FeatureMap::zeros(b, h, w, c);
                for (g, &i) in dy.data.iter().zip(&argmax) {
                    dx.data[i as usize] += g;
                }
                Some(dx)
            }
            (Layer::GlobalAvgPool, Cache::GlobalAvgPool { height, width }) => Some(gap_backward(&dy, height, width)),
            (Layer::Linear(lin), Cache::Linear { input }) => lin.backward(params, &input, &dy, grads, need_input_grad),
            (Layer::Bottleneck(block), Cache::Bottleneck { main, shortcut, output }) => {
                let dsum = relu_backward(&output, dy);
                let dmain = block.main.backward(params, main, dsum.clone(), grads, need_input_grad);
                let dshort = match (&block.shortcut, shortcut) {
                    (Some(sc), Some(tape)) => sc.backward(params, tape, dsum, grads, need_input_grad),
                    _ => Some(dsum),
                };
                match (dmain, dshort) {
                    (Some(mut a), Some(b)) if need_input_grad => {
                        a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
                        Some(a)
                    }
                    _ => None,
                }
            }
            (layer, _) => panic!("cache does not belong to layer {layer:?}"),
        }
    }
}

/// Ordered stack of layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn param_slots(&self) -> Vec<ParamSlot> {
        self.layers.iter().flat_map(Layer::param_slots).collect()
    }

    /// Runs the stack; the returned tape is empty unless `ctx.record` is set.
    pub fn forward(&self, params: &ParamStore, x: FeatureMap, ctx: &mut ForwardCtx) -> (FeatureMap, Vec<Cache>) {
        let mut tape = Vec::new();
        let mut h = x;
        for layer in &self.layers {
            let (y, cache) = layer.forward(params, h, ctx);
            if let Some(c) = cache {
                tape.push(c);
            }
            h = y;
        }
        (h, tape)
    }

    /// Backpropagates `dy` through a recorded tape, accumulating parameter
    /// gradients. Returns the input gradient when requested.
    pub fn backward(
        &self,
        params: &ParamStore,
        tape: Vec<Cache>,
        dy: FeatureMap,
        grads: &mut Gradients,
        need_input_grad: bool,
    ) -> Option<FeatureMap> {
        assert_eq!(tape.len(), self.layers.len(), "tape does not match layer stack");
        let mut g = dy;
        for (idx, (layer, cache)) in self.layers.iter().zip(tape).enumerate().rev() {
            match layer.backward(params, cache, g, grads, need_input_grad || idx > 0) {
                Some(next) => g = next,
                None => return None,
            }
        }
        Some(g)
    }
}
