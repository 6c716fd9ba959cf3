//! Sequential models assembled from [`LayerSpec`] lists.
//!
//! Forward passes are pure: they never touch the model. Batch statistics
//! gathered by batch-norm layers in train mode travel in the returned
//! [`Tapes`] and are folded into the running averages by
//! [`Model::commit_batch_stats`]. Stochastic layers draw from streams keyed
//! by `(seed, layer index, step)`, so a train-mode pass is a deterministic
//! function of the model, the input and that triple.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pooling::{
    avg_pool, avg_pool_backward, max_pool_backward, max_pool_standard, s3pool_backward, s3pool_forward,
    zeiler_backward, zeiler_stochastic_pool, MaxTape, Mode, S3PoolTape, ZeilerTape,
};
use crate::sampling::{PoolGeom, RngStream, StreamKey};
use crate::tensor::{Dims, Tensor4};

use super::conv::{conv2d_backward, conv2d_forward};
use super::layers::{
    batchnorm_backward, batchnorm_forward, global_avg_pool_backward, global_avg_pool_forward, relu_backward,
    relu_forward, BatchNormCache, BATCHNORM_MOMENTUM,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolVariant {
    Max,
    Avg,
    Zeiler,
    S3pool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// `out_channels` filters of size `size` x `size`, zero padded by
    /// `(size - 1) / 2` so odd sizes keep the spatial dimensions.
    Conv { out_channels: usize, size: usize },
    Relu {},
    #[serde(rename = "batchnorm")]
    BatchNorm {},
    Pool {
        variant: PoolVariant,
        k: usize,
        s: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        g: Option<usize>,
    },
    /// Inverted dropout; identity at inference.
    Dropout { rate: f64 },
    /// conv-bn-relu-conv-bn plus identity shortcut, then relu. Keeps the
    /// channel count.
    Residual { size: usize },
    GlobalAvgPool {},
    /// Marks the loss; must be the last layer and has no runtime effect.
    SoftmaxCe {},
}

/// Settings of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub mode: Mode,
    pub seed: u64,
    pub step: u64,
}

impl Pass {
    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            mode: Mode::Train,
            seed,
            step,
        }
    }

    pub fn infer() -> Self {
        Self {
            mode: Mode::Infer,
            seed: 0,
            step: 0,
        }
    }

    fn stream(&self, layer_id: usize) -> RngStream {
        RngStream::new(self.seed, StreamKey::new(layer_id as u64, self.step))
    }
}

/// Reserved step value for weight initialization streams.
const INIT_STEP: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvIdx {
    weight: usize,
    bias: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    /// Running mean at `buffer`, running variance at `buffer + 1`.
    buffer: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv(ConvIdx),
    Relu,
    BatchNorm(BnIdx),
    Pool {
        variant: PoolVariant,
        k: usize,
        s: usize,
        geom: Option<PoolGeom>,
    },
    Dropout(f64),
    Residual {
        conv1: ConvIdx,
        bn1: BnIdx,
        conv2: ConvIdx,
        bn2: BnIdx,
    },
    GlobalAvgPool,
    Loss,
}

#[derive(Clone, Debug)]
struct ResidualTape {
    input: Tensor4,
    bn1: BatchNormCache,
    pre_relu: Tensor4,
    mid: Tensor4,
    bn2: BatchNormCache,
    sum: Tensor4,
}

#[derive(Clone, Debug)]
enum LayerTape {
    Conv(Tensor4),
    Relu(Tensor4),
    BatchNorm(BatchNormCache),
    Max(MaxTape),
    Avg(Dims),
    Zeiler(Option<ZeilerTape>),
    S3pool(Option<S3PoolTape>),
    Dropout(Option<Tensor4>),
    Residual(Box<ResidualTape>),
    GlobalAvgPool(Dims),
    Loss,
}

/// Per-layer records of one forward pass, consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct Tapes {
    layers: Vec<LayerTape>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Vec<LayerSpec>,
    input: [usize; 3],
    layers: Vec<Layer>,
    shapes: Vec<[usize; 3]>,
    params: Vec<Tensor4>,
    buffers: Vec<Tensor4>,
}

fn channel_vector(c: usize, value: f64) -> Tensor4 {
    Tensor4::full(Dims::derived(1, c, 1, 1), value)
}

struct Builder {
    params: Vec<Tensor4>,
    buffers: Vec<Tensor4>,
    seed: u64,
}

impl Builder {
    fn conv(&mut self, layer_id: usize, sub: u64, c_in: usize, c_out: usize, size: usize) -> Result<ConvIdx> {
        if size == 0 || c_out == 0 {
            return Err(Error::Architecture(format!(
                "layer {layer_id}: conv needs size >= 1 and out_channels >= 1"
            )));
        }
        let fan_in = (c_in * size * size) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let mut rng = RngStream::new(self.seed, StreamKey::new(layer_id as u64, INIT_STEP)).substream(sub);
        let dims = Dims::new(c_out, c_in, size, size)?;
        let weight = Tensor4::from_fn(dims, |_, _, _, _| (2.0 * rng.next_f64() - 1.0) * bound);
        self.params.push(weight);
        self.params.push(channel_vector(c_out, 0.0));
        Ok(ConvIdx {
            weight: self.params.len() - 2,
            bias: self.params.len() - 1,
            pad: (size - 1) / 2,
        })
    }

    fn batchnorm(&mut self, c: usize) -> BnIdx {
        self.params.push(channel_vector(c, 1.0));
        self.params.push(channel_vector(c, 0.0));
        self.buffers.push(channel_vector(c, 0.0));
        self.buffers.push(channel_vector(c, 1.0));
        BnIdx {
            gamma: self.params.len() - 2,
            beta: self.params.len() - 1,
            buffer: self.buffers.len() - 2,
        }
    }
}

impl Model {
    /// Validates `arch` against an input of `[channels, height, width]` and
    /// initializes parameters with fan-in scaled uniform weights drawn from
    /// `seed`.
    pub fn build(arch: &[LayerSpec], input: [usize; 3], seed: u64) -> Result<Model> {
        let [c0, h0, w0] = input;
        Dims::new(1, c0, h0, w0)?;
        let mut b = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            seed,
        };
        let (mut c, mut h, mut w) = (c0, h0, w0);
        let mut layers = Vec::with_capacity(arch.len());
        let mut shapes = Vec::with_capacity(arch.len());
        for (id, spec) in arch.iter().enumerate() {
            let err = |msg: String| Error::Architecture(format!("layer {id} ({spec:?}): {msg}"));
            if matches!(layers.last(), Some(Layer::Loss)) {
                return Err(err("softmax_ce must be the last layer".into()));
            }
            let layer = match *spec {
                LayerSpec::Conv { out_channels, size } => {
                    let idx = b.conv(id, 0, c, out_channels, size)?;
                    let (hp, wp) = (h + 2 * idx.pad, w + 2 * idx.pad);
                    if size > hp || size > wp {
                        return Err(err(format!("kernel does not fit a {h}x{w} input")));
                    }
                    c = out_channels;
                    h = hp - size + 1;
                    w = wp - size + 1;
                    Layer::Conv(idx)
                }
                LayerSpec::Relu {} => Layer::Relu,
                LayerSpec::BatchNorm {} => Layer::BatchNorm(b.batchnorm(c)),
                LayerSpec::Pool { variant, k, s, g } => {
                    if k == 0 || s == 0 || h % s != 0 || w % s != 0 {
                        return Err(err(format!("window {k} / stride {s} invalid for a {h}x{w} input")));
                    }
                    let geom = match (variant, g) {
                        (PoolVariant::S3pool, Some(g)) => {
                            let geom = PoolGeom::new(k, s, g).map_err(|e| err(e.to_string()))?;
                            geom.check_map(h, w).map_err(|e| err(e.to_string()))?;
                            Some(geom)
                        }
                        (PoolVariant::S3pool, None) => return Err(err("s3pool requires a grid size g".into())),
                        (_, Some(_)) => return Err(err("grid size only applies to s3pool".into())),
                        (_, None) => None,
                    };
                    h /= s;
                    w /= s;
                    Layer::Pool { variant, k, s, geom }
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(err("dropout rate must lie in [0, 1)".into()));
                    }
                    Layer::Dropout(rate)
                }
                LayerSpec::Residual { size } => {
                    if size % 2 == 0 {
                        return Err(err("residual blocks need an odd kernel size".into()));
                    }
                    let conv1 = b.conv(id, 0, c, c, size)?;
                    let bn1 = b.batchnorm(c);
                    let conv2 = b.conv(id, 1, c, c, size)?;
                    let bn2 = b.batchnorm(c);
                    Layer::Residual { conv1, bn1, conv2, bn2 }
                }
                LayerSpec::GlobalAvgPool {} => {
                    h = 1;
                    w = 1;
                    Layer::GlobalAvgPool
                }
                LayerSpec::SoftmaxCe {} => Layer::Loss,
            };
            layers.push(layer);
            shapes.push([c, h, w]);
        }
        if (h, w) != (1, 1) {
            return Err(Error::Architecture(format!(
                "the network must end in (K, 1, 1) logits, got ({c}, {h}, {w})"
            )));
        }
        Ok(Model {
            arch: arch.to_vec(),
            input,
            layers,
            shapes,
            params: b.params,
            buffers: b.buffers,
        })
    }

    pub fn arch(&self) -> &[LayerSpec] {
        &self.arch
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    /// `[channels, height, width]` after every layer.
    pub fn shape_trace(&self) -> &[[usize; 3]] {
        &self.shapes
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().map_or(self.input[0], |s| s[0])
    }

    pub fn params(&self) -> &[Tensor4] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor4] {
        &mut self.params
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> &[Tensor4] {
        &self.buffers
    }

    pub(crate) fn replace_state(&mut self, params: Vec<Tensor4>, buffers: Vec<Tensor4>) -> Result<()> {
        let congruent = |a: &[Tensor4], b: &[Tensor4]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.dims() == y.dims())
        };
        if !congruent(&params, &self.params) || !congruent(&buffers, &self.buffers) {
            return Err(Error::format("stored tensors do not match the architecture"));
        }
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }

    fn conv(&self, idx: ConvIdx, x: &Tensor4) -> Result<Tensor4> {
        conv2d_forward(x, &self.params[idx.weight], &self.params[idx.bias], idx.pad)
    }

    fn bn(&self, idx: BnIdx, x: &Tensor4, mode: Mode) -> Result<(Tensor4, BatchNormCache)> {
        let running = match mode {
            Mode::Train => None,
            Mode::Infer => Some((self.buffers[idx.buffer].data(), self.buffers[idx.buffer + 1].data())),
        };
        batchnorm_forward(x, &self.params[idx.gamma], &self.params[idx.beta], running)
    }

    pub fn forward(&self, x: &Tensor4, pass: &Pass) -> Result<(Tensor4, Tapes)> {
        let [c, h, w] = self.input;
        let d = x.dims();
        if (d.c(), d.h(), d.w()) != (c, h, w) {
            return Err(Error::ShapeMismatch {
                expected: Dims::derived(d.n(), c, h, w),
                found: d,
            });
        }
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (id, layer) in self.layers.iter().enumerate() {
            let (next, tape) = match *layer {
                Layer::Conv(idx) => (self.conv(idx, &cur)?, LayerTape::Conv(cur)),
                Layer::Relu => (relu_forward(&cur), LayerTape::Relu(cur)),
                Layer::BatchNorm(idx) => {
                    let (y, cache) = self.bn(idx, &cur, pass.mode)?;
                    (y, LayerTape::BatchNorm(cache))
                }
                Layer::Pool { variant, k, s, geom } => match variant {
                    PoolVariant::Max => {
                        let (z, t) = max_pool_standard(&cur, k, s)?;
                        (z, LayerTape::Max(t))
                    }
                    PoolVariant::Avg => (avg_pool(&cur, k, s)?, LayerTape::Avg(cur.dims())),
                    PoolVariant::Zeiler => {
                        let (z, t) = zeiler_stochastic_pool(&cur, k, s, &pass.stream(id), pass.mode)?;
                        (z, LayerTape::Zeiler(t))
                    }
                    PoolVariant::S3pool => {
                        let geom = geom.expect("validated at build time");
                        let (z, t) = s3pool_forward(&cur, &geom, &pass.stream(id), pass.mode)?;
                        (z, LayerTape::S3pool(t))
                    }
                },
                Layer::Dropout(rate) => match pass.mode {
                    Mode::Infer => (cur, LayerTape::Dropout(None)),
                    Mode::Train => {
                        let mask = dropout_mask(cur.dims(), rate, &pass.stream(id));
                        (cur.mul(&mask)?, LayerTape::Dropout(Some(mask)))
                    }
                },
                Layer::Residual { conv1, bn1, conv2, bn2 } => {
                    let h1 = self.conv(conv1, &cur)?;
                    let (pre_relu, bn1) = self.bn(bn1, &h1, pass.mode)?;
                    let mid = relu_forward(&pre_relu);
                    let h2 = self.conv(conv2, &mid)?;
                    let (a2, bn2) = self.bn(bn2, &h2, pass.mode)?;
                    let sum = a2.add(&cur)?;
                    let out = relu_forward(&sum);
                    let tape = ResidualTape {
                        input: cur,
                        bn1,
                        pre_relu,
                        mid,
                        bn2,
                        sum,
                    };
                    (out, LayerTape::Residual(Box::new(tape)))
                }
                Layer::GlobalAvgPool => (global_avg_pool_forward(&cur), LayerTape::GlobalAvgPool(cur.dims())),
                Layer::Loss => (cur, LayerTape::Loss),
            };
            tapes.push(tape);
            cur = next;
        }
        Ok((cur, Tapes { layers: tapes }))
    }

    /// Gradients of the loss with respect to every parameter, in the order of
    /// [`Model::params`], given the gradient at the logits.
    pub fn backward(&self, tapes: &Tapes, grad_logits: &Tensor4) -> Result<Vec<Tensor4>> {
        Ok(self.backward_with_input(tapes, grad_logits)?.0)
    }

    /// Like [`Model::backward`], also returning the gradient at the input.
    pub fn backward_with_input(&self, tapes: &Tapes, grad_logits: &Tensor4) -> Result<(Vec<Tensor4>, Tensor4)> {
        if tapes.layers.len() != self.layers.len() {
            return Err(Error::Architecture("tapes do not belong to this model".into()));
        }
        let mut grads: Vec<Tensor4> = self.params.iter().map(|p| Tensor4::zeros(p.dims())).collect();
        let mut g = grad_logits.clone();
        for (layer, tape) in self.layers.iter().zip(&tapes.layers).rev() {
            g = match (layer, tape) {
                (Layer::Conv(idx), LayerTape::Conv(input)) => self.conv_backward(*idx, input, &g, &mut grads)?,
                (Layer::Relu, LayerTape::Relu(input)) => relu_backward(input, &g)?,
                (Layer::BatchNorm(idx), LayerTape::BatchNorm(cache)) => {
                    self.bn_backward(*idx, cache, &g, &mut grads)?
                }
                (Layer::Pool { .. }, LayerTape::Max(t)) => max_pool_backward(&g, t)?,
                (Layer::Pool { k, s, .. }, LayerTape::Avg(dims)) => avg_pool_backward(&g, *dims, *k, *s)?,
                (Layer::Pool { .. }, LayerTape::Zeiler(t)) => zeiler_backward(&g, t.as_ref())?,
                (Layer::Pool { .. }, LayerTape::S3pool(t)) => s3pool_backward(&g, t.as_ref())?,
                (Layer::Dropout(_), LayerTape::Dropout(mask)) => match mask {
                    Some(m) => g.mul(m)?,
                    None => g,
                },
                (Layer::Residual { conv1, bn1, conv2, bn2 }, LayerTape::Residual(t)) => {
                    let gs = relu_backward(&t.sum, &g)?;
                    let gh2 = self.bn_backward(*bn2, &t.bn2, &gs, &mut grads)?;
                    let gmid = self.conv_backward(*conv2, &t.mid, &gh2, &mut grads)?;
                    let ga1 = relu_backward(&t.pre_relu, &gmid)?;
                    let gh1 = self.bn_backward(*bn1, &t.bn1, &ga1, &mut grads)?;
                    let gx = self.conv_backward(*conv1, &t.input, &gh1, &mut grads)?;
                    gx.add(&gs)?
                }
                (Layer::GlobalAvgPool, LayerTape::GlobalAvgPool(dims)) => global_avg_pool_backward(&g, *dims)?,
                (Layer::Loss, LayerTape::Loss) => g,
                _ => return Err(Error::Architecture("tape does not match layer".into())),
            };
        }
        Ok((grads, g))
    }

    fn conv_backward(&self, idx: ConvIdx, input: &Tensor4, g: &Tensor4, grads: &mut [Tensor4]) -> Result<Tensor4> {
        let cg = conv2d_backward(input, &self.params[idx.weight], g, idx.pad)?;
        grads[idx.weight].accumulate(&cg.weight)?;
        grads[idx.bias].accumulate(&cg.bias)?;
        Ok(cg.input)
    }

    fn bn_backward(&self, idx: BnIdx, cache: &BatchNormCache, g: &Tensor4, grads: &mut [Tensor4]) -> Result<Tensor4> {
        let bg = batchnorm_backward(g, &self.params[idx.gamma], cache)?;
        grads[idx.gamma].accumulate(&bg.gamma)?;
        grads[idx.beta].accumulate(&bg.beta)?;
        Ok(bg.input)
    }

    /// Folds the batch statistics recorded in `tapes` into the running
    /// averages. Infer-mode tapes carry none and leave the model unchanged.
    pub fn commit_batch_stats(&mut self, tapes: &Tapes, batch: usize) {
        let mut updates = Vec::new();
        for (layer, tape) in self.layers.iter().zip(&tapes.layers) {
            match (layer, tape) {
                (Layer::BatchNorm(idx), LayerTape::BatchNorm(cache)) => updates.push((idx.buffer, cache)),
                (Layer::Residual { bn1, bn2, .. }, LayerTape::Residual(t)) => {
                    updates.push((bn1.buffer, &t.bn1));
                    updates.push((bn2.buffer, &t.bn2));
                }
                _ => {}
            }
        }
        let m = BATCHNORM_MOMENTUM;
        for (buffer, cache) in updates {
            let Some((mean, var)) = &cache.batch_stats else { continue };
            // Running variance tracks the unbiased estimate.
            let count = (batch * self.spatial_of(buffer)) as f64;
            let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for (r, b) in self.buffers[buffer].data_mut().iter_mut().zip(mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in self.buffers[buffer + 1].data_mut().iter_mut().zip(var) {
                *r = m * *r + (1.0 - m) * b * correction;
            }
        }
    }

    /// Spatial size seen by the batch-norm layer owning `buffer`.
    fn spatial_of(&self, buffer: usize) -> usize {
        let mut prev = [self.input[1], self.input[2]];
        for (layer, shape) in self.layers.iter().zip(&self.shapes) {
            let owns = match layer {
                Layer::BatchNorm(idx) => idx.buffer == buffer,
                Layer::Residual { bn1, bn2, .. } => bn1.buffer == buffer || bn2.buffer == buffer,
                _ => false,
            };
            if owns {
                return shape[1] * shape[2];
            }
            prev = [shape[1], shape[2]];
        }
        prev[0] * prev[1]
    }
}

fn dropout_mask(dims: Dims, rate: f64, rng: &RngStream) -> Tensor4 {
    let keep = 1.0 - rate;
    let per_item = dims.len() / dims.n();
    let mut data = Vec::with_capacity(dims.len());
    for n in 0..dims.n() {
        let mut lane = rng.lane(n as u64);
        data.extend((0..per_item).map(|_| if lane.next_f64() < keep { 1.0 / keep } else { 0.0 }));
    }
    Tensor4::from_vec(dims, data).expect("mask length matches dims")
}
