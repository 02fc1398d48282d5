//! Residual toy CNN with batch-normalized blocks.
//!
//! Topology (default configuration): a 3x3 stem (1 -> 8 channels), then two
//! stages of two residual blocks each at widths 8 and 16. Every stage after
//! the first opens with a stride-2 3x3 entry convolution. A block is
//! `conv-BN-relu-conv-BN`, identity shortcut, relu. The head is global
//! average pooling followed by a linear classifier.
//!
//! BN layers are numbered in forward order; the input of BN layer `l` is
//! exposed as `taps[l]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::additive;
use crate::autodiff::{BnMode, Graph, Var};
use crate::data::{Batch, ToyDataset};
use crate::error::{Error, Result};
use crate::roi::{roi_crop, RoiBox};
use crate::tensor::{fingerprint, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Spatial side of instance-level crops.
pub const INSTANCE_SIZE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { input_size: 16, in_channels: 1, widths: vec![8, 16], blocks_per_stage: 2, num_classes: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// A convolution feeding a BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub weight: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub entry: Option<ConvBn>,
    pub blocks: Vec<ResBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub config: NetConfig,
    pub stem: ConvBn,
    pub stages: Vec<Stage>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Where a BN layer sits in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Stem,
    Entry,
    BlockFirst,
    BlockSecond,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerInfo {
    pub name: String,
    pub role: LayerRole,
    pub stage: usize,
    /// Global block index for in-block layers.
    pub block: Option<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    pub stage: usize,
    pub first_layer: usize,
    pub second_layer: usize,
    pub channels: usize,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

fn conv_bn(out_c: usize, in_c: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> ConvBn {
    let fan_in = (in_c * k * k) as f64;
    ConvBn {
        weight: uniform(&[out_c, in_c, k, k], libm::sqrt(6.0 / fan_in), rng),
        stride,
        padding: k / 2,
        bn: BatchNorm::new(out_c),
    }
}

impl ToyNet {
    /// He-uniform convolutions, unit-gamma BN, uniform head; deterministic under `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        if config.widths.is_empty() || config.blocks_per_stage == 0 || config.num_classes == 0 {
            return Err(Error::Config("network needs at least one stage, block and class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = conv_bn(config.widths[0], config.in_channels, 3, 1, &mut rng);
        let mut stages = Vec::new();
        for (s, &w) in config.widths.iter().enumerate() {
            let entry = (s > 0).then(|| conv_bn(w, config.widths[s - 1], 3, 2, &mut rng));
            let blocks = (0..config.blocks_per_stage)
                .map(|_| ResBlock { conv1: conv_bn(w, w, 3, 1, &mut rng), conv2: conv_bn(w, w, 3, 1, &mut rng) })
                .collect();
            stages.push(Stage { entry, blocks });
        }
        let last = *config.widths.last().unwrap();
        let bound = 1.0 / libm::sqrt(last as f64);
        let head_weight = uniform(&[config.num_classes, last], bound, &mut rng);
        let head_bias = uniform(&[config.num_classes], bound, &mut rng);
        Ok(Self { config, stem, stages, head_weight, head_bias })
    }

    /// All conv+BN units in forward (layer) order.
    pub fn conv_bns(&self) -> Vec<&ConvBn> {
        let mut out = vec![&self.stem];
        for st in &self.stages {
            out.extend(st.entry.iter());
            for b in &st.blocks {
                out.push(&b.conv1);
                out.push(&b.conv2);
            }
        }
        out
    }

    pub fn conv_bns_mut(&mut self) -> Vec<&mut ConvBn> {
        let mut out = vec![&mut self.stem];
        for st in &mut self.stages {
            out.extend(st.entry.iter_mut());
            for b in &mut st.blocks {
                out.push(&mut b.conv1);
                out.push(&mut b.conv2);
            }
        }
        out
    }

    pub fn num_layers(&self) -> usize {
        1 + self.stages.iter().map(|s| s.entry.is_some() as usize + 2 * s.blocks.len()).sum::<usize>()
    }

    pub fn bn(&self, layer: usize) -> &BatchNorm {
        &self.conv_bns()[layer].bn
    }

    pub fn layer_infos(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let mut size = self.config.input_size;
        out.push(LayerInfo {
            name: "stem.bn".into(),
            role: LayerRole::Stem,
            stage: 0,
            block: None,
            channels: self.stem.bn.channels(),
            height: size,
            width: size,
        });
        let mut block = 0;
        for (s, st) in self.stages.iter().enumerate() {
            if let Some(e) = &st.entry {
                size = (size + 2 * e.padding - 3) / e.stride + 1;
                out.push(LayerInfo {
                    name: format!("stage{s}.entry.bn"),
                    role: LayerRole::Entry,
                    stage: s,
                    block: None,
                    channels: e.bn.channels(),
                    height: size,
                    width: size,
                });
            }
            for (bi, b) in st.blocks.iter().enumerate() {
                for (k, (cb, role)) in [(&b.conv1, LayerRole::BlockFirst), (&b.conv2, LayerRole::BlockSecond)].into_iter().enumerate() {
                    out.push(LayerInfo {
                        name: format!("stage{s}.block{bi}.bn{}", k + 1),
                        role,
                        stage: s,
                        block: Some(block),
                        channels: cb.bn.channels(),
                        height: size,
                        width: size,
                    });
                }
                block += 1;
            }
        }
        out
    }

    pub fn blocks(&self) -> Vec<BlockInfo> {
        let infos = self.layer_infos();
        let mut out: Vec<BlockInfo> = Vec::new();
        for (l, info) in infos.iter().enumerate() {
            match info.role {
                LayerRole::BlockFirst => out.push(BlockInfo {
                    stage: info.stage,
                    first_layer: l,
                    second_layer: l + 1,
                    channels: info.channels,
                }),
                _ => continue,
            }
        }
        out
    }

    /// SHA-256 of every weight and BN buffer.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut ts: Vec<&Tensor> = Vec::new();
        for cb in self.conv_bns() {
            ts.extend([&cb.weight, &cb.bn.gamma, &cb.bn.beta, &cb.bn.running_mean, &cb.bn.running_var]);
        }
        ts.extend([&self.head_weight, &self.head_bias]);
        fingerprint(ts)
    }

    // ── Forward ──────────────────────────────────────────────────────

    /// Runs the network on `input` (`[N, C, H, W]`) inside `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &NetVars,
        input: Var,
        train: bool,
        buffers: Option<&BufferVars>,
    ) -> Result<ForwardOut> {
        let units = self.conv_bns();
        let blocks = self.blocks();
        if let Some(b) = buffers {
            if b.masks.len() != units.len() || b.adapters.len() != blocks.len() {
                return Err(Error::Config(format!(
                    "buffers cover {} layers / {} blocks, network has {} / {}",
                    b.masks.len(),
                    b.adapters.len(),
                    units.len(),
                    blocks.len()
                )));
            }
        }
        let mut taps = Vec::with_capacity(units.len());
        let mut batch_stats = Vec::with_capacity(units.len());

        let mut unit = |g: &mut Graph, x: Var, l: usize, taps: &mut Vec<Var>| -> Result<Var> {
            let cb = units[l];
            let t = g.conv2d(x, vars.conv[l], cb.stride, cb.padding)?;
            taps.push(t);
            let mode = if train {
                BnMode::Train
            } else {
                BnMode::Eval { mean: cb.bn.running_mean.data(), var: cb.bn.running_var.data() }
            };
            let out = g.batch_norm(t, vars.gamma[l], vars.beta[l], BN_EPS, mode)?;
            batch_stats.push((out.batch_mean, out.batch_var));
            match buffers.and_then(|b| b.masks[l]) {
                Some(m) => {
                    if g.value(m).shape() != [cb.bn.channels()] {
                        return Err(Error::Config(format!("mask for layer {l} has wrong channel count")));
                    }
                    g.channel_mul(out.y, m)
                }
                None => Ok(out.y),
            }
        };

        let mut l = 0;
        let y = unit(g, input, l, &mut taps)?;
        let mut x = g.relu(y);
        l += 1;
        let mut block = 0;
        for st in &self.stages {
            if st.entry.is_some() {
                let y = unit(g, x, l, &mut taps)?;
                x = g.relu(y);
                l += 1;
            }
            for _ in &st.blocks {
                let f_in = x;
                let a = unit(g, f_in, l, &mut taps)?;
                let a = g.relu(a);
                let b = unit(g, a, l + 1, &mut taps)?;
                let s = g.add(b, f_in)?;
                let mut out = g.relu(s);
                if let Some(ad) = buffers.and_then(|b| b.adapters[block].as_ref()) {
                    let f_add = additive::adapter_forward(g, f_in, ad.w1x1, ad.w3x3, ad.alpha)?;
                    let f_a = additive::apply_additive(g, f_add, ad.modulation)?;
                    out = g.add(out, f_a)?;
                }
                x = out;
                l += 2;
                block += 1;
            }
        }
        let pooled = g.mean_axes(x, &[2, 3])?;
        let logits = g.linear(pooled, vars.head_w, vars.head_b)?;
        Ok(ForwardOut { logits, taps, batch_stats })
    }

    /// Eval-mode forward returning logits and BN-input taps as plain tensors.
    pub fn forward_with_taps(&self, batch: &Tensor, buffers: Option<&AttachedBuffers>) -> Result<(Tensor, Vec<Tensor>)> {
        if batch.dims4("forward_with_taps")?.0 == 0 {
            return Err(Error::Empty("forward_with_taps"));
        }
        let mut g = Graph::new();
        let vars = NetVars::register(&mut g, self, Trainable::NONE);
        let input = g.constant(batch.clone());
        let bvars = buffers.map(|b| b.register(&mut g));
        let out = self.forward_graph(&mut g, &vars, input, false, bvars.as_ref())?;
        let taps = out.taps.iter().map(|&t| g.value(t).clone()).collect();
        Ok((g.value(out.logits).clone(), taps))
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_taps(batch, None)?.0)
    }
}

/// Which network tensors become gradient-carrying leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    /// Convolutions and classifier head.
    pub weights: bool,
    pub bn_affine: bool,
}

impl Trainable {
    pub const NONE: Self = Self { weights: false, bn_affine: false };
    pub const ALL: Self = Self { weights: true, bn_affine: true };
    pub const BN_ONLY: Self = Self { weights: false, bn_affine: true };
}

/// Graph leaves for every network parameter, indexed by layer.
#[derive(Debug, Clone)]
pub struct NetVars {
    pub conv: Vec<Var>,
    pub gamma: Vec<Var>,
    pub beta: Vec<Var>,
    pub head_w: Var,
    pub head_b: Var,
}

impl NetVars {
    pub fn register(g: &mut Graph, net: &ToyNet, trainable: Trainable) -> Self {
        let units = net.conv_bns();
        let conv = units.iter().map(|u| g.leaf(u.weight.clone(), trainable.weights)).collect();
        let gamma = units.iter().map(|u| g.leaf(u.bn.gamma.clone(), trainable.bn_affine)).collect();
        let beta = units.iter().map(|u| g.leaf(u.bn.beta.clone(), trainable.bn_affine)).collect();
        let head_w = g.leaf(net.head_weight.clone(), trainable.weights);
        let head_b = g.leaf(net.head_bias.clone(), trainable.weights);
        Self { conv, gamma, beta, head_w, head_b }
    }
}

/// Graph handles of one block's adapter.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub w1x1: Var,
    pub w3x3: Var,
    pub alpha: Var,
    /// Per-channel modulation `[C]` applied to the adapter output.
    pub modulation: Var,
}

/// Buffer hooks for [`ToyNet::forward_graph`]: a channel mask per BN layer
/// and an adapter per block, each optional.
#[derive(Debug, Clone, Default)]
pub struct BufferVars {
    pub masks: Vec<Option<Var>>,
    pub adapters: Vec<Option<AdapterVars>>,
}

/// Value-level adapter for [`AttachedBuffers`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterTensors {
    pub w1x1: Tensor,
    pub w3x3: Tensor,
    pub alpha: Tensor,
    pub modulation: Tensor,
}

/// Value-level buffers for inference through [`ToyNet::forward_with_taps`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttachedBuffers {
    pub masks: Vec<Option<Tensor>>,
    pub adapters: Vec<Option<AdapterTensors>>,
}

impl AttachedBuffers {
    /// All-ones masks on every block BN layer and zero-strength adapters:
    /// the buffered network then computes exactly the unbuffered function.
    pub fn neutral(net: &ToyNet, seed: u64) -> Self {
        let infos = net.layer_infos();
        let masks = infos
            .iter()
            .map(|i| i.block.map(|_| Tensor::ones([i.channels])))
            .collect();
        let adapters = net
            .blocks()
            .iter()
            .enumerate()
            .map(|(b, info)| {
                let p = additive::init_adapter(info.channels, seed.wrapping_add(b as u64));
                Some(AdapterTensors {
                    w1x1: p.w1x1,
                    w3x3: p.w3x3,
                    alpha: Tensor::zeros([info.channels]),
                    modulation: Tensor::ones([info.channels]),
                })
            })
            .collect();
        Self { masks, adapters }
    }

    pub fn register(&self, g: &mut Graph) -> BufferVars {
        BufferVars {
            masks: self.masks.iter().map(|m| m.as_ref().map(|t| g.constant(t.clone()))).collect(),
            adapters: self
                .adapters
                .iter()
                .map(|a| {
                    a.as_ref().map(|a| AdapterVars {
                        w1x1: g.constant(a.w1x1.clone()),
                        w3x3: g.constant(a.w3x3.clone()),
                        alpha: g.constant(a.alpha.clone()),
                        modulation: g.constant(a.modulation.clone()),
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub logits: Var,
    /// Input of every BN layer, in layer order.
    pub taps: Vec<Var>,
    /// Per-layer batch `(mean, biased variance)` of the taps.
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Argmax with ties resolved to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of correctly classified rows of `logits[N, K]`.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(n, &l)| argmax(&logits.data()[n * k..][..k]) == l)
        .count();
    correct as f64 / labels.len() as f64
}

// ── Source training ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.05, batch_size: 32, seed: 0 }
    }
}

/// Mini-batch gradient descent on cross-entropy with train-mode BN; running
/// statistics follow an exponential average with momentum [`BN_MOMENTUM`].
pub fn train_source(net: &ToyNet, dataset: &ToyDataset, cfg: &TrainConfig) -> Result<ToyNet> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let imgs: Vec<_> = chunk.iter().map(|&i| dataset.images[i].clone()).collect();
            let batch = Batch::from_images(&imgs)?;
            let mut g = Graph::new();
            let vars = NetVars::register(&mut g, &net, Trainable::ALL);
            let input = g.constant(batch.images);
            let out = net.forward_graph(&mut g, &vars, input, true, None)?;
            let loss = g.cross_entropy(out.logits, &batch.labels)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged { step, loss: lv });
            }
            g.backward(loss)?;
            let sgd = |t: &mut Tensor, v: Var| {
                if let Some(gr) = g.grad(v) {
                    t.data_mut().iter_mut().zip(gr).for_each(|(p, d)| *p -= cfg.lr * d);
                }
            };
            for (l, cb) in net.conv_bns_mut().into_iter().enumerate() {
                sgd(&mut cb.weight, vars.conv[l]);
                sgd(&mut cb.bn.gamma, vars.gamma[l]);
                sgd(&mut cb.bn.beta, vars.beta[l]);
                let (bm, bv) = &out.batch_stats[l];
                for (r, b) in cb.bn.running_mean.data_mut().iter_mut().zip(bm) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
                for (r, b) in cb.bn.running_var.data_mut().iter_mut().zip(bv) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
            sgd(&mut net.head_weight, vars.head_w);
            sgd(&mut net.head_bias, vars.head_b);
            step += 1;
        }
    }
    Ok(net)
}

/// Eval-mode accuracy of the unbuffered network.
pub fn evaluate_net(net: &ToyNet, dataset: &ToyDataset, batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let mut correct = 0.0;
    for batch in dataset.batches(batch_size) {
        let batch = batch?;
        let logits = net.logits(&batch.images)?;
        correct += accuracy(&logits, &batch.labels) * batch.len() as f64;
    }
    Ok(correct / dataset.len() as f64)
}

// ── Source statistics ────────────────────────────────────────────────

/// Source-domain statistics of one BN layer's input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub name: String,
    /// `[C, H, W]` mean feature map.
    pub image_mean: Tensor,
    /// `[C, h, w]` mean of RoI-cropped instance features.
    pub instance_mean: Tensor,
    /// `[C]` mean over samples and positions.
    pub dist_mean: Tensor,
    /// `[C]` population standard deviation over samples and positions.
    pub dist_std: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceStats {
    pub layers: Vec<LayerStats>,
    pub network_hash: [u8; 32],
    pub dataset_seed: u64,
    pub image_count: usize,
    pub instance_count: usize,
}

impl SourceStats {
    /// Checks that every layer matches the live network's BN-input shapes.
    pub fn check_against(&self, net: &ToyNet) -> Result<()> {
        let infos = net.layer_infos();
        if infos.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "statistics cover {} layers, network has {}",
                self.layers.len(),
                infos.len()
            )));
        }
        for (i, (info, st)) in infos.iter().zip(&self.layers).enumerate() {
            if st.image_mean.shape() != [info.channels, info.height, info.width]
                || st.instance_mean.shape() != [info.channels, INSTANCE_SIZE, INSTANCE_SIZE]
                || st.dist_mean.shape() != [info.channels]
                || st.dist_std.shape() != [info.channels]
            {
                return Err(Error::Config(format!("statistics for layer {i} ({}) do not match the network", info.name)));
            }
        }
        Ok(())
    }
}

/// Boxes rescaled from image pixels to a feature map of the given size.
pub fn boxes_to_feature(boxes: &[Vec<RoiBox>], image_size: usize, h: usize, w: usize) -> Vec<Vec<RoiBox>> {
    let (sx, sy) = (w as f64 / image_size as f64, h as f64 / image_size as f64);
    boxes.iter().map(|bs| bs.iter().map(|b| b.scaled(sx, sy)).collect()).collect()
}

/// Per-channel running moments merged batch by batch (Chan et al. update).
#[derive(Debug, Clone)]
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(c: usize) -> Self {
        Self { count: 0.0, mean: vec![0.0; c], m2: vec![0.0; c] }
    }

    fn merge(&mut self, tap: &Tensor) {
        let (n, c, h, w) = tap.dims4("moments").expect("tap rank");
        let hw = h * w;
        let nb = (n * hw) as f64;
        let d = tap.data();
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                s += d[(ni * c + ci) * hw..][..hw].iter().sum::<f64>();
            }
            let mb = s / nb;
            let mut m2b = 0.0;
            for ni in 0..n {
                m2b += d[(ni * c + ci) * hw..][..hw].iter().map(|v| (v - mb) * (v - mb)).sum::<f64>();
            }
            let na = self.count;
            let tot = na + nb;
            let delta = mb - self.mean[ci];
            self.mean[ci] += delta * nb / tot;
            self.m2[ci] += m2b + delta * delta * na * nb / tot;
        }
        self.count += nb;
    }
}

/// One pass over `dataset` in eval mode without buffers.
pub fn precompute_stats(net: &ToyNet, dataset: &ToyDataset, batch_size: usize) -> Result<SourceStats> {
    if dataset.is_empty() {
        return Err(Error::Empty("statistics dataset"));
    }
    let infos = net.layer_infos();
    let mut image_sums: Vec<Vec<f64>> = infos.iter().map(|i| vec![0.0; i.channels * i.height * i.width]).collect();
    let mut inst_sums: Vec<Vec<f64>> =
        infos.iter().map(|i| vec![0.0; i.channels * INSTANCE_SIZE * INSTANCE_SIZE]).collect();
    let mut moments: Vec<Moments> = infos.iter().map(|i| Moments::new(i.channels)).collect();
    let mut images = 0usize;
    let mut instances = 0usize;
    for batch in dataset.batches(batch_size) {
        let batch = batch?;
        let (_, taps) = net.forward_with_taps(&batch.images, None)?;
        let mut batch_instances = 0;
        for (l, tap) in taps.iter().enumerate() {
            let (n, _, h, w) = tap.dims4("precompute_stats")?;
            let per = image_sums[l].len();
            for ni in 0..n {
                for (s, v) in image_sums[l].iter_mut().zip(&tap.data()[ni * per..][..per]) {
                    *s += v;
                }
            }
            let boxes = boxes_to_feature(&batch.boxes, net.config.input_size, h, w);
            let crops = roi_crop(tap, &boxes, INSTANCE_SIZE, INSTANCE_SIZE)?;
            batch_instances = crops.count();
            if let Some(cr) = crops.crops {
                let per = inst_sums[l].len();
                for m in 0..batch_instances {
                    for (s, v) in inst_sums[l].iter_mut().zip(&cr.data()[m * per..][..per]) {
                        *s += v;
                    }
                }
            }
            moments[l].merge(tap);
        }
        images += batch.len();
        instances += batch_instances;
    }
    let layers = infos
        .iter()
        .enumerate()
        .map(|(l, info)| {
            let inv_n = 1.0 / images as f64;
            let inv_m = if instances > 0 { 1.0 / instances as f64 } else { 0.0 };
            Ok(LayerStats {
                name: info.name.clone(),
                image_mean: Tensor::new(
                    [info.channels, info.height, info.width],
                    image_sums[l].iter().map(|s| s * inv_n).collect(),
                )?,
                instance_mean: Tensor::new(
                    [info.channels, INSTANCE_SIZE, INSTANCE_SIZE],
                    inst_sums[l].iter().map(|s| s * inv_m).collect(),
                )?,
                dist_mean: Tensor::from_vec(moments[l].mean.clone()),
                dist_std: Tensor::from_vec(
                    moments[l].m2.iter().map(|m2| libm::sqrt((m2 / moments[l].count).max(0.0))).collect(),
                ),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SourceStats {
        layers,
        network_hash: net.fingerprint(),
        dataset_seed: dataset.seed,
        image_count: images,
        instance_count: instances,
    })
}
