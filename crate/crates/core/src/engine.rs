//! Online test-time adaptation loop.
//!
//! Per target batch: recompute the threshold, run the buffered forward,
//! measure discrepancy on its taps, build `L_align + lambda_reg * L_mask`,
//! backpropagate, rescale adapter gradients by block discrepancy, take a
//! gradient step on BN affine parameters, mask scores and adapters, then
//! stochastically reactivate suppressed channels.
//!
//! Convolution weights and the classifier head never change. BN layers
//! normalize with the stored source running statistics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::additive::{self, AdapterParams};
use crate::autodiff::{Graph, Var};
use crate::backbone::{
    accuracy, AdapterTensors, AdapterVars, AttachedBuffers, BufferVars, NetVars, SourceStats, ToyNet,
};
use crate::data::{Batch, ToyDataset};
use crate::discrepancy::{network_discrepancy, DiscrepancyConfig};
use crate::error::{Error, Result};
use crate::subtractive::{self, hard_mask, MaskState};
use crate::tensor::{fingerprint, Tensor};

/// Bounds on the per-block adapter gradient multiplier.
pub const GRAD_SCALE_MIN: f64 = 0.5;
pub const GRAD_SCALE_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub lambda_reg: f64,
    pub lambda_s: f64,
    pub lambda_a: f64,
    pub rho: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub k: f64,
    pub r: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self { lambda_reg: 0.05, lambda_s: 0.05, lambda_a: 0.1, rho: 0.05, lr: 1e-4, batch_size: 16, k: 10.0, r: 0.05 }
    }
}

/// How the adapter output is modulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Coupling {
    /// Inverse soft mask of the block's scores.
    #[default]
    Inverse,
    /// Constant `k / 2` on every channel: both buffers run side by side
    /// without sharing scores.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Switches {
    pub mask_loss: bool,
    pub subtractive: bool,
    pub additive: bool,
    pub grad_scaling: bool,
    pub coupling: Coupling,
}

impl Switches {
    pub const FULL: Self =
        Self { mask_loss: true, subtractive: true, additive: true, grad_scaling: true, coupling: Coupling::Inverse };
    pub const BN_ONLY: Self =
        Self { mask_loss: false, subtractive: false, additive: false, grad_scaling: false, coupling: Coupling::Inverse };
    /// Full minus the additive buffer.
    pub const SUBTRACTIVE_ONLY: Self =
        Self { mask_loss: true, subtractive: true, additive: false, grad_scaling: true, coupling: Coupling::Inverse };
    /// Full minus the subtractive buffer: scores still learn under the mask
    /// loss and drive the adapter modulation, but nothing is masked.
    pub const ADDITIVE_ONLY: Self =
        Self { mask_loss: true, subtractive: false, additive: true, grad_scaling: true, coupling: Coupling::Inverse };
    pub const PARALLEL: Self =
        Self { mask_loss: true, subtractive: true, additive: true, grad_scaling: true, coupling: Coupling::Constant };

    /// Scores exist whenever either buffer is on.
    pub fn uses_scores(&self) -> bool {
        self.subtractive || self.additive
    }
}

impl Default for Switches {
    fn default() -> Self {
        Self::FULL
    }
}

/// Forward mask treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// Straight-through estimator.
    #[default]
    Ste,
    /// Hard masks as constants.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub hyper: Hyper,
    pub switches: Switches,
    /// Per-stage buffer enable; empty means every stage.
    pub stage_enable: Vec<bool>,
    pub discrepancy: DiscrepancyConfig,
    pub mask_mode: MaskMode,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            hyper: Hyper::default(),
            switches: Switches::FULL,
            stage_enable: Vec::new(),
            discrepancy: DiscrepancyConfig::default(),
            mask_mode: MaskMode::Ste,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    fn stage_on(&self, stage: usize) -> bool {
        self.stage_enable.get(stage).copied().unwrap_or(self.stage_enable.is_empty())
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&h.rho) {
            return bad(format!("rho {} outside [0, 1)", h.rho));
        }
        if !(h.lambda_s > 0.0) || !(h.lambda_a > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(h.k > 0.0) {
            return bad(format!("k {} must be positive", h.k));
        }
        if !(0.0..=1.0).contains(&h.r) {
            return bad(format!("reactivation probability {} outside [0, 1]", h.r));
        }
        if !(h.lr >= 0.0) || !(h.lambda_reg >= 0.0) {
            return bad("lr and lambda_reg must be non-negative".into());
        }
        if h.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        Ok(())
    }
}

/// Position of the seeded ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Adapter for one residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAdapter {
    pub block: usize,
    /// Index into `MaskState::scores` of the block's second BN layer.
    pub score_slot: usize,
    pub params: AdapterParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub segment: usize,
    pub loss_align: f64,
    pub loss_mask: f64,
    pub loss_total: f64,
    pub suppressed_count: usize,
    pub reactivated_count: usize,
    /// Channel-mean discrepancy of every BN layer.
    pub layer_discrepancy: Vec<f64>,
    /// Combined per-channel discrepancy of every BN layer.
    pub channel_discrepancy: Vec<Tensor>,
    /// Threshold used in this step's forward.
    pub tau: f64,
    pub accuracy: Option<f64>,
}

/// Quantities held fixed when the loss is evaluated for gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub tau: f64,
    /// Hard mask per masked layer.
    pub masks: Vec<Tensor>,
    /// Combined discrepancy per BN layer.
    pub discrepancy: Vec<Tensor>,
}

/// Graph nodes of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub align: Var,
    pub mask: Var,
    pub total: Var,
    pub logits: Var,
    pub taps: Vec<Var>,
    pub align_per_layer: Vec<f64>,
    pub discrepancy: Vec<Tensor>,
    pub layer_discrepancy: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptState {
    pub net: ToyNet,
    pub masks: Option<MaskState>,
    pub adapters: Vec<BlockAdapter>,
    pub config: AdaptConfig,
    pub rng: ChaCha8Rng,
    pub step_count: u64,
}

/// Leaves handed to [`AdaptState::build_loss`], in [`AdaptState::learnable`] order.
struct Leaves {
    gamma: Vec<Var>,
    beta: Vec<Var>,
    scores: Vec<Var>,
    adapters: Vec<(Var, Var, Var)>,
}

/// Per-block multipliers `clamp(D_b / mean(D), 0.5, 2)`; all ones when the
/// mean is zero.
pub fn grad_scales(block_d: &[f64]) -> Vec<f64> {
    if block_d.is_empty() {
        return Vec::new();
    }
    let mean = block_d.iter().sum::<f64>() / block_d.len() as f64;
    if !(mean > 0.0) {
        return vec![1.0; block_d.len()];
    }
    block_d.iter().map(|d| (d / mean).clamp(GRAD_SCALE_MIN, GRAD_SCALE_MAX)).collect()
}

/// Multiplies each block's adapter gradients by its factor.
pub fn scale_adapter_grads(grads: &mut [Vec<Tensor>], block_d: &[f64]) {
    for (gs, f) in grads.iter_mut().zip(grad_scales(block_d)) {
        for t in gs {
            t.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
}

/// `L_align + lambda_reg * L_mask`.
pub fn total_loss(loss_align: f64, loss_mask: f64, lambda_reg: f64) -> f64 {
    loss_align + lambda_reg * loss_mask
}

/// `sum_l (mean_c |mu_t - mu_s| + mean_c |sigma_t - sigma_s|)` over BN-input taps.
/// Returns the loss node and each layer's value.
pub fn align_loss(g: &mut Graph, taps: &[Var], stats: &SourceStats) -> Result<(Var, Vec<f64>)> {
    if taps.len() != stats.layers.len() {
        return Err(Error::Config(format!("{} taps but statistics for {} layers", taps.len(), stats.layers.len())));
    }
    let mut total: Option<Var> = None;
    let mut per_layer = Vec::with_capacity(taps.len());
    for (&t, st) in taps.iter().zip(&stats.layers) {
        let c = g.value(t).dims4("align_loss")?.1;
        if st.dist_mean.numel() != c {
            return Err(Error::Config(format!("layer {} has {} channels, statistics {}", st.name, c, st.dist_mean.numel())));
        }
        let mu = g.channel_mean(t)?;
        let var = g.channel_var(t)?;
        let sigma = g.sqrt(var);
        let mu_s = g.constant(st.dist_mean.clone());
        let sigma_s = g.constant(st.dist_std.clone());
        let a = g.l1_mean_distance(mu, mu_s)?;
        let b = g.l1_mean_distance(sigma, sigma_s)?;
        let l = g.add(a, b)?;
        per_layer.push(g.value(l).item());
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    Ok((total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))), per_layer))
}

impl AdaptState {
    /// Fresh state around a source network: scores `|gamma|` on in-block BN
    /// layers of enabled stages, adapters on their blocks.
    pub fn new(net: ToyNet, config: AdaptConfig) -> Result<Self> {
        config.validate()?;
        let infos = net.layer_infos();
        let sw = config.switches;
        let mut masks = None;
        if sw.uses_scores() {
            let layers: Vec<usize> = infos
                .iter()
                .enumerate()
                .filter(|(_, i)| i.block.is_some() && config.stage_on(i.stage))
                .map(|(l, _)| l)
                .collect();
            if !layers.is_empty() {
                let gammas: Vec<Tensor> = layers.iter().map(|&l| net.bn(l).gamma.clone()).collect();
                let h = &config.hyper;
                masks = Some(MaskState::new(layers, &gammas, h.rho, h.lambda_s, h.r)?);
            }
        }
        let mut adapters = Vec::new();
        if sw.additive {
            for (b, info) in net.blocks().iter().enumerate() {
                if !config.stage_on(info.stage) {
                    continue;
                }
                let slot = masks
                    .as_ref()
                    .and_then(|m: &MaskState| m.layers.iter().position(|&l| l == info.second_layer))
                    .ok_or_else(|| Error::Config(format!("block {b} has no mask scores")))?;
                adapters.push(BlockAdapter {
                    block: b,
                    score_slot: slot,
                    params: additive::init_adapter(info.channels, config.seed ^ (0xADA9_0000 + b as u64)),
                });
            }
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut st = Self { net, masks, adapters, config, rng, step_count: 0 };
        if let Some(m) = &mut st.masks {
            m.update_threshold()?;
        }
        Ok(st)
    }

    fn lambda_reg(&self) -> f64 {
        if self.config.switches.mask_loss && self.masks.is_some() {
            self.config.hyper.lambda_reg
        } else {
            0.0
        }
    }

    /// Learnable tensors: every gamma, every beta, the mask scores, then
    /// `(w1x1, w3x3, alpha)` per adapter.
    pub fn learnable(&self) -> Vec<Tensor> {
        let units = self.net.conv_bns();
        let mut out: Vec<Tensor> = units.iter().map(|u| u.bn.gamma.clone()).collect();
        out.extend(units.iter().map(|u| u.bn.beta.clone()));
        if let Some(m) = &self.masks {
            out.extend(m.scores.iter().cloned());
        }
        for a in &self.adapters {
            out.extend([a.params.w1x1.clone(), a.params.w3x3.clone(), a.params.alpha.clone()]);
        }
        out
    }

    fn split_leaves(&self, vars: &[Var]) -> Result<Leaves> {
        let l = self.net.num_layers();
        let s = self.masks.as_ref().map_or(0, |m| m.scores.len());
        if vars.len() != 2 * l + s + 3 * self.adapters.len() {
            return Err(Error::Config(format!("expected {} learnable leaves, got {}", 2 * l + s + 3 * self.adapters.len(), vars.len())));
        }
        let (gamma, rest) = vars.split_at(l);
        let (beta, rest) = rest.split_at(l);
        let (scores, rest) = rest.split_at(s);
        Ok(Leaves {
            gamma: gamma.to_vec(),
            beta: beta.to_vec(),
            scores: scores.to_vec(),
            adapters: rest.chunks(3).map(|c| (c[0], c[1], c[2])).collect(),
        })
    }

    /// Threshold, hard masks and discrepancy at the current parameters.
    pub fn freeze(&self, batch: &Batch, stats: &SourceStats) -> Result<Frozen> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.learnable().into_iter().map(|t| g.constant(t)).collect();
        let tau = self.current_tau()?;
        let masks = self.masks.as_ref().map_or(Vec::new(), |m| m.scores.iter().map(|s| hard_mask(s, tau)).collect());
        let pre = Frozen { tau, masks, discrepancy: Vec::new() };
        let parts = self.build_loss(&mut g, &vars, batch, stats, Some(&pre), &mut |_| {})?;
        Ok(Frozen { discrepancy: parts.discrepancy, ..pre })
    }

    fn current_tau(&self) -> Result<f64> {
        match &self.masks {
            Some(m) => subtractive::compute_threshold(&m.pooled_abs(), m.rho),
            None => Ok(0.0),
        }
    }

    /// Builds the adaptation loss from the given leaves. With `frozen`, masks
    /// are the given constants and a nonempty `frozen.discrepancy` replaces
    /// the measured one. `adjust` may rewrite the measured discrepancy before
    /// it is used.
    pub fn loss_from_leaves(
        &self,
        g: &mut Graph,
        vars: &[Var],
        batch: &Batch,
        stats: &SourceStats,
        frozen: Option<&Frozen>,
    ) -> Result<LossParts> {
        self.build_loss(g, vars, batch, stats, frozen, &mut |_| {})
    }

    fn build_loss(
        &self,
        g: &mut Graph,
        vars: &[Var],
        batch: &Batch,
        stats: &SourceStats,
        frozen: Option<&Frozen>,
        adjust: &mut dyn FnMut(&mut [Tensor]),
    ) -> Result<LossParts> {
        stats.check_against(&self.net)?;
        let leaves = self.split_leaves(vars)?;
        let units = self.net.conv_bns();
        let net_vars = NetVars {
            conv: units.iter().map(|u| g.constant(u.weight.clone())).collect(),
            gamma: leaves.gamma.clone(),
            beta: leaves.beta.clone(),
            head_w: g.constant(self.net.head_weight.clone()),
            head_b: g.constant(self.net.head_bias.clone()),
        };
        let sw = self.config.switches;
        let h = &self.config.hyper;
        let tau = match frozen {
            Some(f) => f.tau,
            None => self.masks.as_ref().map_or(0.0, |m| m.tau),
        };
        let mut bufs = BufferVars { masks: vec![None; units.len()], adapters: vec![None; self.net.blocks().len()] };
        if let (Some(ms), true) = (&self.masks, sw.subtractive) {
            for (slot, &layer) in ms.layers.iter().enumerate() {
                let m = match (frozen, self.config.mask_mode) {
                    (Some(f), _) => g.constant(f.masks[slot].clone()),
                    (None, MaskMode::Frozen) => g.constant(hard_mask(g.value(leaves.scores[slot]), tau)),
                    (None, MaskMode::Ste) => subtractive::ste_mask(g, leaves.scores[slot], tau, h.lambda_s)?,
                };
                bufs.masks[layer] = Some(m);
            }
        }
        for (a, &(w1, w3, al)) in self.adapters.iter().zip(&leaves.adapters) {
            let modulation = match sw.coupling {
                Coupling::Inverse => additive::inverse_soft_mask(g, leaves.scores[a.score_slot], tau, h.lambda_a, h.k)?,
                Coupling::Constant => g.constant(Tensor::full([a.params.channels()], h.k / 2.0)),
            };
            bufs.adapters[a.block] = Some(AdapterVars { w1x1: w1, w3x3: w3, alpha: al, modulation });
        }
        let input = g.constant(batch.images.clone());
        let out = self.net.forward_graph(g, &net_vars, input, false, Some(&bufs))?;

        let (discrepancy, layer_discrepancy) = match frozen {
            Some(f) if !f.discrepancy.is_empty() => {
                let ld = f.discrepancy.iter().map(crate::discrepancy::layer_aggregate).collect::<Result<Vec<_>>>()?;
                (f.discrepancy.clone(), ld)
            }
            _ => {
                let tap_values: Vec<Tensor> = out.taps.iter().map(|&t| g.value(t).clone()).collect();
                let ds = network_discrepancy(
                    &tap_values,
                    &batch.boxes,
                    self.net.config.input_size,
                    &stats.layers,
                    self.config.discrepancy,
                )?;
                let mut d: Vec<Tensor> = ds.into_iter().map(|x| x.combined).collect();
                adjust(&mut d);
                let ld = d.iter().map(crate::discrepancy::layer_aggregate).collect::<Result<Vec<_>>>()?;
                (d, ld)
            }
        };

        let (align, align_per_layer) = align_loss(g, &out.taps, stats)?;
        let lambda_reg = self.lambda_reg();
        let mask = match &self.masks {
            Some(ms) if lambda_reg > 0.0 => {
                let d: Vec<Tensor> = ms.layers.iter().map(|&l| discrepancy[l].clone()).collect();
                subtractive::mask_loss(g, &d, &leaves.scores)?
            }
            _ => g.constant(Tensor::scalar(0.0)),
        };
        let weighted = g.scale(mask, lambda_reg);
        let total = g.add(align, weighted)?;
        Ok(LossParts {
            align,
            mask,
            total,
            logits: out.logits,
            taps: out.taps,
            align_per_layer,
            discrepancy,
            layer_discrepancy,
        })
    }

    /// Discrepancy of each adapter's block: mean of its two layers.
    fn block_discrepancy(&self, layer_d: &[f64]) -> Vec<f64> {
        let blocks = self.net.blocks();
        self.adapters
            .iter()
            .map(|a| {
                let b = blocks[a.block];
                (layer_d[b.first_layer] + layer_d[b.second_layer]) / 2.0
            })
            .collect()
    }

    pub fn adapt_step(&mut self, batch: &Batch, stats: &SourceStats) -> Result<StepReport> {
        self.adapt_step_with(batch, stats, |_| {})
    }

    /// [`AdaptState::adapt_step`] with a hook that may rewrite the measured
    /// per-layer discrepancy before it weights the losses.
    pub fn adapt_step_with(
        &mut self,
        batch: &Batch,
        stats: &SourceStats,
        mut adjust: impl FnMut(&mut [Tensor]),
    ) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Empty("adaptation batch"));
        }
        let tau = match &mut self.masks {
            Some(m) => m.update_threshold()?,
            None => 0.0,
        };
        let suppressed = match (&self.masks, self.config.switches.subtractive) {
            (Some(m), true) => m.suppressed_count(),
            _ => 0,
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = self.learnable().into_iter().map(|t| g.param(t)).collect();
        let parts = self.build_loss(&mut g, &vars, batch, stats, None, &mut adjust)?;
        let loss_align = g.value(parts.align).item();
        let loss_mask = g.value(parts.mask).item();
        let loss_total = g.value(parts.total).item();
        if !loss_total.is_finite() {
            let mut diag = String::new();
            for (l, (a, d)) in parts.align_per_layer.iter().zip(&parts.layer_discrepancy).enumerate() {
                let _ = write!(diag, "layer {l}: align {a}, D {d}; ");
            }
            let _ = write!(diag, "mask {loss_mask}");
            return Err(Error::NonFinite { step: self.step_count, diagnostic: diag });
        }
        g.backward(parts.total)?;
        let leaves = self.split_leaves(&vars)?;

        let mut adapter_grads: Vec<Vec<Tensor>> = leaves
            .adapters
            .iter()
            .map(|&(a, b, c)| vec![g.grad_tensor(a), g.grad_tensor(b), g.grad_tensor(c)])
            .collect();
        if self.config.switches.grad_scaling {
            let bd = self.block_discrepancy(&parts.layer_discrepancy);
            scale_adapter_grads(&mut adapter_grads, &bd);
        }

        let lr = self.config.hyper.lr;
        let sgd = |t: &mut Tensor, grad: &[f64]| {
            t.data_mut().iter_mut().zip(grad).for_each(|(p, d)| *p -= lr * d);
        };
        for (l, cb) in self.net.conv_bns_mut().into_iter().enumerate() {
            sgd(&mut cb.bn.gamma, g.grad_tensor(leaves.gamma[l]).data());
            sgd(&mut cb.bn.beta, g.grad_tensor(leaves.beta[l]).data());
        }
        if let Some(m) = &mut self.masks {
            for (s, &v) in m.scores.iter_mut().zip(&leaves.scores) {
                sgd(s, g.grad_tensor(v).data());
            }
        }
        for (a, gr) in self.adapters.iter_mut().zip(&adapter_grads) {
            sgd(&mut a.params.w1x1, gr[0].data());
            sgd(&mut a.params.w3x3, gr[1].data());
            sgd(&mut a.params.alpha, gr[2].data());
        }

        let mut reactivated = 0;
        if self.config.switches.subtractive {
            if let Some(m) = &mut self.masks {
                let units = self.net.conv_bns();
                let gammas: Vec<&Tensor> = m.layers.iter().map(|&l| &units[l].bn.gamma).collect();
                reactivated = m.reactivate(&gammas, &mut self.rng)?;
            }
        }

        let report = StepReport {
            step: self.step_count,
            segment: 0,
            loss_align,
            loss_mask,
            loss_total,
            suppressed_count: suppressed,
            reactivated_count: reactivated,
            layer_discrepancy: parts.layer_discrepancy,
            channel_discrepancy: parts.discrepancy,
            tau,
            accuracy: None,
        };
        self.step_count += 1;
        Ok(report)
    }

    /// Value-level buffers at the current parameters (hard masks from the
    /// threshold of the current scores).
    pub fn attached_buffers(&self) -> Result<AttachedBuffers> {
        let n_layers = self.net.num_layers();
        let blocks = self.net.blocks();
        let mut out = AttachedBuffers { masks: vec![None; n_layers], adapters: vec![None; blocks.len()] };
        let tau = self.current_tau()?;
        let h = &self.config.hyper;
        if let (Some(m), true) = (&self.masks, self.config.switches.subtractive) {
            for (s, &l) in m.scores.iter().zip(&m.layers) {
                out.masks[l] = Some(hard_mask(s, tau));
            }
        }
        for a in &self.adapters {
            let modulation = match self.config.switches.coupling {
                Coupling::Inverse => {
                    let s = &self.masks.as_ref().expect("adapters imply scores").scores[a.score_slot];
                    additive::inverse_soft_mask_values(s, tau, h.lambda_a, h.k)?
                }
                Coupling::Constant => Tensor::full([a.params.channels()], h.k / 2.0),
            };
            out.adapters[a.block] = Some(AdapterTensors {
                w1x1: a.params.w1x1.clone(),
                w3x3: a.params.w3x3.clone(),
                alpha: a.params.alpha.clone(),
                modulation,
            });
        }
        Ok(out)
    }

    /// Classification accuracy with the current buffers; no mutation.
    pub fn evaluate(&self, dataset: &ToyDataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Empty("evaluation dataset"));
        }
        let bufs = self.attached_buffers()?;
        let mut correct = 0.0;
        for batch in dataset.batches(64) {
            let batch = batch?;
            let (logits, _) = self.net.forward_with_taps(&batch.images, Some(&bufs))?;
            correct += accuracy(&logits, &batch.labels) * batch.len() as f64;
        }
        Ok(correct / dataset.len() as f64)
    }

    /// Runs one step per batch, tagging reports with `segment` and
    /// evaluating on `eval` after every `eval_every`-th step (0 disables).
    pub fn adapt_stream(
        &mut self,
        stream: &[Batch],
        stats: &SourceStats,
        eval: Option<&ToyDataset>,
        eval_every: usize,
        segment: usize,
    ) -> Result<Vec<StepReport>> {
        let mut out = Vec::with_capacity(stream.len());
        for (i, batch) in stream.iter().enumerate() {
            let mut r = self.adapt_step(batch, stats)?;
            r.segment = segment;
            if let Some(ds) = eval {
                if eval_every > 0 && (i + 1) % eval_every == 0 {
                    r.accuracy = Some(self.evaluate(ds)?);
                }
            }
            out.push(r);
        }
        Ok(out)
    }

    /// Continual protocol: segments run back to back on one state.
    pub fn adapt_continual(
        &mut self,
        segments: &[(Vec<Batch>, Option<ToyDataset>)],
        stats: &SourceStats,
        eval_every: usize,
    ) -> Result<Vec<StepReport>> {
        let mut out = Vec::new();
        for (i, (stream, eval)) in segments.iter().enumerate() {
            out.extend(self.adapt_stream(stream, stats, eval.as_ref(), eval_every, i)?);
        }
        Ok(out)
    }

    /// SHA-256 over network, scores, threshold, adapters and step count.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut ts: Vec<Tensor> = vec![Tensor::from_vec(self.net.fingerprint().iter().map(|&b| b as f64).collect())];
        ts.extend(self.learnable());
        ts.push(Tensor::from_vec(vec![self.masks.as_ref().map_or(0.0, |m| m.tau), self.step_count as f64]));
        fingerprint(&ts)
    }

    pub fn rng_state(&self) -> RngState {
        RngState { seed: self.rng.get_seed(), stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() }
    }

    pub fn set_rng_state(&mut self, st: RngState) {
        let mut rng = ChaCha8Rng::from_seed(st.seed);
        rng.set_stream(st.stream);
        rng.set_word_pos(st.word_pos);
        self.rng = rng;
    }

    /// Layer indices that carry scores.
    pub fn masked_layers(&self) -> Vec<usize> {
        self.masks.as_ref().map_or(Vec::new(), |m| m.layers.clone())
    }
}

/// Cuts a dataset into a stream of at most `steps` batches of `batch_size`,
/// cycling through the data in order when it runs out. Partial batches are
/// skipped.
pub fn make_stream(dataset: &ToyDataset, batch_size: usize, steps: usize) -> Result<Vec<Batch>> {
    if dataset.len() < batch_size || batch_size == 0 {
        return Err(Error::Config(format!("dataset of {} images cannot fill batches of {}", dataset.len(), batch_size)));
    }
    let per_pass = dataset.len() / batch_size;
    (0..steps)
        .map(|i| {
            let start = (i % per_pass) * batch_size;
            Batch::from_images(&dataset.images[start..start + batch_size])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{precompute_stats, LayerStats, NetConfig};
    use crate::data::gen_dataset;

    fn tiny() -> (ToyNet, SourceStats, Batch) {
        let cfg = NetConfig { widths: vec![2, 4], blocks_per_stage: 1, ..NetConfig::default() };
        let net = ToyNet::new(cfg, 3).unwrap();
        let stats = precompute_stats(&net, &gen_dataset(32, 1).unwrap(), 16).unwrap();
        let batch = Batch::from_images(&gen_dataset(8, 2).unwrap().images).unwrap();
        (net, stats, batch)
    }

    fn config(lr: f64, lambda_reg: f64, r: f64) -> AdaptConfig {
        AdaptConfig { hyper: Hyper { lr, lambda_reg, r, ..Hyper::default() }, ..AdaptConfig::default() }
    }

    fn layer_stats(mean: Vec<f64>, std: Vec<f64>) -> LayerStats {
        let c = mean.len();
        LayerStats {
            name: "t".into(),
            image_mean: Tensor::zeros([c, 1, 1]),
            instance_mean: Tensor::zeros([c, 1, 1]),
            dist_mean: Tensor::from_vec(mean),
            dist_std: Tensor::from_vec(std),
        }
    }

    fn stats_of(layers: Vec<LayerStats>) -> SourceStats {
        SourceStats { layers, network_hash: [0; 32], dataset_seed: 0, image_count: 1, instance_count: 0 }
    }

    #[test]
    fn defaults() {
        let h = Hyper::default();
        assert_eq!((h.lambda_reg, h.lambda_s, h.lambda_a, h.rho), (0.05, 0.05, 0.1, 0.05));
        assert_eq!((h.lr, h.batch_size, h.k, h.r), (1e-4, 16, 10.0, 0.05));
    }

    #[test]
    fn validate_rejects_bad_values() {
        for bad in [
            Hyper { rho: 1.0, ..Hyper::default() },
            Hyper { lambda_s: 0.0, ..Hyper::default() },
            Hyper { k: -1.0, ..Hyper::default() },
            Hyper { r: 1.5, ..Hyper::default() },
            Hyper { lr: f64::NAN, ..Hyper::default() },
            Hyper { batch_size: 0, ..Hyper::default() },
        ] {
            let c = AdaptConfig { hyper: bad, ..AdaptConfig::default() };
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn grad_scale_examples() {
        assert_eq!(grad_scales(&[0.3, 0.3, 0.3]), vec![1.0; 3]);
        // 0.5 is twice the mean of [0.5, 0, 0.25]
        assert_eq!(grad_scales(&[0.5, 0.0, 0.25]), vec![2.0, 0.5, 1.0]);
        assert_eq!(grad_scales(&[0.0, 0.0]), vec![1.0, 1.0]);
        assert_eq!(grad_scales(&[5.0, 0.1, 0.1, 0.1]), vec![2.0, 0.5, 0.5, 0.5]);
        let mut g = vec![vec![Tensor::full([2], 3.0)], vec![Tensor::full([2], 3.0)]];
        scale_adapter_grads(&mut g, &[1.0, 1.0]);
        assert!(g.iter().flatten().all(|t| t.data() == [3.0, 3.0]));
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(1.0, 2.0, 0.05) - 1.1).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 9.0, 0.0), 0.7);
    }

    #[test]
    fn align_loss_zero_at_source_and_one_under_unit_shift() {
        // channel 0: values {1, 3} -> mean 2, std 1; channel 1: {0, 0} -> mean 0, std 0
        let t = Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 3.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let tap = g.constant(t);
        let (l, per) = align_loss(&mut g, &[tap], &stats_of(vec![layer_stats(vec![2.0, 0.0], vec![1.0, 0.0])])).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert_eq!(per, vec![0.0]);
        let (l, _) = align_loss(&mut g, &[tap], &stats_of(vec![layer_stats(vec![1.0, -1.0], vec![1.0, 0.0])])).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-15);
        assert!(align_loss(&mut g, &[tap, tap], &stats_of(vec![layer_stats(vec![0.0; 2], vec![0.0; 2])])).is_err());
        assert!(align_loss(&mut g, &[tap], &stats_of(vec![layer_stats(vec![0.0; 3], vec![0.0; 3])])).is_err());
    }

    #[test]
    fn frozen_step_changes_nothing() {
        let (net, stats, batch) = tiny();
        let mut st = AdaptState::new(net, config(0.0, 0.0, 0.0)).unwrap();
        let before = st.learnable();
        let r = st.adapt_step(&batch, &stats).unwrap();
        assert_eq!(st.learnable(), before);
        assert!(r.loss_align > 0.0 && r.loss_align.is_finite());
        assert_eq!(r.loss_mask, 0.0);
        assert_eq!(r.loss_total, r.loss_align);
        assert_eq!(r.reactivated_count, 0);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn loss_identity_and_frozen_backbone() {
        let (net, stats, batch) = tiny();
        let conv: Vec<Tensor> = net.conv_bns().iter().map(|u| u.weight.clone()).collect();
        let head = (net.head_weight.clone(), net.head_bias.clone());
        let running: Vec<_> = net.conv_bns().iter().map(|u| (u.bn.running_mean.clone(), u.bn.running_var.clone())).collect();
        let mut st = AdaptState::new(net, config(0.01, 0.05, 0.05)).unwrap();
        let before = st.learnable();
        for _ in 0..5 {
            let r = st.adapt_step(&batch, &stats).unwrap();
            assert!(r.loss_mask > 0.0);
            assert!((r.loss_total - (r.loss_align + 0.05 * r.loss_mask)).abs() < 1e-12);
            assert_eq!(r.layer_discrepancy.len(), st.net.num_layers());
        }
        assert_ne!(st.learnable(), before);
        let units = st.net.conv_bns();
        assert!(units.iter().zip(&conv).all(|(u, w)| &u.weight == w));
        assert!(units.iter().zip(&running).all(|(u, (m, v))| &u.bn.running_mean == m && &u.bn.running_var == v));
        assert_eq!((&st.net.head_weight, &st.net.head_bias), (&head.0, &head.1));
    }

    #[test]
    fn mask_loss_off_reports_zero() {
        let (net, stats, batch) = tiny();
        let sw = Switches { mask_loss: false, ..Switches::ADDITIVE_ONLY };
        let c = AdaptConfig { switches: sw, ..config(0.01, 0.05, 0.05) };
        let mut st = AdaptState::new(net, c).unwrap();
        let r = st.adapt_step(&batch, &stats).unwrap();
        assert_eq!(r.loss_mask, 0.0);
        assert_eq!(r.loss_total, r.loss_align);
        assert_eq!(r.suppressed_count, 0);
    }

    #[test]
    fn groups_follow_switches() {
        let (net, _, _) = tiny();
        let bn = AdaptState::new(net.clone(), AdaptConfig { switches: Switches::BN_ONLY, ..AdaptConfig::default() }).unwrap();
        assert!(bn.masks.is_none() && bn.adapters.is_empty());
        assert_eq!(bn.learnable().len(), 2 * net.num_layers());
        let full = AdaptState::new(net.clone(), AdaptConfig::default()).unwrap();
        assert_eq!(full.masked_layers().len(), 4);
        assert_eq!(full.adapters.len(), 2);
        let light = AdaptState::new(net, AdaptConfig { stage_enable: vec![true, false], ..AdaptConfig::default() }).unwrap();
        assert_eq!(light.masked_layers().len(), 2);
        assert_eq!(light.adapters.len(), 1);
    }

    #[test]
    fn steps_are_deterministic() {
        let (net, stats, batch) = tiny();
        let run = || {
            let mut st = AdaptState::new(net.clone(), config(0.01, 0.05, 0.5)).unwrap();
            let rs: Vec<StepReport> = (0..4).map(|_| st.adapt_step(&batch, &stats).unwrap()).collect();
            (rs, st.fingerprint())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reactivation_follows_the_update() {
        let (net, stats, batch) = tiny();
        let mut never = AdaptState::new(net.clone(), config(0.01, 0.05, 0.0)).unwrap();
        let mut always = AdaptState::new(net, config(0.01, 0.05, 1.0)).unwrap();
        let a = never.adapt_step(&batch, &stats).unwrap();
        let b = always.adapt_step(&batch, &stats).unwrap();
        assert_eq!(a.loss_total, b.loss_total);
        assert!(b.reactivated_count > 0);
        assert_eq!(never.net, always.net);
        assert_eq!(never.adapters, always.adapters);
        let (sn, sa) = (never.masks.unwrap(), always.masks.unwrap());
        let mut changed = 0;
        for (x, y) in sn.scores.iter().zip(&sa.scores) {
            for (p, q) in x.data().iter().zip(y.data()) {
                if p != q {
                    assert!(p.abs() < sn.tau);
                    changed += 1;
                }
            }
        }
        assert_eq!(changed, b.reactivated_count);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let (net, mut stats, batch) = tiny();
        stats.layers[2].dist_mean.data_mut()[0] = f64::NAN;
        let mut st = AdaptState::new(net, AdaptConfig::default()).unwrap();
        match st.adapt_step(&batch, &stats) {
            Err(Error::NonFinite { step: 0, diagnostic }) => assert!(diagnostic.contains("layer 2: align NaN")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stream_bookkeeping_and_pure_evaluation() {
        let (net, stats, batch) = tiny();
        let mut st = AdaptState::new(net, config(0.01, 0.05, 0.05)).unwrap();
        assert!(st.adapt_stream(&[], &stats, None, 1, 0).unwrap().is_empty());
        let eval = gen_dataset(20, 4).unwrap();
        let h = st.fingerprint();
        let a = st.evaluate(&eval).unwrap();
        assert_eq!(a, st.evaluate(&eval).unwrap());
        assert_eq!(h, st.fingerprint());
        assert!(st.evaluate(&ToyDataset { images: Vec::new(), ..eval.clone() }).is_err());
        let segs = vec![
            (vec![batch.clone(); 2], Some(eval.clone())),
            (vec![batch.clone(); 3], None),
            (vec![batch.clone(); 2], Some(eval)),
        ];
        let rs = st.adapt_continual(&segs, &stats, 2).unwrap();
        assert_eq!(rs.iter().map(|r| r.segment).collect::<Vec<_>>(), vec![0, 0, 1, 1, 1, 2, 2]);
        assert_eq!(rs.iter().map(|r| r.step).collect::<Vec<_>>(), (0..7).collect::<Vec<u64>>());
        assert_eq!(rs.iter().map(|r| r.accuracy.is_some()).collect::<Vec<_>>(), [false, true, false, false, false, false, true]);
    }

    #[test]
    fn rng_state_round_trips() {
        let (net, stats, batch) = tiny();
        let mut a = AdaptState::new(net, config(0.01, 0.05, 0.5)).unwrap();
        a.adapt_step(&batch, &stats).unwrap();
        let mut b = a.clone();
        b.rng = ChaCha8Rng::seed_from_u64(99);
        b.set_rng_state(a.rng_state());
        assert_eq!(a.adapt_step(&batch, &stats).unwrap(), b.adapt_step(&batch, &stats).unwrap());
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn streams_cycle() {
        let ds = gen_dataset(10, 1).unwrap();
        let s = make_stream(&ds, 4, 5).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s[0], s[2]);
        assert_eq!(s[1], s[3]);
        assert!(make_stream(&ds, 11, 1).is_err());
        assert!(make_stream(&ds, 0, 1).is_err());
    }
}
