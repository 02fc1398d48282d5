//! `cdckpt-1` checkpoints, `cdstats-1` source statistics and `cddata-1`
//! dataset dumps, all built on [`Container`].

use serde::{Deserialize, Serialize};


use cdbuffer_core::additive::AdapterParams;
use cdbuffer_core::backbone::{LayerStats, NetConfig, SourceStats, ToyNet, INSTANCE_SIZE};
use cdbuffer_core::data::{GeneratorParams, LabeledImage, ToyDataset};
use cdbuffer_core::engine::{AdaptConfig, AdaptState, BlockAdapter, MaskMode, RngState};
use cdbuffer_core::roi::RoiBox;
use cdbuffer_core::subtractive::MaskState;
use cdbuffer_core::Tensor;

use crate::config::{hex, DiscrepancySettings, HyperConfig, MaskModeConfig, SwitchConfig};
use crate::container::Container;
use crate::error::{RunError, RunResult};

pub const CKPT_TAG: &str = "cdckpt-1";
pub const STATS_TAG: &str = "cdstats-1";
pub const DATA_TAG: &str = "cddata-1";

fn malformed(tag: &str, m: impl std::fmt::Display) -> RunError {
    RunError::Io(format!("malformed {tag} file: {m}"))
}

fn unhex<const N: usize>(s: &str) -> Option<[u8; N]> {
    if s.len() != 2 * N {
        return None;
    }
    let mut out = [0u8; N];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

// ── checkpoints ──────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct NetMeta {
    input_size: usize,
    in_channels: usize,
    widths: Vec<usize>,
    blocks_per_stage: usize,
    num_classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdaptSettings {
    hyper: HyperConfig,
    switches: SwitchConfig,
    stage_enable: Vec<bool>,
    discrepancy: DiscrepancySettings,
    mask_mode: MaskModeConfig,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngMeta {
    seed: String,
    stream: u64,
    /// Decimal string: the position does not fit a JSON number.
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterMeta {
    block: usize,
    score_slot: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdaptMeta {
    config: AdaptSettings,
    step_count: u64,
    rng: RngMeta,
    /// Masked layer indices; absent when the run has no scores.
    mask_layers: Option<Vec<usize>>,
    adapters: Vec<AdapterMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CkptMeta {
    net: NetMeta,
    layers: Vec<String>,
    adapt: Option<AdaptMeta>,
}

/// A network, optionally with the adaptation state wrapped around it.
#[derive(Debug, Clone)]
pub enum Checkpoint {
    Model(ToyNet),
    Adapted(Box<AdaptState>),
}

impl Checkpoint {
    pub fn net(&self) -> &ToyNet {
        match self {
            Self::Model(n) => n,
            Self::Adapted(s) => &s.net,
        }
    }

    pub fn into_net(self) -> ToyNet {
        match self {
            Self::Model(n) => n,
            Self::Adapted(s) => s.net,
        }
    }
}

fn push_net(c: &mut Container, net: &ToyNet) {
    for (info, u) in net.layer_infos().iter().zip(net.conv_bns()) {
        c.push(format!("{}/weight", info.name), &u.weight);
        c.push(format!("{}/gamma", info.name), &u.bn.gamma);
        c.push(format!("{}/beta", info.name), &u.bn.beta);
        c.push(format!("{}/running_mean", info.name), &u.bn.running_mean);
        c.push(format!("{}/running_var", info.name), &u.bn.running_var);
    }
    c.push("head/weight", &net.head_weight);
    c.push("head/bias", &net.head_bias);
}

fn net_meta(net: &ToyNet) -> NetMeta {
    let c = &net.config;
    NetMeta {
        input_size: c.input_size,
        in_channels: c.in_channels,
        widths: c.widths.clone(),
        blocks_per_stage: c.blocks_per_stage,
        num_classes: c.num_classes,
    }
}

fn read_net(c: &Container, meta: &NetMeta) -> RunResult<ToyNet> {
    let config = NetConfig {
        input_size: meta.input_size,
        in_channels: meta.in_channels,
        widths: meta.widths.clone(),
        blocks_per_stage: meta.blocks_per_stage,
        num_classes: meta.num_classes,
    };
    let mut net = ToyNet::new(config, 0).map_err(|e| malformed(CKPT_TAG, e))?;
    let infos = net.layer_infos();
    for (info, u) in infos.iter().zip(net.conv_bns_mut()) {
        let ch = [info.channels];
        u.weight = c.get_shaped(&format!("{}/weight", info.name), u.weight.shape())?;
        u.bn.gamma = c.get_shaped(&format!("{}/gamma", info.name), &ch)?;
        u.bn.beta = c.get_shaped(&format!("{}/beta", info.name), &ch)?;
        u.bn.running_mean = c.get_shaped(&format!("{}/running_mean", info.name), &ch)?;
        u.bn.running_var = c.get_shaped(&format!("{}/running_var", info.name), &ch)?;
    }
    net.head_weight = c.get_shaped("head/weight", net.head_weight.shape())?;
    net.head_bias = c.get_shaped("head/bias", net.head_bias.shape())?;
    Ok(net)
}

pub fn model_to_bytes(net: &ToyNet) -> Vec<u8> {
    let meta = CkptMeta { net: net_meta(net), layers: net.layer_infos().into_iter().map(|i| i.name).collect(), adapt: None };
    let mut c = Container::new(CKPT_TAG, serde_json::to_value(meta).expect("meta"));
    push_net(&mut c, net);
    c.to_bytes()
}

pub fn state_to_bytes(st: &AdaptState) -> Vec<u8> {
    let cfg = &st.config;
    let rng = st.rng_state();
    let adapt = AdaptMeta {
        config: AdaptSettings {
            hyper: cfg.hyper.into(),
            switches: cfg.switches.into(),
            stage_enable: cfg.stage_enable.clone(),
            discrepancy: cfg.discrepancy.into(),
            mask_mode: match cfg.mask_mode {
                MaskMode::Ste => MaskModeConfig::Ste,
                MaskMode::Frozen => MaskModeConfig::Frozen,
            },
            seed: cfg.seed,
        },
        step_count: st.step_count,
        rng: RngMeta { seed: hex(&rng.seed), stream: rng.stream, word_pos: rng.word_pos.to_string() },
        mask_layers: st.masks.as_ref().map(|m| m.layers.clone()),
        adapters: st.adapters.iter().map(|a| AdapterMeta { block: a.block, score_slot: a.score_slot }).collect(),
    };
    let meta = CkptMeta {
        net: net_meta(&st.net),
        layers: st.net.layer_infos().into_iter().map(|i| i.name).collect(),
        adapt: Some(adapt),
    };
    let mut c = Container::new(CKPT_TAG, serde_json::to_value(meta).expect("meta"));
    push_net(&mut c, &st.net);
    if let Some(m) = &st.masks {
        c.push("mask/params", &Tensor::from_vec(vec![m.tau, m.rho, m.lambda_s, m.r]));
        for (i, s) in m.scores.iter().enumerate() {
            c.push(format!("mask/scores/{i}"), s);
        }
    }
    for (i, a) in st.adapters.iter().enumerate() {
        c.push(format!("adapter/{i}/w1x1"), &a.params.w1x1);
        c.push(format!("adapter/{i}/w3x3"), &a.params.w3x3);
        c.push(format!("adapter/{i}/alpha"), &a.params.alpha);
    }
    c.to_bytes()
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> RunResult<Checkpoint> {
    let c = Container::from_bytes(bytes, CKPT_TAG)?;
    let meta: CkptMeta = c.meta_as()?;
    let net = read_net(&c, &meta.net)?;
    let Some(a) = meta.adapt else {
        return Ok(Checkpoint::Model(net));
    };
    let s = a.config;
    let config = AdaptConfig {
        hyper: s.hyper.into(),
        switches: s.switches.into(),
        stage_enable: s.stage_enable,
        discrepancy: s.discrepancy.into(),
        mask_mode: match s.mask_mode {
            MaskModeConfig::Ste => MaskMode::Ste,
            MaskModeConfig::Frozen => MaskMode::Frozen,
        },
        seed: s.seed,
    };
    let infos = net.layer_infos();
    let masks = match a.mask_layers {
        Some(layers) => {
            let p = c.get_shaped("mask/params", &[4])?;
            let p = p.data();
            let mut scores = Vec::with_capacity(layers.len());
            for (i, &l) in layers.iter().enumerate() {
                let info = infos.get(l).ok_or_else(|| malformed(CKPT_TAG, format!("masked layer {l} out of range")))?;
                scores.push(c.get_shaped(&format!("mask/scores/{i}"), &[info.channels])?);
            }
            Some(MaskState { layers, scores, tau: p[0], rho: p[1], lambda_s: p[2], r: p[3] })
        }
        None => None,
    };
    let blocks = net.blocks();
    let mut adapters = Vec::with_capacity(a.adapters.len());
    for (i, am) in a.adapters.iter().enumerate() {
        let ch = blocks.get(am.block).ok_or_else(|| malformed(CKPT_TAG, format!("block {} out of range", am.block)))?.channels;
        adapters.push(BlockAdapter {
            block: am.block,
            score_slot: am.score_slot,
            params: AdapterParams {
                w1x1: c.get_shaped(&format!("adapter/{i}/w1x1"), &[ch, ch, 1, 1])?,
                w3x3: c.get_shaped(&format!("adapter/{i}/w3x3"), &[ch, ch, 3, 3])?,
                alpha: c.get_shaped(&format!("adapter/{i}/alpha"), &[ch])?,
            },
        });
    }
    let seed = unhex::<32>(&a.rng.seed).ok_or_else(|| malformed(CKPT_TAG, "rng seed"))?;
    let word_pos = a.rng.word_pos.parse().map_err(|_| malformed(CKPT_TAG, "rng position"))?;
    let mut st = AdaptState::new(net, config)?;
    st.masks = masks;
    st.adapters = adapters;
    st.step_count = a.step_count;
    st.set_rng_state(RngState { seed, stream: a.rng.stream, word_pos });
    Ok(Checkpoint::Adapted(Box::new(st)))
}

// ── source statistics ────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct StatsMeta {
    layers: Vec<String>,
    network_hash: String,
    dataset_seed: u64,
    image_count: usize,
    instance_count: usize,
}

pub fn stats_to_bytes(s: &SourceStats) -> Vec<u8> {
    let meta = StatsMeta {
        layers: s.layers.iter().map(|l| l.name.clone()).collect(),
        network_hash: hex(&s.network_hash),
        dataset_seed: s.dataset_seed,
        image_count: s.image_count,
        instance_count: s.instance_count,
    };
    let mut c = Container::new(STATS_TAG, serde_json::to_value(meta).expect("meta"));
    for l in &s.layers {
        c.push(format!("{}/image_mean", l.name), &l.image_mean);
        c.push(format!("{}/instance_mean", l.name), &l.instance_mean);
        c.push(format!("{}/dist_mean", l.name), &l.dist_mean);
        c.push(format!("{}/dist_std", l.name), &l.dist_std);
    }
    c.to_bytes()
}

pub fn stats_from_bytes(bytes: &[u8]) -> RunResult<SourceStats> {
    let c = Container::from_bytes(bytes, STATS_TAG)?;
    let meta: StatsMeta = c.meta_as()?;
    let mut layers = Vec::with_capacity(meta.layers.len());
    for name in meta.layers {
        let image_mean = c.get(&format!("{name}/image_mean"))?.clone();
        let ch = *image_mean.shape().first().ok_or_else(|| malformed(STATS_TAG, "scalar image mean"))?;
        layers.push(LayerStats {
            instance_mean: c.get_shaped(&format!("{name}/instance_mean"), &[ch, INSTANCE_SIZE, INSTANCE_SIZE])?,
            dist_mean: c.get_shaped(&format!("{name}/dist_mean"), &[ch])?,
            dist_std: c.get_shaped(&format!("{name}/dist_std"), &[ch])?,
            image_mean,
            name,
        });
    }
    Ok(SourceStats {
        layers,
        network_hash: unhex::<32>(&meta.network_hash).ok_or_else(|| malformed(STATS_TAG, "network hash"))?,
        dataset_seed: meta.dataset_seed,
        image_count: meta.image_count,
        instance_count: meta.instance_count,
    })
}

// ── datasets ─────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct GenMeta {
    size: usize,
    background_min: f64,
    background_max: f64,
    noise_min: f64,
    noise_max: f64,
    contrast_min: f64,
    contrast_max: f64,
    patch_noise: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DataMeta {
    seed: u64,
    num_classes: usize,
    params: GenMeta,
    labels: Vec<usize>,
    /// `[x0, y0, x1, y1]` per box, per image.
    boxes: Vec<Vec<[f64; 4]>>,
}

/// Images as one `[N, 1, H, W]` array; labels and boxes in the manifest.
pub fn dataset_to_bytes(ds: &ToyDataset) -> RunResult<Vec<u8>> {
    let p = ds.params;
    let meta = DataMeta {
        seed: ds.seed,
        num_classes: ds.num_classes,
        params: GenMeta {
            size: p.size,
            background_min: p.background_min,
            background_max: p.background_max,
            noise_min: p.noise_min,
            noise_max: p.noise_max,
            contrast_min: p.contrast_min,
            contrast_max: p.contrast_max,
            patch_noise: p.patch_noise,
        },
        labels: ds.images.iter().map(|i| i.label).collect(),
        boxes: ds.images.iter().map(|i| i.boxes.iter().map(|b| [b.x0, b.y0, b.x1, b.y1]).collect()).collect(),
    };
    let mut c = Container::new(DATA_TAG, serde_json::to_value(meta).expect("meta"));
    let pixels: Vec<Tensor> = ds.images.iter().map(|i| i.pixels.clone()).collect();
    let images = if pixels.is_empty() { Tensor::zeros([0, 1, p.size, p.size]) } else { Tensor::stack(&pixels)? };
    c.push("images", &images);
    Ok(c.to_bytes())
}

pub fn dataset_from_bytes(bytes: &[u8]) -> RunResult<ToyDataset> {
    let c = Container::from_bytes(bytes, DATA_TAG)?;
    let meta: DataMeta = c.meta_as()?;
    let g = meta.params;
    let n = meta.labels.len();
    if meta.boxes.len() != n {
        return Err(malformed(DATA_TAG, "label and box counts differ"));
    }
    let images = c.get_shaped("images", &[n, 1, g.size, g.size])?;
    let images = meta
        .labels
        .iter()
        .zip(&meta.boxes)
        .enumerate()
        .map(|(i, (&label, bs))| LabeledImage {
            pixels: images.index_outer(i),
            label,
            boxes: bs.iter().map(|b| RoiBox { x0: b[0], y0: b[1], x1: b[2], y1: b[3] }).collect(),
        })
        .collect();
    Ok(ToyDataset {
        images,
        num_classes: meta.num_classes,
        params: GeneratorParams {
            size: g.size,
            background_min: g.background_min,
            background_max: g.background_max,
            noise_min: g.noise_min,
            noise_max: g.noise_max,
            contrast_min: g.contrast_min,
            contrast_max: g.contrast_max,
            patch_noise: g.patch_noise,
        },
        seed: meta.seed,
    })
}

