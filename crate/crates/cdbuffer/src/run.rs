//! Experiment pipelines behind the command-line verbs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cdbuffer_core::backbone::{evaluate_net, precompute_stats, train_source, SourceStats, ToyNet};
use cdbuffer_core::data::{corrupt_dataset, gen_dataset, ToyDataset};
use cdbuffer_core::discrepancy::{layer_aggregate, network_discrepancy};
use cdbuffer_core::engine::{make_stream, AdaptState, Coupling, Switches};

use crate::config::{hex, ExperimentConfig, KindConfig, SeedPlan, SwitchConfig};
use crate::error::{RunError, RunResult};
use crate::formats::{checkpoint_from_bytes, model_to_bytes, stats_from_bytes, stats_to_bytes};
use crate::report::{mean_layer_discrepancy, EvalRecord, RunReport, SeverityDiscrepancy, StepRecord, Summary, REPORT_SCHEMA};

/// Evaluation batch size.
pub const EVAL_BATCH: usize = 64;

/// Trained source model plus its statistics.
#[derive(Debug, Clone)]
pub struct SourceModel {
    pub net: ToyNet,
    pub stats: SourceStats,
}

pub fn source_train_set(cfg: &ExperimentConfig, seed: u64) -> RunResult<ToyDataset> {
    Ok(gen_dataset(cfg.source.train_size, SeedPlan::new(seed).train_data)?)
}

pub fn train_source_model(cfg: &ExperimentConfig, seed: u64) -> RunResult<SourceModel> {
    let plan = SeedPlan::new(seed);
    let data = source_train_set(cfg, seed)?;
    let init = ToyNet::new(cfg.net_config(), plan.model)?;
    let net = train_source(&init, &data, &cfg.train_config(plan.model))?;
    let stats = precompute_stats(&net, &data, cfg.source.stats_batch_size)?;
    Ok(SourceModel { net, stats })
}

/// Statistics of `net` on the configured source set.
pub fn source_stats(cfg: &ExperimentConfig, seed: u64, net: &ToyNet) -> RunResult<SourceStats> {
    Ok(precompute_stats(net, &source_train_set(cfg, seed)?, cfg.source.stats_batch_size)?)
}

fn source_key(cfg: &ExperimentConfig, seed: u64) -> String {
    let key = serde_json::json!({"net": cfg.net, "source": cfg.source, "seed": seed});
    let bytes = serde_json::to_vec(&key).expect("key serializes");
    use sha2::{Digest, Sha256};
    hex(&Sha256::digest(&bytes))[..16].to_string()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> RunResult<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Source model for `seed`, read from `dir` when present there and
/// trained (then stored) otherwise.
pub fn cached_source_model(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> RunResult<SourceModel> {
    let key = source_key(cfg, seed);
    let model_path = dir.join(format!("source-{key}.cdckpt"));
    let stats_path = dir.join(format!("source-{key}.cdstats"));
    if let (Ok(m), Ok(s)) = (fs::read(&model_path), fs::read(&stats_path)) {
        if let (Ok(ck), Ok(stats)) = (checkpoint_from_bytes(&m), stats_from_bytes(&s)) {
            let net = ck.into_net();
            if stats.network_hash == net.fingerprint() {
                return Ok(SourceModel { net, stats });
            }
        }
    }
    let sm = train_source_model(cfg, seed)?;
    fs::create_dir_all(dir)?;
    write_atomic(&model_path, &model_to_bytes(&sm.net))?;
    write_atomic(&stats_path, &stats_to_bytes(&sm.stats))?;
    Ok(sm)
}

/// Clean target base for `seed`, corrupted as requested.
pub fn target_set(cfg: &ExperimentConfig, seed: u64, kind: KindConfig, severity: f64) -> RunResult<ToyDataset> {
    let plan = SeedPlan::new(seed);
    let base = gen_dataset(cfg.eval_size, plan.test_data)?;
    Ok(corrupt_dataset(&base, kind.into(), severity, plan.corruption)?)
}

/// Network discrepancy of the unadapted model on `ds`: per batch of
/// `batch_size`, the layer mean of each layer's channel-mean discrepancy;
/// averaged over full batches.
pub fn dataset_discrepancy(cfg: &ExperimentConfig, src: &SourceModel, ds: &ToyDataset, batch_size: usize) -> RunResult<f64> {
    let dcfg = cfg.adapt_config(0).discrepancy;
    let (mut total, mut n) = (0.0, 0usize);
    for batch in ds.batches(batch_size) {
        let batch = batch?;
        if batch.len() < batch_size {
            continue;
        }
        let (_, taps) = src.net.forward_with_taps(&batch.images, None)?;
        let per = network_discrepancy(&taps, &batch.boxes, src.net.config.input_size, &src.stats.layers, dcfg)?;
        let layer: Vec<f64> = per.iter().map(|d| layer_aggregate(&d.combined)).collect::<Result<_, _>>()?;
        total += layer.iter().sum::<f64>() / layer.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(RunError::Config(format!("{} images cannot fill a batch of {batch_size}", ds.len())));
    }
    Ok(total / n as f64)
}

/// Adaptation outcome on one target set.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub direct_accuracy: f64,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub final_accuracy: f64,
    pub state: AdaptState,
}

/// Streams `cfg.steps` batches of `target` through a fresh state, evaluating
/// on `target` every `eval_every` steps and always after the last one.
pub fn adapt_on(cfg: &ExperimentConfig, seed: u64, src: &SourceModel, target: &ToyDataset) -> RunResult<AdaptOutcome> {
    if src.stats.network_hash != src.net.fingerprint() {
        return Err(RunError::Config("statistics were computed for a different network".into()));
    }
    let direct_accuracy = evaluate_net(&src.net, target, EVAL_BATCH)?;
    let mut state = AdaptState::new(src.net.clone(), cfg.adapt_config(SeedPlan::new(seed).adapt))?;
    let stream = make_stream(target, cfg.hyper.batch_size, cfg.steps)?;
    let reports = state.adapt_stream(&stream, &src.stats, Some(target), cfg.eval_every, 0)?;
    let mut steps: Vec<StepRecord> = reports.iter().map(StepRecord::from).collect();
    let mut evals: Vec<EvalRecord> =
        steps.iter().filter_map(|s| s.accuracy.map(|a| EvalRecord { after_steps: s.step + 1, accuracy: a })).collect();
    let final_accuracy = match (steps.last_mut(), evals.last()) {
        (None, _) => direct_accuracy,
        (Some(last), Some(e)) if e.after_steps == last.step + 1 => e.accuracy,
        (Some(last), _) => {
            let a = state.evaluate(target)?;
            last.accuracy = Some(a);
            evals.push(EvalRecord { after_steps: last.step + 1, accuracy: a });
            a
        }
    };
    Ok(AdaptOutcome { direct_accuracy, steps, evals, final_accuracy, state })
}

fn summary(cfg: &ExperimentConfig, out: &AdaptOutcome) -> Summary {
    let mut hist = BTreeMap::new();
    for s in &out.steps {
        *hist.entry(s.suppressed).or_insert(0) += 1;
    }
    let mean_discrepancy = if out.steps.is_empty() {
        Vec::new()
    } else {
        vec![SeverityDiscrepancy {
            kind: cfg.corruption.kind.name().into(),
            severity: cfg.corruption.severity,
            mean_discrepancy: out.steps.iter().map(mean_layer_discrepancy).sum::<f64>() / out.steps.len() as f64,
        }]
    };
    Summary {
        direct_accuracy: out.direct_accuracy,
        final_accuracy: out.final_accuracy,
        best_accuracy: out.evals.iter().map(|e| e.accuracy).fold(out.direct_accuracy, f64::max),
        mean_discrepancy,
        suppressed_histogram: hist,
    }
}

/// One adaptation run on the configured corruption, packaged as a report.
pub fn run_adapt(cfg: &ExperimentConfig, src: &SourceModel, timing: bool) -> RunResult<(RunReport, AdaptState)> {
    cfg.validate()?;
    let t0 = Instant::now();
    let target = target_set(cfg, cfg.seed, cfg.corruption.kind, cfg.corruption.severity)?;
    let out = adapt_on(cfg, cfg.seed, src, &target)?;
    let report = RunReport {
        schema: REPORT_SCHEMA.into(),
        command: "adapt".into(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seeds: SeedPlan::new(cfg.seed),
        model_hash: hex(&src.net.fingerprint()),
        summary: summary(cfg, &out),
        steps: out.steps,
        evals: out.evals,
        wall_clock_ms: timing.then(|| t0.elapsed().as_millis() as u64),
    };
    Ok((report, out.state))
}

// ── ablation ─────────────────────────────────────────────────────────

const fn sw(mask_loss: bool, subtractive: bool, additive: bool, grad_scaling: bool) -> Switches {
    Switches { mask_loss, subtractive, additive, grad_scaling, coupling: Coupling::Inverse }
}

/// Component combinations: the seven rows of the component ablation
/// (BN affine always on), then the two single-buffer variants and the
/// uncoupled parallel combination.
pub const ABLATION_ROWS: [(&str, Switches); 10] = [
    ("bn_only", sw(false, false, false, false)),
    ("sub", sw(false, true, false, false)),
    ("mask_loss+sub", sw(true, true, false, false)),
    ("mask_loss+add", sw(true, false, true, false)),
    ("mask_loss+sub+add", sw(true, true, true, false)),
    ("sub+add+grad_scaling", sw(false, true, true, true)),
    ("full", Switches::FULL),
    ("additive_only", Switches::ADDITIVE_ONLY),
    ("subtractive_only", Switches::SUBTRACTIVE_ONLY),
    ("parallel", Switches::PARALLEL),
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub switches: Switches,
    pub config_hash: String,
    pub direct_accuracy: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
}

pub fn run_ablation(cfg: &ExperimentConfig, src: &SourceModel) -> RunResult<Vec<AblationRow>> {
    cfg.validate()?;
    let target = target_set(cfg, cfg.seed, cfg.corruption.kind, cfg.corruption.severity)?;
    ABLATION_ROWS
        .iter()
        .map(|&(name, switches)| {
            let c = ExperimentConfig { switches: switches.into(), ..cfg.clone() };
            let out = adapt_on(&c, c.seed, src, &target)?;
            let best = out.evals.iter().map(|e| e.accuracy).fold(out.direct_accuracy, f64::max);
            Ok(AblationRow {
                name,
                switches,
                config_hash: c.hash(),
                direct_accuracy: out.direct_accuracy,
                final_accuracy: out.final_accuracy,
                best_accuracy: best,
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: std::io::Write>(out: W, rows: &[AblationRow]) -> RunResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "row", "mask_loss", "subtractive", "additive", "grad_scaling", "coupling", "config_hash", "direct_accuracy",
        "final_accuracy", "best_accuracy",
    ])?;
    for r in rows {
        let s = r.switches;
        let b = |x: bool| if x { "1" } else { "0" }.to_string();
        w.write_record([
            r.name.to_string(),
            b(s.mask_loss),
            b(s.subtractive),
            b(s.additive),
            b(s.grad_scaling),
            if s.coupling == Coupling::Inverse { "inverse" } else { "constant" }.to_string(),
            r.config_hash.clone(),
            r.direct_accuracy.to_string(),
            r.final_accuracy.to_string(),
            r.best_accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ── severity sweep ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Direct,
    AdditiveOnly,
    SubtractiveOnly,
    Parallel,
    Full,
}

impl Method {
    pub const ALL: [Method; 5] = [Self::Direct, Self::AdditiveOnly, Self::SubtractiveOnly, Self::Parallel, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::AdditiveOnly => "additive_only",
            Self::SubtractiveOnly => "subtractive_only",
            Self::Parallel => "parallel",
            Self::Full => "full",
        }
    }

    pub fn switches(self) -> Option<Switches> {
        match self {
            Self::Direct => None,
            Self::AdditiveOnly => Some(Switches::ADDITIVE_ONLY),
            Self::SubtractiveOnly => Some(Switches::SUBTRACTIVE_ONLY),
            Self::Parallel => Some(Switches::PARALLEL),
            Self::Full => Some(Switches::FULL),
        }
    }
}

/// Final accuracy of `method` for one seed on one target set.
pub fn method_accuracy(cfg: &ExperimentConfig, seed: u64, src: &SourceModel, target: &ToyDataset, method: Method) -> RunResult<f64> {
    match method.switches() {
        None => Ok(evaluate_net(&src.net, target, EVAL_BATCH)?),
        Some(s) => {
            let c = ExperimentConfig { switches: SwitchConfig::from(s), ..cfg.clone() };
            Ok(adapt_on(&c, seed, src, target)?.final_accuracy)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kind: KindConfig,
    pub severity: f64,
    pub method: Method,
    /// One accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
}

impl SweepRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }
}

/// Every `(kind, severity, method)` cell over every seed, sorted by cell key.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    methods: &[Method],
    mut source: impl FnMut(u64) -> RunResult<SourceModel>,
) -> RunResult<Vec<SweepRow>> {
    cfg.validate()?;
    let mut kinds = cfg.kinds.clone();
    kinds.sort();
    kinds.dedup();
    let mut sevs = cfg.severities.clone();
    sevs.sort_by(f64::total_cmp);
    sevs.dedup();
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let mut rows: Vec<SweepRow> = Vec::new();
    for &kind in &kinds {
        for &severity in &sevs {
            for &method in &methods {
                rows.push(SweepRow { kind, severity, method, accuracies: Vec::new() });
            }
        }
    }
    for seed in cfg.seeds() {
        let src = source(seed)?;
        let mut i = 0;
        for &kind in &kinds {
            for &severity in &sevs {
                let target = target_set(cfg, seed, kind, severity)?;
                for &method in &methods {
                    rows[i].accuracies.push(method_accuracy(cfg, seed, &src, &target, method)?);
                    i += 1;
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: std::io::Write>(out: W, seeds: &[u64], rows: &[SweepRow]) -> RunResult<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut head: Vec<String> = ["kind", "severity", "method"].map(String::from).to_vec();
    head.extend(seeds.iter().map(|s| format!("seed_{s}")));
    head.push("mean".into());
    w.write_record(&head)?;
    for r in rows {
        let mut rec = vec![r.kind.name().to_string(), r.severity.to_string(), r.method.name().to_string()];
        rec.extend(r.accuracies.iter().map(f64::to_string));
        rec.push(r.mean().to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Directory for cached source models when none is given.
pub fn default_cache_dir() -> PathBuf {
    std::env::temp_dir().join("cdbuffer-cache")
}
