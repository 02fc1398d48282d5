use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cdbuffer::config::{
    CorruptionConfig, CouplingConfig, ExperimentConfig, KindConfig, MaskModeConfig, MetricConfig, NormalizationConfig,
};
use cdbuffer::formats::{
    checkpoint_from_bytes, dataset_to_bytes, model_to_bytes, state_to_bytes, stats_from_bytes, stats_to_bytes,
};
use cdbuffer::report::write_step_csv;
use cdbuffer::run::{
    cached_source_model, default_cache_dir, run_ablation, run_adapt, run_sweep, source_stats, target_set,
    train_source_model, write_ablation_csv, write_sweep_csv, Method, SourceModel,
};
use cdbuffer::{RunError, RunResult};

#[derive(Parser, Debug)]
#[command(name = "cdbuffer", version, about = "Discrepancy-driven channel buffers for test-time adaptation")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a source model and write model.cdckpt and source.cdstats.
    TrainSource {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        opts: Opts,
    },
    /// Recompute source statistics for a model.
    PrecomputeStats {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Opts,
    },
    /// Adapt on one corrupted target set; writes report.json and steps.csv.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write the adapted state as adapted.cdckpt.
        #[arg(long)]
        save_state: bool,
        /// Record wall-clock time in the report (breaks byte reproducibility).
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        opts: Opts,
    },
    /// Component ablation on one target set.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Opts,
    },
    /// Severity x method grid over one or more seeds.
    Sweep {
        #[arg(long)]
        out: PathBuf,
        /// Where trained source models are cached between runs.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[command(flatten)]
        opts: Opts,
    },
    /// Write a corrupted target set as a cddata-1 file.
    DumpDataset {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Opts,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Kind {
    GaussianNoise,
    BrightnessShift,
    BoxBlur,
    HazeMix,
}

impl From<Kind> for KindConfig {
    fn from(k: Kind) -> Self {
        match k {
            Kind::GaussianNoise => Self::GaussianNoise,
            Kind::BrightnessShift => Self::BrightnessShift,
            Kind::BoxBlur => Self::BoxBlur,
            Kind::HazeMix => Self::HazeMix,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MetricArg {
    L1,
    L2,
    Cosine,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum NormArg {
    UnitMean,
    SourceScale,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CouplingArg {
    Inverse,
    Constant,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MaskModeArg {
    Ste,
    Frozen,
}

/// Overrides on top of the defaults or a `--config` file.
#[derive(Args, Debug, Clone)]
struct Opts {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "CDBUF_SEED")]
    seed: Option<u64>,
    /// Number of consecutive seeds (sweep).
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    lambda_s: Option<f64>,
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    rho_target: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    no_mask_loss: bool,
    #[arg(long)]
    no_subtractive: bool,
    #[arg(long)]
    no_additive: bool,
    #[arg(long)]
    no_grad_scaling: bool,
    #[arg(long, value_enum)]
    coupling: Option<CouplingArg>,
    /// Per-stage buffer enable, e.g. `1,0`.
    #[arg(long, value_delimiter = ',')]
    stage_enable: Option<Vec<u8>>,
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    #[arg(long, value_enum)]
    normalization: Option<NormArg>,
    #[arg(long, value_enum)]
    mask_mode: Option<MaskModeArg>,
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    #[arg(long)]
    severity: Option<f64>,
    #[arg(long, value_enum, value_delimiter = ',')]
    kinds: Option<Vec<Kind>>,
    #[arg(long, value_delimiter = ',')]
    severities: Option<Vec<f64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_size: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    train_lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    blocks_per_stage: Option<usize>,
}

impl Opts {
    fn resolve(&self) -> RunResult<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_json(&read_text(p)?)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => { $(if let Some(v) = self.$src.clone() { $dst = v.into(); })* };
        }
        set! {
            seed => c.seed, seeds => c.num_seeds,
            lambda_reg => c.hyper.lambda_reg, lambda_s => c.hyper.lambda_s, lambda_a => c.hyper.lambda_a,
            rho_target => c.hyper.rho_target, lr => c.hyper.lr, batch_size => c.hyper.batch_size,
            k => c.hyper.k, r => c.hyper.r,
            steps => c.steps, eval_every => c.eval_every, eval_size => c.eval_size,
            train_size => c.source.train_size, epochs => c.source.epochs, train_lr => c.source.lr,
            widths => c.net.widths, blocks_per_stage => c.net.blocks_per_stage, severity => c.corruption.severity,
            severities => c.severities,
        }
        c.switches.mask_loss_on &= !self.no_mask_loss;
        c.switches.subtractive_on &= !self.no_subtractive;
        c.switches.additive_on &= !self.no_additive;
        c.switches.grad_scaling_on &= !self.no_grad_scaling;
        if let Some(x) = self.coupling {
            c.switches.coupling = match x {
                CouplingArg::Inverse => CouplingConfig::Inverse,
                CouplingArg::Constant => CouplingConfig::Constant,
            };
        }
        if let Some(v) = &self.stage_enable {
            c.stage_enable = v.iter().map(|&b| b != 0).collect();
        }
        if let Some(m) = self.metric {
            c.discrepancy.metric = match m {
                MetricArg::L1 => MetricConfig::L1,
                MetricArg::L2 => MetricConfig::L2,
                MetricArg::Cosine => MetricConfig::Cosine,
            };
        }
        if let Some(n) = self.normalization {
            c.discrepancy.normalization = match n {
                NormArg::UnitMean => NormalizationConfig::UnitMean,
                NormArg::SourceScale => NormalizationConfig::SourceScale,
            };
        }
        if let Some(m) = self.mask_mode {
            c.mask_mode = match m {
                MaskModeArg::Ste => MaskModeConfig::Ste,
                MaskModeArg::Frozen => MaskModeConfig::Frozen,
            };
        }
        if let Some(k) = self.kind {
            c.corruption = CorruptionConfig { kind: k.into(), ..c.corruption };
        }
        if let Some(ks) = &self.kinds {
            c.kinds = ks.iter().map(|&k| k.into()).collect();
        }
        c.validate()?;
        Ok(c)
    }
}

fn read_text(p: &Path) -> RunResult<String> {
    fs::read_to_string(p).map_err(|e| RunError::Io(format!("{}: {e}", p.display())))
}

fn read_bytes(p: &Path) -> RunResult<Vec<u8>> {
    fs::read(p).map_err(|e| RunError::Io(format!("{}: {e}", p.display())))
}

fn write(p: &Path, bytes: &[u8]) -> RunResult<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| RunError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(p, bytes).map_err(|e| RunError::Io(format!("{}: {e}", p.display())))
}

fn load_source(model: &Path, stats: &Path) -> RunResult<SourceModel> {
    let net = checkpoint_from_bytes(&read_bytes(model)?)?.into_net();
    let stats = stats_from_bytes(&read_bytes(stats)?)?;
    Ok(SourceModel { net, stats })
}

fn run(cli: Cli) -> RunResult<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.cmd {
        Cmd::TrainSource { out_dir, opts } => {
            let c = opts.resolve()?;
            let sm = train_source_model(&c, c.seed)?;
            write(&out_dir.join("model.cdckpt"), &model_to_bytes(&sm.net))?;
            write(&out_dir.join("source.cdstats"), &stats_to_bytes(&sm.stats))?;
            writeln!(stdout, "wrote {} and {}", out_dir.join("model.cdckpt").display(), out_dir.join("source.cdstats").display())?;
        }
        Cmd::PrecomputeStats { model, out, opts } => {
            let c = opts.resolve()?;
            let net = checkpoint_from_bytes(&read_bytes(&model)?)?.into_net();
            write(&out, &stats_to_bytes(&source_stats(&c, c.seed, &net)?))?;
            writeln!(stdout, "wrote {}", out.display())?;
        }
        Cmd::Adapt { model, stats, out_dir, save_state, timing, opts } => {
            let c = opts.resolve()?;
            let src = load_source(&model, &stats)?;
            let (report, state) = run_adapt(&c, &src, timing)?;
            write(&out_dir.join("report.json"), report.to_json().as_bytes())?;
            let mut csv = Vec::new();
            write_step_csv(&mut csv, &report.steps)?;
            write(&out_dir.join("steps.csv"), &csv)?;
            if save_state {
                write(&out_dir.join("adapted.cdckpt"), &state_to_bytes(&state))?;
            }
            let s = &report.summary;
            writeln!(stdout, "direct {:.4} final {:.4} best {:.4}", s.direct_accuracy, s.final_accuracy, s.best_accuracy)?;
        }
        Cmd::Ablate { model, stats, out, opts } => {
            let c = opts.resolve()?;
            let rows = run_ablation(&c, &load_source(&model, &stats)?)?;
            let mut buf = Vec::new();
            write_ablation_csv(&mut buf, &rows)?;
            write(&out, &buf)?;
            for r in &rows {
                writeln!(stdout, "{:<22} {:.4}", r.name, r.final_accuracy)?;
            }
        }
        Cmd::Sweep { out, cache_dir, opts } => {
            let c = opts.resolve()?;
            let dir = cache_dir.unwrap_or_else(default_cache_dir);
            let rows = run_sweep(&c, &Method::ALL, |s| cached_source_model(&c, s, &dir))?;
            let mut buf = Vec::new();
            write_sweep_csv(&mut buf, &c.seeds(), &rows)?;
            write(&out, &buf)?;
            writeln!(stdout, "wrote {} ({} rows)", out.display(), rows.len())?;
        }
        Cmd::DumpDataset { out, opts } => {
            let c = opts.resolve()?;
            let ds = target_set(&c, c.seed, c.corruption.kind, c.corruption.severity)?;
            write(&out, &dataset_to_bytes(&ds)?)?;
            writeln!(stdout, "wrote {} ({} images)", out.display(), ds.len())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
