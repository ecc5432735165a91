use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Deserialize;

use filter_core::dataset::{load_dataset, save_dataset, Dataset};
use filter_core::eval::{evaluate, export_overlay, metrics, score_dataset, MetricsReport};
use filter_core::global::Pooling;
use filter_core::gradcheck::{check_all, check_op, DEFAULT_POINTS, GRADCHECK_TOL};
use filter_core::model::{encode_group, FeatureSource};
use filter_core::simmat::{build_groups, similarity_matrix, write_heatmap, TokenLayout};
use filter_core::synth::{gen_synthetic, SynthConfig};
use filter_core::trainer::{epoch_checkpoint_path, holdout_split, load_checkpoint, train, TrainConfig};
use filter_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "filter",
    version,
    about = "Multi-face forgery detection head: train, evaluate and inspect"
)]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-face dataset (JSONL).
    Synth(SynthArgs),
    /// Train a model and write per-epoch checkpoints plus a CSV log.
    Train(TrainArgs),
    /// Score a dataset with a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Export the learned face-similarity heatmap of one group per epoch checkpoint.
    Heatmap(HeatmapArgs),
    /// Train the Full / No-SM / No-global / No-pull / No-push variants and compare.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    images: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Per-coordinate noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Angle between each fake direction and its scene direction (radians).
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_2)]
    theta: f64,
    #[arg(long = "fake-frac", default_value_t = 0.3)]
    fake_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    min_faces: usize,
    #[arg(long, default_value_t = 5)]
    max_faces: usize,
    /// Fewest real faces per image.
    #[arg(long, default_value_t = 2)]
    min_reals: usize,
    /// Frames per clip; > 1 emits track ids.
    #[arg(long, default_value_t = 1)]
    track_len: usize,
    #[arg(long, default_value = "img")]
    id_prefix: String,
    #[arg(long, default_value = "")]
    split_tag: String,
}

/// Training options. Every field may also come from a `--config` file of
/// `key = value` lines using the same names with underscores; flags win.
#[derive(Args, Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct TrainOpts {
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate (default 1e-4).
    #[arg(long)]
    lr: Option<f64>,
    /// Faces per similarity matrix (default 40).
    #[arg(long)]
    group_size: Option<usize>,
    /// Channels of the expanded similarity tensor (default 8).
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    /// Weight of the per-face loss (default 1).
    #[arg(long)]
    lambda_local: Option<f64>,
    /// Weight of the pull loss (default 4).
    #[arg(long)]
    lambda_pull: Option<f64>,
    /// Weight of the push loss (default 1).
    #[arg(long)]
    lambda_push: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_images: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Worker threads; 1 is fully deterministic, results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Held-out share of --data used for the epoch log when --val-data is absent.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Features fed to the pull/push losses: backbone or encoder.
    #[arg(long)]
    metric_input: Option<FeatureSource>,
    /// Features fed to the image-level branch: backbone or encoder.
    #[arg(long)]
    global_input: Option<FeatureSource>,
    /// Pooling of an image's faces in the image-level branch: mean or max.
    #[arg(long)]
    pooling: Option<Pooling>,
    /// Layout of similarity rows inside a face token: sorted or slot.
    #[arg(long)]
    token_layout: Option<TokenLayout>,
    /// Replace similarity-matrix tokens by a projection of the raw features.
    #[arg(long)]
    #[serde(default)]
    no_sm: bool,
    /// Drop the image-level loss.
    #[arg(long)]
    #[serde(default)]
    no_global: bool,
    /// Drop the pull loss.
    #[arg(long)]
    #[serde(default)]
    no_pull: bool,
    /// Drop the push loss.
    #[arg(long)]
    #[serde(default)]
    no_push: bool,
}

impl TrainOpts {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `self` overrides `base` wherever it is set.
    fn over(self, base: TrainOpts) -> TrainOpts {
        macro_rules! pick {
            ($($f:ident),*) => { TrainOpts { $($f: self.$f.or(base.$f),)* no_sm: self.no_sm || base.no_sm, no_global: self.no_global || base.no_global, no_pull: self.no_pull || base.no_pull, no_push: self.no_push || base.no_push } };
        }
        pick!(
            epochs,
            lr,
            group_size,
            channels,
            d_model,
            heads,
            d_ff,
            lambda_local,
            lambda_pull,
            lambda_push,
            seed,
            batch_images,
            clip_norm,
            threads,
            val_fraction,
            metric_input,
            global_input,
            pooling,
            token_layout
        )
    }

    fn to_config(&self, feature_dim: usize) -> TrainConfig {
        let mut c = TrainConfig::default();
        c.model.feature_dim = feature_dim;
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => { $(if let Some(v) = self.$src { c.$($dst).+ = v; })* };
        }
        set!(
            epochs => epochs, lr => adam.lr, group_size => model.group_size, channels => model.channels,
            d_model => model.d_model, heads => model.heads, d_ff => model.d_ff,
            lambda_local => objective.weights.local, lambda_pull => objective.weights.pull,
            lambda_push => objective.weights.push, seed => seed, batch_images => batch_images,
            clip_norm => clip_norm, threads => threads, val_fraction => val_fraction,
            metric_input => objective.metric_input, global_input => model.global_input,
            pooling => model.pooling, token_layout => model.token_layout,
        );
        c.model.no_sm = self.no_sm;
        c.objective.no_global = self.no_global;
        c.objective.no_pull = self.no_pull;
        c.objective.no_push = self.no_push;
        c
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation set for the epoch log (default: hold out part of --data).
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Final checkpoint; epoch checkpoints and the log are written next to it.
    #[arg(long)]
    out_ckpt: PathBuf,
    /// TOML file of key = value training options.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Also report track-level AUC/ACC (mean face score per track).
    #[arg(long)]
    track_level: bool,
    /// Write the scored dataset (JSONL) here.
    #[arg(long)]
    scores_out: Option<PathBuf>,
    /// Write one overlay JSON per image into this directory.
    #[arg(long)]
    overlay_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check only this operation.
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_POINTS)]
    points: usize,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    group_index: usize,
    /// Output prefix; `.epochNNN.pgm` / `.epochNNN.csv` are appended.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        num_images: a.images,
        min_faces: a.min_faces,
        max_faces: a.max_faces,
        fake_fraction: a.fake_frac,
        feature_dim: a.dim,
        sigma: a.sigma,
        theta: a.theta,
        min_reals: a.min_reals,
        track_len: a.track_len,
        id_prefix: a.id_prefix,
        split_tag: a.split_tag,
    };
    let ds = gen_synthetic(&cfg, a.seed)?;
    save_dataset(&ds, &a.out)?;
    info!(
        "wrote {} images / {} faces to {}",
        ds.images.len(),
        ds.num_faces(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn resolve_opts(config: Option<&Path>, flags: TrainOpts) -> Result<TrainOpts> {
    match config {
        Some(p) => Ok(flags.over(TrainOpts::load(p)?)),
        None => Ok(flags),
    }
}

fn train_val(data: &Path, val: Option<&Path>, cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let ds = load_dataset(data)?;
    match val {
        Some(v) => Ok((ds, load_dataset(v)?)),
        None => Ok(holdout_split(&ds, cfg.val_fraction, cfg.seed)),
    }
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let opts = resolve_opts(a.config.as_deref(), a.opts)?;
    let feature_dim = load_dataset(&a.data)?.feature_dim;
    let cfg = opts.to_config(feature_dim);
    let (tr, va) = train_val(&a.data, a.val_data.as_deref(), &cfg)?;
    if let Some(dir) = a.out_ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let out = train(&tr, &va, &cfg, Some(&a.out_ckpt))?;
    if let Some(last) = out.history.last() {
        info!(
            "done: val face AUC {:.4}, val image ACC {:.4}; checkpoint {}",
            last.val_face_auc,
            last.val_image_acc,
            a.out_ckpt.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn eval_cmd(a: EvalArgs) -> Result<ExitCode> {
    let ck = load_checkpoint(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    let scored = score_dataset(&ck.params, &ds)?;
    let report: MetricsReport = metrics(&scored, a.track_level)?;
    write_json(&report, &a.report)?;
    if let Some(p) = &a.scores_out {
        save_dataset(&scored, p)?;
    }
    if let Some(dir) = &a.overlay_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for im in &scored.images {
            export_overlay(im, dir.join(format!("{}.json", im.image_id)))?;
        }
    }
    println!(
        "{}",
        serde_json::to_string(&report).map_err(|e| Error::Invalid(e.to_string()))?
    );
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let summaries = match &a.op {
        Some(op) => vec![check_op(op, a.seed, a.points)?],
        None => check_all(a.seed, a.points)?,
    };
    let mut ok = true;
    for s in &summaries {
        println!(
            "{:<24} points {:>3}  max rel err {:.3e}  {}",
            s.op,
            s.points,
            s.max_rel_err,
            if s.passed { "ok" } else { "FAIL" }
        );
        ok &= s.passed;
    }
    if !ok {
        eprintln!("gradient check failed (tolerance {GRADCHECK_TOL:e})");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

/// The checkpoint itself plus any per-epoch siblings written by `train`.
fn epoch_checkpoints(ckpt: &Path) -> Vec<(Option<usize>, PathBuf)> {
    let found: Vec<(Option<usize>, PathBuf)> = (1..)
        .map(|e| (e, epoch_checkpoint_path(ckpt, e)))
        .take_while(|(_, p)| p.exists())
        .map(|(e, p)| (Some(e), p))
        .collect();
    if found.is_empty() {
        vec![(None, ckpt.to_path_buf())]
    } else {
        found
    }
}

fn heatmap(a: HeatmapArgs) -> Result<ExitCode> {
    let ds = load_dataset(&a.data)?;
    for (epoch, path) in epoch_checkpoints(&a.ckpt) {
        let ck = load_checkpoint(&path)?;
        let groups = build_groups(&ds.images, ck.params.config.group_size)?;
        let group = groups.get(a.group_index).ok_or_else(|| {
            Error::Invalid(format!(
                "group index {} out of range ({} groups)",
                a.group_index,
                groups.len()
            ))
        })?;
        let encoded = encode_group(&ck.params, group)?;
        let sim = similarity_matrix(&encoded, &group.mask)?;
        let tag = epoch.map_or_else(|| "final".to_string(), |e| format!("epoch{e:03}"));
        let prefix = PathBuf::from(format!("{}.{tag}", a.out.display()));
        let (pgm, csv) = write_heatmap(&sim, &prefix)?;
        info!("{} -> {}, {}", path.display(), pgm.display(), csv.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate(a: AblateArgs) -> Result<ExitCode> {
    let opts = resolve_opts(a.config.as_deref(), a.opts)?;
    let feature_dim = load_dataset(&a.data)?.feature_dim;
    let base = opts.to_config(feature_dim);
    let (tr, va) = train_val(&a.data, a.val_data.as_deref(), &base)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut rows = String::from("variant,face_auc,face_acc,image_auc,image_acc\n");
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    for (name, tweak) in ablation_rows() {
        let mut cfg = base.clone();
        tweak(&mut cfg);
        info!("training variant {name}");
        let ckpt = a.out.join(format!("{}.ckpt", name.to_lowercase()));
        let out = train(&tr, &va, &cfg, Some(&ckpt))?;
        let r = evaluate(&out.params, &va, false)?;
        if va.images.is_empty() {
            warn!("no validation images; metrics are empty");
        }
        rows.push_str(&format!(
            "{name},{},{:.6},{},{:.6}\n",
            fmt(r.face_auc),
            r.face_acc,
            fmt(r.image_auc),
            r.image_acc
        ));
    }
    let path = a.out.join("ablation.csv");
    fs::write(&path, &rows).map_err(|e| Error::io(&path, e))?;
    print!("{rows}");
    Ok(ExitCode::SUCCESS)
}

type Tweak = fn(&mut TrainConfig);

fn ablation_rows() -> [(&'static str, Tweak); 5] {
    [
        ("Full", |_| {}),
        ("No-SM", |c| c.model.no_sm = true),
        ("No-global", |c| c.objective.no_global = true),
        ("No-pull", |c| c.objective.no_pull = true),
        ("No-push", |c| c.objective.no_push = true),
    ]
}
