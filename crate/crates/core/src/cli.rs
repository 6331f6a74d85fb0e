//! Command-line front end: dataset synthesis, training, evaluation, sweeps
//! and map/feature export.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{load_bundle, save_bundle, synth_generate, DatasetBundle, ModelConfig, SynthSpec, Variant};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::export::{export_features, write_tensor, ArraySidecar, FeatureKind, MapEntry, MapsSidecar};
use crate::model::InputShape;
use crate::rfm::RegionMasks;
use crate::trainer::{continue_fit, load_checkpoint, save_checkpoint, save_checkpoint_with, EpochRecord, Metrics, TrainState};
use crate::vsd::{attention_maps, fuse_maps};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

const RUN_FILE: &str = "run.json";
const CONFIG_FILE: &str = "config.json";
const HISTORY_FILE: &str = "history.json";
const METRICS_FILE: &str = "metrics.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
const EVAL_BATCH: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "mgmrn", version, about = "Multi-granularity zero-shot learning on attribute datasets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic attribute dataset.
    Synth(SynthArgs),
    /// Train a model and save its best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test splits.
    Eval(EvalArgs),
    /// Write fused attention maps and region masks for chosen images.
    Visualize(VisualizeArgs),
    /// Write per-item features for external projection tools.
    Export(ExportArgs),
    /// Train over a grid of stage and region counts and report the trend.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub seen: usize,
    #[arg(long, default_value_t = 16)]
    pub attrs: usize,
    #[arg(long, default_value_t = 80)]
    pub per_class: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 32)]
    pub word_dim: usize,
    #[arg(long, env = "MGMRN_SEED", default_value_t = 7)]
    pub seed: u64,
}

/// Model and optimizer overrides. Unset flags fall back to the config file,
/// then to built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON file with any subset of the model configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "MGMRN_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of granularity levels.
    #[arg(long = "L")]
    pub stages: Option<usize>,
    /// Region prototypes per level.
    #[arg(long)]
    pub np: Option<usize>,
    /// Common token grid, `HxW` or a single side length.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<[usize; 2]>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub dmodel: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Temperature of the cosine cross-entropy.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda_sce: Option<f64>,
    #[arg(long)]
    pub lambda_ar: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint until `--epochs` epochs have run in total.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Czsl,
    Gzsl,
    Ausuc,
    Errors,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalMode::Gzsl)]
    pub mode: EvalMode,
    #[arg(long, default_value_t = EVAL_BATCH)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset image indices, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub items: Vec<usize>,
    /// Attribute names, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub attrs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    Semantic,
    Visual,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ExportKind::Semantic)]
    pub kind: ExportKind,
    #[arg(long, default_value_t = EVAL_BATCH)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Granularity levels to try.
    #[arg(long = "stages", value_delimiter = ',', default_value = "1,2,3")]
    pub stage_list: Vec<usize>,
    /// Region prototype counts to try.
    #[arg(long = "parts", value_delimiter = ',', default_value = "1,3,5,7")]
    pub part_list: Vec<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

fn parse_grid(s: &str) -> std::result::Result<[usize; 2], String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad grid {s:?}: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok([parse(h)?, parse(w)?]),
        None => {
            let n = parse(s)?;
            Ok([n, n])
        }
    }
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Exit status for an error: configuration mistakes are usage errors,
/// everything else aborts at runtime.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownAttribute(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

impl ConfigArgs {
    /// Effective configuration: flags over the config file over defaults.
    /// The word dimension follows the dataset unless the file pins it.
    pub fn resolve(&self, word_dim: usize) -> Result<ModelConfig> {
        let mut value = serde_json::to_value(ModelConfig::default())?;
        let mut pinned_word_dim = false;
        if let Some(path) = &self.config {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let file: serde_json::Value =
                serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let obj = file
                .as_object()
                .ok_or_else(|| Error::Config(format!("{} must hold a JSON object", path.display())))?;
            pinned_word_dim = obj.contains_key("word_dim");
            for (k, v) in obj {
                value[k] = v.clone();
            }
        }
        let mut c: ModelConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        if !pinned_word_dim {
            c.word_dim = word_dim;
        }
        if self.stages.is_some() || self.np.is_some() {
            let stages = self.stages.unwrap_or(c.num_stages);
            let parts = self.np.unwrap_or_else(|| c.parts_per_stage.first().copied().unwrap_or(3));
            let widths = c.backbone_widths.clone();
            c = c.with_stages(stages, parts);
            if widths.len() == stages {
                c.backbone_widths = widths;
            }
        }
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.epochs, self.epochs);
        set(&mut c.common_channels, self.channels);
        set(&mut c.decoder_dim, self.dmodel);
        set(&mut c.heads, self.heads);
        set(&mut c.batch_size, self.batch);
        set(&mut c.eval_every, self.eval_every);
        let setf = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        setf(&mut c.learning_rate, self.lr);
        setf(&mut c.momentum, self.momentum);
        setf(&mut c.weight_decay, self.wd);
        setf(&mut c.sce_temperature, self.tau);
        setf(&mut c.lambda_sce, self.lambda_sce);
        setf(&mut c.lambda_ar, self.lambda_ar);
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(g) = self.grid {
            c.common_grid = Some(g);
        }
        if let Some(v) = self.variant {
            c.variant = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

/// Written to `run.json` before any heavy work and updated on exit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, enough to rerun.
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub dataset_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    fn start(command: &str, out: &Path, dataset: Option<&Path>, config: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let m = Self {
            command: command.into(),
            args: std::env::args().collect(),
            config_path: config.map(Path::to_path_buf),
            dataset_path: dataset.map(Path::to_path_buf),
            output_dir: out.to_path_buf(),
            seed,
            started_unix: unix_now(),
            finished_unix: None,
            status: RunStatus::Running,
            error: None,
        };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> Result<()> {
        write_json(self.output_dir.join(RUN_FILE), self)
    }

    fn finish<T>(mut self, result: Result<T>) -> Result<T> {
        self.finished_unix = Some(unix_now());
        self.status = if result.is_ok() { RunStatus::Succeeded } else { RunStatus::Failed };
        self.error = result.as_ref().err().map(ToString::to_string);
        self.write()?;
        result
    }
}

fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Visualize(a) => cmd_visualize(&a),
        Command::Export(a) => cmd_export(&a),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        num_classes: a.classes,
        num_seen: a.seen,
        d_s: a.attrs,
        images_per_class: a.per_class,
        image_size: a.size,
        seed: a.seed,
        word_dim: a.word_dim,
    };
    let run = RunManifest::start("synth", &a.out, None, None, Some(a.seed))?;
    let result = (|| {
        let bundle = synth_generate(&spec)?;
        save_bundle(&bundle, &a.out)?;
        write_json(a.out.join("synth_spec.json"), &spec)?;
        let manifest = std::fs::read(a.out.join(crate::datamodel::MANIFEST_FILE)).map_err(|e| Error::io(&a.out, e))?;
        println!("{}", bundle.stats());
        println!("manifest sha256 {}", sha256_hex(&manifest));
        Ok(())
    })();
    run.finish(result)
}

/// Outcome of a training run, as written to `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    /// Metrics after the last epoch, if any epoch ran.
    pub last: Option<Metrics>,
    /// Epoch and metrics of the saved best checkpoint.
    pub best_epoch: Option<usize>,
    pub best: Option<Metrics>,
}

fn fmt_metrics(m: &Metrics) -> String {
    format!("T1 {:.4} U {:.4} S {:.4} H {:.4}", m.t1, m.u, m.s, m.h)
}

fn print_epoch(r: &EpochRecord) {
    match &r.metrics {
        Some(m) => println!("epoch {:>3} loss {:.5} {}", r.epoch, r.loss.total, fmt_metrics(m)),
        None => println!("epoch {:>3} loss {:.5}", r.epoch, r.loss.total),
    }
}

fn check_compatible(state: &TrainState, bundle: &DatasetBundle) -> Result<()> {
    let (want, have) = (state.model.input_shape(), InputShape::of(bundle));
    if want.num_attributes != have.num_attributes {
        return Err(Error::Config(format!(
            "checkpoint predicts {} attributes but the dataset has {}",
            want.num_attributes, have.num_attributes
        )));
    }
    if want != have {
        return Err(Error::Config(format!("checkpoint expects input {want:?}, dataset provides {have:?}")));
    }
    Ok(())
}

/// Trains into `out` and returns the summary. Shared by `train` and `sweep`.
fn train_into(config: &ModelConfig, bundle: &DatasetBundle, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let state = match resume {
        Some(p) => {
            let s = load_checkpoint(p)?;
            check_compatible(&s, bundle)?;
            s
        }
        None => TrainState::new(config, InputShape::of(bundle))?,
    };
    write_json(out.join(CONFIG_FILE), state.config())?;
    let epochs = if resume.is_some() { config.epochs.max(state.epoch) } else { config.epochs };
    let outcome = continue_fit(state, bundle, epochs, &mut print_epoch)?;
    let state = &outcome.state;
    write_json(out.join(HISTORY_FILE), &state.history)?;
    save_checkpoint(state, out.join(LAST_CHECKPOINT))?;
    match &outcome.best {
        Some((epoch, params, _)) => save_checkpoint_with(state, params, *epoch, out.join(BEST_CHECKPOINT))?,
        None => save_checkpoint(state, out.join(BEST_CHECKPOINT))?,
    }
    let summary = TrainSummary {
        epochs: state.epoch,
        last: state.history.last().and_then(|r| r.metrics),
        best_epoch: outcome.best.as_ref().map(|b| b.0),
        best: outcome.best.as_ref().map(|b| b.2),
    };
    write_json(out.join(METRICS_FILE), &summary)?;
    Ok(summary)
}

fn describe(c: &ModelConfig) -> String {
    format!(
        "variant {:?} L={} N_p={:?} widths {:?} grid {:?} C={} d_model={} heads {} lr {} momentum {} wd {} batch {} tau {} epochs {} seed {}",
        c.variant,
        c.num_stages,
        c.parts_per_stage,
        c.backbone_widths,
        c.common_grid,
        c.common_channels,
        c.decoder_dim,
        c.heads,
        c.learning_rate,
        c.momentum,
        c.weight_decay,
        c.batch_size,
        c.sce_temperature,
        c.epochs,
        c.seed
    )
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainSummary> {
    let bundle = load_bundle(&a.data)?;
    let config = a.config.resolve(bundle.attribute_space.word_dim())?;
    let run = RunManifest::start("train", &a.out, Some(&a.data), a.config.config.as_deref(), Some(config.seed))?;
    println!("config: {}", describe(&config));
    let result = train_into(&config, &bundle, &a.out, a.resume.as_deref());
    if let Ok(s) = &result {
        match &s.last {
            Some(m) => println!("final {}", fmt_metrics(m)),
            None => println!("final: no epochs run"),
        }
        if let (Some(e), Some(m)) = (s.best_epoch, &s.best) {
            println!("best epoch {e} {}", fmt_metrics(m));
        }
    }
    run.finish(result)
}

#[derive(Serialize)]
struct EvalFile<'a> {
    mode: EvalMode,
    checkpoint: &'a Path,
    epoch: usize,
    report: &'a EvalReport,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let run = RunManifest::start("eval", &a.out, Some(&a.data), None, None)?;
    let result = (|| {
        let bundle = load_bundle(&a.data)?;
        let state = load_checkpoint(&a.checkpoint)?;
        check_compatible(&state, &bundle)?;
        let opts = EvalOptions { ausuc: a.mode == EvalMode::Ausuc, errors: a.mode == EvalMode::Errors };
        let report = evaluate(&state.model, &state.params, &bundle, a.batch.max(1), opts)?;
        let name = format!("eval_{}.json", serde_json::to_value(a.mode)?.as_str().unwrap_or("report"));
        write_json(
            a.out.join(name),
            &EvalFile { mode: a.mode, checkpoint: &a.checkpoint, epoch: state.epoch, report: &report },
        )?;
        match a.mode {
            EvalMode::Czsl => println!("T1 {:.4}", report.t1),
            EvalMode::Gzsl => println!("U {:.4} S {:.4} H {:.4}", report.u, report.s, report.h),
            EvalMode::Ausuc => {
                let path = a.out.join("ausuc_curve.csv");
                std::fs::write(&path, report.curve_csv()).map_err(|e| Error::io(&path, e))?;
                println!("AUSUC {:.4} over {} points", report.ausuc.unwrap_or(0.0), report.curve.len());
            }
            EvalMode::Errors => {
                if let Some(e) = &report.errors {
                    println!(
                        "error seen {:.4} +- {:.4} unseen {:.4} +- {:.4}",
                        e.seen.mean, e.seen.std, e.unseen.mean, e.unseen.std
                    );
                }
            }
        }
        Ok(report)
    })();
    run.finish(result)
}

pub const MAPS_FILE: &str = "attention_maps.json";

pub fn cmd_visualize(a: &VisualizeArgs) -> Result<()> {
    let run = RunManifest::start("visualize", &a.out, Some(&a.data), None, None)?;
    let result = (|| {
        let bundle = load_bundle(&a.data)?;
        let state = load_checkpoint(&a.checkpoint)?;
        check_compatible(&state, &bundle)?;
        let space = &bundle.attribute_space;
        let attrs: Vec<usize> = a.attrs.iter().map(|n| space.attribute_index(n)).collect::<Result<_>>()?;
        if let Some(&bad) = a.items.iter().find(|&&i| i >= bundle.num_images()) {
            return Err(Error::Config(format!("item {bad} is out of range ({} images)", bundle.num_images())));
        }
        let inf = state.model.infer(&state.params, &bundle.batch(&a.items), &space.word_vectors)?;
        let grid = state.model.grid();
        let stage_maps = inf.attention.iter().map(|att| attention_maps(att, grid)).collect::<Result<Vec<_>>>()?;
        let (h, w) = bundle.image_hw();
        let fused = fuse_maps(&stage_maps, (h, w))?;

        let labels = bundle.labels_of(&a.items);
        let ds = space.num_attributes();
        let mut side = MapsSidecar::new([h, w]);
        for (row, &item) in a.items.iter().enumerate() {
            for (&k, name) in attrs.iter().zip(&a.attrs) {
                let plane = &fused.data()[(row * ds + k) * h * w..(row * ds + k + 1) * h * w];
                let entry = MapEntry {
                    file: format!("attn_item{item}_{name}.bin"),
                    item,
                    label: labels[row],
                    attribute: name.clone(),
                    attribute_index: k,
                };
                side.push_map(&a.out, entry, plane)?;
            }
        }
        side.write(a.out.join(MAPS_FILE))?;

        let stages_dir = a.out.join("stages");
        std::fs::create_dir_all(&stages_dir).map_err(|e| Error::io(&stages_dir, e))?;
        for (l, maps) in stage_maps.iter().enumerate() {
            let picked = pick_attributes(maps, &attrs)?;
            let mut s = ArraySidecar::new("", "attention", picked.shape());
            s.items = a.items.clone();
            s.labels = labels.clone();
            s.attributes = a.attrs.clone();
            s.stage = Some(l);
            write_tensor(&stages_dir, &format!("attention_stage{l}"), &picked, s)?;
        }
        for (l, m) in inf.masks.iter().enumerate() {
            let masks = RegionMasks::from_nhwm(m)?.masks;
            let mut s = ArraySidecar::new("", "masks", masks.shape());
            s.items = a.items.clone();
            s.labels = labels.clone();
            s.stage = Some(l);
            write_tensor(&stages_dir, &format!("masks_stage{l}"), &masks, s)?;
        }
        println!("wrote {} maps of {h}x{w} to {}", side.maps.len(), a.out.display());
        Ok(())
    })();
    run.finish(result)
}

/// Keeps planes `attrs` of a `[b, d_s, h, w]` map stack.
fn pick_attributes(maps: &crate::tensor::Tensor, attrs: &[usize]) -> Result<crate::tensor::Tensor> {
    let (b, ds, h, w) = maps.dims4()?;
    let mut out = Vec::with_capacity(b * attrs.len() * h * w);
    for item in maps.data().chunks(ds * h * w) {
        for &k in attrs {
            out.extend_from_slice(&item[k * h * w..(k + 1) * h * w]);
        }
    }
    crate::tensor::Tensor::new(&[b, attrs.len(), h, w], out)
}

pub fn cmd_export(a: &ExportArgs) -> Result<()> {
    let run = RunManifest::start("export", &a.out, Some(&a.data), None, None)?;
    let result = (|| {
        let bundle = load_bundle(&a.data)?;
        let state = load_checkpoint(&a.checkpoint)?;
        check_compatible(&state, &bundle)?;
        let kind = match a.kind {
            ExportKind::Semantic => FeatureKind::Semantic,
            ExportKind::Visual => FeatureKind::Visual,
        };
        let side = export_features(&state.model, &state.params, &bundle, kind, a.batch, &a.out)?;
        println!("wrote {} rows of {} features to {}", side.shape[0], side.shape[1], a.out.display());
        Ok(())
    })();
    run.finish(result)
}

/// Shape of a metric sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "shape")]
pub enum Trend {
    /// Rises to an interior peak, then falls.
    RiseThenFall { peak: usize },
    Increasing,
    Decreasing,
    Flat,
    Irregular,
    /// Fewer than two values.
    TooShort,
}

/// Classifies `values`, treating steps no larger than `tol` as level.
pub fn classify_trend(values: &[f64], tol: f64) -> Trend {
    if values.len() < 2 {
        return Trend::TooShort;
    }
    let steps: Vec<i8> = values
        .windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            if d > tol {
                1
            } else if d < -tol {
                -1
            } else {
                0
            }
        })
        .collect();
    if steps.iter().all(|&s| s == 0) {
        return Trend::Flat;
    }
    if steps.iter().all(|&s| s >= 0) {
        return Trend::Increasing;
    }
    if steps.iter().all(|&s| s <= 0) {
        return Trend::Decreasing;
    }
    let peak = values.iter().enumerate().fold(0, |best, (i, &v)| if v > values[best] { i } else { best });
    let rises = steps[..peak].iter().all(|&s| s >= 0) && steps[..peak].contains(&1);
    let falls = steps[peak..].iter().all(|&s| s <= 0) && steps[peak..].contains(&-1);
    if rises && falls {
        Trend::RiseThenFall { peak }
    } else {
        Trend::Irregular
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub stages: usize,
    pub parts: usize,
    pub summary: TrainSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTrend {
    /// `stages` or `parts`: the axis varied.
    pub axis: String,
    /// Value of the other axis.
    pub fixed: usize,
    pub values: Vec<usize>,
    pub h: Vec<f64>,
    pub trend: Trend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub trends: Vec<SweepTrend>,
    /// Sequences that rise then fall.
    pub unimodal: usize,
}

/// Tolerance below which sweep H differences count as level.
pub const TREND_TOLERANCE: f64 = 0.005;

impl SweepReport {
    pub fn new(cells: Vec<SweepCell>, stages: &[usize], parts: &[usize]) -> Self {
        let h_of = |l: usize, p: usize| {
            cells
                .iter()
                .find(|c| c.stages == l && c.parts == p)
                .and_then(|c| c.summary.best.map(|m| m.h))
                .unwrap_or(0.0)
        };
        let mut trends = Vec::new();
        for &l in stages {
            let h: Vec<f64> = parts.iter().map(|&p| h_of(l, p)).collect();
            let trend = classify_trend(&h, TREND_TOLERANCE);
            trends.push(SweepTrend { axis: "parts".into(), fixed: l, values: parts.to_vec(), h, trend });
        }
        for &p in parts {
            let h: Vec<f64> = stages.iter().map(|&l| h_of(l, p)).collect();
            let trend = classify_trend(&h, TREND_TOLERANCE);
            trends.push(SweepTrend { axis: "stages".into(), fixed: p, values: stages.to_vec(), h, trend });
        }
        let unimodal = trends.iter().filter(|t| matches!(t.trend, Trend::RiseThenFall { .. })).count();
        Self { cells, trends, unimodal }
    }

    /// Plain-text table plus one line per trend.
    pub fn render(&self, stages: &[usize], parts: &[usize]) -> String {
        let mut out = String::from("best H by levels (rows) and region prototypes (columns)\n      ");
        for p in parts {
            out.push_str(&format!(" N_p={p:<3}"));
        }
        out.push('\n');
        for &l in stages {
            out.push_str(&format!("L={l:<3} "));
            for &p in parts {
                let h = self
                    .cells
                    .iter()
                    .find(|c| c.stages == l && c.parts == p)
                    .and_then(|c| c.summary.best.map(|m| m.h));
                match h {
                    Some(h) => out.push_str(&format!(" {h:<7.4}")),
                    None => out.push_str("   -    "),
                }
            }
            out.push('\n');
        }
        for t in &self.trends {
            let other = if t.axis == "parts" { "L" } else { "N_p" };
            let shape = match t.trend {
                Trend::RiseThenFall { peak } => format!("rises then falls, peak at {}", t.values[peak]),
                Trend::Increasing => "increasing".into(),
                Trend::Decreasing => "decreasing".into(),
                Trend::Flat => "flat".into(),
                Trend::Irregular => "irregular".into(),
                Trend::TooShort => "too few points".into(),
            };
            out.push_str(&format!("{other}={} varying {}: {shape}\n", t.fixed, t.axis));
        }
        out.push_str(&format!("{} of {} sequences rise then fall\n", self.unimodal, self.trends.len()));
        out
    }
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<SweepReport> {
    if a.config.stages.is_some() || a.config.np.is_some() {
        return Err(Error::Config("sweep takes --stages and --parts lists instead of --L and --np".into()));
    }
    if a.stage_list.is_empty() || a.part_list.is_empty() {
        return Err(Error::Config("sweep needs at least one level count and one prototype count".into()));
    }
    let bundle = load_bundle(&a.data)?;
    let base = a.config.resolve(bundle.attribute_space.word_dim())?;
    let run = RunManifest::start("sweep", &a.out, Some(&a.data), a.config.config.as_deref(), Some(base.seed))?;
    let result = (|| {
        let mut cells = Vec::new();
        for &l in &a.stage_list {
            for &p in &a.part_list {
                let mut config = base.clone().with_stages(l, p);
                config.common_grid = base.common_grid;
                config.validate()?;
                let dir = a.out.join(format!("L{l}_np{p}"));
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                println!("== L={l} N_p={p}");
                let summary = train_into(&config, &bundle, &dir, None)?;
                cells.push(SweepCell { stages: l, parts: p, summary });
            }
        }
        let report = SweepReport::new(cells, &a.stage_list, &a.part_list);
        write_json(a.out.join("sweep.json"), &report)?;
        let text = report.render(&a.stage_list, &a.part_list);
        let path = a.out.join("sweep_report.txt");
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        print!("{text}");
        Ok(report)
    })();
    run.finish(result)
}
