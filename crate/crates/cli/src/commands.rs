//! Implementations of the `icl` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use icl_core::eval::{
    boundary_mask, default_tolerance, edge_ap_at_recall, edge_pr_curve, edges_from_field, iterative_prompt_eval_with,
    PrSample,
};
use icl_core::field::encode_labels_as_colors;
use icl_core::io::{generate_dataset, load_labels, save_field, DatasetManifest};
use icl_core::loss::LossWeights;
use icl_core::net::{predict, tiny_net_config, train_tiny_net, TinyNet};
use icl_core::optim::{finite_difference_check, optimize_direct_field, random_check_case, OptimConfig, OptimizerKind};
use icl_core::prompt::DEFAULT_THRESHOLD;
use icl_core::scene::{FillMode, SceneSpec};

use crate::data::{load_entries, load_entry_field, save_entry_field};
use crate::service;

/// Gradient checks at or above this relative error fail.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural scene dataset with a manifest.
    GenScenes(GenScenes),
    /// Write ideal label-encoded color fields for every manifest entry.
    EncodeIdeal(EncodeIdeal),
    /// Optimize a color field directly against a label map.
    Optimize(Optimize),
    /// Train the tiny convolutional predictor on a dataset.
    Train(Train),
    /// Write predicted fields for every manifest entry from a checkpoint.
    Predict(Predict),
    /// Compare the analytic loss gradient with finite differences.
    Gradcheck(Gradcheck),
    /// Single-point and iterative prompting evaluation.
    EvalPrompt(EvalPrompt),
    /// Edge precision/recall and AP at low recall.
    EvalEdges(EvalEdges),
    /// Serve images, fields and prompt requests over HTTP.
    Serve(Serve),
}

impl Command {
    pub fn run(self) -> Result<()> {
        match self {
            Command::GenScenes(c) => c.run(),
            Command::EncodeIdeal(c) => c.run(),
            Command::Optimize(c) => c.run(),
            Command::Train(c) => c.run(),
            Command::Predict(c) => c.run(),
            Command::Gradcheck(c) => c.run(),
            Command::EvalPrompt(c) => c.run(),
            Command::EvalEdges(c) => c.run(),
            Command::Serve(c) => c.run(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Fill {
    Flat,
    TwoTone,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Optimizer {
    Adam,
    Gd,
}

impl From<Optimizer> for OptimizerKind {
    fn from(o: Optimizer) -> Self {
        match o {
            Optimizer::Adam => OptimizerKind::Adam,
            Optimizer::Gd => OptimizerKind::GradientDescent,
        }
    }
}

/// Loss component toggles shared by the training commands.
#[derive(Debug, Args)]
pub struct LossFlags {
    #[arg(long)]
    pub no_var: bool,
    #[arg(long)]
    pub no_sep: bool,
    #[arg(long)]
    pub no_mean: bool,
    #[arg(long, default_value_t = 300.0)]
    pub lambda_sep: f64,
    #[arg(long, default_value_t = 300.0)]
    pub lambda_mean: f64,
}

impl LossFlags {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_sep: self.lambda_sep,
            lambda_mean: self.lambda_mean,
            enable_var: !self.no_var,
            enable_sep: !self.no_sep,
            enable_mean: !self.no_mean,
            ..LossWeights::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct GenScenes {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 2)]
    pub min_shapes: usize,
    #[arg(long, default_value_t = 6)]
    pub max_shapes: usize,
    #[arg(long, value_enum, default_value = "flat")]
    pub fill: Fill,
}

impl GenScenes {
    fn run(self) -> Result<()> {
        let template = SceneSpec {
            width: self.width,
            height: self.height,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
            fill: match self.fill {
                Fill::Flat => FillMode::Flat,
                Fill::TwoTone => FillMode::TwoTone,
            },
            ..SceneSpec::default()
        };
        let manifest = generate_dataset(self.count, &template, self.seed, &self.out)?;
        println!("wrote {} scenes to {}", manifest.entries.len(), self.out.display());
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct EncodeIdeal {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl EncodeIdeal {
    fn run(self) -> Result<()> {
        let manifest = DatasetManifest::load(&self.manifest)?;
        for entry in load_entries(&manifest)? {
            let enc = encode_labels_as_colors(&entry.labels, self.seed);
            save_entry_field(&self.out, &entry.id, &enc.field)?;
        }
        println!("wrote {} fields to {}", manifest.entries.len(), self.out.display());
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Optimize {
    /// Label map PNG. The output is a field file.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub labels: Option<PathBuf>,
    /// Optimize every entry; the output is a fields directory.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.0)]
    pub lr: f64,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: Optimizer,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub loss: LossFlags,
}

impl Optimize {
    fn run(self) -> Result<()> {
        let config = OptimConfig {
            learning_rate: self.lr,
            iterations: self.iters,
            optimizer: self.optimizer.into(),
            seed: self.seed,
            ..OptimConfig::default()
        };
        let weights = self.loss.weights();
        if let Some(path) = &self.labels {
            let labels = load_labels(path)?.labels;
            let (field, trace) = optimize_direct_field(&labels, &weights, &config)?;
            save_field(&self.out, &field, true)?;
            report_trace(&path.display().to_string(), &trace);
            return Ok(());
        }
        let manifest_path = self.manifest.as_ref().expect("clap requires one of labels/manifest");
        let manifest = DatasetManifest::load(manifest_path)?;
        for entry in load_entries(&manifest)? {
            let (field, trace) = optimize_direct_field(&entry.labels, &weights, &config)
                .with_context(|| format!("optimizing {}", entry.id))?;
            save_entry_field(&self.out, &entry.id, &field)?;
            report_trace(&entry.id, &trace);
        }
        Ok(())
    }
}

fn report_trace(name: &str, trace: &icl_core::optim::TrainTrace) {
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!("{name}: total {:.6} -> {:.6} over {} iterations", first.total, last.total, trace.len());
    }
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = tiny_net_config().iterations)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = tiny_net_config().learning_rate)]
    pub lr: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub loss: LossFlags,
}

impl Train {
    fn run(self) -> Result<()> {
        let manifest = DatasetManifest::load(&self.manifest)?;
        let data: Vec<_> = load_entries(&manifest)?.into_iter().map(|e| (e.image, e.labels)).collect();
        let config = OptimConfig {
            learning_rate: self.lr,
            iterations: self.iters,
            seed: self.seed,
            ..tiny_net_config()
        };
        let (net, trace) = train_tiny_net(&data, &self.loss.weights(), &config)?;
        if let Some(parent) = self.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        net.save(&self.out)?;
        report_trace("train", &trace);
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Predict {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

impl Predict {
    fn run(self) -> Result<()> {
        let manifest = DatasetManifest::load(&self.manifest)?;
        let net = TinyNet::load(&self.checkpoint)?;
        for entry in load_entries(&manifest)? {
            save_entry_field(&self.out, &entry.id, &predict(&net, &entry.image))?;
        }
        println!("wrote {} fields to {}", manifest.entries.len(), self.out.display());
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct Gradcheck {
    /// Field size as WxH.
    #[arg(long, default_value = "4x4", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub instances: u32,
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
}

pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(w)?, parse(h)?))
}

impl Gradcheck {
    fn run(self) -> Result<()> {
        let (w, h) = self.size;
        let (field, labels) = random_check_case(w, h, self.instances, self.seed)?;
        let err = finite_difference_check(&field, &labels, &LossWeights::default(), self.epsilon)?;
        println!("{err:e}");
        if !(err < GRADCHECK_TOLERANCE) {
            bail!("max relative error {err:e} ≥ {GRADCHECK_TOLERANCE:e}");
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub struct PromptReport {
    pub clicks: usize,
    pub threshold: f64,
    pub instances: usize,
    /// Mean over all instances of all images, per click count.
    pub mean_iou: Vec<f64>,
    pub images: Vec<ImagePromptReport>,
}

#[derive(Debug, Serialize)]
pub struct ImagePromptReport {
    pub id: String,
    pub instances: usize,
    pub mean_iou: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct EvalPrompt {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub fields: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub clicks: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub report: PathBuf,
}

impl EvalPrompt {
    fn run(self) -> Result<()> {
        let manifest = DatasetManifest::load(&self.manifest)?;
        let report = evaluate_prompting(&manifest, self.fields.as_deref(), self.clicks, self.threshold)?;
        write_json(&self.report, &report)?;
        if let Some(first) = report.mean_iou.first() {
            println!("mean IoU @1 click: {first:.4} over {} instances", report.instances);
        }
        Ok(())
    }
}

pub fn evaluate_prompting(
    manifest: &DatasetManifest,
    fields: Option<&Path>,
    clicks: usize,
    threshold: f64,
) -> Result<PromptReport> {
    let mut sums = vec![0.0; clicks];
    let mut instances = 0;
    let mut images = Vec::new();
    for (entry, meta) in load_entries(manifest)?.into_iter().zip(&manifest.entries) {
        let field = load_entry_field(manifest, meta, fields)?;
        let eval = iterative_prompt_eval_with(&field, &entry.labels, clicks, threshold)
            .with_context(|| format!("evaluating {}", entry.id))?;
        for inst in &eval.instances {
            for (s, v) in sums.iter_mut().zip(&inst.iou) {
                *s += v;
            }
        }
        instances += eval.instances.len();
        info!("{}: {:?}", entry.id, eval.mean_iou);
        images.push(ImagePromptReport {
            id: entry.id,
            instances: eval.instances.len(),
            mean_iou: eval.mean_iou,
        });
    }
    let mean_iou = if instances == 0 {
        Vec::new()
    } else {
        sums.iter().map(|s| s / instances as f64).collect()
    };
    Ok(PromptReport {
        clicks,
        threshold,
        instances,
        mean_iou,
        images,
    })
}

#[derive(Debug, Serialize)]
pub struct EdgeReport {
    pub rmax: f64,
    pub tolerance_fraction: f64,
    /// Mean of the per-image AP values.
    pub mean_ap: f64,
    pub images: Vec<ImageEdgeReport>,
}

#[derive(Debug, Serialize)]
pub struct ImageEdgeReport {
    pub id: String,
    pub ap: f64,
    pub tolerance: f64,
    #[serde(skip)]
    pub samples: Vec<PrSample>,
}

#[derive(Debug, Args)]
pub struct EvalEdges {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub fields: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub rmax: f64,
    /// Matching tolerance as a fraction of the image diagonal.
    #[arg(long, default_value_t = 0.0075)]
    pub tolerance: f64,
    #[arg(long)]
    pub report: PathBuf,
    /// Also write every PR sample as CSV.
    #[arg(long)]
    pub pr_csv: Option<PathBuf>,
}

impl EvalEdges {
    fn run(self) -> Result<()> {
        if !(self.rmax > 0.0 && self.rmax <= 1.0) {
            bail!("--rmax must be in (0, 1], got {}", self.rmax);
        }
        let manifest = DatasetManifest::load(&self.manifest)?;
        let report = evaluate_edges(&manifest, self.fields.as_deref(), self.rmax, self.tolerance)?;
        write_json(&self.report, &report)?;
        if let Some(path) = &self.pr_csv {
            write_pr_csv(path, &report)?;
        }
        println!("mean AP (recall ≤ {}): {:.4}", self.rmax, report.mean_ap);
        Ok(())
    }
}

pub fn evaluate_edges(manifest: &DatasetManifest, fields: Option<&Path>, rmax: f64, tolerance_fraction: f64) -> Result<EdgeReport> {
    let mut images = Vec::new();
    for (entry, meta) in load_entries(manifest)?.into_iter().zip(&manifest.entries) {
        let field = load_entry_field(manifest, meta, fields)?;
        let (w, h) = (field.width(), field.height());
        let tolerance = default_tolerance(w, h) / 0.0075 * tolerance_fraction;
        let curve = edge_pr_curve(&edges_from_field(&field), &boundary_mask(&entry.labels), tolerance)?;
        images.push(ImageEdgeReport {
            id: entry.id,
            ap: edge_ap_at_recall(&curve, rmax),
            tolerance,
            samples: curve.samples,
        });
    }
    let mean_ap = if images.is_empty() {
        0.0
    } else {
        images.iter().map(|i| i.ap).sum::<f64>() / images.len() as f64
    };
    Ok(EdgeReport {
        rmax,
        tolerance_fraction,
        mean_ap,
        images,
    })
}

fn write_pr_csv(path: &Path, report: &EdgeReport) -> Result<()> {
    let mut out = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    out.write_record(["image", "threshold", "recall", "precision"])?;
    for img in &report.images {
        for s in &img.samples {
            out.write_record([img.id.clone(), s.threshold.to_string(), s.recall.to_string(), s.precision.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub fields: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Maximum concurrent prompt computations.
    #[arg(long)]
    pub workers: Option<usize>,
}

impl Serve {
    fn run(self) -> Result<()> {
        let manifest = DatasetManifest::load(&self.manifest)?;
        let workers = self
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let state = service::AppState::load(&manifest, self.fields.as_deref(), workers)?;
        let runtime = tokio::runtime::Runtime::new()?;
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::bind((self.host.as_str(), self.port))
                .await
                .with_context(|| format!("binding {}:{}", self.host, self.port))?;
            info!("listening on {}", listener.local_addr()?);
            axum::serve(listener, service::router(state)).await?;
            Ok(())
        })
    }
}
