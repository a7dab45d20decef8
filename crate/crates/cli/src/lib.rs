//! Command-line front end: `train`, `predict`, `eval` and `synth`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tinyobs::config::Config;
use tinyobs::dataset::{write_scenes, Dataset};
use tinyobs::eval::{ar_thresholds, default_budgets, summarize, RocCurve, Summary};
use tinyobs::layering::LayerPartition;
use tinyobs::occlusion::OcclusionEdgeMap;
use tinyobs::pipeline::{
    evaluate, median, predict, predict_from_occlusion, probability_from_scored, train, PipelineModel, Prediction, ScoredProposal, Strategies,
    TrainingReport,
};
use tinyobs::probmap::ProbabilityMap;
use tinyobs::proposals::Proposal;
use tinyobs::raster::{load_image, save_gray16, BBox, Raster};
use tinyobs::superpixel::SuperpixelLabels;
use tinyobs::synth::{generate, SceneSpec};
use tinyobs::{Error, Result};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "TINYOBS_CONFIG";

pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const INTERNAL: i32 = 3;
}

#[derive(Debug, Parser)]
#[command(name = "tinyobs", version, about = "Tiny road obstacle discovery from occlusion edges")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the number of layers K.
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Extra `key=value` config overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trains a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training report path (default: `<out>.report.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Writes probability maps and proposal lists for images.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        image: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also writes per-stage intermediate results.
        #[arg(long)]
        debug_dumps: bool,
        /// Resumes from an `occlusion.json` dump (single image).
        #[arg(long, conflicts_with = "resume_scored")]
        resume_occlusion: Option<PathBuf>,
        /// Resumes from a scored proposal CSV (single image).
        #[arg(long)]
        resume_scored: Option<PathBuf>,
    },
    /// Evaluates one or more models on an annotated dataset.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        model: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generates a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 320)]
        width: usize,
        #[arg(long, default_value_t = 240)]
        height: usize,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match execute(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Internal(_) => exit::INTERNAL,
        Error::Stage { source, .. } => exit_code(source),
        _ => exit::DATA,
    }
}

/// Defaults, then the config file, then flag overrides.
pub fn resolve_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(k) = common.layers {
        cfg.layers = k;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.common.jobs {
        if n == 0 {
            return Err(Error::Data("--jobs must be at least 1".into()));
        }
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::Train { data, out, report } => {
            let report_path = report.clone().unwrap_or_else(|| sibling(out, "report.json"));
            cmd_train(data, &cfg, out, &report_path).map(|_| ())
        }
        Command::Predict { model, image, out, debug_dumps, resume_occlusion, resume_scored } => {
            let model = PipelineModel::load(model)?;
            if resume_occlusion.is_some() || resume_scored.is_some() {
                let [img] = image.as_slice() else {
                    return Err(Error::Data("resuming works on exactly one image".into()));
                };
                return cmd_resume(&model, img, out, resume_occlusion.as_deref(), resume_scored.as_deref());
            }
            for img in image {
                cmd_predict(&model, img, out, *debug_dumps)?;
            }
            Ok(())
        }
        Command::Eval { model, data, out } => {
            let many = model.len() > 1;
            for m in model {
                let dir = if many { out.join(file_stem(m)) } else { out.clone() };
                cmd_eval(&PipelineModel::load(m)?, data, &dir)?;
            }
            Ok(())
        }
        Command::Synth { out, count, width, height } => cmd_synth(out, *count, *width, *height, cfg.seed),
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

fn sibling(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(p: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Internal(e.to_string()))?;
    write_text(p, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T> {
    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: p.to_path_buf(), message: e.to_string() })
}

pub fn cmd_train(data: &Path, cfg: &Config, out: &Path, report_path: &Path) -> Result<(PipelineModel, TrainingReport)> {
    let ds = Dataset::open(data)?;
    ds.require_ground_truth()?;
    log::info!("training K={} on {} images from {}", cfg.layers, ds.len(), data.display());
    let (model, report) = train(&ds, cfg)?;
    if !report.empty_layers.is_empty() {
        log::warn!(
            "layers {:?} received no training obstacles; {} of {} layers are distinct",
            report.empty_layers.iter().map(|k| k + 1).collect::<Vec<_>>(),
            report.effective_layers,
            report.layers
        );
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    model.save(out)?;
    write_json(report_path, &report)?;
    Ok((model, report))
}

/// One row of the proposal CSVs. `layer` is 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRow {
    pub image_id: String,
    pub layer: usize,
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
    pub objectness: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<f64>,
}

impl ProposalRow {
    fn new(id: &str, p: &Proposal, score: Option<f64>) -> Self {
        let b = p.bbox;
        Self { image_id: id.into(), layer: p.layer + 1, x: b.x, y: b.y, w: b.w, h: b.h, objectness: p.objectness, score }
    }

    fn proposal(&self) -> Result<Proposal> {
        if self.layer == 0 {
            return Err(Error::Data("proposal layers are numbered from 1".into()));
        }
        Ok(Proposal { bbox: BBox::new(self.x, self.y, self.w, self.h), objectness: self.objectness, layer: self.layer - 1 })
    }
}

fn csv_error(p: &Path, e: csv::Error) -> Error {
    Error::Format { path: p.to_path_buf(), message: e.to_string() }
}

pub fn write_rows(p: &Path, rows: &[ProposalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(p).map_err(|e| csv_error(p, e))?;
    if rows.is_empty() {
        w.write_record(["image_id", "layer", "x", "y", "w", "h", "objectness"]).map_err(|e| csv_error(p, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(p, e))?;
    }
    w.flush().map_err(|e| Error::io(p, e))
}

pub fn read_rows(p: &Path) -> Result<Vec<ProposalRow>> {
    let mut r = csv::Reader::from_path(p).map_err(|e| csv_error(p, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(p, e))).collect()
}

/// Resume point after occlusion classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionDump {
    pub partition: LayerPartition,
    pub occlusion: Vec<OcclusionEdgeMap>,
}

fn write_outputs(out: &Path, id: &str, probability: &ProbabilityMap, layer_proposals: Option<&[Vec<Proposal>]>, ranked: &[ScoredProposal]) -> Result<()> {
    create_dir(out)?;
    probability.save_png16(&out.join(format!("{id}.prob.png")))?;
    probability.save_false_color(&out.join(format!("{id}.prob.color.png")))?;
    if let Some(layers) = layer_proposals {
        let rows: Vec<_> = layers.iter().flatten().map(|p| ProposalRow::new(id, p, None)).collect();
        write_rows(&out.join(format!("{id}.proposals.csv")), &rows)?;
    }
    let rows: Vec<_> = ranked.iter().map(|s| ProposalRow::new(id, &s.proposal, Some(s.score))).collect();
    write_rows(&out.join(format!("{id}.scored.csv")), &rows)
}

pub fn cmd_predict(model: &PipelineModel, image: &Path, out: &Path, debug_dumps: bool) -> Result<Prediction> {
    let img = load_image(image)?;
    let pred = predict(model, &img)?;
    let id = file_stem(image);
    write_outputs(out, &id, &pred.probability, Some(&pred.layer_proposals), &pred.ranked)?;
    if debug_dumps {
        dump_stages(&out.join(format!("{id}.debug")), &pred)?;
    }
    Ok(pred)
}

fn dump_stages(dir: &Path, pred: &Prediction) -> Result<()> {
    create_dir(dir)?;
    for (k, l) in pred.layers.iter().enumerate() {
        let n = k + 1;
        save_gray16(&dir.join(format!("edges_{n}.png")), l.edges.width(), l.edges.height(), &l.edges.values)?;
        save_gray16(&dir.join(format!("enhanced_{n}.png")), l.enhanced.width(), l.enhanced.height(), &l.enhanced.values)?;
        superpixel_colors(&l.superpixels)?.save_png(&dir.join(format!("superpixels_{n}.png")))?;
    }
    for (k, o) in pred.occlusion.iter().enumerate() {
        save_gray16(&dir.join(format!("occlusion_{}.png", k + 1)), o.width(), o.height(), &o.values)?;
    }
    write_json(&dir.join("occlusion.json"), &OcclusionDump { partition: pred.partition.clone(), occlusion: pred.occlusion.clone() })
}

/// Arbitrary but fixed color per superpixel id.
fn superpixel_colors(sp: &SuperpixelLabels) -> Result<Raster> {
    let (w, h) = (sp.region.w as usize, sp.region.h as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for &l in &sp.labels {
        let v = (l as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        data.extend((0..3).map(|c| 0.2 + 0.8 * ((v >> (16 * c + 8)) & 0xff) as f64 / 255.0));
    }
    Raster::new(w, h, 3, data)
}

pub fn cmd_resume(model: &PipelineModel, image: &Path, out: &Path, occlusion: Option<&Path>, scored: Option<&Path>) -> Result<()> {
    let img = load_image(image)?;
    let id = file_stem(image);
    if let Some(p) = occlusion {
        let dump: OcclusionDump = read_json(p)?;
        let pred = predict_from_occlusion(model, &img, dump.occlusion, dump.partition, Vec::new())?;
        return write_outputs(out, &id, &pred.probability, Some(&pred.layer_proposals), &pred.ranked);
    }
    let Some(p) = scored else { return Ok(()) };
    let ranked = read_rows(p)?
        .into_iter()
        .map(|r| {
            let score = r.score.ok_or_else(|| Error::Data(format!("{}: missing score column", p.display())))?;
            Ok(ScoredProposal { proposal: r.proposal()?, score })
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = model.config()?;
    let strat = Strategies::from_config(&cfg)?;
    let partition = model.partition_for(img.width(), img.height());
    let probability = probability_from_scored(&ranked, img.width(), img.height(), &partition.road_region, strat.normalizer.as_ref())?;
    write_outputs(out, &id, &probability, None, &ranked)
}

/// Everything `eval` writes to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub layers: usize,
    #[serde(flatten)]
    pub summary: Summary,
    /// Recall at IoU 0.5 of the top 1000 proposals of `B_1` alone.
    pub recall_first_layer: f64,
    /// Recall at IoU 0.5 with the top 1000 proposals of every layer.
    pub recall_union: f64,
    pub median_obstacle_score: Option<f64>,
    pub median_road_score: Option<f64>,
}

pub fn cmd_eval(model: &PipelineModel, data: &Path, out: &Path) -> Result<EvalSummary> {
    let ds = Dataset::open(data)?;
    ds.require_ground_truth()?;
    let budgets = default_budgets();
    let taus = ar_thresholds();
    let totals = evaluate(model, &ds, &budgets, &taus)?;
    let roc = RocCurve::from_counts(&totals.roc);
    let recall = totals.recall.report();
    let at = |r: &tinyobs::eval::RecallReport| r.at(1000, 0.5).unwrap_or(0.0);
    let summary = EvalSummary {
        layers: model.partition.k(),
        summary: summarize(&roc, &recall, totals.images, totals.recall.total),
        recall_first_layer: at(&totals.recall_first_layer.report()),
        recall_union: at(&totals.recall_union.report()),
        median_obstacle_score: median(&totals.obstacle_scores),
        median_road_score: median(&totals.road_scores),
    };
    create_dir(out)?;
    write_json(&out.join("summary.json"), &summary)?;
    write_text(&out.join("roc.csv"), &roc.to_csv())?;
    write_text(&out.join("recall.csv"), &recall.to_csv())?;
    Ok(summary)
}

pub fn cmd_synth(out: &Path, count: usize, width: usize, height: usize, seed: u64) -> Result<()> {
    let scenes = (0..count)
        .map(|i| {
            let spec = SceneSpec { width, height, ..SceneSpec::default() }.with_seed(seed.wrapping_add(i as u64));
            generate(&spec).map(|s| (format!("scene_{i:04}"), s))
        })
        .collect::<Result<Vec<_>>>()?;
    write_scenes(out, &scenes)
}
