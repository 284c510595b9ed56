use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anchorcut::binarize::{Mask, Orientation, ThresholdStrategy};
use anchorcut::exchange::{read_token_grid, TokenGrid};
use anchorcut::fixtures::planted_clusters;
use anchorcut::metrics::{both_empty, estimate_cost, iou};
use anchorcut::pipeline::{
    batch_segment, segment_image_with_labels, BatchReport, ImageReport, PipelineConfig, Preset, Segmentation,
};
use anchorcut::prior::{build_representatives, tokens_from_mask, BinaryImage, Label, PriorBank, SelectionMode};
use anchorcut::spectral::{Preconditioner, SolverMethod};
use anyhow::{anyhow, bail, Context, Result};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

const EXIT_INPUT: u8 = 2;
const EXIT_CONVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "anchorcut", version, about = "Prior-anchored spectral segmentation of ViT token grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster image CLS descriptors and collect labeled tokens of the representatives into a bank.
    BuildBank(BuildBankArgs),
    /// Turn a pixel mask into per-token labels.
    Rasterize(RasterizeArgs),
    /// Segment one grid, or every grid of a manifest.
    Segment(Box<SegmentArgs>),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Print the analytic cost of a problem size, optionally timing a synthetic run.
    Bench(BenchArgs),
}

#[derive(Args)]
struct BuildBankArgs {
    /// Text file listing one token-grid path per line; each grid needs a CLS
    /// vector and a `<grid>.labels.json` next to it.
    #[arg(long)]
    cls: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RasterizeArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Binary mask image at source resolution (nonzero pixels are foreground).
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    grid: Option<PathBuf>,
    /// Text file listing one token-grid path per line.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file mirroring the pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = preset_names())]
    preset: Option<String>,
    /// Directory of ground-truth `<image_id>.pgm` masks at token resolution.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Labels file (as written by `rasterize`) whose tokens are linked to the anchors too.
    #[arg(long, conflicts_with = "manifest")]
    token_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Also write masks upsampled to source resolution.
    #[arg(long)]
    upsample: bool,
    /// Write per-token scores next to each mask.
    #[arg(long)]
    scores: bool,

    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    xi: Option<usize>,
    #[arg(long)]
    k_sim: Option<usize>,
    #[arg(long)]
    m_prime: Option<usize>,
    #[arg(long)]
    lambda_mmr: Option<f64>,
    /// Prior vertices per label.
    #[arg(long)]
    max_priors: Option<usize>,
    #[arg(long)]
    mode: Option<ModeArg>,
    #[arg(long)]
    threshold: Option<ThresholdArg>,
    #[arg(long)]
    threshold_exact: bool,
    #[arg(long)]
    grid_steps: Option<usize>,
    #[arg(long)]
    solver: Option<SolverArg>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rescale_generalized: Option<bool>,
    #[arg(long)]
    orientation: Option<OrientationArg>,
    #[arg(long)]
    jacobi: bool,
    #[arg(long)]
    no_dense_fallback: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    n: u64,
    #[arg(long)]
    d: u64,
    #[arg(long)]
    xi: Option<u64>,
    #[arg(long, default_value_t = 0)]
    priors: u64,
    #[arg(long, default_value_t = 50)]
    iters: u64,
    #[arg(long, default_value_t = 2)]
    k: u64,
    /// Also time one synthetic segmentation of this size.
    #[arg(long)]
    run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Random,
    Nearest,
    Mmr,
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdArg {
    Roc,
    Median,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Lobpcg,
    Dense,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrientationArg {
    Median,
    Mean,
}

fn preset_names() -> clap::builder::PossibleValuesParser {
    clap::builder::PossibleValuesParser::new(Preset::ALL.map(|p| p.name()))
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    token_index: usize,
    label: Label,
}

#[derive(Serialize, Deserialize)]
struct LabelsFile {
    image_id: String,
    grid_h: usize,
    grid_w: usize,
    labels: Vec<LabelRecord>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildBank(a) => build_bank(a),
        Command::Rasterize(a) => rasterize(a),
        Command::Segment(a) => segment(*a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let convergence = e
        .chain()
        .any(|c| c.downcast_ref::<anchorcut::Error>().is_some_and(|a| a.is_convergence()));
    if convergence {
        EXIT_CONVERGENCE
    } else {
        EXIT_INPUT
    }
}

/// Non-empty, non-comment lines, resolved against the manifest's directory.
fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let items: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect();
    if items.is_empty() {
        bail!("manifest {} lists no grids", path.display());
    }
    Ok(items)
}

fn labels_path(grid: &Path) -> PathBuf {
    let mut s = grid.as_os_str().to_owned();
    s.push(".labels.json");
    PathBuf::from(s)
}

fn read_labels(path: &Path) -> Result<LabelsFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading labels {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing labels {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn build_bank(a: BuildBankArgs) -> Result<ExitCode> {
    let paths = read_manifest(&a.cls)?;
    let grids: Vec<TokenGrid> = paths
        .iter()
        .map(|p| read_token_grid(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<_>>()?;
    let dim = grids[0].dim();
    let mut cls = anchorcut::nalgebra::DMatrix::zeros(grids.len(), dim);
    let mut ids = Vec::with_capacity(grids.len());
    for (r, (g, p)) in grids.iter().zip(&paths).enumerate() {
        if g.dim() != dim {
            bail!("{} has dimension {}, expected {dim}", p.display(), g.dim());
        }
        let c = g.cls().ok_or_else(|| anyhow!("{} carries no CLS vector", p.display()))?;
        for (j, &v) in c.iter().enumerate() {
            cls[(r, j)] = v as f64;
        }
        ids.push(g.meta().image_id.clone());
    }
    let reps = build_representatives(&cls, &ids, a.k, a.seed)?;
    let mut entries = Vec::new();
    for &i in &reps.indices {
        let labels = read_labels(&labels_path(&paths[i]))?;
        let pairs: Vec<(usize, Label)> = labels.labels.iter().map(|l| (l.token_index, l.label)).collect();
        entries.extend(PriorBank::entries_from_labels(&grids[i], &pairs)?);
    }
    let bank = PriorBank::new(entries, dim)?;
    bank.write_dir(&a.out)?;
    write_json(
        &a.out.join("representatives.json"),
        &serde_json::json!({ "image_ids": reps.image_ids, "indices": reps.indices }),
    )?;
    eprintln!("bank: {} entries from {} representatives", bank.len(), reps.indices.len());
    Ok(ExitCode::SUCCESS)
}

fn load_binary_image(path: &Path) -> Result<BinaryImage> {
    let img = image::open(path)
        .with_context(|| format!("reading mask {}", path.display()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(BinaryImage::new(h as usize, w as usize, img.pixels().map(|p| p.0[0] > 0).collect())?)
}

fn rasterize(a: RasterizeArgs) -> Result<ExitCode> {
    let grid = read_token_grid(&a.grid)?;
    let mask = load_binary_image(&a.mask)?;
    let labels = tokens_from_mask(&grid, &mask)?;
    let file = LabelsFile {
        image_id: grid.meta().image_id.clone(),
        grid_h: grid.grid_h(),
        grid_w: grid.grid_w(),
        labels: labels
            .into_iter()
            .map(|(token_index, label)| LabelRecord { token_index, label })
            .collect(),
    };
    write_json(&a.out, &file)?;
    Ok(ExitCode::SUCCESS)
}

/// Overlays `top` onto `base`, recursing into tables.
fn merge_toml(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset, then config file, then command-line flags.
fn resolve_config(a: &SegmentArgs) -> Result<PipelineConfig> {
    let mut file: Option<toml::Table> = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Some(toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?)
        }
        None => None,
    };
    let file_preset = match file.as_mut().and_then(|t| t.remove("preset")) {
        Some(toml::Value::String(s)) => Some(s),
        Some(other) => bail!("config key `preset` must be a string, got {other}"),
        None => None,
    };
    let name = a.preset.clone().or(file_preset).unwrap_or_else(|| "saliency".into());
    let preset = Preset::from_name(&name).ok_or_else(|| anyhow!("unknown preset `{name}`"))?;
    let mut cfg = preset.config();
    if let Some(t) = file {
        let mut base = toml::Value::try_from(&cfg)?;
        merge_toml(&mut base, toml::Value::Table(t));
        cfg = base.try_into().context("invalid configuration file")?;
    }

    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.kappa {
        cfg.kappa = v;
    }
    if let Some(v) = a.xi {
        cfg.xi = Some(v);
    }
    if let Some(v) = a.k_sim {
        cfg.retrieval.k_sim = v;
    }
    if let Some(v) = a.max_priors {
        cfg.retrieval.max_per_label = v;
        cfg.retrieval.m_prime = cfg.retrieval.m_prime.max(v);
    }
    if let Some(v) = a.m_prime {
        cfg.retrieval.m_prime = v;
    }
    if let Some(v) = a.lambda_mmr {
        cfg.retrieval.lambda_mmr = v;
    }
    if let Some(v) = a.mode {
        cfg.retrieval.mode = match v {
            ModeArg::Random => SelectionMode::Random,
            ModeArg::Nearest => SelectionMode::Nearest,
            ModeArg::Mmr => SelectionMode::Mmr,
        };
    }
    if let Some(v) = a.threshold {
        cfg.threshold = match v {
            ThresholdArg::Roc => ThresholdStrategy::Roc,
            ThresholdArg::Median => ThresholdStrategy::Median,
        };
    }
    if a.threshold_exact {
        cfg.threshold_exact = true;
    }
    if let Some(v) = a.grid_steps {
        cfg.grid_steps = v;
    }
    if let Some(v) = a.solver {
        cfg.solver.method = match v {
            SolverArg::Lobpcg => SolverMethod::Lobpcg,
            SolverArg::Dense => SolverMethod::Dense,
        };
    }
    if let Some(v) = a.tol {
        cfg.solver.tol = v;
    }
    if let Some(v) = a.max_iters {
        cfg.solver.max_iters = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = Some(v);
    }
    if let Some(v) = a.rescale_generalized {
        cfg.solver.rescale_generalized = v;
    }
    if let Some(v) = a.orientation {
        cfg.orientation = match v {
            OrientationArg::Median => Orientation::Median,
            OrientationArg::Mean => Orientation::Mean,
        };
    }
    if a.jacobi {
        cfg.solver.preconditioner = Preconditioner::Jacobi;
    }
    if a.no_dense_fallback {
        cfg.solver.dense_fallback = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&mask.to_gray(), mask.grid_w as u32, mask.grid_h as u32, ExtendedColorType::L8)
        .with_context(|| format!("writing {}", path.display()))
}

fn read_pgm(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::from_gray(h as usize, w as usize, img.as_raw())?)
}

/// File stem safe for the output directory.
fn output_stem(image_id: &str) -> String {
    image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn write_outputs(out: &Path, seg: &Segmentation, grid: Option<&TokenGrid>, a: &SegmentArgs) -> Result<()> {
    let stem = output_stem(&seg.image_id);
    write_pgm(&out.join(format!("{stem}.pgm")), &seg.mask)?;
    if a.upsample {
        let meta = grid.map(|g| g.meta().clone()).ok_or_else(|| anyhow!("grid metadata unavailable"))?;
        let up = seg
            .mask
            .upsample(meta.patch as usize, meta.source_h as usize, meta.source_w as usize)?;
        write_pgm(&out.join(format!("{stem}.full.pgm")), &up)?;
    }
    if a.scores {
        write_json(
            &out.join(format!("{stem}.scores.json")),
            &serde_json::json!({
                "image_id": seg.image_id,
                "grid_h": seg.scores.grid_h,
                "grid_w": seg.scores.grid_w,
                "degenerate": seg.scores.degenerate,
                "scores": seg.scores.scores,
                "prior_scores": seg.prior_scores,
                "threshold": seg.threshold,
            }),
        )?;
    }
    Ok(())
}

fn ground_truth(dir: Option<&Path>, image_id: &str) -> Option<Mask> {
    let p = dir?.join(format!("{}.pgm", output_stem(image_id)));
    p.exists().then(|| read_pgm(&p).ok()).flatten()
}

fn segment(a: SegmentArgs) -> Result<ExitCode> {
    let cfg = resolve_config(&a)?;
    let bank = PriorBank::read_dir(&a.bank)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    if let Some(path) = &a.grid {
        let grid = read_token_grid(path)?;
        let labels: Vec<(usize, Label)> = match &a.token_labels {
            Some(p) => read_labels(p)?.labels.iter().map(|l| (l.token_index, l.label)).collect(),
            None => Vec::new(),
        };
        let seg = segment_image_with_labels(&grid, &bank, &cfg, &labels)?;
        write_outputs(&a.out, &seg, Some(&grid), &a)?;
        let truth = ground_truth(a.gt.as_deref(), &seg.image_id);
        let report = BatchReport::from_images(vec![ImageReport::success(path, &seg, truth.as_ref())]);
        write_json(&a.out.join("report.json"), &report)?;
        return Ok(ExitCode::SUCCESS);
    }

    let manifest = read_manifest(a.manifest.as_ref().expect("clap enforces grid or manifest"))?;
    let gt = a.gt.clone();
    let out = batch_segment(&manifest, &bank, &cfg, a.workers, |_, g| {
        ground_truth(gt.as_deref(), &g.meta().image_id)
    })?;
    let mut code = ExitCode::SUCCESS;
    let mut worst = 0u8;
    for (path, r) in &out.results {
        match r {
            Ok(seg) => {
                let grid = if a.upsample { Some(read_token_grid(path)?) } else { None };
                write_outputs(&a.out, seg, grid.as_ref(), &a)?;
            }
            Err(e) => {
                eprintln!("failed: {}: {e}", path.display());
                let c = if e.is_convergence() { EXIT_CONVERGENCE } else { EXIT_INPUT };
                worst = worst.max(c);
            }
        }
    }
    write_json(&a.out.join("report.json"), &out.report)?;
    if worst > 0 {
        code = ExitCode::from(worst);
    }
    Ok(code)
}

#[derive(Serialize)]
struct EvalEntry {
    name: String,
    iou: Option<f64>,
    empty_pair: bool,
    error: Option<String>,
}

fn pgm_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "pgm") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), p.clone());
            }
        }
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let preds = pgm_stems(&a.pred)?;
    let gts = pgm_stems(&a.gt)?;
    let mut entries = Vec::new();
    let mut ious = Vec::new();
    for (name, gt_path) in &gts {
        let Some(pred_path) = preds.get(name) else {
            entries.push(EvalEntry {
                name: name.clone(),
                iou: None,
                empty_pair: false,
                error: Some("no prediction".into()),
            });
            continue;
        };
        let scored = read_pgm(pred_path).and_then(|p| {
            let g = read_pgm(gt_path)?;
            Ok((iou(&p, &g)?, both_empty(&p, &g)))
        });
        match scored {
            Ok((v, empty)) => {
                ious.push(v);
                entries.push(EvalEntry {
                    name: name.clone(),
                    iou: Some(v),
                    empty_pair: empty,
                    error: None,
                });
            }
            Err(e) => entries.push(EvalEntry {
                name: name.clone(),
                iou: None,
                empty_pair: false,
                error: Some(format!("{e:#}")),
            }),
        }
    }
    if ious.is_empty() {
        bail!("no prediction/ground-truth pairs could be scored");
    }
    let report = serde_json::json!({
        "images": entries,
        "scored": ious.len(),
        "mean_iou": ious.iter().sum::<f64>() / ious.len() as f64,
    });
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    if a.n < 2 || a.d == 0 {
        bail!("need n >= 2 and d >= 1");
    }
    let cost = estimate_cost(a.n, a.priors, a.d, a.iters, a.k, a.xi);
    let mut report = serde_json::json!({ "estimate": cost });
    if a.run {
        let w = (a.n as f64).sqrt().ceil() as usize;
        let h = (a.n as usize).div_ceil(w);
        let p = planted_clusters(h, w, (a.d as usize).max(3), 2, 1.2, 0.2, 0)?;
        let mut cfg = PipelineConfig::default();
        cfg.retrieval.max_per_label = (a.priors as usize / 2).max(1);
        cfg.xi = a.xi.map(|x| x as usize);
        let start = Instant::now();
        let seg = anchorcut::segment_image(&p.grid, &p.bank, &cfg)?;
        report["run"] = serde_json::json!({
            "grid": [h, w],
            "seconds": start.elapsed().as_secs_f64(),
            "iterations": seg.spectral.iterations,
            "method": seg.spectral.method,
            "fell_back": seg.spectral.fell_back,
            "iou_vs_planted": iou(&seg.mask, &p.truth)?,
        });
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}
