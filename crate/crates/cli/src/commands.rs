//! Subcommands other than `bench`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::Args;
use magvec::analytic::{analytic_measure, compare_with_dense, random_step_image, StepImage1D};
use magvec::approx::{compute, Method};
use magvec::dataset::{dataset_roots, list_images, load_dataset, load_labels, synthetic_dataset, write_dataset};
use magvec::edges::{canny_edges, gaussian_blur, magnitude_edges_with, nms, sobel_edges_sized, EdgeMap};
use magvec::eval::edge_eval;
use magvec::exact::describe;
use magvec::image::{grid_to_csv, save_gray_png};
use magvec::learn::{train as fit, transform_image, Architecture, Checkpoint, Scenario};
use magvec::topo::{betti_curve, betti_norm};
use magvec::DigitalImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;
use crate::{invalid, PatchArgs};

fn write(path: &Path, text: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_list(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<f64>().map_err(|e| invalid(format!("bad number {v:?}: {e}"))))
        .collect()
}

#[derive(Args, Debug)]
pub struct MagArgs {
    input: PathBuf,
    /// Output file; the extension picks the format: .pgm, .csv or .json.
    output: PathBuf,
    /// dense, patched, indep or rank1.
    #[arg(long)]
    method: Option<String>,
    /// Resize to `W H` (or a square side) before solving.
    #[arg(long, num_args = 1..=2, value_names = ["W", "H"])]
    resize: Option<Vec<usize>>,
    #[command(flatten)]
    patch: PatchArgs,
}

pub fn mag(a: MagArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let method: Method = a.method.as_deref().unwrap_or(&cfg.mag.method).parse()?;
    let mut patch = cfg.patch.clone();
    a.patch.apply(&mut patch);
    patch.validate()?;
    let mut img = DigitalImage::load_any(&a.input)?;
    if let Some(r) = &a.resize {
        let (w, h) = (r[0], *r.last().unwrap_or(&r[0]));
        if w == 0 || h == 0 {
            return Err(invalid("--resize sides must be positive"));
        }
        img = img.resize(w, h);
    }
    let map = compute(&img, method, &patch)?;
    map.save(&a.output)?;
    println!("{}", describe(&map));
    Ok(())
}

#[derive(Args, Debug)]
pub struct AnalyticArgs {
    /// Step heights: rows separated by `;`, channels by `,`.
    #[arg(long, allow_hyphen_values = true)]
    gammas: Option<String>,
    /// Per-channel offsets, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    offsets: Option<String>,
    /// Domain width; defaults to one unit per piece.
    #[arg(long)]
    width: Option<f64>,
    /// Draw a seeded random image with at most 5 steps of height at most 3.
    #[arg(long)]
    random: bool,
    /// Grid points per unit length of the dense comparison.
    #[arg(long)]
    ppu: Option<usize>,
    /// CSV of position, analytic and numeric weights.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn step_image(a: &AnalyticArgs, seed: u64) -> anyhow::Result<StepImage1D> {
    if a.random {
        if a.gammas.is_some() {
            return Err(invalid("--random and --gammas are exclusive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        return Ok(random_step_image(&mut rng, 5, 3.0)?);
    }
    let text = a.gammas.as_deref().ok_or_else(|| invalid("pass --gammas or --random"))?;
    let gammas = text
        .split(';')
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(parse_list)
        .collect::<anyhow::Result<Vec<_>>>()?;
    let channels = gammas.first().map_or(1, Vec::len);
    let offsets = match &a.offsets {
        Some(o) => parse_list(o)?,
        None => vec![0.0; channels],
    };
    let width = a.width.unwrap_or((gammas.len() + 1) as f64);
    Ok(StepImage1D::new(width, gammas, offsets)?)
}

pub fn analytic1d(a: AnalyticArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let img = step_image(&a, cfg.seed)?;
    let ppu = a.ppu.unwrap_or(cfg.analytic.points_per_unit);
    let measure = analytic_measure(&img);
    let cmp = compare_with_dense(&img, ppu)?;
    if let Some(out) = &a.out {
        write(out, cmp.to_csv())?;
    }
    let summary = json!({
        "width": img.width,
        "gammas": img.gammas,
        "loci": measure.loci(),
        "masses": measure.masses(),
        "total_mass": measure.total_mass(),
        "points_per_unit": ppu,
        "max_step_error": cmp.max_step_error(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Args, Debug)]
pub struct EdgeArgs {
    input: PathBuf,
    /// PNG preview; raw values go to the same path with a .csv extension.
    output: PathBuf,
    /// sobel, canny, magnitude or model.
    #[arg(long)]
    method: Option<String>,
    /// Checkpoint for `--method model`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Gaussian blur size; 0 or 1 disables it.
    #[arg(long)]
    blur: Option<usize>,
    /// Canny low threshold relative to the strongest gradient.
    #[arg(long)]
    low: Option<f64>,
    #[arg(long)]
    high: Option<f64>,
    #[arg(long)]
    sobel_size: Option<usize>,
    /// Apply non-maximum suppression to the map.
    #[arg(long)]
    nms: bool,
    #[command(flatten)]
    patch: PatchArgs,
}

fn blurred(img: &DigitalImage, size: usize) -> anyhow::Result<DigitalImage> {
    Ok(if size > 1 { gaussian_blur(img, size, None)? } else { img.clone() })
}

pub fn edges(a: EdgeArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let s = &cfg.edges;
    let method = a.method.as_deref().unwrap_or(&s.method).to_ascii_lowercase();
    let blur = a.blur.unwrap_or(s.blur);
    let img = DigitalImage::load_any(&a.input)?;
    let mut map = match method.as_str() {
        "sobel" => sobel_edges_sized(&blurred(&img, blur)?, a.sobel_size.unwrap_or(s.sobel_size))?,
        "canny" => canny_edges(
            &blurred(&img, blur)?,
            a.low.unwrap_or(s.low),
            a.high.unwrap_or(s.high),
            a.sobel_size.unwrap_or(s.sobel_size),
        )?,
        "magnitude" => {
            let mut patch = s.patch.clone();
            a.patch.apply(&mut patch);
            magnitude_edges_with(&img, &patch, blur)?
        }
        "model" => {
            let path = a.model.as_ref().ok_or_else(|| invalid("--method model needs --model"))?;
            let ckpt = Checkpoint::load(path)?;
            let mut patch = ckpt.cfg.patch.clone();
            a.patch.apply(&mut patch);
            let blur = a.blur.unwrap_or(ckpt.cfg.blur_size);
            transform_image(&img, &Arc::new(ckpt.model), &patch, blur)?
        }
        other => return Err(invalid(format!("unknown edge method `{other}`"))),
    };
    if a.nms {
        map = nms(&map)?;
    }
    save_gray_png(&a.output, map.width, map.height, &map.values)?;
    write(&a.output.with_extension("csv"), grid_to_csv(map.width, &map.values))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory with `images/` and `labels/` (or the BIPED layout).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint JSON.
    #[arg(long)]
    out: PathBuf,
    /// random or single-shot.
    #[arg(long)]
    scenario: Option<Scenario>,
    /// I, II or III.
    #[arg(long)]
    model: Option<Architecture>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    blur: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[command(flatten)]
    patch: PatchArgs,
}

pub fn train(a: TrainArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let mut tc = cfg.train.clone();
    if let Some(v) = a.scenario {
        tc.scenario = v;
    }
    if let Some(v) = a.model {
        tc.architecture = v;
    }
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.lr {
        tc.learning_rate = v;
    }
    if let Some(v) = a.lambda {
        tc.lambda = v;
    }
    if let Some(v) = a.blur {
        tc.blur_size = v;
    }
    if let Some(v) = a.validation_fraction {
        tc.validation_fraction = v;
    }
    a.patch.apply(&mut tc.patch);
    tc.validate()?;
    let data: Vec<(DigitalImage, Vec<bool>)> = load_dataset(&a.data)?
        .map(|s| s.map(|s| (s.image, s.labels)))
        .collect::<magvec::Result<_>>()?;
    if data.is_empty() {
        return Err(invalid(format!("no image/label pairs under {}", a.data.display())));
    }
    let outcome = fit(&data, &tc)?;
    let ck = &outcome.checkpoint;
    ck.save(&a.out)?;
    let summary = json!({
        "architecture": tc.architecture.to_string(),
        "epoch": ck.epoch,
        "validation_loss": ck.validation_loss,
        "initial_validation_loss": ck.history.first(),
        "train_patches": ck.train_patches,
        "validation_patches": ck.validation_patches,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted edge maps (PNG or CSV), named like the labels.
    #[arg(long)]
    pred: PathBuf,
    /// Label directory, or a dataset directory holding one.
    #[arg(long)]
    gt: PathBuf,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// PR curve CSV; defaults to the report path with a .csv extension.
    #[arg(long)]
    pr_csv: Option<PathBuf>,
    #[arg(long)]
    thresholds: Option<usize>,
    /// Matching radius in pixels; default is 0.0075 of the image diagonal.
    #[arg(long)]
    tol: Option<f64>,
    /// Skip non-maximum suppression of the predictions.
    #[arg(long)]
    no_nms: bool,
}

pub fn eval(a: EvalArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let s = &cfg.eval;
    let thresholds = a.thresholds.unwrap_or(s.thresholds);
    if thresholds == 0 {
        return Err(invalid("--thresholds must be positive"));
    }
    let tol = a.tol.or(s.tol);
    if tol.is_some_and(|t| !(t >= 0.0 && t.is_finite())) {
        return Err(invalid("--tol must be a nonnegative number"));
    }
    let apply_nms = s.nms && !a.no_nms;
    let gt_root = dataset_roots(&a.gt).map_or_else(|| a.gt.clone(), |(_, labels)| labels);
    let preds = list_images(&a.pred)?;
    let mut labels = list_images(&gt_root)?;
    let mut jobs = Vec::new();
    for (key, path) in preds {
        match labels.remove(&key) {
            Some(l) => jobs.push((key, path, l)),
            None => log::warn!("no label for prediction {}", path.display()),
        }
    }
    for l in labels.values() {
        log::warn!("no prediction for label {}", l.display());
    }
    if jobs.is_empty() {
        return Err(invalid(format!(
            "no predictions in {} match labels in {}",
            a.pred.display(),
            gt_root.display()
        )));
    }
    let pairs: Vec<(EdgeMap, Vec<bool>)> = jobs
        .par_iter()
        .map(|(key, pred, lab)| -> anyhow::Result<_> {
            let mut map = EdgeMap::from_image(&DigitalImage::load_any(pred)?)?;
            let (w, h, gt) = load_labels(lab)?;
            if (w, h) != (map.width, map.height) {
                return Err(invalid(format!("{key}: prediction {}x{} vs labels {w}x{h}", map.width, map.height)));
            }
            if apply_nms {
                map = nms(&map)?;
            }
            Ok((map, gt))
        })
        .collect::<anyhow::Result<_>>()?;
    let report = edge_eval(&pairs, thresholds, tol)?;
    write(&a.out, report.to_json())?;
    write(&a.pr_csv.unwrap_or_else(|| a.out.with_extension("csv")), report.pr_csv())?;
    println!(
        "images {} ODS {:.4} OIS {:.4} AP {:.4} R50 {:.4}",
        report.images, report.ods, report.ois, report.ap, report.r50
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TopoArgs {
    /// Edge map (PNG or CSV with values in [0, 1]).
    input: PathBuf,
    #[arg(long)]
    levels: Option<usize>,
    /// Betti curve CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON of the two curve norms; printed to stdout when absent.
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn topo(a: TopoArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let levels = a.levels.unwrap_or(cfg.topo.levels);
    let map = EdgeMap::from_image(&DigitalImage::load_any(&a.input)?)?;
    let curve = betti_curve(&map, levels)?;
    let (b0, b1) = betti_norm(&curve);
    if let Some(out) = &a.out {
        write(out, curve.to_csv())?;
    }
    let text = serde_json::to_string_pretty(&json!({ "levels": levels, "betti0_norm": b0, "betti1_norm": b1 }))?;
    match &a.json {
        Some(p) => write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Dataset directory; `images/` and `labels/` are created inside.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    contrast: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    texture: Option<f64>,
}

pub fn synth(a: SynthArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let mut sc = cfg.synth.clone();
    sc.width = a.width.unwrap_or(sc.width);
    sc.height = a.height.unwrap_or(sc.height);
    sc.blocks = a.blocks.unwrap_or(sc.blocks);
    sc.contrast = a.contrast.unwrap_or(sc.contrast);
    sc.noise = a.noise.unwrap_or(sc.noise);
    sc.texture = a.texture.unwrap_or(sc.texture);
    let samples = synthetic_dataset(cfg.seed, a.count, &sc)?;
    write_dataset(&a.out, &samples)?;
    println!("wrote {} images to {}", samples.len(), a.out.display());
    Ok(())
}
