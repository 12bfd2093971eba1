//! Runtime and approximation quality of every magnitude method against the dense solve.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use magvec::approx::{compute, Method, PatchConfig};
use magvec::dataset::list_images;
use magvec::eval::{approx_report, ApproxReport};
use magvec::exact::check_dense_budget;
use magvec::{DigitalImage, MagnitudeMap, PadMode};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::{invalid, parse_pad};

pub const HEADER: &str = "image,method,patch_h,patch_w,overlap,linf,frob,corr,runtime_ms";

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Directory of input images.
    #[arg(long)]
    images: PathBuf,
    /// Square patch sides of the patched method.
    #[arg(long, value_delimiter = ',')]
    patch_sizes: Option<Vec<usize>>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long, value_parser = parse_pad)]
    pad: Option<PadMode>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Images are resized to SIZE x SIZE.
    #[arg(long)]
    size: Option<usize>,
    /// Subset of dense, patched, indep, rank1.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave runtime_ms empty so that output bytes depend only on the inputs.
    #[arg(long)]
    no_timing: bool,
}

/// One CSV row; `None` fields are written empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Row {
    pub image: String,
    pub method: String,
    pub patch: Option<(usize, usize, usize)>,
    pub report: Option<ApproxReport>,
    pub runtime_ms: Option<f64>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Row {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let (ph, pw, ov) = match self.patch {
            Some((h, w, o)) => (h.to_string(), w.to_string(), o.to_string()),
            None => Default::default(),
        };
        let r = self.report;
        [
            csv_field(&self.image),
            csv_field(&self.method),
            ph,
            pw,
            ov,
            opt(r.map(|r| format!("{:?}", r.linf))),
            opt(r.map(|r| format!("{:?}", r.frob))),
            opt(r.map(|r| format!("{:?}", r.corr))),
            opt(self.runtime_ms.map(|t| format!("{t:.3}"))),
        ]
        .join(",")
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs `method` `repeats` times; returns the last result and the median wall time.
fn timed(img: &DigitalImage, method: Method, cfg: &PatchConfig, repeats: usize) -> magvec::Result<(MagnitudeMap, f64)> {
    let mut times = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let start = Instant::now();
        let map = compute(img, method, cfg)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        last = Some(map);
    }
    Ok((last.expect("repeats >= 1"), median(times)))
}

pub struct Plan {
    pub methods: Vec<Method>,
    pub patch_sizes: Vec<usize>,
    pub base: PatchConfig,
    pub repeats: usize,
    pub size: usize,
    pub timing: bool,
}

/// All rows for one image, in the fixed order: dense, patched by size, indep, rank1.
pub fn bench_image(name: &str, img: &DigitalImage, plan: &Plan) -> Vec<Row> {
    let img = img.resize(plan.size, plan.size);
    let mut rows = Vec::new();
    let row = |method: &str, patch, report, runtime: Option<f64>| Row {
        image: name.to_string(),
        method: method.to_string(),
        patch,
        report,
        runtime_ms: runtime.filter(|_| plan.timing),
    };

    let truth = match check_dense_budget(img.len()).and_then(|_| timed(&img, Method::Dense, &plan.base, plan.repeats)) {
        Ok((map, t)) => Some((map, t)),
        Err(e) => {
            log::warn!("{name}: dense ground truth unavailable: {e}");
            None
        }
    };
    if plan.methods.contains(&Method::Dense) {
        match &truth {
            Some((map, t)) => rows.push(row("dense", None, approx_report(map, map).ok(), Some(*t))),
            None => rows.push(row("dense", None, None, None)),
        }
    }
    let mut run = |method: Method, cfg: &PatchConfig, patch: Option<(usize, usize, usize)>| match timed(&img, method, cfg, plan.repeats) {
        Ok((map, t)) => {
            let report = truth.as_ref().and_then(|(g, _)| approx_report(g, &map).ok());
            rows.push(row(&method.to_string(), patch, report, Some(t)));
        }
        Err(e) => {
            log::warn!("{name}: {method}: {e}");
            rows.push(row(&method.to_string(), patch, None, None));
        }
    };
    if plan.methods.contains(&Method::Patched) {
        for &p in &plan.patch_sizes {
            let cfg = PatchConfig {
                patch_h: p,
                patch_w: p,
                ..plan.base.clone()
            };
            run(Method::Patched, &cfg, Some((p, p, cfg.overlap)));
        }
    }
    for m in [Method::Indep, Method::Rank1] {
        if plan.methods.contains(&m) {
            run(m, &plan.base, None);
        }
    }
    rows
}

pub fn bench(a: BenchArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let s = &cfg.bench;
    let mut base = cfg.patch.clone();
    base.overlap = a.overlap.unwrap_or(s.overlap);
    base.pad = a.pad.unwrap_or(s.pad);
    let plan = Plan {
        methods: a
            .methods
            .as_ref()
            .unwrap_or(&s.methods)
            .iter()
            .map(|m| m.parse::<Method>())
            .collect::<magvec::Result<_>>()?,
        patch_sizes: a.patch_sizes.clone().unwrap_or_else(|| s.patch_sizes.clone()),
        base,
        repeats: a.repeats.unwrap_or(s.repeats),
        size: a.size.unwrap_or(s.size),
        timing: !a.no_timing,
    };
    if plan.repeats == 0 || plan.size == 0 {
        return Err(invalid("--repeats and --size must be positive"));
    }
    for &p in &plan.patch_sizes {
        PatchConfig {
            patch_h: p,
            patch_w: p,
            ..plan.base.clone()
        }
        .validate()?;
    }
    if !a.images.is_dir() {
        return Err(invalid(format!("{} is not a directory", a.images.display())));
    }
    let files: Vec<(String, PathBuf)> = list_images(&a.images)?.into_iter().collect();
    let rows: Vec<Vec<Row>> = files
        .par_iter()
        .map(|(name, path)| match DigitalImage::load_any(path) {
            Ok(img) => bench_image(name, &img, &plan),
            Err(e) => {
                log::warn!("{name}: {e}");
                vec![Row {
                    image: name.clone(),
                    method: "error".into(),
                    ..Row::default()
                }]
            }
        })
        .collect();
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in rows.iter().flatten() {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    match &a.out {
        Some(p) => std::fs::write(p, out).map_err(|e| anyhow::anyhow!("writing {}: {e}", p.display()))?,
        None => print!("{out}"),
    }
    Ok(())
}
