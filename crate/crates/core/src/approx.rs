//! Scalable approximations of image magnitude vectors.
//!
//! * [`patched_magnitude`]: pad, tile into overlapping patches, solve each
//!   patch densely, crop the overlap and stitch.
//! * [`independence_magnitude`]: per pixel, the product of row-wise and
//!   column-wise one-dimensional measures built from the steps at its edges.
//! * [`rank1_magnitude`]: the same product built from a best rank-1
//!   factorisation of the image.

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::step_atom_mass;
use crate::error::{Error, Result};
use crate::exact::{magnitude_vector, MagnitudeMap};
use crate::image::{DigitalImage, PadMode};
use crate::metric::{BaseMetric, MetricSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    /// Pixels of context added on every side of a patch.
    pub overlap: usize,
    pub pad: PadMode,
    pub metric: MetricSpec,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_h: 40,
            patch_w: 40,
            overlap: 2,
            pad: PadMode::Truncate,
            metric: MetricSpec::default(),
        }
    }
}

impl PatchConfig {
    pub fn new(patch_h: usize, patch_w: usize, overlap: usize) -> Self {
        Self {
            patch_h,
            patch_w,
            overlap,
            ..Self::default()
        }
    }

    pub fn with_metric(mut self, metric: MetricSpec) -> Self {
        self.metric = metric;
        self
    }

    /// Settings for edge detection: replicated borders, so the image frame itself is not an edge.
    pub fn edges() -> Self {
        Self::default().with_pad(PadMode::Replicate)
    }

    pub fn with_pad(mut self, pad: PadMode) -> Self {
        self.pad = pad;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_h < 4 || self.patch_w < 4 {
            return Err(Error::config(format!(
                "patch size {}x{} below the 4x4 minimum",
                self.patch_h, self.patch_w
            )));
        }
        if 2 * self.overlap >= self.patch_h.min(self.patch_w) {
            return Err(Error::config(format!(
                "overlap {} must be below half the patch size",
                self.overlap
            )));
        }
        if self.metric.base == BaseMetric::Hamming {
            return Err(Error::config("the Hamming metric is only supported in closed-form contexts"));
        }
        self.metric.validate()
    }
}

/// Top-left corners and sizes of the core tiles covering a `width x height` grid.
pub fn tiles(width: usize, height: usize, patch_w: usize, patch_h: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for y0 in (0..height).step_by(patch_h) {
        for x0 in (0..width).step_by(patch_w) {
            out.push((x0, y0, patch_w.min(width - x0), patch_h.min(height - y0)));
        }
    }
    out
}

/// The core tile `(x0, y0, w, h)` with `overlap` pixels of context on every side.
///
/// Returns the window and the position of the core inside it. Under `PadMode::Truncate`
/// the context is clipped at the image border instead of padded.
pub fn context_window(
    img: &DigitalImage,
    (x0, y0, w, h): (usize, usize, usize, usize),
    overlap: usize,
    pad: PadMode,
) -> (DigitalImage, (usize, usize)) {
    match pad {
        PadMode::Truncate => {
            let (wx0, wy0) = (x0.saturating_sub(overlap), y0.saturating_sub(overlap));
            let wx1 = (x0 + w + overlap).min(img.width());
            let wy1 = (y0 + h + overlap).min(img.height());
            (img.crop(wx0, wy0, wx1 - wx0, wy1 - wy0), (x0 - wx0, y0 - wy0))
        }
        _ => {
            let d = overlap as isize;
            let window = img.window(x0 as isize - d, y0 as isize - d, w + 2 * overlap, h + 2 * overlap, pad);
            (window, (overlap, overlap))
        }
    }
}

/// Divide-and-conquer magnitude: every tile is solved with `overlap` pixels of context.
///
/// Images no larger than one patch are solved densely in a single call.
pub fn patched_magnitude(img: &DigitalImage, cfg: &PatchConfig) -> Result<MagnitudeMap> {
    cfg.validate()?;
    if img.width() <= cfg.patch_w && img.height() <= cfg.patch_h {
        return magnitude_vector(img, &cfg.metric);
    }
    let tiles = tiles(img.width(), img.height(), cfg.patch_w, cfg.patch_h);
    let solved: Vec<Result<(Vec<f64>, Option<f64>)>> = tiles
        .par_iter()
        .enumerate()
        .map(|(index, &tile)| {
            let (window, (left, top)) = context_window(img, tile, cfg.overlap, cfg.pad);
            let map = magnitude_vector(&window, &cfg.metric).map_err(|e| match e {
                Error::NotInvertible { rcond, duplicate, .. } => Error::NotInvertible {
                    rcond,
                    duplicate,
                    patch: Some(index),
                },
                other => other,
            })?;
            let (w, h) = (tile.2, tile.3);
            let stride = window.width();
            let mut core = Vec::with_capacity(w * h);
            for y in top..top + h {
                core.extend_from_slice(&map.weights[y * stride + left..y * stride + left + w]);
            }
            Ok((core, map.rcond))
        })
        .collect();

    let mut weights = vec![0.0; img.len()];
    let mut rcond = f64::INFINITY;
    for (&(x0, y0, w, h), tile) in tiles.iter().zip(solved) {
        let (core, tile_rcond) = tile?;
        rcond = rcond.min(tile_rcond.unwrap_or(f64::INFINITY));
        for ty in 0..h {
            let dst = (y0 + ty) * img.width() + x0;
            weights[dst..dst + w].copy_from_slice(&core[ty * w..(ty + 1) * w]);
        }
    }
    Ok(MagnitudeMap::new(img.width(), img.height(), weights, Some(rcond)))
}

/// One-dimensional weight of a unit pixel: half its length, half of each adjacent step atom,
/// and the full boundary atom 1/2 on a side without a neighbour.
fn pixel_weight_1d(left: Option<f64>, right: Option<f64>) -> f64 {
    let side = |step: Option<f64>| match step {
        Some(size) => 0.5 * step_atom_mass(size),
        None => 0.5,
    };
    0.5 + side(left) + side(right)
}

/// l1 size of the step between two pixels, in metric units.
fn step_size(a: &[f64], b: &[f64], s: f64) -> f64 {
    s * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn profile_weights(sizes: &[f64]) -> Vec<f64> {
    let n = sizes.len() + 1;
    (0..n)
        .map(|i| {
            let left = if i == 0 { None } else { Some(sizes[i - 1]) };
            let right = if i + 1 == n { None } else { Some(sizes[i]) };
            pixel_weight_1d(left, right)
        })
        .collect()
}

/// Independence approximation: `weight(x, y) = h(x | row y) * v(y | column x)`.
pub fn independence_magnitude(img: &DigitalImage, spec: &MetricSpec) -> Result<MagnitudeMap> {
    spec.validate()?;
    let (w, h) = (img.width(), img.height());
    let s = spec.channel_weight;
    let mut weights = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let here = img.pixel(x, y);
            let left = (x > 0).then(|| step_size(img.pixel(x - 1, y), here, s));
            let right = (x + 1 < w).then(|| step_size(here, img.pixel(x + 1, y), s));
            let up = (y > 0).then(|| step_size(img.pixel(x, y - 1), here, s));
            let down = (y + 1 < h).then(|| step_size(here, img.pixel(x, y + 1), s));
            weights.push(pixel_weight_1d(left, right) * pixel_weight_1d(up, down));
        }
    }
    Ok(MagnitudeMap::new(w, h, weights, None))
}

/// Leading singular pair `(sigma, u, v)` of a row-major `rows x cols` matrix, with `mean(u) >= 0`.
pub fn leading_singular_pair(values: &[f64], rows: usize, cols: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let m = Mat::<f64>::from_fn(rows, cols, |i, j| values[i * cols + j]);
    let svd = m.thin_svd().expect("svd of a finite matrix");
    let sigma = svd.S()[0];
    let mut u: Vec<f64> = (0..rows).map(|i| svd.U()[(i, 0)]).collect();
    let mut v: Vec<f64> = (0..cols).map(|j| svd.V()[(j, 0)]).collect();
    if u.iter().sum::<f64>() < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (sigma, u, v)
}

/// Rank-1 approximation: separable product of one-dimensional measures of the factor profiles.
///
/// The factors come from the channel-mean intensity. Each channel is projected
/// onto them, giving a row profile `sigma_c mean(u) v` and a column profile
/// `sigma_c mean(v) u`; their steps summed over channels feed the 1D measures.
pub fn rank1_magnitude(img: &DigitalImage, spec: &MetricSpec) -> Result<MagnitudeMap> {
    spec.validate()?;
    let (w, h, n) = (img.width(), img.height(), img.channels());
    let mean: Vec<f64> = (0..w * h)
        .map(|i| img.data()[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let (_, u, v) = leading_singular_pair(&mean, h, w);
    let u_mean = u.iter().sum::<f64>() / h as f64;
    let v_mean = v.iter().sum::<f64>() / w as f64;

    let mut row_steps = vec![0.0; w.saturating_sub(1)];
    let mut col_steps = vec![0.0; h.saturating_sub(1)];
    for c in 0..n {
        let chan = img.channel(c);
        // sigma_c = u^T M_c v
        let sigma_c: f64 = (0..h)
            .map(|i| u[i] * (0..w).map(|j| chan[i * w + j] * v[j]).sum::<f64>())
            .sum();
        for (j, step) in row_steps.iter_mut().enumerate() {
            *step += (sigma_c * u_mean * (v[j + 1] - v[j])).abs();
        }
        for (i, step) in col_steps.iter_mut().enumerate() {
            *step += (sigma_c * v_mean * (u[i + 1] - u[i])).abs();
        }
    }
    let s = spec.channel_weight;
    row_steps.iter_mut().for_each(|x| *x *= s);
    col_steps.iter_mut().for_each(|x| *x *= s);
    let horizontal = profile_weights(&row_steps);
    let vertical = profile_weights(&col_steps);
    let weights = (0..h)
        .flat_map(|y| {
            let vy = vertical[y];
            horizontal.iter().map(move |hx| hx * vy).collect::<Vec<_>>()
        })
        .collect();
    Ok(MagnitudeMap::new(w, h, weights, None))
}

/// Which magnitude computation to run on an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dense,
    Patched,
    Indep,
    Rank1,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Ok(Method::Dense),
            "patched" => Ok(Method::Patched),
            "indep" | "independence" => Ok(Method::Indep),
            "rank1" | "rank-1" => Ok(Method::Rank1),
            other => Err(Error::config(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Dense => "dense",
            Method::Patched => "patched",
            Method::Indep => "indep",
            Method::Rank1 => "rank1",
        })
    }
}

pub fn compute(img: &DigitalImage, method: Method, cfg: &PatchConfig) -> Result<MagnitudeMap> {
    match method {
        Method::Dense => magnitude_vector(img, &cfg.metric),
        Method::Patched => patched_magnitude(img, cfg),
        Method::Indep => independence_magnitude(img, &cfg.metric),
        Method::Rank1 => rank1_magnitude(img, &cfg.metric),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> DigitalImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DigitalImage::from_fn(w, h, 1, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn config_validation() {
        assert!(PatchConfig::new(3, 8, 0).validate().is_err());
        assert!(PatchConfig::new(8, 8, 4).validate().is_err());
        assert!(PatchConfig::new(8, 8, 3).validate().is_ok());
        let hamming = PatchConfig::new(8, 8, 1).with_metric(MetricSpec::default().with_base(BaseMetric::Hamming));
        assert!(hamming.validate().is_err());
    }

    #[test]
    fn independence_constant_interior_is_a_quarter() {
        let img = DigitalImage::gray(5, 5, vec![0.5; 25]).unwrap();
        let map = independence_magnitude(&img, &MetricSpec::default()).unwrap();
        assert_eq!(map.get(2, 2), 0.25);
        // edges of the domain carry the boundary atom
        assert_eq!(map.get(0, 2), 0.5);
        assert_eq!(map.get(0, 0), 1.0);
    }

    #[test]
    fn independence_single_saturated_step() {
        let img = DigitalImage::from_fn(5, 5, 1, |x, _, _| if x >= 3 { 1.0 } else { 0.0 });
        let spec = MetricSpec::l1(50.0);
        let map = independence_magnitude(&img, &spec).unwrap();
        let expected = 0.75 * 0.5;
        assert!((map.get(2, 2) - expected).abs() < 1e-12);
        assert!((map.get(3, 2) - expected).abs() < 1e-12);
    }

    #[test]
    fn independence_flanking_an_edge_matches_1d_atom() {
        let img = DigitalImage::from_fn(64, 64, 1, |x, _, _| if x >= 32 { 1.0 } else { 0.0 });
        let map = independence_magnitude(&img, &MetricSpec::default()).unwrap();
        let atom = 0.5 * (1.0 - (-1.0f64).exp());
        for y in 1..63 {
            for x in [31, 32] {
                assert!((map.get(x, y) - (0.5 + 0.5 * atom) * 0.5).abs() < 1e-12);
            }
            assert_eq!(map.get(10, y), 0.25);
        }
    }

    #[test]
    fn rank1_matches_independence_on_one_directional_images() {
        let steps = [0.0, 0.0, 0.3, 0.3, 0.9, 0.9, 0.1, 0.1];
        let stripes = DigitalImage::from_fn(8, 6, 1, |x, _, _| steps[x]);
        let bands = DigitalImage::from_fn(6, 8, 1, |_, y, _| steps[y]);
        for img in [stripes, bands] {
            let spec = MetricSpec::l1(2.0);
            let a = rank1_magnitude(&img, &spec).unwrap();
            let b = independence_magnitude(&img, &spec).unwrap();
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y).abs() < 1e-8, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn rank1_constant_image_profile() {
        let img = DigitalImage::gray(6, 6, vec![0.4; 36]).unwrap();
        let map = rank1_magnitude(&img, &MetricSpec::default()).unwrap();
        assert!((map.get(3, 3) - 0.25).abs() < 1e-12);
        assert!((map.get(0, 3) - 0.5).abs() < 1e-12);
        assert!((map.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_image_falls_through_to_dense() {
        let img = random_image(7, 6, 1);
        let cfg = PatchConfig::new(8, 8, 2);
        let a = patched_magnitude(&img, &cfg).unwrap();
        let b = magnitude_vector(&img, &cfg.metric).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiles_cover_every_pixel_once() {
        let (w, h) = (23, 17);
        let mut count = vec![0; w * h];
        for (x0, y0, tw, th) in tiles(w, h, 5, 4) {
            for y in y0..y0 + th {
                for x in x0..x0 + tw {
                    count[y * w + x] += 1;
                }
            }
        }
        assert!(count.iter().all(|&c| c == 1));
    }

    #[test]
    fn patched_equals_dense_for_product_spaces() {
        // a constant image under l1 is a product of lines, whose weights depend only on
        // neighbouring gaps, so truncated patches reproduce the dense map
        let img = DigitalImage::gray(24, 24, vec![0.5; 576]).unwrap();
        let cfg = PatchConfig::new(8, 8, 3);
        let patched = patched_magnitude(&img, &cfg).unwrap();
        let dense = magnitude_vector(&img, &cfg.metric).unwrap();
        for (a, b) in patched.weights.iter().zip(&dense.weights) {
            assert!((a - b).abs() < 1e-9);
        }
        // replicated borders agree away from the image frame
        let replicated = patched_magnitude(&img, &cfg.clone().with_pad(PadMode::Replicate)).unwrap();
        let interior = |m: &MagnitudeMap| m.crop_boundary(1).unwrap().weights;
        for (a, b) in interior(&replicated).iter().zip(interior(&dense)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn patched_not_invertible_names_patch() {
        // a vanishing coordinate scale with no colour term makes every patch numerically one point
        let img = random_image(16, 8, 5);
        let mut cfg = PatchConfig::new(8, 8, 1);
        cfg.metric.coordinate_scale = 1e-300;
        cfg.metric.channel_weight = 0.0;
        match patched_magnitude(&img, &cfg) {
            Err(Error::NotInvertible { patch, .. }) => assert_eq!(patch, Some(0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crop_after_padding_removes_boundary_elevation() {
        let img = DigitalImage::gray(10, 10, vec![0.3; 100]).unwrap();
        let padded = img.pad(2, PadMode::Replicate);
        let map = magnitude_vector(&padded, &MetricSpec::default()).unwrap();
        let inner = map.crop_boundary(2).unwrap();
        let first = inner.weights[0];
        assert!(inner.weights.iter().all(|w| (w - first).abs() < 1e-6));
    }
}
