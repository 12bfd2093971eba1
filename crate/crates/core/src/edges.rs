//! Edge maps from classical filters and from magnitude vectors.

use serde::{Deserialize, Serialize};

use crate::approx::{patched_magnitude, PatchConfig};
use crate::error::{Error, Result};
use crate::image::{min_max_scale, DigitalImage};

/// Default Gaussian filter size used before every detector.
pub const BLUR_SIZE: usize = 5;

/// Grayscale weights for red, green and blue.
pub const GRAY_WEIGHTS: [f64; 3] = [0.2989, 0.5870, 0.1140];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Probabilistic,
    Binary,
}

/// Per-pixel edge strength in `[0, 1]`, or a binary edge mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub kind: EdgeKind,
}

impl EdgeMap {
    pub fn probabilistic(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height);
        debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        Self {
            width,
            height,
            values,
            kind: EdgeKind::Probabilistic,
        }
    }

    pub fn binary(width: usize, height: usize, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), width * height);
        Self {
            width,
            height,
            values: mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            kind: EdgeKind::Binary,
        }
    }

    /// Reads a grayscale image as a probabilistic map.
    pub fn from_image(img: &DigitalImage) -> Result<Self> {
        let gray = to_grayscale(img)?;
        Ok(Self::probabilistic(gray.width(), gray.height(), gray.channel(0)))
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Superlevel set `{value >= t}`.
    pub fn threshold(&self, t: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v >= t).collect()
    }

    pub fn to_image(&self) -> DigitalImage {
        DigitalImage::gray(self.width, self.height, self.values.clone()).expect("edge values lie in [0, 1]")
    }
}

pub fn to_grayscale(img: &DigitalImage) -> Result<DigitalImage> {
    match img.channels() {
        1 => Ok(img.clone()),
        3 => {
            let values = img
                .data()
                .chunks(3)
                .map(|p| p.iter().zip(GRAY_WEIGHTS).map(|(c, w)| c * w).sum::<f64>())
                .collect();
            DigitalImage::gray(img.width(), img.height(), values)
        }
        n => Err(Error::InvalidImage(format!("grayscale conversion needs 1 or 3 channels, got {n}"))),
    }
}

/// Conventional sigma for a Gaussian kernel of the given size.
pub fn default_sigma(size: usize) -> f64 {
    0.3 * ((size as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable convolution of a row-major grid with replicated borders.
fn convolve_separable(values: &[f64], width: usize, height: usize, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = kx
                .iter()
                .enumerate()
                .map(|(i, k)| k * values[y * width + clamp(x as isize + i as isize - rx, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = ky
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clamp(y as isize + i as isize - ry, height) * width + x])
                .sum();
        }
    }
    out
}

pub fn gaussian_blur(img: &DigitalImage, size: usize, sigma: Option<f64>) -> Result<DigitalImage> {
    if size % 2 == 0 {
        return Err(Error::config(format!("blur size must be odd, got {size}")));
    }
    if size == 1 {
        return Ok(img.clone());
    }
    let sigma = sigma.unwrap_or_else(|| default_sigma(size));
    let k = gaussian_kernel(size, sigma);
    let mut out = img.clone();
    for c in 0..img.channels() {
        let blurred = convolve_separable(&img.channel(c), img.width(), img.height(), &k, &k);
        out = out.with_channel(c, &blurred);
    }
    Ok(out)
}

fn binomial(order: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for _ in 0..order {
        let mut next = vec![0.0; row.len() + 1];
        for (i, v) in row.iter().enumerate() {
            next[i] += v;
            next[i + 1] += v;
        }
        row = next;
    }
    row
}

/// Smoothing and derivative taps of a Sobel operator of odd size `>= 3`.
pub fn sobel_kernels(size: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if size < 3 || size % 2 == 0 {
        return Err(Error::config(format!("Sobel size must be odd and at least 3, got {size}")));
    }
    let smooth = binomial(size - 1);
    let base = binomial(size - 3);
    let mut deriv = vec![0.0; size];
    for (i, b) in base.iter().enumerate() {
        deriv[i] -= b;
        deriv[i + 2] += b;
    }
    Ok((smooth, deriv))
}

/// Horizontal and vertical derivatives of a single-channel grid.
pub fn sobel_gradients(values: &[f64], width: usize, height: usize, size: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (smooth, deriv) = sobel_kernels(size)?;
    let gx = convolve_separable(values, width, height, &deriv, &smooth);
    let gy = convolve_separable(values, width, height, &smooth, &deriv);
    Ok((gx, gy))
}

fn gradient_magnitude(gx: &[f64], gy: &[f64]) -> Vec<f64> {
    gx.iter().zip(gy).map(|(a, b)| a.hypot(*b)).collect()
}

/// Min-max scaled Sobel gradient magnitude with the 3x3 operator.
pub fn sobel_edges(img: &DigitalImage) -> Result<EdgeMap> {
    sobel_edges_sized(img, 3)
}

pub fn sobel_edges_sized(img: &DigitalImage, size: usize) -> Result<EdgeMap> {
    let gray = to_grayscale(img)?;
    let (gx, gy) = sobel_gradients(&gray.channel(0), gray.width(), gray.height(), size)?;
    Ok(EdgeMap::probabilistic(gray.width(), gray.height(), min_max_scale(&gradient_magnitude(&gx, &gy))))
}

/// Offsets to the two neighbours along the quantised gradient direction (forward first).
fn direction_offsets(gx: f64, gy: f64) -> [(isize, isize); 2] {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    let sector = ((angle + 22.5) / 45.0).floor() as usize % 4;
    match sector {
        0 => [(1, 0), (-1, 0)],
        1 => [(1, 1), (-1, -1)],
        2 => [(0, 1), (0, -1)],
        _ => [(-1, 1), (1, -1)],
    }
}

/// Keeps a pixel only where it is a maximum along its gradient direction.
///
/// Ties keep the pixel whose forward neighbour is equal, so a plateau two
/// pixels wide keeps exactly one of them.
fn suppress(values: &[f64], gx: &[f64], gy: &[f64], width: usize, height: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
            0.0
        } else {
            values[y as usize * width + x as usize]
        }
    };
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let v = values[i];
            if v <= 0.0 {
                continue;
            }
            let [(fx, fy), (bx, by)] = direction_offsets(gx[i], gy[i]);
            let (x, y) = (x as isize, y as isize);
            if v >= at(x + fx, y + fy) && v > at(x + bx, y + by) {
                out[i] = v;
            }
        }
    }
    out
}

/// Canny detector on a single-channel image; thresholds are relative to the strongest gradient.
pub fn canny_edges(img: &DigitalImage, low: f64, high: f64, sobel_size: usize) -> Result<EdgeMap> {
    if !(0.0 <= low && low <= high && high <= 1.0) {
        return Err(Error::config(format!("need 0 <= low <= high <= 1, got {low}, {high}")));
    }
    let gray = to_grayscale(img)?;
    let (w, h) = (gray.width(), gray.height());
    let (gx, gy) = sobel_gradients(&gray.channel(0), w, h, sobel_size)?;
    let mag = gradient_magnitude(&gx, &gy);
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(EdgeMap::binary(w, h, &vec![false; w * h]));
    }
    let norm: Vec<f64> = mag.iter().map(|m| m / peak).collect();
    let thin = suppress(&norm, &gx, &gy, w, h);
    let strong: Vec<bool> = thin.iter().map(|&v| v > 0.0 && v >= high).collect();
    let weak: Vec<bool> = thin.iter().map(|&v| v > 0.0 && v >= low).collect();
    let mut out = vec![false; w * h];
    let mut stack: Vec<usize> = (0..w * h).filter(|&i| strong[i]).collect();
    for &i in &stack {
        out[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if weak[j] && !out[j] {
                    out[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    Ok(EdgeMap::binary(w, h, &out))
}

/// Grid search over `(low, high)` in steps of 0.05 minimising the pixel misclassification rate.
pub fn fit_canny_thresholds(pairs: &[(DigitalImage, Vec<bool>)], sobel_size: usize) -> Result<(f64, f64)> {
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for (li, &low) in grid.iter().enumerate() {
        for &high in &grid[li..] {
            let mut wrong = 0usize;
            let mut total = 0usize;
            for (img, gt) in pairs {
                let gray = gaussian_blur(&to_grayscale(img)?, BLUR_SIZE, None)?;
                let map = canny_edges(&gray, low, high, sobel_size)?;
                wrong += map.values.iter().zip(gt).filter(|(v, g)| (**v > 0.5) != **g).count();
                total += gt.len();
            }
            let rate = wrong as f64 / total.max(1) as f64;
            if rate < best.0 {
                best = (rate, low, high);
            }
        }
    }
    Ok((best.1, best.2))
}

/// Magnitude edge detector: blur, patched magnitude, absolute value, min-max scaling.
pub fn magnitude_edges(img: &DigitalImage, cfg: &PatchConfig) -> Result<EdgeMap> {
    magnitude_edges_with(img, cfg, BLUR_SIZE)
}

pub fn magnitude_edges_with(img: &DigitalImage, cfg: &PatchConfig, blur_size: usize) -> Result<EdgeMap> {
    let blurred = gaussian_blur(img, blur_size, None)?;
    let map = patched_magnitude(&blurred, cfg)?;
    Ok(weights_to_edges(map.width, map.height, &map.weights))
}

/// `min_max(|w|)`: magnitude weights as an edge probability map.
pub fn weights_to_edges(width: usize, height: usize, weights: &[f64]) -> EdgeMap {
    let abs: Vec<f64> = weights.iter().map(|w| w.abs()).collect();
    EdgeMap::probabilistic(width, height, min_max_scale(&abs))
}

/// Non-maximum suppression along the Sobel orientation of the map itself.
pub fn nms(map: &EdgeMap) -> Result<EdgeMap> {
    let (gx, gy) = sobel_gradients(&map.values, map.width, map.height, 3)?;
    Ok(EdgeMap {
        values: suppress(&map.values, &gx, &gy, map.width, map.height),
        ..map.clone()
    })
}

/// NMS followed by thinning of the surviving support.
pub fn nms_thin(map: &EdgeMap) -> Result<EdgeMap> {
    let mut out = nms(map)?;
    let support: Vec<bool> = out.values.iter().map(|&v| v > 0.0).collect();
    let thin = thin(&support, map.width, map.height);
    for (v, keep) in out.values.iter_mut().zip(thin) {
        if !keep {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Zhang-Suen thinning of a binary mask, iterated to a fixed point.
pub fn thin(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut img = mask.to_vec();
    let at = |img: &[bool], x: isize, y: isize| -> u8 {
        if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
            0
        } else {
            img[y as usize * width + x as usize] as u8
        }
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..height as isize {
                for x in 0..width as isize {
                    if at(&img, x, y) == 0 {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let p = [
                        at(&img, x, y - 1),
                        at(&img, x + 1, y - 1),
                        at(&img, x + 1, y),
                        at(&img, x + 1, y + 1),
                        at(&img, x, y + 1),
                        at(&img, x - 1, y + 1),
                        at(&img, x - 1, y),
                        at(&img, x - 1, y - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1).count();
                    if a != 1 {
                        continue;
                    }
                    let (n, e, s, w) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        n * e * s == 0 && e * s * w == 0
                    } else {
                        n * e * w == 0 && n * s * w == 0
                    };
                    if ok {
                        remove.push(y as usize * width + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                img[i] = false;
            }
        }
        if !changed {
            return img;
        }
    }
}
