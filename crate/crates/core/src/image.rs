//! Digital images: a grid of pixels, each carrying `channels` values in `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How pixels outside the image are filled when padding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// Repeat the nearest border pixel.
    #[default]
    Replicate,
    /// Fill with zeros.
    Zero,
    /// No padding: context windows are clipped at the image border.
    /// `window` treats outside pixels as `Replicate`.
    Truncate,
}

/// A pixel grid with `channels` values per pixel, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DigitalImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

/// One pixel viewed as a point: column, row and its channel values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelPoint<'a> {
    pub x: usize,
    pub y: usize,
    pub c: &'a [f64],
}

impl DigitalImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::InvalidImage(format!(
                "empty image {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {width}x{height}x{channels}, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidImage(format!(
                "channel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image from `f(x, y, channel)`; values are clamped to `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(width > 0 && height > 0 && channels > 0, "empty image");
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    /// A single-channel image from a row-major grid.
    pub fn gray(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(width, height, 1, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn points(&self) -> impl Iterator<Item = PixelPoint<'_>> {
        (0..self.height).flat_map(move |y| {
            (0..self.width).map(move |x| PixelPoint {
                x,
                y,
                c: self.pixel(x, y),
            })
        })
    }

    /// Values of one channel as a row-major grid.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Sub-image of size `w x h` whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Self {
            width: w,
            height: h,
            channels: self.channels,
            data,
        }
    }

    /// Window of size `w x h` at signed offset `(x0, y0)`; pixels outside the image follow `mode`.
    pub fn window(&self, x0: isize, y0: isize, w: usize, h: usize, mode: PadMode) -> Self {
        let mut data = Vec::with_capacity(w * h * self.channels);
        for dy in 0..h {
            for dx in 0..w {
                let x = x0 + dx as isize;
                let y = y0 + dy as isize;
                let inside = x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height;
                match (inside, mode) {
                    (true, _) | (false, PadMode::Replicate | PadMode::Truncate) => {
                        let cx = x.clamp(0, self.width as isize - 1) as usize;
                        let cy = y.clamp(0, self.height as isize - 1) as usize;
                        data.extend_from_slice(self.pixel(cx, cy));
                    }
                    (false, PadMode::Zero) => data.extend(std::iter::repeat_n(0.0, self.channels)),
                }
            }
        }
        Self {
            width: w,
            height: h,
            channels: self.channels,
            data,
        }
    }

    /// Pads `margin` pixels on every side.
    pub fn pad(&self, margin: usize, mode: PadMode) -> Self {
        let m = margin as isize;
        self.window(-m, -m, self.width + 2 * margin, self.height + 2 * margin, mode)
    }

    /// Applies `f` to every channel value, clamping the result into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Replaces one channel with a row-major grid of values.
    pub fn with_channel(&self, c: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), self.len());
        let mut out = self.clone();
        for (i, v) in values.iter().enumerate() {
            out.data[i * self.channels + c] = v.clamp(0.0, 1.0);
        }
        out
    }

    /// Bilinear resampling to `w x h` (pixel-centre aligned).
    pub fn resize(&self, w: usize, h: usize) -> Self {
        let sx = self.width as f64 / w as f64;
        let sy = self.height as f64 / h as f64;
        Self::from_fn(w, h, self.channels, |x, y, c| {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let top = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
            let bottom = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
            top * (1.0 - ty) + bottom * ty
        })
    }

    /// Loads an 8- or 16-bit PNG (or JPEG). Gray images keep one channel, everything else becomes RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
                let g = img.to_luma8();
                let data = g.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
                Self::new(w, h, 1, data).expect("decoded image is valid")
            }
            DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
                let g = img.to_luma16();
                let data = g.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
                Self::new(w, h, 1, data).expect("decoded image is valid")
            }
            _ => {
                let rgb = img.to_rgb8();
                let data = rgb
                    .pixels()
                    .flat_map(|p| p.0.map(|v| v as f64 / 255.0))
                    .collect();
                Self::new(w, h, 3, data).expect("decoded image is valid")
            }
        }
    }

    /// Parses a single-channel image from CSV text: one row per line, comma separated values in `[0, 1]`.
    pub fn from_csv(text: &str) -> Result<Self> {
        let values = parse_csv_grid(text)?;
        let height = values.len();
        let width = values.first().map_or(0, Vec::len);
        if values.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidImage("ragged CSV rows".into()));
        }
        Self::gray(width, height, values.into_iter().flatten().collect())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    /// Loads by extension: `.csv` as a CSV grid, anything else through the image decoder.
    pub fn load_any(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Self::load_csv(path),
            _ => Self::load(path),
        }
    }

    /// Writes an 8-bit PNG (gray for one channel, RGB for three, otherwise the channel mean).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let q = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let result = if self.channels == 3 {
            let buf: Vec<u8> = self.data.iter().map(|&v| q(v)).collect();
            image::RgbImage::from_raw(w, h, buf)
                .expect("buffer size matches")
                .save(path)
        } else {
            let buf: Vec<u8> = (0..self.len())
                .map(|i| {
                    let px = &self.data[i * self.channels..(i + 1) * self.channels];
                    q(px.iter().sum::<f64>() / self.channels as f64)
                })
                .collect();
            GrayImage::from_raw(w, h, buf)
                .expect("buffer size matches")
                .save(path)
        };
        result.map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub(crate) fn parse_csv_grid(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|line| {
            line.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidImage(format!("bad CSV value {v:?}: {e}")))
                })
                .collect()
        })
        .collect()
}

/// Writes a row-major `[0, 1]` grid as an 8-bit grayscale PNG.
pub fn save_gray_png(path: impl AsRef<Path>, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
        let v = values[y as usize * width + x as usize];
        Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
    });
    buf.save(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a row-major grid as CSV text with full round-trip precision.
pub fn grid_to_csv(width: usize, values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 20);
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Min-max scales a field onto `[0, 1]`; near-constant fields map to all zeros.
pub fn min_max_scale(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if values.is_empty() || !(range > CONSTANT_FIELD_TOL * hi.abs().max(lo.abs()).max(1.0)) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Relative spread below which a field counts as constant for min-max scaling.
pub const CONSTANT_FIELD_TOL: f64 = 1e-9;
