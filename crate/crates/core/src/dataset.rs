//! Synthetic block images with exact edge labels, and image/label directory loaders.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::edges::{thin, to_grayscale};
use crate::error::{Error, Result};
use crate::image::{save_gray_png, DigitalImage};

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "csv"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    /// Rectangular regions per image.
    pub blocks: usize,
    /// Minimum l-infinity colour difference between adjacent regions.
    pub contrast: f64,
    pub noise: f64,
    /// Amplitude of per-region sinusoidal texture; 0 disables it.
    pub texture: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            blocks: 6,
            contrast: 0.3,
            noise: 0.02,
            texture: 0.0,
        }
    }
}

impl SyntheticConfig {
    pub fn textured() -> Self {
        Self {
            texture: 0.15,
            noise: 0.05,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub image: DigitalImage,
    pub labels: Vec<bool>,
}

/// Splits the canvas into `blocks` rectangles by repeatedly halving the largest one.
fn partition(w: usize, h: usize, blocks: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut rects = vec![(0usize, 0usize, w, h)];
    while rects.len() < blocks {
        let (i, _) = rects
            .iter()
            .enumerate()
            .max_by_key(|(i, r)| (r.2 * r.3, usize::MAX - i))
            .expect("nonempty");
        let (x, y, rw, rh) = rects[i];
        let vertical = if rw >= 16 && rh >= 16 { rng.random_bool(0.5) } else { rw >= rh };
        let span = if vertical { rw } else { rh };
        if span < 16 {
            break;
        }
        let cut = rng.random_range(span / 4..=3 * span / 4);
        let (a, b) = if vertical {
            ((x, y, cut, rh), (x + cut, y, rw - cut, rh))
        } else {
            ((x, y, rw, cut), (x, y + cut, rw, rh - cut))
        };
        rects[i] = a;
        rects.push(b);
    }
    let mut region = vec![0; w * h];
    for (k, &(x, y, rw, rh)) in rects.iter().enumerate() {
        for yy in y..y + rh {
            for xx in x..x + rw {
                region[yy * w + xx] = k;
            }
        }
    }
    region
}

/// Pixels whose right or lower neighbour lies in another region, thinned to a fixed point.
pub fn boundary_labels(region: &[usize], w: usize, h: usize) -> Vec<bool> {
    let raw: Vec<bool> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            (x + 1 < w && region[i + 1] != region[i]) || (y + 1 < h && region[i + w] != region[i])
        })
        .collect();
    thin(&raw, w, h)
}

fn adjacency(region: &[usize], w: usize, h: usize, n: usize) -> Vec<Vec<bool>> {
    let mut adj = vec![vec![false; n]; n];
    for i in 0..w * h {
        let (x, y) = (i % w, i / w);
        for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)].into_iter().flatten() {
            let (a, b) = (region[i], region[j]);
            if a != b {
                adj[a][b] = true;
                adj[b][a] = true;
            }
        }
    }
    adj
}

/// One synthetic RGB image with its labels.
pub fn synthetic_sample(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<(DigitalImage, Vec<bool>)> {
    let (w, h) = (cfg.width, cfg.height);
    if w < 2 || h < 2 || cfg.blocks == 0 {
        return Err(Error::config("synthetic images need at least 2x2 pixels and one block"));
    }
    let region = partition(w, h, cfg.blocks, rng);
    let n = region.iter().max().map_or(1, |m| m + 1);
    let adj = adjacency(&region, w, h, n);
    let lo = cfg.texture;
    let hi = 1.0 - cfg.texture;
    let mut colours: Vec<[f64; 3]> = Vec::with_capacity(n);
    for k in 0..n {
        let mut c = [0.0; 3];
        for _ in 0..1000 {
            c = [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
            let ok = (0..k).filter(|&j| adj[k][j]).all(|j| {
                c.iter().zip(&colours[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) >= cfg.contrast
            });
            if ok {
                break;
            }
        }
        colours.push(c);
    }
    let waves: Vec<(f64, f64, f64)> = (0..n)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(3.0..8.0);
            (angle.cos() / period, angle.sin() / period, rng.random_range(0.0..1.0))
        })
        .collect();
    let normal = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut data = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        let (x, y) = ((i % w) as f64, (i / w) as f64);
        let k = region[i];
        let (fx, fy, phase) = waves[k];
        let tex = cfg.texture * (std::f64::consts::TAU * (fx * x + fy * y + phase)).sin();
        for c in colours[k] {
            let noise = if cfg.noise > 0.0 { normal.sample(rng) } else { 0.0 };
            data.push((c + tex + noise).clamp(0.0, 1.0));
        }
    }
    Ok((DigitalImage::new(w, h, 3, data)?, boundary_labels(&region, w, h)))
}

/// `count` samples, fully determined by `seed`.
pub fn synthetic_dataset(seed: u64, count: usize, cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (image, labels) = synthetic_sample(cfg, &mut rng)?;
            Ok(Sample {
                name: format!("synth_{i:04}"),
                image,
                labels,
            })
        })
        .collect()
}

/// Writes `images/NAME.png` and `labels/NAME.png` under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        s.image.save_png(dir.join("images").join(format!("{}.png", s.name)))?;
        let lab: Vec<f64> = s.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        save_gray_png(dir.join("labels").join(format!("{}.png", s.name)), s.image.width(), s.image.height(), &lab)?;
    }
    Ok(())
}

/// Binary label grid from a label image: gray value at least 0.5.
pub fn load_labels(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let img = to_grayscale(&DigitalImage::load_any(path)?)?;
    Ok((img.width(), img.height(), img.data().iter().map(|&v| v >= 0.5).collect()))
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Tie-break for two files with one stem: lossless CSV first, then path order.
fn prefer(a: &Path, b: &Path) -> bool {
    let csv = |p: &Path| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    (csv(a), std::cmp::Reverse(a)) > (csv(b), std::cmp::Reverse(b))
}

/// Image files under `root`, keyed by their relative path without extension.
pub fn list_images(root: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !root.exists() {
        return Ok(out);
    }
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if is_image(&path) {
                let rel = path.strip_prefix(root).expect("walked from root").with_extension("");
                let key = rel.to_string_lossy().replace('\\', "/");
                match out.entry(key) {
                    Entry::Vacant(v) => {
                        v.insert(path);
                    }
                    Entry::Occupied(mut o) => {
                        if prefer(&path, o.get()) {
                            o.insert(path);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Matched image/label files and the files left without a partner.
#[derive(Clone, Debug, Default)]
pub struct Pairing {
    pub pairs: Vec<(String, PathBuf, PathBuf)>,
    pub unpaired: Vec<PathBuf>,
}

/// Image and label roots of a dataset directory.
///
/// Accepts `images/` + `labels/`, and the BIPED layout `imgs/` + `edge_maps/`.
pub fn dataset_roots(dir: &Path) -> Option<(PathBuf, PathBuf)> {
    for (i, l) in [("images", "labels"), ("imgs", "edge_maps"), ("edges/imgs", "edges/edge_maps")] {
        let (a, b) = (dir.join(i), dir.join(l));
        if a.is_dir() && b.is_dir() {
            return Some((a, b));
        }
    }
    None
}

pub fn pair_files(dir: impl AsRef<Path>) -> Result<Pairing> {
    let dir = dir.as_ref();
    let Some((img_root, lab_root)) = dataset_roots(dir) else {
        return Ok(Pairing::default());
    };
    let images = list_images(&img_root)?;
    let mut labels = list_images(&lab_root)?;
    let mut out = Pairing::default();
    for (key, path) in images {
        match labels.remove(&key) {
            Some(l) => out.pairs.push((key, path, l)),
            None => out.unpaired.push(path),
        }
    }
    out.unpaired.extend(labels.into_values());
    for p in &out.unpaired {
        warn!("skipping unpaired file {}", p.display());
    }
    Ok(out)
}

/// Lazily loads image/label pairs.
pub struct PairIter {
    inner: std::vec::IntoIter<(String, PathBuf, PathBuf)>,
}

impl Iterator for PairIter {
    type Item = Result<Sample>;
    fn next(&mut self) -> Option<Self::Item> {
        let (name, img, lab) = self.inner.next()?;
        Some((|| {
            let image = DigitalImage::load_any(&img)?;
            let (w, h, labels) = load_labels(&lab)?;
            if (w, h) != (image.width(), image.height()) {
                return Err(Error::ShapeMismatch(format!(
                    "{} is {}x{} but its labels are {w}x{h}",
                    img.display(),
                    image.width(),
                    image.height()
                )));
            }
            Ok(Sample { name, image, labels })
        })())
    }
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<PairIter> {
    Ok(PairIter {
        inner: pair_files(dir)?.pairs.into_iter(),
    })
}

/// BIPED split sizes: keys whose first path component is `train` or `test`.
pub fn split_counts(pairing: &Pairing) -> (usize, usize) {
    let first = |k: &str| k.split('/').next().unwrap_or("").to_string();
    let train = pairing.pairs.iter().filter(|(k, ..)| first(k) == "train").count();
    let test = pairing.pairs.iter().filter(|(k, ..)| first(k) == "test").count();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig {
            width: 40,
            height: 32,
            ..SyntheticConfig::default()
        };
        let a = synthetic_dataset(7, 3, &cfg).unwrap();
        let b = synthetic_dataset(7, 3, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.labels, y.labels);
        }
        assert!(a[0].labels.iter().any(|&l| l));
        assert_ne!(synthetic_dataset(8, 1, &cfg).unwrap()[0].image, a[0].image);
    }

    #[test]
    fn labels_are_a_thinning_fixed_point() {
        let cfg = SyntheticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (img, labels) = synthetic_sample(&cfg, &mut rng).unwrap();
        assert_eq!(thin(&labels, img.width(), img.height()), labels);
    }

    #[test]
    fn two_block_boundary() {
        let region: Vec<usize> = (0..20).map(|i| usize::from(i % 5 >= 2)).collect();
        let lab = boundary_labels(&region, 5, 4);
        for y in 0..4 {
            let row: Vec<bool> = (0..5).map(|x| lab[y * 5 + x]).collect();
            assert_eq!(row, vec![false, true, false, false, false]);
        }
    }

    #[test]
    fn loader_pairs_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap().count(), 0);
        let cfg = SyntheticConfig {
            width: 16,
            height: 16,
            blocks: 2,
            ..SyntheticConfig::default()
        };
        let samples = synthetic_dataset(3, 2, &cfg).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        std::fs::remove_file(dir.path().join("labels/synth_0001.png")).unwrap();
        let pairing = pair_files(dir.path()).unwrap();
        assert_eq!(pairing.pairs.len(), 1);
        assert_eq!(pairing.unpaired.len(), 1);
        let loaded: Vec<Sample> = load_dataset(dir.path()).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(loaded[0].labels, samples[0].labels);
    }
}
