//! Exact magnitude vectors of finite metric spaces.
//!
//! The weights `w` solve `Z w = 1` for the similarity matrix `Z`. Similarity
//! matrices of distinct points under l1/l2 are positive definite, so a
//! Cholesky factorisation is tried first with a pivoted LU as fallback.

use std::fmt::Write as _;
use std::path::Path;

use faer::linalg::solvers::{Llt, PartialPivLu, Solve};
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{grid_to_csv, DigitalImage};
use crate::metric::{featurize, similarity_matrix, BaseMetric, Features, MetricSpec, SimilarityMatrix};

/// Reciprocal condition numbers below this are treated as singular.
pub const RCOND_THRESHOLD: f64 = 1e-12;

/// Per-pixel magnitude weights of an image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeMap {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
    pub magnitude: f64,
    /// Estimated reciprocal condition number of the solve(s), `None` for closed-form maps.
    pub rcond: Option<f64>,
}

impl MagnitudeMap {
    pub fn new(width: usize, height: usize, weights: Vec<f64>, rcond: Option<f64>) -> Self {
        assert_eq!(weights.len(), width * height, "weight grid size");
        let magnitude = weights.iter().sum();
        Self {
            width,
            height,
            weights,
            magnitude,
            rcond,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    /// Interior sub-grid with `margin` pixels removed from every side.
    pub fn crop_boundary(&self, margin: usize) -> Result<Self> {
        if 2 * margin >= self.width.min(self.height) {
            return Err(Error::config(format!(
                "crop margin {margin} too large for {}x{} map",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width - 2 * margin, self.height - 2 * margin);
        let mut weights = Vec::with_capacity(w * h);
        for y in margin..margin + h {
            weights.extend_from_slice(&self.weights[y * self.width + margin..y * self.width + margin + w]);
        }
        Ok(Self::new(w, h, weights, self.rcond))
    }

    pub fn to_csv(&self) -> String {
        grid_to_csv(self.width, &self.weights)
    }

    /// 16-bit binary PGM with the weights min-max scaled onto `0..=65535`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let scaled = crate::image::min_max_scale(&self.weights);
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for v in scaled {
            let q = (v * 65535.0).round() as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
        out
    }

    pub fn to_json(&self) -> String {
        let summary = serde_json::json!({
            "width": self.width,
            "height": self.height,
            "magnitude": self.magnitude,
            "rcond": self.rcond,
        });
        let mut s = serde_json::to_string_pretty(&summary).expect("serialisable");
        s.push('\n');
        s
    }

    /// Writes `.pgm`, `.csv` or `.json` depending on the file extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(e) if e == "pgm" => self.to_pgm(),
            Some(e) if e == "csv" => self.to_csv().into_bytes(),
            Some(e) if e == "json" => self.to_json().into_bytes(),
            other => {
                return Err(Error::config(format!(
                    "unsupported output extension {other:?} (expected pgm, csv or json)"
                )))
            }
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

enum Factor {
    Cholesky(Llt<f64>),
    Lu(PartialPivLu<f64>),
}

impl Factor {
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let b = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        let x = match self {
            Factor::Cholesky(f) => f.solve(&b),
            Factor::Lu(f) => f.solve(&b),
        };
        (0..rhs.len()).map(|i| x[(i, 0)]).collect()
    }
}

/// A factorised similarity matrix together with its magnitude weights.
pub struct MagnitudeSolve {
    factor: Factor,
    pub weights: Vec<f64>,
    pub rcond: f64,
}

impl std::fmt::Debug for MagnitudeSolve {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MagnitudeSolve")
            .field("n", &self.weights.len())
            .field("cholesky", &matches!(self.factor, Factor::Cholesky(_)))
            .field("rcond", &self.rcond)
            .finish()
    }
}

impl MagnitudeSolve {
    /// Solves `Z x = rhs` with the stored factorisation.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.factor.solve(rhs)
    }

    pub fn magnitude(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn used_cholesky(&self) -> bool {
        matches!(self.factor, Factor::Cholesky(_))
    }
}

/// Factorises `zeta` and solves for the magnitude weights.
///
/// `features` is only used to name a duplicated pair when the matrix is singular.
pub fn solve_similarity(zeta: &SimilarityMatrix, features: Option<&Features>) -> Result<MagnitudeSolve> {
    let n = zeta.n();
    let a = zeta.as_mat();
    let factor = match a.llt(Side::Lower) {
        Ok(llt) => Factor::Cholesky(llt),
        Err(_) => Factor::Lu(a.partial_piv_lu()),
    };
    let ones = vec![1.0; n];
    let weights = factor.solve(&ones);
    let rcond = if weights.iter().all(|w| w.is_finite()) {
        estimate_rcond(a, &factor)
    } else {
        0.0
    };
    if !(rcond >= RCOND_THRESHOLD) {
        return Err(Error::NotInvertible {
            rcond: if rcond.is_nan() { 0.0 } else { rcond },
            duplicate: features.and_then(Features::first_duplicate),
            patch: None,
        });
    }
    Ok(MagnitudeSolve {
        factor,
        weights,
        rcond,
    })
}

/// Bytes held simultaneously by a dense solve of `n` points (matrix plus factor).
pub fn dense_memory_bytes(n: usize) -> u64 {
    2 * (n as u64) * (n as u64) * std::mem::size_of::<f64>() as u64
}

/// `MemAvailable` from `/proc/meminfo`, when the platform exposes it.
pub fn available_memory() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = text.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Fails early instead of letting a dense allocation abort the process.
pub fn check_dense_budget(n: usize) -> Result<()> {
    let required = dense_memory_bytes(n);
    match available_memory() {
        Some(available) if required > available => Err(Error::InsufficientMemory {
            points: n,
            required,
            available,
        }),
        _ => Ok(()),
    }
}

/// Magnitude weights of a finite point set.
pub fn magnitude_weights(features: &Features, base: BaseMetric) -> Result<MagnitudeSolve> {
    if features.is_empty() {
        return Err(Error::config("magnitude of an empty point set"));
    }
    check_dense_budget(features.len())?;
    let zeta = similarity_matrix(features, base);
    solve_similarity(&zeta, Some(features))
}

/// Magnitude (sum of weights) of a finite point set.
pub fn magnitude_scalar(features: &Features, base: BaseMetric) -> Result<f64> {
    Ok(magnitude_weights(features, base)?.magnitude())
}

/// Dense magnitude vector of every pixel of `img`.
pub fn magnitude_vector(img: &DigitalImage, spec: &MetricSpec) -> Result<MagnitudeMap> {
    spec.validate()?;
    let features = featurize(img, spec)?;
    let solve = magnitude_weights(&features, spec.base)?;
    Ok(MagnitudeMap::new(img.width(), img.height(), solve.weights, Some(solve.rcond)))
}

fn one_norm(a: &Mat<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Hager-Higham estimate of `1 / (||A||_1 ||A^-1||_1)` for symmetric `A`.
fn estimate_rcond(a: &Mat<f64>, factor: &Factor) -> f64 {
    let n = a.nrows();
    let anorm = one_norm(a);
    if n == 1 {
        return if a[(0, 0)] != 0.0 { 1.0 } else { 0.0 };
    }
    let mut x = vec![1.0 / n as f64; n];
    let mut est = 0.0f64;
    let mut last = usize::MAX;
    for _ in 0..5 {
        let y = factor.solve(&x);
        est = est.max(y.iter().map(|v| v.abs()).sum());
        let sign: Vec<f64> = y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
        let z = factor.solve(&sign);
        let (j, zmax) = z
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.abs()))
            .fold((0, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
        if zmax <= ztx || j == last {
            break;
        }
        last = j;
        x = vec![0.0; n];
        x[j] = 1.0;
    }
    // Higham's alternating test vector guards against the estimator stalling
    let b: Vec<f64> = (0..n)
        .map(|i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            sign * (1.0 + i as f64 / (n - 1) as f64)
        })
        .collect();
    let alt = factor.solve(&b).iter().map(|v| v.abs()).sum::<f64>() * 2.0 / (3.0 * n as f64);
    let inv_norm = est.max(alt);
    if !inv_norm.is_finite() || inv_norm == 0.0 {
        return 0.0;
    }
    1.0 / (anorm * inv_norm)
}

/// Human readable summary used by the CLI.
pub fn describe(map: &MagnitudeMap) -> String {
    let mut s = String::new();
    let _ = write!(s, "{}x{} magnitude {:.6}", map.width, map.height, map.magnitude);
    if let Some(r) = map.rcond {
        let _ = write!(s, " rcond {r:.3e}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(xs: &[f64]) -> Features {
        Features::from_rows(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_point() {
        let s = magnitude_weights(&points(&[3.0]), BaseMetric::L1).unwrap();
        assert_eq!(s.weights, vec![1.0]);
        assert_eq!(s.magnitude(), 1.0);
    }

    #[test]
    fn two_points_closed_form() {
        let d = std::f64::consts::LN_2;
        let s = magnitude_weights(&points(&[0.0, d]), BaseMetric::L1).unwrap();
        for w in &s.weights {
            assert!((w - 2.0 / 3.0).abs() < 1e-14);
        }
        assert!((s.magnitude() - 4.0 / 3.0).abs() < 1e-14);
        assert!(s.used_cholesky());
    }

    #[test]
    fn limits_of_two_points() {
        let far = magnitude_scalar(&points(&[0.0, 50.0]), BaseMetric::L1).unwrap();
        assert!((far - 2.0).abs() < 1e-9);
        // two points 1e-6 apart are numerically close to singular but still resolvable
        let near = magnitude_scalar(&points(&[0.0, 1e-6]), BaseMetric::L1).unwrap();
        assert!((near - 1.0).abs() < 1e-4);
    }

    #[test]
    fn duplicates_are_not_invertible() {
        let err = magnitude_weights(&points(&[0.0, 1.0, 0.0]), BaseMetric::L1).unwrap_err();
        match err {
            Error::NotInvertible { duplicate, .. } => assert_eq!(duplicate, Some((0, 2))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crop_boundary_shapes() {
        let map = MagnitudeMap::new(10, 10, (0..100).map(f64::from).collect(), None);
        assert_eq!(map.crop_boundary(0).unwrap(), map);
        let c = map.crop_boundary(2).unwrap();
        assert_eq!((c.width, c.height), (6, 6));
        assert_eq!(c.get(0, 0), 22.0);
        assert!(map.crop_boundary(5).is_err());
    }

    #[test]
    fn pgm_header_and_size() {
        let map = MagnitudeMap::new(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], Some(0.5));
        let pgm = map.to_pgm();
        let header = b"P5\n3 2\n65535\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 12);
        assert_eq!(&pgm[pgm.len() - 2..], &[0xff, 0xff]);
        let json: serde_json::Value = serde_json::from_str(&map.to_json()).unwrap();
        assert_eq!(json["magnitude"], 15.0);
        assert_eq!(json["rcond"], 0.5);
    }

    #[test]
    fn rcond_is_accurate_for_diagonal_like_matrices() {
        // far-apart points give a near-identity similarity matrix with rcond close to one
        let s = magnitude_weights(&points(&[0.0, 100.0, 200.0]), BaseMetric::L1).unwrap();
        assert!(s.rcond > 0.99);
    }
}
