//! Closed-form magnitude measures of one-dimensional step images under l1.
//!
//! A step image on `[0, w]` has `m` constant pieces separated by loci
//! `(i/m) w`, `i = 1..m-1`. Its measure is half the Lebesgue measure, atoms
//! of mass 1/2 at both ends, and an atom of mass `1/2 (1 - exp(-sum_j |g_ij|))`
//! at every locus.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::magnitude_vector;
use crate::image::DigitalImage;
use crate::metric::MetricSpec;

/// Piecewise-constant image `phi(x) = sum_i g_i H(x - (i/m) w) + c` with `H(0) = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepImage1D {
    /// Domain width `w`.
    pub width: f64,
    /// Number of constant pieces `m`.
    pub pixels: usize,
    /// `(m-1) x n` step heights, one row per locus.
    pub gammas: Vec<Vec<f64>>,
    /// Offset `c` per channel.
    pub offsets: Vec<f64>,
}

impl StepImage1D {
    pub fn new(width: f64, gammas: Vec<Vec<f64>>, offsets: Vec<f64>) -> Result<Self> {
        let img = Self {
            width,
            pixels: gammas.len() + 1,
            gammas,
            offsets,
        };
        img.validate()?;
        Ok(img)
    }

    /// Constant image of width `w` with `channels` channels.
    pub fn constant(width: f64, channels: usize) -> Self {
        Self {
            width,
            pixels: 1,
            gammas: Vec::new(),
            offsets: vec![0.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::config(format!("width must be positive, got {}", self.width)));
        }
        if self.pixels == 0 || self.gammas.len() + 1 != self.pixels {
            return Err(Error::config(format!(
                "{} pixels need {} step rows, got {}",
                self.pixels,
                self.pixels.saturating_sub(1),
                self.gammas.len()
            )));
        }
        let n = self.channels();
        if n == 0 {
            return Err(Error::config("step image needs at least one channel"));
        }
        if let Some(row) = self.gammas.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                left: row.len(),
                right: n,
            });
        }
        if self.gammas.iter().flatten().chain(&self.offsets).any(|v| !v.is_finite()) {
            return Err(Error::config("step heights and offsets must be finite"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.offsets.len()
    }

    /// Position `(i/m) w` of the `i`-th locus, `i` counted from one.
    pub fn locus(&self, i: usize) -> f64 {
        i as f64 / self.pixels as f64 * self.width
    }

    /// l1 size of each step, `sum_j |g_ij|`.
    pub fn step_sizes(&self) -> Vec<f64> {
        self.gammas
            .iter()
            .map(|row| row.iter().map(|g| g.abs()).sum())
            .collect()
    }

    /// Channel values at position `x`.
    pub fn value_at(&self, x: f64) -> Vec<f64> {
        let mut v = self.offsets.clone();
        for (i, row) in self.gammas.iter().enumerate() {
            if x - self.locus(i + 1) > 0.0 {
                for (vj, g) in v.iter_mut().zip(row) {
                    *vj += g;
                }
            }
        }
        v
    }
}

/// Mass contributed by a step of l1 size `size`: the exponential CDF `1/2 (1 - e^-size)`.
pub fn step_atom_mass(size: f64) -> f64 {
    0.5 * (1.0 - (-size.abs()).exp())
}

/// Magnitude measure of a step image: density, boundary atoms and step atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeMeasure1D {
    pub width: f64,
    pub lebesgue_density: f64,
    pub boundary_atoms: [(f64, f64); 2],
    pub step_atoms: Vec<(f64, f64)>,
}

impl MagnitudeMeasure1D {
    pub fn total_mass(&self) -> f64 {
        self.lebesgue_density * self.width
            + self.boundary_atoms.iter().map(|a| a.1).sum::<f64>()
            + self.step_atoms.iter().map(|a| a.1).sum::<f64>()
    }

    pub fn loci(&self) -> Vec<f64> {
        self.step_atoms.iter().map(|a| a.0).collect()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.step_atoms.iter().map(|a| a.1).collect()
    }
}

pub fn analytic_measure(img: &StepImage1D) -> MagnitudeMeasure1D {
    let step_atoms = img
        .step_sizes()
        .into_iter()
        .enumerate()
        .filter(|(_, size)| *size > 0.0)
        .map(|(i, size)| (img.locus(i + 1), step_atom_mass(size)))
        .collect();
    MagnitudeMeasure1D {
        width: img.width,
        lebesgue_density: 0.5,
        boundary_atoms: [(0.0, 0.5), (img.width, 0.5)],
        step_atoms,
    }
}

pub fn analytic_total_mass(img: &StepImage1D) -> f64 {
    1.0 + img.width / 2.0 + img.step_sizes().into_iter().map(step_atom_mass).sum::<f64>()
}

/// Random single-channel step image with `1..=max_steps` steps of height in `[-max_gamma, max_gamma]`.
/// Every piece has unit length.
pub fn random_step_image(rng: &mut impl Rng, max_steps: usize, max_gamma: f64) -> Result<StepImage1D> {
    if max_steps == 0 || !(max_gamma > 0.0 && max_gamma.is_finite()) {
        return Err(Error::config("random step image needs max_steps >= 1 and a positive finite max_gamma"));
    }
    let steps = rng.random_range(1..=max_steps);
    let gammas = (0..steps).map(|_| vec![rng.random_range(-max_gamma..=max_gamma)]).collect();
    StepImage1D::new((steps + 1) as f64, gammas, vec![0.0])
}

/// Scale `(sum |alpha| + 1)` of the measure of a constant or line image.
pub fn line_image_scale(alpha_abs_sum: f64) -> f64 {
    assert!(alpha_abs_sum >= 0.0, "slope sum must be nonnegative");
    alpha_abs_sum + 1.0
}

/// Multi-channel slopes combine under l1 by summing their magnitudes.
pub fn line_image_scale_channels(alphas: &[f64]) -> f64 {
    line_image_scale(alphas.iter().map(|a| a.abs()).sum())
}

/// Atoms on both sides of each step as they appear in finite line samples: `1/2 tanh(size/2)` each.
///
/// The points of an l1 step image lie isometrically on a line with a gap of
/// `size` at each monotone step, and a line with a gap carries this two-sided
/// atom pair in the finite weights.
pub fn line_gap_atoms(img: &StepImage1D) -> Vec<(f64, f64)> {
    img.step_sizes()
        .into_iter()
        .enumerate()
        .filter(|(_, size)| *size > 0.0)
        .map(|(i, size)| (img.locus(i + 1), 0.5 * (size / 2.0).tanh()))
        .collect()
}

/// A step image sampled on a uniform grid, ready for a dense solve.
#[derive(Clone, Debug)]
pub struct Discretised {
    /// `1 x N` strip; channel values are affinely normalised into `[0, 1]`.
    pub image: DigitalImage,
    /// Metric reproducing the original distances: coordinate spacing `1/k`, channel weight = value range.
    pub spec: MetricSpec,
    /// Sample positions (cell centres) in domain units.
    pub positions: Vec<f64>,
    offsets: Vec<f64>,
}

impl Discretised {
    pub fn spacing(&self) -> f64 {
        self.spec.coordinate_scale
    }

    /// Original channel values of the samples.
    pub fn values(&self, channel: usize) -> Vec<f64> {
        self.image
            .channel(channel)
            .into_iter()
            .map(|v| v * self.spec.channel_weight + self.offsets[channel])
            .collect()
    }

    /// Index of the sample at or just left of `x` (the sample taking the left value of a step at `x`).
    pub fn left_sample(&self, x: f64) -> usize {
        let h = self.spacing();
        let j = (x / h - 0.5).floor();
        (j.max(0.0) as usize).min(self.positions.len() - 1)
    }
}

/// Samples `img` at the centres of `round(w k)` equal cells.
pub fn discretise(img: &StepImage1D, points_per_unit: usize) -> Result<Discretised> {
    img.validate()?;
    if points_per_unit < 2 {
        return Err(Error::config("need at least 2 points per unit"));
    }
    let n = ((img.width * points_per_unit as f64).round() as usize).max(1);
    let h = img.width / n as f64;
    let positions: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * h).collect();
    let raw: Vec<Vec<f64>> = positions.iter().map(|&x| img.value_at(x)).collect();
    let channels = img.channels();
    let mins: Vec<f64> = (0..channels)
        .map(|c| raw.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min))
        .collect();
    let range = (0..channels)
        .map(|c| raw.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max) - mins[c])
        .fold(0.0, f64::max);
    let scale = if range > 0.0 { range } else { 1.0 };
    let data = raw
        .iter()
        .flat_map(|v| v.iter().zip(&mins).map(|(x, m)| ((x - m) / scale).clamp(0.0, 1.0)))
        .collect();
    let image = DigitalImage::new(n, 1, channels, data)?;
    let spec = MetricSpec {
        channel_weight: scale,
        coordinate_scale: h,
        ..MetricSpec::default()
    };
    Ok(Discretised {
        image,
        spec,
        positions,
        offsets: mins,
    })
}

/// Analytic and dense weights of a discretised step image, sample by sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepComparison {
    pub positions: Vec<f64>,
    /// `h/2` per sample plus boundary atoms at the ends and each step atom on its left sample.
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Sample index carrying each step atom.
    pub step_samples: Vec<usize>,
}

impl StepComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,analytic_weight,numeric_weight\n");
        for ((x, a), n) in self.positions.iter().zip(&self.analytic).zip(&self.numeric) {
            out.push_str(&format!("{x:?},{a:?},{n:?}\n"));
        }
        out
    }

    /// Largest `|numeric - analytic|` over the step samples.
    pub fn max_step_error(&self) -> f64 {
        self.step_samples
            .iter()
            .map(|&i| (self.numeric[i] - self.analytic[i]).abs())
            .fold(0.0, f64::max)
    }
}

pub fn compare_with_dense(img: &StepImage1D, points_per_unit: usize) -> Result<StepComparison> {
    let disc = discretise(img, points_per_unit)?;
    let measure = analytic_measure(img);
    let h = disc.spacing();
    let n = disc.positions.len();
    let mut analytic = vec![0.5 * h; n];
    analytic[0] += measure.boundary_atoms[0].1;
    analytic[n - 1] += measure.boundary_atoms[1].1;
    let mut step_samples = Vec::with_capacity(measure.step_atoms.len());
    for &(locus, mass) in &measure.step_atoms {
        let j = disc.left_sample(locus);
        analytic[j] += mass;
        step_samples.push(j);
    }
    let numeric = magnitude_vector(&disc.image, &disc.spec)?.weights;
    Ok(StepComparison {
        positions: disc.positions,
        analytic,
        numeric,
        step_samples,
    })
}
