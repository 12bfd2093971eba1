//! Feature vectors, base metrics and similarity matrices.
//!
//! A pixel at column `x`, row `y` with channels `c` becomes the point
//! `(x, y, s*c_1, ..., s*c_n)` where `s` is the channel weight. When an
//! embedding is attached, those vectors are pushed through its encoder and
//! the base metric is measured in latent space (a pullback metric).

use std::sync::Arc;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::DigitalImage;
use crate::learn::EmbeddingModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseMetric {
    /// Sum of absolute coordinate differences.
    #[default]
    L1,
    /// Euclidean distance.
    L2,
    /// Number of differing coordinates.
    Hamming,
}

impl std::str::FromStr for BaseMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "manhattan" => Ok(BaseMetric::L1),
            "l2" | "euclidean" => Ok(BaseMetric::L2),
            "hamming" | "l0" => Ok(BaseMetric::Hamming),
            other => Err(Error::config(format!("unknown metric {other:?}"))),
        }
    }
}

impl BaseMetric {
    #[inline]
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            BaseMetric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            BaseMetric::L2 => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            BaseMetric::Hamming => a.iter().zip(b).filter(|(x, y)| x != y).count() as f64,
        }
    }
}

/// Which metric to put on the pixels of an image.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSpec {
    pub base: BaseMetric,
    /// Multiplier `s` applied to channel values.
    pub channel_weight: f64,
    /// Length of one pixel step along the image axes.
    pub coordinate_scale: f64,
    /// Encoder whose latent space carries the base metric.
    #[serde(skip)]
    pub embedding: Option<Arc<EmbeddingModel>>,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            base: BaseMetric::L1,
            channel_weight: 1.0,
            coordinate_scale: 1.0,
            embedding: None,
        }
    }
}

impl PartialEq for MetricSpec {
    fn eq(&self, other: &Self) -> bool {
        self.base == other.base
            && self.channel_weight == other.channel_weight
            && self.coordinate_scale == other.coordinate_scale
            && match (&self.embedding, &other.embedding) {
                (None, None) => true,
                (Some(a), Some(b)) => Arc::ptr_eq(a, b) || a == b,
                _ => false,
            }
    }
}

impl MetricSpec {
    pub fn l1(channel_weight: f64) -> Self {
        Self {
            channel_weight,
            ..Self::default()
        }
    }

    pub fn with_base(mut self, base: BaseMetric) -> Self {
        self.base = base;
        self
    }

    pub fn with_embedding(mut self, model: Arc<EmbeddingModel>) -> Self {
        self.embedding = Some(model);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.channel_weight >= 0.0 && self.channel_weight.is_finite()) {
            return Err(Error::config(format!(
                "channel weight must be finite and nonnegative, got {}",
                self.channel_weight
            )));
        }
        if !(self.coordinate_scale > 0.0 && self.coordinate_scale.is_finite()) {
            return Err(Error::config(format!(
                "coordinate scale must be positive, got {}",
                self.coordinate_scale
            )));
        }
        if self.base == BaseMetric::Hamming && self.embedding.is_some() {
            return Err(Error::config("the Hamming metric cannot be combined with an embedding"));
        }
        Ok(())
    }
}

/// Row-major `n x dim` table of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    dim: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                left: data.len(),
                right: dim,
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                left: r.len(),
                right: dim,
            });
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// First pair `(i, j)`, `i < j`, with bitwise identical rows, ordered by `j`.
    pub fn first_duplicate(&self) -> Option<(usize, usize)> {
        let mut seen = std::collections::HashMap::with_capacity(self.len());
        for (j, row) in self.rows().enumerate() {
            // -0.0 and 0.0 are the same point
            let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
            if let Some(&i) = seen.get(&key) {
                return Some((i, j));
            }
            seen.insert(key, j);
        }
        None
    }
}

/// Raw feature vectors `(x*h, y*h, s*c_1, ..., s*c_n)` with `h` the coordinate scale.
pub fn base_features(img: &DigitalImage, spec: &MetricSpec) -> Features {
    let dim = 2 + img.channels();
    let h = spec.coordinate_scale;
    let s = spec.channel_weight;
    let mut data = Vec::with_capacity(img.len() * dim);
    for p in img.points() {
        data.push(p.x as f64 * h);
        data.push(p.y as f64 * h);
        data.extend(p.c.iter().map(|v| s * v));
    }
    Features { dim, data }
}

/// Feature vectors of every pixel, passed through the embedding encoder when one is set.
pub fn featurize(img: &DigitalImage, spec: &MetricSpec) -> Result<Features> {
    match &spec.embedding {
        None => Ok(base_features(img, spec)),
        Some(model) => model.encode_image(img, spec),
    }
}

pub fn distance(a: &[f64], b: &[f64], base: BaseMetric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(base.eval(a, b))
}

/// Dense symmetric matrix `exp(-d(i, j))`.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    entries: Mat<f64>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn as_mat(&self) -> &Mat<f64> {
        &self.entries
    }

    pub fn into_mat(self) -> Mat<f64> {
        self.entries
    }
}

pub fn similarity_matrix(features: &Features, base: BaseMetric) -> SimilarityMatrix {
    let n = features.len();
    let mut entries = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        let fj = features.row(j);
        entries[(j, j)] = 1.0;
        for i in j + 1..n {
            let v = (-base.eval(features.row(i), fj)).exp();
            entries[(i, j)] = v;
        }
    }
    for j in 0..n {
        for i in j + 1..n {
            entries[(j, i)] = entries[(i, j)];
        }
    }
    SimilarityMatrix { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn featurize_examples() {
        let one = DigitalImage::gray(1, 1, vec![0.5]).unwrap();
        assert_eq!(featurize(&one, &MetricSpec::l1(1.0)).unwrap().as_slice(), &[0.0, 0.0, 0.5]);

        let two = DigitalImage::gray(2, 1, vec![0.0, 1.0]).unwrap();
        let f = featurize(&two, &MetricSpec::l1(2.0)).unwrap();
        assert_eq!(f.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(f.row(1), &[1.0, 0.0, 2.0]);

        let four = DigitalImage::gray(2, 2, vec![0.1, 0.9, 0.4, 0.7]).unwrap();
        let f = featurize(&four, &MetricSpec::l1(0.0)).unwrap();
        let coords: Vec<_> = f.rows().map(|r| (r[0], r[1], r[2])).collect();
        assert_eq!(coords, vec![(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (1.0, 1.0, 0.0)]);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(&[0.0, 0.0, 0.0], &[1.0, 0.0, 2.0], BaseMetric::L1).unwrap(), 3.0);
        assert_eq!(distance(&[0.0, 0.0], &[3.0, 4.0], BaseMetric::L2).unwrap(), 5.0);
        assert_eq!(distance(&[0.0, 0.0, 7.0], &[0.0, 1.0, 7.0], BaseMetric::Hamming).unwrap(), 1.0);
        assert!(matches!(
            distance(&[0.0], &[0.0, 1.0], BaseMetric::L1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn similarity_examples() {
        let one = Features::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(similarity_matrix(&one, BaseMetric::L1).get(0, 0), 1.0);

        let ln2 = std::f64::consts::LN_2;
        let two = Features::from_rows(&[vec![0.0], vec![ln2]]).unwrap();
        let z = similarity_matrix(&two, BaseMetric::L1);
        assert!((z.get(0, 1) - 0.5).abs() < 1e-15);

        let three = Features::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let z = similarity_matrix(&three, BaseMetric::L1);
        assert!((z.get(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((z.get(0, 2) - (-2.0f64).exp()).abs() < 1e-15);
        assert_eq!(z.get(2, 0), z.get(0, 2));
    }

    #[test]
    fn hamming_with_embedding_is_rejected() {
        let model = Arc::new(EmbeddingModel::identity_model_i(1).unwrap());
        let spec = MetricSpec::default()
            .with_base(BaseMetric::Hamming)
            .with_embedding(model);
        assert!(spec.validate().is_err());
        assert!(MetricSpec::l1(-1.0).validate().is_err());
    }

    #[test]
    fn duplicate_detection_finds_first_pair() {
        let f = Features::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![1.0], vec![0.0]]).unwrap();
        assert_eq!(f.first_duplicate(), Some((1, 3)));
        let g = Features::from_rows(&[vec![0.0], vec![-0.0]]).unwrap();
        assert_eq!(g.first_duplicate(), Some((0, 1)));
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, 3)
    }

    proptest! {
        #[test]
        fn metric_axioms(a in vec3(), b in vec3(), c in vec3()) {
            for base in [BaseMetric::L1, BaseMetric::L2, BaseMetric::Hamming] {
                let ab = base.eval(&a, &b);
                prop_assert_eq!(ab, base.eval(&b, &a));
                prop_assert_eq!(base.eval(&a, &a), 0.0);
                prop_assert!(ab <= base.eval(&a, &c) + base.eval(&c, &b) + 1e-12);
                if a != b {
                    prop_assert!(ab > 0.0);
                }
            }
        }

        #[test]
        fn similarity_entries_in_unit_interval(
            vals in proptest::collection::vec(0.0f64..1.0, 9),
            s in 0.0f64..4.0,
        ) {
            let img = DigitalImage::gray(3, 3, vals).unwrap();
            let f = featurize(&img, &MetricSpec::l1(s)).unwrap();
            prop_assert!(f.first_duplicate().is_none());
            let z = similarity_matrix(&f, BaseMetric::L1);
            for i in 0..9 {
                prop_assert_eq!(z.get(i, i), 1.0);
                for j in 0..9 {
                    prop_assert!(z.get(i, j) > 0.0 && z.get(i, j) <= 1.0);
                    prop_assert_eq!(z.get(i, j), z.get(j, i));
                }
            }
        }
    }
}
