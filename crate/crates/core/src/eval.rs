//! Approximation quality of magnitude maps and precision-recall scores of edge maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edges::{thin, EdgeMap};
use crate::error::{Error, Result};
use crate::exact::MagnitudeMap;
use crate::image::min_max_scale;

/// Matching radius as a fraction of the image diagonal.
pub const TOLERANCE_FRACTION: f64 = 0.0075;
/// Thresholds swept by default: `0.01, 0.02, ..., 0.99`.
pub const DEFAULT_THRESHOLDS: usize = 99;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxReport {
    pub linf: f64,
    pub frob: f64,
    pub corr: f64,
    pub runtime_ms: f64,
}

/// Pearson correlation; a constant side gives 0, or 1 when both sides are constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    match (saa > 0.0, sbb > 0.0) {
        (true, true) => (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

/// Compares min-max scaled versions of two maps of the same shape.
pub fn approx_report(ground_truth: &MagnitudeMap, approx: &MagnitudeMap) -> Result<ApproxReport> {
    if (ground_truth.width, ground_truth.height) != (approx.width, approx.height) {
        return Err(Error::ShapeMismatch(format!(
            "ground truth is {}x{}, approximation is {}x{}",
            ground_truth.width, ground_truth.height, approx.width, approx.height
        )));
    }
    let g = min_max_scale(&ground_truth.weights);
    let a = min_max_scale(&approx.weights);
    let linf = g.iter().zip(&a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let num: f64 = g.iter().zip(&a).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = g.iter().map(|x| x * x).sum();
    let frob = if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(ApproxReport {
        linf,
        frob,
        corr: pearson(&g, &a),
        runtime_ms: 0.0,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// Empty predictions have precision 1.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    /// Empty ground truth has recall 1.
    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f_score(&self) -> f64 {
        f_score(self.precision(), self.recall())
    }

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

pub fn f_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Default matching radius of a `width x height` image.
pub fn default_tolerance(width: usize, height: usize) -> f64 {
    TOLERANCE_FRACTION * ((width * width + height * height) as f64).sqrt()
}

/// Greedy nearest-first one-to-one matching of edge pixels within Euclidean radius `tol`.
pub fn match_edges(pred: &[bool], gt: &[bool], width: usize, height: usize, tol: f64) -> Counts {
    let r = tol.floor() as isize;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, _) in pred.iter().enumerate().filter(|(_, &p)| p) {
        let (x, y) = ((i % width) as isize, (i / width) as isize);
        for dy in -r..=r {
            for dx in -r..=r {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let d = ((dx * dx + dy * dy) as f64).sqrt();
                let j = ny as usize * width + nx as usize;
                if d <= tol && gt[j] {
                    pairs.push((d, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_pred = vec![false; pred.len()];
    let mut used_gt = vec![false; gt.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_pred[i] && !used_gt[j] {
            used_pred[i] = true;
            used_gt[j] = true;
            tp += 1;
        }
    }
    let np = pred.iter().filter(|&&p| p).count();
    let ng = gt.iter().filter(|&&g| g).count();
    Counts {
        tp,
        fp: np - tp,
        fn_: ng - tp,
    }
}

fn check_shape(pred: &EdgeMap, gt: &[bool]) -> Result<()> {
    if gt.len() != pred.width * pred.height {
        return Err(Error::ShapeMismatch(format!(
            "ground truth has {} pixels, prediction is {}x{}",
            gt.len(),
            pred.width,
            pred.height
        )));
    }
    Ok(())
}

/// Threshold at `t`, thin, then match against the ground truth.
pub fn pr_at_threshold(pred: &EdgeMap, gt: &[bool], t: f64, tol: f64) -> Result<Counts> {
    check_shape(pred, gt)?;
    let mask = thin(&pred.threshold(t), pred.width, pred.height);
    Ok(match_edges(&mask, gt, pred.width, pred.height, tol))
}

/// Evenly spaced thresholds `k / (count + 1)` for `k = 1..=count`.
pub fn threshold_grid(count: usize) -> Vec<f64> {
    (1..=count).map(|k| k as f64 / (count + 1) as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeEvalReport {
    pub ods: f64,
    pub ods_threshold: f64,
    pub ois: f64,
    pub ap: f64,
    pub r50: f64,
    pub images: usize,
    pub pr_curve: Vec<PrPoint>,
}

impl EdgeEvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn pr_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall,f\n");
        for p in &self.pr_curve {
            out.push_str(&format!("{:?},{:?},{:?},{:?}\n", p.threshold, p.precision, p.recall, p.f));
        }
        out
    }
}

/// Area under the precision-recall curve after making precision non-increasing in recall.
pub fn average_precision(points: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    for i in (0..pts.len().saturating_sub(1)).rev() {
        pts[i].1 = pts[i].1.max(pts[i + 1].1);
    }
    let Some(&(_, first_p)) = pts.first() else {
        return 0.0;
    };
    let mut area = 0.0;
    let mut prev = (0.0, first_p);
    for &(r, p) in &pts {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    area
}

/// Dataset sweep over `thresholds` levels. `tol` of `None` uses the per-image default radius.
pub fn edge_eval(pairs: &[(EdgeMap, Vec<bool>)], thresholds: usize, tol: Option<f64>) -> Result<EdgeEvalReport> {
    if pairs.is_empty() {
        return Err(Error::config("edge evaluation needs at least one image"));
    }
    let grid = threshold_grid(thresholds);
    let per_image: Vec<Vec<Counts>> = pairs
        .par_iter()
        .map(|(pred, gt)| {
            let tol = tol.unwrap_or_else(|| default_tolerance(pred.width, pred.height));
            grid.iter().map(|&t| pr_at_threshold(pred, gt, t, tol)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut curve = Vec::with_capacity(grid.len());
    for (k, &t) in grid.iter().enumerate() {
        let c = per_image.iter().fold(Counts::default(), |acc, img| acc.add(img[k]));
        curve.push(PrPoint {
            threshold: t,
            precision: c.precision(),
            recall: c.recall(),
            f: c.f_score(),
        });
    }
    let (ods_threshold, ods) = curve
        .iter()
        .fold((grid[0], f64::NEG_INFINITY), |best, p| if p.f > best.1 { (p.threshold, p.f) } else { best });
    let ois = per_image
        .iter()
        .map(|img| img.iter().map(Counts::f_score).fold(0.0, f64::max))
        .sum::<f64>()
        / per_image.len() as f64;
    let ap = average_precision(&curve.iter().map(|p| (p.recall, p.precision)).collect::<Vec<_>>());
    let r50 = curve.iter().filter(|p| p.precision >= 0.5).map(|p| p.recall).fold(0.0, f64::max);
    Ok(EdgeEvalReport {
        ods,
        ods_threshold,
        ois,
        ap,
        r50,
        images: pairs.len(),
        pr_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(w: usize, h: usize, v: Vec<f64>) -> MagnitudeMap {
        MagnitudeMap::new(w, h, v, None)
    }

    #[test]
    fn report_examples() {
        let g = map(2, 2, vec![0.1, 0.5, 0.9, 0.3]);
        let r = approx_report(&g, &g).unwrap();
        assert_eq!((r.linf, r.frob, r.corr), (0.0, 0.0, 1.0));
        let inv = map(2, 2, g.weights.iter().map(|v| 1.0 - v).collect());
        assert!((approx_report(&g, &inv).unwrap().corr + 1.0).abs() < 1e-12);
        assert!(approx_report(&g, &map(1, 4, g.weights.clone())).is_err());
    }

    #[test]
    fn frob_is_not_symmetric() {
        let a = map(3, 1, vec![0.0, 0.2, 1.0]);
        let b = map(3, 1, vec![0.0, 0.9, 1.0]);
        let ab = approx_report(&a, &b).unwrap();
        let ba = approx_report(&b, &a).unwrap();
        assert!(ab.frob != ba.frob);
        assert_eq!(ab.corr, ba.corr);
    }

    fn line_mask(w: usize, h: usize, col: usize) -> Vec<bool> {
        (0..w * h).map(|i| i % w == col).collect()
    }

    #[test]
    fn matching_examples() {
        let gt = line_mask(8, 8, 3);
        let exact = EdgeMap::binary(8, 8, &gt);
        let c = pr_at_threshold(&exact, &gt, 0.5, 1.0).unwrap();
        assert_eq!((c.fp, c.fn_, c.precision(), c.recall()), (0, 0, 1.0, 1.0));

        let shifted = EdgeMap::binary(8, 8, &line_mask(8, 8, 4));
        let c = pr_at_threshold(&shifted, &gt, 0.5, 2.0).unwrap();
        assert_eq!((c.precision(), c.recall()), (1.0, 1.0));

        let empty = EdgeMap::binary(8, 8, &[false; 64]);
        let c = pr_at_threshold(&empty, &gt, 0.5, 2.0).unwrap();
        assert_eq!((c.tp, c.fn_, c.precision(), c.recall()), (0, 8, 1.0, 0.0));
        assert!(pr_at_threshold(&empty, &gt[1..], 0.5, 2.0).is_err());
    }

    #[test]
    fn each_gt_pixel_matches_once() {
        let gt: Vec<bool> = (0..9).map(|i| i == 4).collect();
        let pred: Vec<bool> = (0..9).map(|i| i == 3 || i == 5).collect();
        let c = match_edges(&pred, &gt, 3, 3, 1.5);
        assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 0));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = line_mask(10, 10, 4);
        let pairs = vec![(EdgeMap::binary(10, 10, &gt), gt.clone()), (EdgeMap::binary(10, 10, &gt), gt)];
        let r = edge_eval(&pairs, 99, None).unwrap();
        assert_eq!((r.ods, r.ois, r.ap, r.r50), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.pr_curve.len(), 99);
        assert!(r.pr_curve.windows(2).all(|w| w[0].threshold < w[1].threshold));
        assert!((r.pr_curve[0].threshold - 0.01).abs() < 1e-12);
    }

    #[test]
    fn ods_can_exceed_ois() {
        // one large perfect image and one tiny image with a single wrong pixel
        let gt_a = line_mask(10, 10, 4);
        let gt_b: Vec<bool> = (0..100).map(|i| i == 0).collect();
        let pred_b: Vec<bool> = (0..100).map(|i| i == 99).collect();
        let pairs = vec![(EdgeMap::binary(10, 10, &gt_a), gt_a), (EdgeMap::binary(10, 10, &pred_b), gt_b)];
        let r = edge_eval(&pairs, 9, Some(1.0)).unwrap();
        assert_eq!(r.ois, 0.5);
        assert!(r.ods > 0.9);
    }

    #[test]
    fn ap_of_a_staircase() {
        assert!((average_precision(&[(0.5, 1.0), (1.0, 0.5)]) - 0.875).abs() < 1e-12);
        assert_eq!(average_precision(&[]), 0.0);
    }

    proptest! {
        #[test]
        fn sweep_invariants(vals in proptest::collection::vec(0.0f64..1.0, 2 * 64), bits in proptest::collection::vec(any::<bool>(), 2 * 64)) {
            let pairs: Vec<(EdgeMap, Vec<bool>)> = (0..2)
                .map(|i| (EdgeMap::probabilistic(8, 8, vals[i * 64..(i + 1) * 64].to_vec()), bits[i * 64..(i + 1) * 64].to_vec()))
                .collect();
            let r = edge_eval(&pairs, 19, Some(1.0)).unwrap();
            let single = edge_eval(&pairs[..1], 19, Some(1.0)).unwrap();
            prop_assert_eq!(single.ois, single.ods);
            for p in &r.pr_curve {
                prop_assert!(r.ods >= p.f);
            }
            for s in [r.ods, r.ois, r.ap, r.r50] {
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn raising_threshold_never_grows_the_prediction(vals in proptest::collection::vec(0.0f64..1.0, 64), t in 0.0f64..1.0, dt in 0.0f64..0.5) {
            // monotone before thinning, and after it whenever the superlevel sets are thin already
            let m = EdgeMap::probabilistic(8, 8, vals);
            let count = |t: f64| m.threshold(t).iter().filter(|&&b| b).count();
            prop_assert!(count(t + dt) <= count(t));
            let ridge: Vec<f64> = (0..64).map(|i| if i % 8 == 3 { m.values[i] } else { 0.0 }).collect();
            let r = EdgeMap::probabilistic(8, 8, ridge);
            let gt = vec![false; 64];
            let a = pr_at_threshold(&r, &gt, t, 1.0).unwrap();
            let b = pr_at_threshold(&r, &gt, t + dt, 1.0).unwrap();
            prop_assert!(b.tp + b.fp <= a.tp + a.fp);
        }

        #[test]
        fn pearson_is_symmetric(a in proptest::collection::vec(0.0f64..1.0, 10), b in proptest::collection::vec(0.0f64..1.0, 10)) {
            prop_assert!((pearson(&a, &b) - pearson(&b, &a)).abs() < 1e-12);
            prop_assert!(pearson(&a, &b).abs() <= 1.0);
        }
    }
}
