//! Betti curves of edge maps under a superlevel-set filtration.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edges::EdgeMap;
use crate::error::{Error, Result};

pub const DEFAULT_LEVELS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BettiCurve {
    pub thresholds: Vec<f64>,
    pub betti0: Vec<usize>,
    pub betti1: Vec<usize>,
}

impl BettiCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,betti0,betti1\n");
        for ((t, b0), b1) in self.thresholds.iter().zip(&self.betti0).zip(&self.betti1) {
            out.push_str(&format!("{t:?},{b0},{b1}\n"));
        }
        out
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connected components of the `true` pixels under 8- or 4-connectivity.
fn components(mask: &[bool], width: usize, height: usize, eight: bool) -> usize {
    let mut uf = UnionFind::new(mask.len());
    let offsets: &[(isize, isize)] = if eight { &[(1, 0), (-1, 1), (0, 1), (1, 1)] } else { &[(1, 0), (0, 1)] };
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            for &(dx, dy) in offsets {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if mask[j] {
                    uf.union(i, j);
                }
            }
        }
    }
    (0..mask.len()).filter(|&i| mask[i] && uf.find(i) == i).count()
}

/// `(b0, b1)`: 8-connected foreground components and holes of the 4-connected background.
pub fn betti_numbers(mask: &[bool], width: usize, height: usize) -> (usize, usize) {
    let b0 = components(mask, width, height, true);
    let (pw, ph) = (width + 2, height + 2);
    let mut background = vec![true; pw * ph];
    for y in 0..height {
        for x in 0..width {
            background[(y + 1) * pw + x + 1] = !mask[y * width + x];
        }
    }
    let b1 = components(&background, pw, ph, false) - 1;
    (b0, b1)
}

/// `V - E + F` of the union of closed unit squares at the foreground pixels.
pub fn euler_characteristic(mask: &[bool], width: usize, height: usize) -> i64 {
    let mut vertices = HashSet::new();
    let mut edges = HashSet::new();
    let mut faces = 0i64;
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            faces += 1;
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                vertices.insert((x + dx, y + dy));
            }
            // horizontal edges keyed by left endpoint, vertical by top endpoint
            edges.insert((x, y, 0u8));
            edges.insert((x, y + 1, 0u8));
            edges.insert((x, y, 1u8));
            edges.insert((x + 1, y, 1u8));
        }
    }
    vertices.len() as i64 - edges.len() as i64 + faces
}

/// Threshold grid `(k + 1) / levels` for `k = 0..levels`.
pub fn level_grid(levels: usize) -> Vec<f64> {
    (0..levels).map(|k| (k + 1) as f64 / levels as f64).collect()
}

pub fn betti_curve(map: &EdgeMap, levels: usize) -> Result<BettiCurve> {
    if levels < 2 {
        return Err(Error::config(format!("need at least 2 levels, got {levels}")));
    }
    let thresholds = level_grid(levels);
    let numbers: Vec<(usize, usize)> = thresholds
        .par_iter()
        .map(|&t| betti_numbers(&map.threshold(t), map.width, map.height))
        .collect();
    Ok(BettiCurve {
        thresholds,
        betti0: numbers.iter().map(|n| n.0).collect(),
        betti1: numbers.iter().map(|n| n.1).collect(),
    })
}

/// Euclidean norms of both Betti sequences divided by the square root of their length.
pub fn betti_norm(curve: &BettiCurve) -> (f64, f64) {
    let norm = |v: &[usize]| {
        if v.is_empty() {
            0.0
        } else {
            (v.iter().map(|&b| (b * b) as f64).sum::<f64>() / v.len() as f64).sqrt()
        }
    };
    (norm(&curve.betti0), norm(&curve.betti1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn from_fn(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> Vec<bool> {
        (0..w * h).map(|i| f(i % w, i / w)).collect()
    }

    #[test]
    fn examples() {
        let zero = EdgeMap::probabilistic(6, 6, vec![0.0; 36]);
        let c = betti_curve(&zero, 8).unwrap();
        assert!(c.betti0.iter().chain(&c.betti1).all(|&b| b == 0));
        assert_eq!(betti_norm(&c), (0.0, 0.0));

        let ring = from_fn(7, 7, |x, y| (1..6).contains(&x) && (1..6).contains(&y) && !(x == 3 && y == 3));
        let m = EdgeMap::binary(7, 7, &ring);
        let c = betti_curve(&m, 16).unwrap();
        assert!(c.betti0.iter().all(|&b| b == 1) && c.betti1.iter().all(|&b| b == 1));

        let squares = from_fn(8, 4, |x, y| (1..3).contains(&y) && ((1..3).contains(&x) || (5..7).contains(&x)));
        assert_eq!(betti_numbers(&squares, 8, 4), (2, 0));
        assert!(betti_curve(&zero, 1).is_err());
    }

    #[test]
    fn constant_curve_norm() {
        let c = BettiCurve {
            thresholds: level_grid(5),
            betti0: vec![3; 5],
            betti1: vec![0; 5],
        };
        assert_eq!(betti_norm(&c).0, 3.0);
    }

    #[test]
    fn diagonal_pixels_touch() {
        let diag = from_fn(3, 3, |x, y| x == y);
        assert_eq!(betti_numbers(&diag, 3, 3), (1, 0));
        assert_eq!(euler_characteristic(&diag, 3, 3), 1);
        let diamond = from_fn(3, 3, |x, y| (x + y) % 2 == 1);
        assert_eq!(betti_numbers(&diamond, 3, 3), (1, 1));
        assert_eq!(euler_characteristic(&diamond, 3, 3), 0);
    }

    proptest! {
        #[test]
        fn euler_agrees_with_union_find(bits in proptest::collection::vec(any::<bool>(), 49)) {
            let (b0, b1) = betti_numbers(&bits, 7, 7);
            prop_assert_eq!(b0 as i64 - b1 as i64, euler_characteristic(&bits, 7, 7));
        }

        #[test]
        fn superlevel_sets_shrink(vals in proptest::collection::vec(0.0f64..1.0, 36)) {
            let m = EdgeMap::probabilistic(6, 6, vals);
            let grid = level_grid(10);
            for w in grid.windows(2) {
                let (a, b) = (m.threshold(w[0]), m.threshold(w[1]));
                prop_assert!(a.iter().zip(&b).all(|(x, y)| !*y || *x));
            }
        }
    }
}
