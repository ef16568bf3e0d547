//! Content-preserving reorderings of evidence chunks.

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng;

pub const DEFAULT_BANDS: usize = 6;
const ATTEMPTS_PER_DRAW: usize = 50;

/// A bijection on chunk indices.
///
/// `order()[j]` is the (0-based) chunk placed at position `j`. On the wire a
/// permutation is the same array written 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            order: (0..n).collect(),
        }
    }

    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &c in &order {
            if c >= n || seen[c] {
                return Err(invalid(format!("{order:?} is not a permutation of 0..{n}")));
            }
            seen[c] = true;
        }
        Ok(Permutation { order })
    }

    pub fn from_one_based(order: &[usize]) -> Result<Self> {
        if order.contains(&0) {
            return Err(invalid("1-based permutation contains 0"));
        }
        Self::from_order(order.iter().map(|i| i - 1).collect())
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.order.iter().map(|i| i + 1).collect()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &c)| i == c)
    }

    /// `positions()[chunk]` is the 0-based position of `chunk`.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.order.len()];
        for (p, &c) in self.order.iter().enumerate() {
            pos[c] = p;
        }
        pos
    }

    pub fn inverse(&self) -> Self {
        Permutation {
            order: self.positions(),
        }
    }

    /// Reorder by `self`, then reorder the result by `next`.
    pub fn then(&self, next: &Permutation) -> Result<Self> {
        if next.len() != self.len() {
            return Err(invalid("cannot compose permutations of different length"));
        }
        Ok(Permutation {
            order: next.order.iter().map(|&j| self.order[j]).collect(),
        })
    }

    pub fn apply<T: Clone>(&self, items: &[T]) -> Result<Vec<T>> {
        if items.len() != self.len() {
            return Err(invalid(format!(
                "permutation of {} chunks applied to {} items",
                self.len(),
                items.len()
            )));
        }
        Ok(self.order.iter().map(|&c| items[c].clone()).collect())
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = crate::Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::from_one_based(&v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Vec<usize> {
        p.one_based()
    }
}

/// Generator for banded permutations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandedSpec {
    pub n: usize,
    pub k_bands: usize,
    pub seed: u64,
}

impl BandedSpec {
    pub fn new(n: usize, k_bands: usize, seed: u64) -> Result<Self> {
        if k_bands == 0 {
            return Err(invalid("need at least one band"));
        }
        Ok(BandedSpec { n, k_bands, seed })
    }

    /// Contiguous position ranges; the first `n % k` bands hold one extra.
    pub fn bands(&self) -> Vec<Range<usize>> {
        band_ranges(self.n, self.k_bands)
    }

    /// Size of the reachable space, `prod(size!)`, saturating.
    pub fn space_size(&self) -> u128 {
        self.bands().iter().fold(1u128, |acc, b| {
            (1..=b.len() as u128).fold(acc, |a, f| a.saturating_mul(f))
        })
    }
}

pub fn band_ranges(n: usize, k: usize) -> Vec<Range<usize>> {
    let k = k.max(1);
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    (0..k)
        .map(|b| {
            let len = base + usize::from(b < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

fn banded_draw(spec: &BandedSpec, stream: u64) -> Permutation {
    let mut rng = rng::seeded(spec.seed, stream);
    let mut order: Vec<usize> = (0..spec.n).collect();
    for band in spec.bands() {
        rng::shuffle(&mut rng, &mut order[band]);
    }
    Permutation { order }
}

/// Shuffle within each band; elements never cross a band boundary.
pub fn banded_permutation(spec: &BandedSpec) -> Permutation {
    banded_draw(spec, 0)
}

/// Result of [`draw_unique`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniqueDraw {
    pub permutations: Vec<Permutation>,
    /// Fewer than the requested count were found.
    pub shortfall: bool,
}

/// Up to `m` distinct banded permutations.
///
/// Attempt `t` uses stream `t` of the spec's seed, so a draw for `m` is
/// always a prefix of a draw for any larger `m`. Gives up after `50 m`
/// attempts and flags the shortfall.
pub fn draw_unique(m: usize, spec: &BandedSpec) -> UniqueDraw {
    let mut seen = HashSet::new();
    let mut permutations = Vec::with_capacity(m);
    for t in 0..(ATTEMPTS_PER_DRAW * m) {
        if permutations.len() == m {
            break;
        }
        let p = banded_draw(spec, t as u64);
        if seen.insert(p.clone()) {
            permutations.push(p);
        }
    }
    let shortfall = permutations.len() < m;
    UniqueDraw {
        permutations,
        shortfall,
    }
}

/// Uniformly random permutation of `n` chunks.
pub fn uniform_permutation(n: usize, seed: u64) -> Permutation {
    let mut rng = rng::seeded(seed, 0);
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng, &mut order);
    Permutation { order }
}
