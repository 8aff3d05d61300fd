//! Exact k-nearest-neighbor search by full scan.
//!
//! Desk-scale clouds (n up to ~50k) do not need an acceleration structure;
//! ordering is on squared distance with ties broken by the smaller source
//! index, which makes results reproducible across platforms.

use super::cloud::{dist2, GeometryError};

/// Neighbor indices and distances, `targets.len() x k`, row-major.
#[derive(Clone, Debug)]
pub struct KnnResult {
    indices: Vec<usize>,
    distances: Vec<f64>,
    k: usize,
    /// True when the requested K exceeded the source count and rows were
    /// padded by repeating the nearest source.
    padded: bool,
}

impl KnnResult {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn padded(&self) -> bool {
        self.padded
    }

    pub fn targets(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, target: usize) -> &[usize] {
        &self.indices[target * self.k..(target + 1) * self.k]
    }

    pub fn distances_row(&self, target: usize) -> &[f64] {
        &self.distances[target * self.k..(target + 1) * self.k]
    }

    pub fn flat_indices(&self) -> &[usize] {
        &self.indices
    }
}

/// For each target, the `k` nearest sources in ascending distance order.
///
/// If `k > sources.len()` every row is padded to length `k` by repeating
/// its nearest source and the result is flagged.
pub fn k_nearest_neighbors(
    targets: &[[f64; 3]],
    sources: &[[f64; 3]],
    k: usize,
) -> Result<KnnResult, GeometryError> {
    if sources.is_empty() {
        return Err(GeometryError::EmptySources);
    }
    if k < 1 {
        return Err(GeometryError::InvalidNeighborCount);
    }
    let n = sources.len();
    let keep = k.min(n);
    let padded = k > n;

    let mut indices = Vec::with_capacity(targets.len() * k);
    let mut distances = Vec::with_capacity(targets.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);

    for t in targets {
        scratch.clear();
        scratch.extend(sources.iter().enumerate().map(|(i, s)| (dist2(t, s), i)));
        if keep < n {
            scratch.select_nth_unstable_by(keep - 1, |a, b| {
                a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
            });
            scratch.truncate(keep);
        }
        scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d2, i) in &scratch[..keep] {
            indices.push(i);
            distances.push(d2.sqrt());
        }
        for _ in keep..k {
            indices.push(scratch[0].1);
            distances.push(scratch[0].0.sqrt());
        }
    }
    Ok(KnnResult {
        indices,
        distances,
        k,
        padded,
    })
}
