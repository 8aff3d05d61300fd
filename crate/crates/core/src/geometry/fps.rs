//! Farthest point sampling.

use rand::Rng;

use super::cloud::{dist2, GeometryError};
use crate::numerics::rng::stream;

/// Greedy farthest point sampling of `k` indices.
///
/// The first index is drawn uniformly from the seeded `"fps"` stream (and
/// recorded implicitly by the seed); every following pick maximizes the
/// minimum distance to the already-chosen set, ties broken by the smallest
/// index.
pub fn farthest_point_sampling(
    positions: &[[f64; 3]],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, GeometryError> {
    let n = positions.len();
    if k < 1 || k > n {
        return Err(GeometryError::SampleCountOutOfRange { k, n });
    }
    let first = stream(seed, "fps").gen_range(0..n);
    farthest_point_sampling_from(positions, k, first)
}

/// The greedy core with an explicit first pick.
pub fn farthest_point_sampling_from(
    positions: &[[f64; 3]],
    k: usize,
    first: usize,
) -> Result<Vec<usize>, GeometryError> {
    let n = positions.len();
    if k < 1 || k > n {
        return Err(GeometryError::SampleCountOutOfRange { k, n });
    }
    if first >= n {
        return Err(GeometryError::SampleCountOutOfRange { k: first, n });
    }
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];

    let mut current = first;
    chosen.push(current);
    taken[current] = true;

    for _ in 1..k {
        let base = positions[current];
        for (i, p) in positions.iter().enumerate() {
            if !taken[i] {
                let d = dist2(&base, p);
                if d < min_d2[i] {
                    min_d2[i] = d;
                }
            }
        }
        // strict > keeps the smallest index on ties
        let mut best = f64::NEG_INFINITY;
        let mut best_i = usize::MAX;
        for i in 0..n {
            if !taken[i] && min_d2[i] > best {
                best = min_d2[i];
                best_i = i;
            }
        }
        current = best_i;
        chosen.push(current);
        taken[current] = true;
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn unit_square_diagonal_is_farthest() {
        let corners = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ];
        let picks = farthest_point_sampling_from(&corners, 2, 0).unwrap();
        assert_eq!(picks, vec![0, 3]);
    }

    #[test]
    fn k_equals_n_returns_every_index() {
        let pts: Vec<[f64; 3]> = (0..7).map(|i| [i as f64, 0.0, 0.0]).collect();
        let mut picks = farthest_point_sampling(&pts, 7, 3).unwrap();
        picks.sort_unstable();
        assert_eq!(picks, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let pts = vec![[0.0; 3], [1.0; 3]];
        assert!(farthest_point_sampling(&pts, 3, 0).is_err());
        assert!(farthest_point_sampling(&pts, 0, 0).is_err());
    }

    #[test]
    fn every_step_verified_maximal_by_exhaustive_scan() {
        let mut rng = crate::numerics::rng::stream(17, "fps-oracle");
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let picks = farthest_point_sampling(&pts, 8, 99).unwrap();

        // Greedy-step oracle: recompute each candidate's min distance to
        // the prefix from scratch and check the pick attains the maximum
        // (smallest index among attainers).
        for step in 1..picks.len() {
            let prefix = &picks[..step];
            let cand_min = |i: usize| -> f64 {
                prefix
                    .iter()
                    .map(|&c| dist2(&pts[c], &pts[i]))
                    .fold(f64::INFINITY, f64::min)
            };
            let mut best = f64::NEG_INFINITY;
            let mut best_i = usize::MAX;
            for i in 0..pts.len() {
                if prefix.contains(&i) {
                    continue;
                }
                let d = cand_min(i);
                if d > best {
                    best = d;
                    best_i = i;
                }
            }
            assert_eq!(picks[step], best_i, "step {step}");
        }
    }

    #[test]
    fn output_is_duplicate_free_subset() {
        let mut rng = crate::numerics::rng::stream(23, "fps-dup");
        let pts: Vec<[f64; 3]> = (0..30)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), 0.0])
            .collect();
        let picks = farthest_point_sampling(&pts, 30, 5).unwrap();
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), picks.len());
    }

    #[test]
    fn second_pick_attains_global_max_distance() {
        let mut rng = crate::numerics::rng::stream(31, "fps-k2");
        let pts: Vec<[f64; 3]> = (0..40)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ]
            })
            .collect();
        let picks = farthest_point_sampling(&pts, 2, 1234).unwrap();
        let max_d = (0..pts.len())
            .map(|i| dist2(&pts[picks[0]], &pts[i]))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(dist2(&pts[picks[0]], &pts[picks[1]]), max_d);
    }

    #[test]
    fn deterministic_given_seed() {
        let pts: Vec<[f64; 3]> = (0..20).map(|i| [(i * i) as f64 % 7.0, i as f64, 0.0]).collect();
        let a = farthest_point_sampling(&pts, 6, 42).unwrap();
        let b = farthest_point_sampling(&pts, 6, 42).unwrap();
        assert_eq!(a, b);
    }
}
