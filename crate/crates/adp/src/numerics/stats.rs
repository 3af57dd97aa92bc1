//! Pairwise-distance statistics over datasets.

use ndarray::ArrayView2;

use crate::{Error, Result};

use super::rng::RngStream;

/// Row cap above which pairwise statistics run on a seeded subsample,
/// bounding the O(n^2) distance pass.
pub const PAIRWISE_SUBSAMPLE_CAP: usize = 2000;

fn subsample_rows(n: usize) -> Vec<usize> {
    if n <= PAIRWISE_SUBSAMPLE_CAP {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    // fixed derivation: same row count => same subsample
    let mut rng = RngStream::derive(0x9a17_5ca1e, n as u64);
    rng.shuffle(&mut idx);
    idx.truncate(PAIRWISE_SUBSAMPLE_CAP);
    idx
}

fn pairwise_distances(data: &ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let n = data.nrows();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "pairwise statistics need at least 2 rows, got {n}"
        )));
    }
    let rows = subsample_rows(n);
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        let ri = data.row(i);
        for &j in rows.iter().skip(a + 1) {
            let rj = data.row(j);
            let mut acc = 0.0;
            for (u, v) in ri.iter().zip(rj.iter()) {
                let d = u - v;
                acc += d * d;
            }
            dists.push(acc.sqrt());
        }
    }
    Ok(dists)
}

/// Noise level from the kernel-bandwidth heuristic: the median pairwise
/// Euclidean distance divided by `sqrt(D)`. Even counts take the lower
/// middle element.
pub fn median_heuristic_sigma(data: &ArrayView2<'_, f64>) -> Result<f64> {
    let mut dists = pairwise_distances(data)?;
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let median = dists[(dists.len() - 1) / 2];
    Ok(median / (data.ncols() as f64).sqrt())
}

/// Largest pairwise Euclidean distance (over the same bounded subsample);
/// used to pick the coarsest noise-schedule level.
pub fn max_pairwise_distance(data: &ArrayView2<'_, f64>) -> Result<f64> {
    let dists = pairwise_distances(data)?;
    Ok(dists.iter().cloned().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn median_of_three_points_1d() {
        let data = array![[0.0], [1.0], [3.0]];
        // pairwise distances {1, 2, 3}, median 2, sqrt(D) = 1
        assert_eq!(median_heuristic_sigma(&data.view()).unwrap(), 2.0);
    }

    #[test]
    fn identical_points_give_zero() {
        let data = array![[2.0, 2.0], [2.0, 2.0], [2.0, 2.0]];
        assert_eq!(median_heuristic_sigma(&data.view()).unwrap(), 0.0);
    }

    #[test]
    fn single_row_is_insufficient() {
        let data = array![[1.0, 2.0]];
        assert!(median_heuristic_sigma(&data.view()).is_err());
        assert!(max_pairwise_distance(&data.view()).is_err());
    }

    #[test]
    fn even_count_takes_lower_middle() {
        // distances: {1, 9, 10} from points 0,1,10 plus point 20 ->
        // {1,10,20,9,19,10} sorted {1,9,10,10,19,20}; lower middle = 10
        let data = array![[0.0], [1.0], [10.0], [20.0]];
        assert_eq!(median_heuristic_sigma(&data.view()).unwrap(), 10.0);
    }

    #[test]
    fn max_pairwise_simple() {
        let data = array![[0.0, 0.0], [3.0, 4.0]];
        assert_eq!(max_pairwise_distance(&data.view()).unwrap(), 5.0);
        let d1 = array![[0.0], [1.0], [10.0]];
        assert_eq!(max_pairwise_distance(&d1.view()).unwrap(), 10.0);
    }

    #[test]
    fn median_is_permutation_invariant() {
        let data = array![[0.0, 1.0], [4.0, -2.0], [1.5, 0.5], [-3.0, 2.0]];
        let perm = array![[1.5, 0.5], [-3.0, 2.0], [0.0, 1.0], [4.0, -2.0]];
        assert_eq!(
            median_heuristic_sigma(&data.view()).unwrap(),
            median_heuristic_sigma(&perm.view()).unwrap()
        );
    }
}
