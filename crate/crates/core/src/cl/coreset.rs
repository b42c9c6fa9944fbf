//! Per-task coreset selection.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoresetMethod {
    Random,
    KCenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("coreset size {size} exceeds the {available} available examples")]
pub struct CoresetTooLarge {
    pub size: usize,
    pub available: usize,
}

/// Picks `size` indices of `data`. Returns `(chosen in pick order, remainder in original order)`.
pub fn coreset_select(
    data: &Dataset,
    method: CoresetMethod,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>), CoresetTooLarge> {
    let n = data.len();
    if size > n {
        return Err(CoresetTooLarge { size, available: n });
    }
    if size == 0 {
        return Ok((Vec::new(), (0..n).collect()));
    }
    let chosen = match method {
        CoresetMethod::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.truncate(size);
            idx
        }
        CoresetMethod::KCenter => k_center(&data.inputs, size, rng.random_range(0..n)),
    };
    let mut taken = vec![false; n];
    for &i in &chosen {
        taken[i] = true;
    }
    let rest = (0..n).filter(|&i| !taken[i]).collect();
    Ok((chosen, rest))
}

/// Greedy farthest-point selection in Euclidean input space starting at `first`.
/// Ties go to the lowest index.
pub fn k_center(x: &Tensor, size: usize, first: usize) -> Vec<usize> {
    let n = x.rows();
    let d = x.cols();
    let dist2 = |a: usize, b: usize| -> f64 {
        let (ra, rb) = (&x.data()[a * d..(a + 1) * d], &x.data()[b * d..(b + 1) * d]);
        ra.iter().zip(rb).map(|(p, q)| (p - q) * (p - q)).sum()
    };
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(i, first)).collect();
    while chosen.len() < size.min(n) {
        let next = (0..n)
            .fold((0, f64::NEG_INFINITY), |best, i| if nearest[i] > best.1 { (i, nearest[i]) } else { best })
            .0;
        chosen.push(next);
        for (i, m) in nearest.iter_mut().enumerate() {
            *m = m.min(dist2(i, next));
        }
    }
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(points: &[f64]) -> Dataset {
        let max = points.iter().copied().fold(0.0, f64::max);
        let x = Tensor::from_fn(points.len(), 1, |r, _| points[r] / max);
        Dataset::new(x, vec![0; points.len()], 1).unwrap()
    }

    #[test]
    fn k_center_hand_trace() {
        let d = line(&[0.0, 1.0, 2.0, 10.0]);
        assert_eq!(k_center(&d.inputs, 2, 0), vec![0, 3]);
    }

    #[test]
    fn size_zero_and_too_large() {
        let d = line(&[0.0, 1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, r) = coreset_select(&d, CoresetMethod::Random, 0, &mut rng).unwrap();
        assert!(c.is_empty());
        assert_eq!(r, vec![0, 1, 2]);
        assert_eq!(
            coreset_select(&d, CoresetMethod::KCenter, 4, &mut rng),
            Err(CoresetTooLarge { size: 4, available: 3 })
        );
    }

    #[test]
    fn random_is_reproducible_and_partitions() {
        let d = line(&(0..50).map(f64::from).collect::<Vec<_>>());
        let pick = |s| coreset_select(&d, CoresetMethod::Random, 10, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(pick(3), pick(3));
        let (c, r) = pick(3);
        let mut all: Vec<usize> = c.iter().chain(&r).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }
}
