//! Weight-sharing and capacity statistics over stored task masks.

use serde::{Deserialize, Serialize};

use crate::ibp::{pad_mask, union_masks};
use crate::tensor::Tensor;

/// Hardened binary masks of one task, one per IBP layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMask {
    pub layers: Vec<Tensor>,
}

/// One `structure.csv` row: sharing between tasks `a ≤ b` and the fraction
/// of the layer filled after task `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureRow {
    pub layer: usize,
    pub task_a: usize,
    pub task_b: usize,
    pub sharing: f64,
    pub filled: f64,
}

fn count(t: &Tensor) -> usize {
    t.data().iter().filter(|&&v| v > 0.0).count()
}

/// `|A ∧ B| / |A ∨ B|`; two empty masks share nothing.
pub fn sharing(a: &Tensor, b: &Tensor) -> f64 {
    let rows = a.rows().max(b.rows());
    let cols = a.cols().max(b.cols());
    let (a, b) = (pad_mask(a, rows, cols), pad_mask(b, rows, cols));
    let (mut both, mut either) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        both += usize::from(x > 0.0 && y > 0.0);
        either += usize::from(x > 0.0 || y > 0.0);
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// `|B¹ ∪ … ∪ Bᵏ| / (D · K)` with `D × K` the shape of the union.
pub fn filled(masks: &[&Tensor]) -> f64 {
    match union_masks(masks) {
        Some(u) if u.numel() > 0 => count(&u) as f64 / u.numel() as f64,
        _ => 0.0,
    }
}

pub fn structure_report(masks: &[TaskMask]) -> Vec<StructureRow> {
    let layers = masks.first().map_or(0, |m| m.layers.len());
    let mut rows = Vec::new();
    for l in 0..layers {
        for b in 0..masks.len() {
            let upto: Vec<&Tensor> = masks[..=b].iter().map(|m| &m.layers[l]).collect();
            let fill = filled(&upto);
            for a in 0..=b {
                rows.push(StructureRow {
                    layer: l,
                    task_a: a,
                    task_b: b,
                    sharing: sharing(&masks[a].layers[l], &masks[b].layers[l]),
                    filled: fill,
                });
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint() {
        let a = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        let b = Tensor::from_rows(&[[0.0, 1.0], [0.0, 1.0]]);
        assert_eq!(sharing(&a, &a), 1.0);
        assert_eq!(sharing(&a, &b), 0.0);
        assert_eq!(filled(&[&a]), 0.5);
        assert_eq!(filled(&[&a, &b]), 1.0);
    }

    #[test]
    fn report_layout() {
        let m = |v: f64| TaskMask {
            layers: vec![Tensor::full(&[2, 2], v)],
        };
        let rows = structure_report(&[m(1.0), m(0.0), m(1.0)]);
        assert_eq!(rows.len(), 6);
        assert!(rows.windows(2).all(|w| w[0].task_b > w[1].task_b || w[1].filled >= w[0].filled));
    }
}
