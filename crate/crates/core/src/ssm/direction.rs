use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Traversal order of a token grid for one scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanDirection {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowForward,
        ScanDirection::RowBackward,
        ScanDirection::ColForward,
        ScanDirection::ColBackward,
    ];

    /// `order[k]` is the raster index visited at step `k`.
    pub fn order(self, grid: (usize, usize)) -> Vec<usize> {
        let (h, w) = grid;
        let raster: Vec<usize> = (0..h * w).collect();
        let column: Vec<usize> = (0..w).flat_map(|c| (0..h).map(move |r| r * w + c)).collect();
        match self {
            ScanDirection::RowForward => raster,
            ScanDirection::RowBackward => raster.into_iter().rev().collect(),
            ScanDirection::ColForward => column,
            ScanDirection::ColBackward => column.into_iter().rev().collect(),
        }
    }

    pub fn is_identity(self) -> bool {
        self == ScanDirection::RowForward
    }
}

/// Inverse permutation: `inv[order[k]] = k`.
pub fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (k, &p) in order.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// How a block traverses its token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Traversal {
    pub grid: (usize, usize),
    pub directions: Vec<ScanDirection>,
}

impl Traversal {
    pub fn new(grid: (usize, usize), directions: Vec<ScanDirection>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::contract("direction set must be nonempty"));
        }
        if grid.0 == 0 || grid.1 == 0 {
            return Err(Error::contract(format!("degenerate grid {grid:?}")));
        }
        Ok(Self { grid, directions })
    }

    /// Single left-to-right pass over a length-`len` sequence.
    pub fn causal(len: usize) -> Self {
        Self {
            grid: (1, len),
            directions: vec![ScanDirection::RowForward],
        }
    }

    /// Forward and reversed passes over a length-`len` sequence.
    pub fn bidirectional(len: usize) -> Self {
        Self {
            grid: (1, len),
            directions: vec![ScanDirection::RowForward, ScanDirection::RowBackward],
        }
    }

    pub fn four_way(grid: (usize, usize)) -> Self {
        Self {
            grid,
            directions: ScanDirection::ALL.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_causal(&self) -> bool {
        self.directions == [ScanDirection::RowForward]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn column_order_on_2x3() {
        assert_eq!(ScanDirection::ColForward.order((2, 3)), vec![0, 3, 1, 4, 2, 5]);
        assert_eq!(ScanDirection::ColBackward.order((2, 3)), vec![5, 2, 4, 1, 3, 0]);
        assert_eq!(ScanDirection::RowBackward.order((2, 3)), vec![5, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn empty_direction_set_is_rejected() {
        assert!(matches!(Traversal::new((2, 2), vec![]), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn reorder_then_inverse_is_identity(h in 1usize..9, w in 1usize..9, data in proptest::collection::vec(-1e3f64..1e3, 81)) {
            let xs = &data[..h * w];
            for dir in ScanDirection::ALL {
                let order = dir.order((h, w));
                let inv = inverse(&order);
                let reordered: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
                let back: Vec<f64> = inv.iter().map(|&k| reordered[k]).collect();
                prop_assert_eq!(&back[..], xs);
            }
        }
    }
}
