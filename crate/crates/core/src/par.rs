//! Data-parallel execution with a deterministic reduction order.
//!
//! Work is always split into the same fixed chunks and results are returned
//! in chunk order, so sequential and parallel runs agree bit for bit.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    #[default]
    Sequential,
    /// Uses the rayon global pool when the `parallel` feature is enabled,
    /// otherwise behaves like `Sequential`.
    Parallel,
}

impl Execution {
    /// `f(0), …, f(n−1)` collected in index order.
    pub fn map_indexed<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Splits `0..n` into consecutive ranges of at most `chunk` items.
    pub fn chunks(n: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
        let chunk = chunk.max(1);
        (0..n.div_ceil(chunk))
            .map(|c| c * chunk..((c + 1) * chunk).min(n))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree_in_order() {
        let f = |i: usize| (i as f64).sqrt();
        assert_eq!(
            Execution::Sequential.map_indexed(100, f),
            Execution::Parallel.map_indexed(100, f)
        );
    }

    #[test]
    fn chunks_cover_range() {
        assert_eq!(Execution::chunks(5, 2), vec![0..2, 2..4, 4..5]);
        assert!(Execution::chunks(0, 3).is_empty());
    }
}
