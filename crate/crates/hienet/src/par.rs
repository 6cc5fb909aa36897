use hienet_core::trainer::BatchMap;
use rayon::prelude::*;

/// Runs batch items on the rayon pool; results keep index order, so sums
/// over them are independent of the thread count.
#[derive(Debug, Clone, Copy, Default)]
pub struct Rayon;

impl BatchMap for Rayon {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }
}
