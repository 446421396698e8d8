//! Index-ordered map over independent work items, on the rayon pool when the
//! `parallel` feature is enabled. Results always come back in index order, so
//! callers that fold them sequentially get identical numbers either way.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// `f(0), …, f(n−1)` in order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
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

    /// Consumes `items`, applying `f` to each, results in input order.
    pub fn map_owned<I, T, F>(self, items: Vec<I>, f: F) -> Vec<T>
    where
        I: Send,
        T: Send,
        F: Fn(usize, I) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.into_par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
            }
            _ => items.into_iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        for e in [Execution::Sequential, Execution::Parallel] {
            assert_eq!(e.map(5, |i| i * i), vec![0, 1, 4, 9, 16]);
            assert_eq!(e.map_owned(vec!["a", "b"], |i, s| format!("{i}{s}")), vec!["0a", "1b"]);
        }
    }
}
