//! Execution facade: sequential or rayon-parallel mapping over independent
//! work items (streams in a batch, documents in prep/eval).
//!
//! Results are collected in input order, so outputs are identical whichever
//! mode runs them. Building without the `parallel` feature removes the rayon
//! dependency entirely; `Mode::Parallel` then falls back to sequential.

/// How to run an independent-item loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

impl Mode {
    /// Parallel when compiled in, sequential otherwise.
    pub fn auto() -> Mode {
        if cfg!(feature = "parallel") {
            Mode::Parallel
        } else {
            Mode::Sequential
        }
    }
}

/// Cap rayon's worker count from the `TG_THREADS` environment variable.
/// No-op when the pool is already initialized or the feature is off.
pub fn init_threads_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("TG_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}

/// Map `f` over indexed items, collecting results in input order.
pub fn map_indexed<T, R, F>(mode: Mode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match mode {
        Mode::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        Mode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
        }
    }
}
