//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper produces results in index order, so callers get bitwise
//! identical output whether the work ran on one thread or many. With the
//! `parallel` feature disabled, [`Exec::Parallel`] silently degrades to
//! sequential execution.

/// Execution strategy for the data-parallel loops in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// The strategy used when callers do not pick one.
    pub fn default_for_build() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    /// Sets the size of the global worker pool. Must be called before any
    /// parallel work; a no-op without the `parallel` feature.
    pub fn set_threads(n: usize) -> Result<(), String> {
        #[cfg(feature = "parallel")]
        {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| e.to_string())
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = n;
            Ok(())
        }
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel if n > 1 => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Calls `f(i, chunk)` for each `chunk_len`-sized chunk of `data`.
    pub fn for_each_chunk<F>(self, data: &mut [f64], chunk_len: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if chunk_len == 0 {
            return;
        }
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel if data.len() > chunk_len => {
                use rayon::prelude::*;
                data.par_chunks_mut(chunk_len)
                    .enumerate()
                    .for_each(|(i, c)| f(i, c));
            }
            _ => data
                .chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c)),
        }
    }

    /// Like [`Exec::for_each_chunk`] over two buffers chunked in lockstep.
    pub fn for_each_chunk2<F>(
        self,
        a: &mut [f64],
        a_len: usize,
        b: &mut [f64],
        b_len: usize,
        f: F,
    ) where
        F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
    {
        if a_len == 0 || b_len == 0 {
            return;
        }
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel if a.len() > a_len => {
                use rayon::prelude::*;
                a.par_chunks_mut(a_len)
                    .zip(b.par_chunks_mut(b_len))
                    .enumerate()
                    .for_each(|(i, (x, y))| f(i, x, y));
            }
            _ => a
                .chunks_mut(a_len)
                .zip(b.chunks_mut(b_len))
                .enumerate()
                .for_each(|(i, (x, y))| f(i, x, y)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let seq = Exec::Sequential.map(100, |i| i * i);
        let par = Exec::Parallel.map(100, |i| i * i);
        assert_eq!(seq, par);
    }

    #[test]
    fn chunks_see_their_index() {
        let mut a = vec![0.0; 12];
        Exec::Parallel.for_each_chunk(&mut a, 4, |i, c| c.fill(i as f64));
        assert_eq!(&a[8..], &[2.0; 4]);
    }
}
