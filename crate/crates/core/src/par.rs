//! Voxel-parallel helpers.
//!
//! With the `parallel` feature (on by default) work is spread over rayon's
//! pool; without it the same functions run sequentially. Reductions always
//! sum fixed-size chunks in index order and combine the partials pairwise,
//! so results are bit-identical for any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Reduction chunk length. Part of the determinism contract: changing it
/// changes the rounding of every reduction.
pub const CHUNK: usize = 4096;

/// Number of worker threads the helpers will use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// `out[i] = f(i)` for every index.
pub fn fill<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        let base = c * CHUNK;
        for (k, v) in chunk.iter_mut().enumerate() {
            *v = f(base + k);
        }
    });
    #[cfg(not(feature = "parallel"))]
    for (i, v) in out.iter_mut().enumerate() {
        *v = f(i);
    }
}

pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().with_min_len(CHUNK / 4).map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Calls `f(z, slab)` for each z-slab of length `slab_len`.
pub fn for_each_slab<T, F>(out: &mut [T], slab_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(slab_len).enumerate().for_each(|(z, s)| f(z, s));
    #[cfg(not(feature = "parallel"))]
    for (z, s) in out.chunks_mut(slab_len).enumerate() {
        f(z, s);
    }
}

/// Deterministic sum of `K` quantities at once.
pub fn sum_n<const K: usize, F>(n: usize, f: F) -> [f64; K]
where
    F: Fn(usize) -> [f64; K] + Sync + Send,
{
    let chunk_sum = |c: usize| {
        let mut acc = [0.0; K];
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            let v = f(i);
            for k in 0..K {
                acc[k] += v[k];
            }
        }
        acc
    };
    let nchunks = n.div_ceil(CHUNK);
    #[cfg(feature = "parallel")]
    let partials: Vec<[f64; K]> = (0..nchunks).into_par_iter().map(chunk_sum).collect();
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<[f64; K]> = (0..nchunks).map(chunk_sum).collect();
    pairwise(partials)
}

pub fn sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    sum_n::<1, _>(n, |i| [f(i)])[0]
}

fn pairwise<const K: usize>(mut v: Vec<[f64; K]>) -> [f64; K] {
    if v.is_empty() {
        return [0.0; K];
    }
    while v.len() > 1 {
        let next = v
            .chunks(2)
            .map(|p| {
                let mut a = p[0];
                if let Some(b) = p.get(1) {
                    for k in 0..K {
                        a[k] += b[k];
                    }
                }
                a
            })
            .collect();
        v = next;
    }
    v[0]
}
