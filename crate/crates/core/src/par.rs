//! Row-parallel helpers with a sequential fallback.
//!
//! Every helper partitions work by output row and never shares accumulators
//! between rows, so results are bit-identical for any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Worker threads the helpers will use; 1 without the `parallel` feature.
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

/// Fills a row-major `width * height` buffer, calling `f(y, row)` once per row.
pub fn for_each_row<T, F>(data: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(width > 0 && data.len().is_multiple_of(width));
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(width)
        .enumerate()
        .for_each(|(y, row)| f(y, row));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(width)
        .enumerate()
        .for_each(|(y, row)| f(y, row));
}

/// Builds a row-major buffer by evaluating `f(x, y)` at every pixel.
pub fn map_pixels<F>(width: usize, height: usize, f: F) -> Vec<f32>
where
    F: Fn(usize, usize) -> f32 + Sync + Send,
{
    let mut out = vec![0.0f32; width * height];
    for_each_row(&mut out, width, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            *o = f(x, y);
        }
    });
    out
}

/// Sums `f(y)` over rows; per-row partials are combined in row order.
pub fn sum_rows<F>(height: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    let partials: Vec<f64> = (0..height).into_par_iter().map(&f).collect();
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<f64> = (0..height).map(&f).collect();
    partials.into_iter().sum()
}

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Applies `f(index, chunk)` over fixed-size chunks of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_row`] over two equally sized buffers at once.
pub fn for_each_row2<T, F>(a: &mut [T], b: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T], &mut [T]) + Sync + Send,
{
    debug_assert_eq!(a.len(), b.len());
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(width)
        .zip(b.par_chunks_mut(width))
        .enumerate()
        .for_each(|(y, (ra, rb))| f(y, ra, rb));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(width)
        .zip(b.chunks_mut(width))
        .enumerate()
        .for_each(|(y, (ra, rb))| f(y, ra, rb));
}

/// Applies `f(index, a_chunk, b_chunk)` over matching chunks of two buffers
/// that may hold different element types.
pub fn for_each_chunk2<A, B, F>(a: &mut [A], b: &mut [B], chunk: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    debug_assert_eq!(a.len(), b.len());
    #[cfg(feature = "parallel")]
    a.par_chunks_mut(chunk)
        .zip(b.par_chunks_mut(chunk))
        .enumerate()
        .for_each(|(i, (ca, cb))| f(i, ca, cb));
    #[cfg(not(feature = "parallel"))]
    a.chunks_mut(chunk)
        .zip(b.chunks_mut(chunk))
        .enumerate()
        .for_each(|(i, (ca, cb))| f(i, ca, cb));
}
