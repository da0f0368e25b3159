//! Dense kernels used by the tape.
//!
//! Every kernel that can fan out has a `_seq` and (with the `parallel`
//! feature) a `_par` form. The parallel forms split work by output row, so
//! each output element is produced by the same instruction sequence either
//! way and results are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds the parallel path is not worth the split.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 15;

#[inline]
fn row_times_matrix(a_row: &[f32], b: &[f32], n: usize, out: &mut [f32]) {
    out.fill(0.0);
    for (p, &a) in a_row.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o += a * bv;
        }
    }
}

/// `[m×k] · [k×n]`, single-threaded.
pub fn matmul_seq(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    for (i, row) in out.chunks_mut(n).enumerate() {
        row_times_matrix(&a[i * k..(i + 1) * k], b, n, row);
    }
    out
}

/// `[m×k] · [k×n]`, rows split across the rayon pool.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    out.par_chunks_mut(n)
        .with_min_len(8)
        .enumerate()
        .for_each(|(i, row)| row_times_matrix(&a[i * k..(i + 1) * k], b, n, row));
    out
}

pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_WORK && m > 1 {
        return matmul_par(a, b, m, k, n);
    }
    matmul_seq(a, b, m, k, n)
}

/// Transpose of a row-major `[rows×cols]` matrix.
pub fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `[m×k] · [n×k]ᵀ`.
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    matmul(a, &transpose(b, n, k), m, k, n)
}

/// `[k×m]ᵀ · [k×n]`.
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    matmul(&transpose(a, k, m), b, m, k, n)
}

/// Applies `f` to every item, in parallel when the feature is enabled.
/// Output order always matches input order.
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
