//! Dense scoring kernels.
//!
//! `project` computes `M @ v` for a candidate view. With the `parallel`
//! feature (default) rows are split across the rayon pool; the sequential
//! path is always compiled so the two can be benchmarked side by side.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::store::CandidateView;

/// Rows handed to one rayon task.
#[cfg(feature = "parallel")]
const PAR_CHUNK_ROWS: usize = 4096;

const LANES: usize = 32;

#[inline(always)]
fn tail_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut t = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        t += x * y;
    }
    t
}

/// Dot product over `LANES` independent accumulators, reduced pairwise
/// (lane `l` absorbs lane `l + width` for width 16, 8, 4, 2, 1), then the
/// tail is added. The AVX2 path below follows the same order exactly.
#[inline(always)]
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let tail = tail_dot(ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0] + tail
}

/// Same reduction order as [`dot_lanes`] in two 512-bit registers.
#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
#[inline(always)]
fn dot_avx512(a: &[f32], b: &[f32]) -> f32 {
    use std::arch::x86_64::*;
    let n = a.len().min(b.len());
    let full = n / LANES * LANES;
    // SAFETY: AVX-512F is enabled at compile time, and every load reads 16
    // floats starting below `full <= n`.
    unsafe {
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        let mut lo = _mm512_setzero_ps();
        let mut hi = _mm512_setzero_ps();
        let mut i = 0;
        while i < full {
            lo = _mm512_add_ps(lo, _mm512_mul_ps(_mm512_loadu_ps(pa.add(i)), _mm512_loadu_ps(pb.add(i))));
            hi = _mm512_add_ps(
                hi,
                _mm512_mul_ps(_mm512_loadu_ps(pa.add(i + 16)), _mm512_loadu_ps(pb.add(i + 16))),
            );
            i += LANES;
        }
        // width 16
        let v = _mm512_add_ps(lo, hi);
        // width 8
        let upper = _mm256_castpd_ps(_mm512_extractf64x4_pd(_mm512_castps_pd(v), 1));
        let w = _mm256_add_ps(_mm512_castps512_ps256(v), upper);
        // width 4, 2, 1
        let q = _mm_add_ps(_mm256_castps256_ps128(w), _mm256_extractf128_ps(w, 1));
        let d = _mm_add_ps(q, _mm_movehl_ps(q, q));
        let s = _mm_add_ss(d, _mm_shuffle_ps(d, d, 0b01));
        _mm_cvtss_f32(s) + tail_dot(&a[full..n], &b[full..n])
    }
}

/// Four dots of `c` against consecutive rows of `rows`, interleaved so the
/// accumulator chains overlap. Each result equals [`dot`] bit for bit.
#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
#[inline(always)]
fn dot4_avx512(c: &[f32], rows: &[f32], dim: usize) -> [f32; 4] {
    use std::arch::x86_64::*;
    let full = dim / LANES * LANES;
    assert!(c.len() >= dim && rows.len() >= 4 * dim);
    // SAFETY: AVX-512F is enabled at compile time; loads stay below `full`
    // within `c` and within each of the four rows (checked above).
    unsafe {
        let pc = c.as_ptr();
        let pr = [0, 1, 2, 3].map(|r| rows.as_ptr().add(r * dim));
        let mut lo = [_mm512_setzero_ps(); 4];
        let mut hi = [_mm512_setzero_ps(); 4];
        let mut i = 0;
        while i < full {
            let cl = _mm512_loadu_ps(pc.add(i));
            let ch = _mm512_loadu_ps(pc.add(i + 16));
            for r in 0..4 {
                lo[r] = _mm512_add_ps(lo[r], _mm512_mul_ps(cl, _mm512_loadu_ps(pr[r].add(i))));
                hi[r] = _mm512_add_ps(hi[r], _mm512_mul_ps(ch, _mm512_loadu_ps(pr[r].add(i + 16))));
            }
            i += LANES;
        }
        let mut out = [0.0f32; 4];
        for r in 0..4 {
            let v = _mm512_add_ps(lo[r], hi[r]);
            let upper = _mm256_castpd_ps(_mm512_extractf64x4_pd(_mm512_castps_pd(v), 1));
            let w = _mm256_add_ps(_mm512_castps512_ps256(v), upper);
            let q = _mm_add_ps(_mm256_castps256_ps128(w), _mm256_extractf128_ps(w, 1));
            let d = _mm_add_ps(q, _mm_movehl_ps(q, q));
            let s = _mm_add_ss(d, _mm_shuffle_ps(d, d, 0b01));
            let row = &rows[r * dim..(r + 1) * dim];
            out[r] = _mm_cvtss_f32(s) + tail_dot(&c[full..dim], &row[full..dim]);
        }
        out
    }
}

/// `out[i] = dot(c, row i of rows)` for a packed `rows` block of width `dim`.
#[inline]
pub fn dot_rows(c: &[f32], rows: &[f32], dim: usize, out: &mut Vec<f32>) {
    out.clear();
    let blocks = rows.chunks_exact(4 * dim);
    let rest = blocks.remainder();
    for block in blocks {
        #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
        out.extend_from_slice(&dot4_avx512(c, block, dim));
        #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
        out.extend(block.chunks_exact(dim).map(|r| dot(c, r)));
    }
    out.extend(rest.chunks_exact(dim).map(|r| dot(c, r)));
}

/// Same reduction order as [`dot_lanes`] in 256-bit registers. Multiplies
/// and adds stay separate (never fused), so results match bit for bit.
#[cfg(all(target_arch = "x86_64", target_feature = "avx2", not(target_feature = "avx512f")))]
#[inline(always)]
fn dot_avx2(a: &[f32], b: &[f32]) -> f32 {
    use std::arch::x86_64::*;
    let n = a.len().min(b.len());
    let full = n / LANES * LANES;
    // SAFETY: AVX2 is enabled at compile time, and every load reads 8 floats
    // starting below `full <= n`.
    unsafe {
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        let mut acc = [_mm256_setzero_ps(); 4];
        let mut i = 0;
        while i < full {
            for (r, slot) in acc.iter_mut().enumerate() {
                let x = _mm256_loadu_ps(pa.add(i + 8 * r));
                let y = _mm256_loadu_ps(pb.add(i + 8 * r));
                *slot = _mm256_add_ps(*slot, _mm256_mul_ps(x, y));
            }
            i += LANES;
        }
        // width 16, then 8
        let v = _mm256_add_ps(_mm256_add_ps(acc[0], acc[2]), _mm256_add_ps(acc[1], acc[3]));
        // width 4, 2, 1 inside one register
        let q = _mm_add_ps(_mm256_castps256_ps128(v), _mm256_extractf128_ps(v, 1));
        let d = _mm_add_ps(q, _mm_movehl_ps(q, q));
        let s = _mm_add_ss(d, _mm_shuffle_ps(d, d, 0b01));
        _mm_cvtss_f32(s) + tail_dot(&a[full..n], &b[full..n])
    }
}

/// Dot product of equal-length slices. Uses AVX-512 or AVX2 when the build
/// targets them (the workspace builds for the host CPU).
#[inline(always)]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    {
        dot_avx512(a, b)
    }
    #[cfg(all(target_arch = "x86_64", target_feature = "avx2", not(target_feature = "avx512f")))]
    {
        dot_avx2(a, b)
    }
    #[cfg(not(all(target_arch = "x86_64", any(target_feature = "avx2", target_feature = "avx512f"))))]
    {
        dot_lanes(a, b)
    }
}

/// Baseline build of [`dot`], without runtime feature dispatch.
pub fn dot_portable(a: &[f32], b: &[f32]) -> f32 {
    dot_lanes(a, b)
}

/// `out[i] = dot(view.row(i), v)`, single-threaded.
pub fn project_sequential(view: &CandidateView<'_>, v: &[f32]) -> Vec<f32> {
    let dim = view.dim();
    if view.is_contiguous_full() {
        return view
            .store()
            .matrix()
            .chunks_exact(dim)
            .map(|row| dot(row, v))
            .collect();
    }
    (0..view.len()).map(|i| dot(view.row(i), v)).collect()
}

/// `out[i] = dot(view.row(i), v)`, split across the rayon pool.
#[cfg(feature = "parallel")]
pub fn project_parallel(view: &CandidateView<'_>, v: &[f32]) -> Vec<f32> {
    let dim = view.dim();
    let mut out = vec![0.0f32; view.len()];
    if view.is_contiguous_full() {
        let matrix = view.store().matrix();
        out.par_chunks_mut(PAR_CHUNK_ROWS)
            .zip(matrix.par_chunks(PAR_CHUNK_ROWS * dim))
            .for_each(|(dst, rows)| {
                for (o, row) in dst.iter_mut().zip(rows.chunks_exact(dim)) {
                    *o = dot(row, v);
                }
            });
    } else {
        out.par_chunks_mut(PAR_CHUNK_ROWS)
            .enumerate()
            .for_each(|(chunk, dst)| {
                let base = chunk * PAR_CHUNK_ROWS;
                for (j, o) in dst.iter_mut().enumerate() {
                    *o = dot(view.row(base + j), v);
                }
            });
    }
    out
}

/// Rows ahead of the current one to prefetch on gathered views.
const PREFETCH_AHEAD: usize = 8;

#[inline(always)]
fn prefetch(row: &[f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::x86_64::{_mm_prefetch, _MM_HINT_T0};
        // Prefetching is a hint; it cannot fault. One request per cache line.
        for line in row.chunks(16) {
            unsafe { _mm_prefetch(line.as_ptr() as *const i8, _MM_HINT_T0) };
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    let _ = row;
}

/// Row-major `len x vs.len()` matrix of `dot(view.row(i), vs[j])`, computed
/// in one pass over the candidate rows.
pub fn project_many_sequential(view: &CandidateView<'_>, vs: &[&[f32]]) -> Vec<f32> {
    let m = vs.len();
    let mut out = vec![0.0f32; view.len() * m];
    if m == 0 {
        return out;
    }
    let gathered = !view.is_contiguous_full();
    for (i, dst) in out.chunks_exact_mut(m).enumerate() {
        if gathered && i + PREFETCH_AHEAD < view.len() {
            prefetch(view.row(i + PREFETCH_AHEAD));
        }
        let row = view.row(i);
        for (o, v) in dst.iter_mut().zip(vs) {
            *o = dot(row, v);
        }
    }
    out
}

#[cfg(feature = "parallel")]
pub fn project_many_parallel(view: &CandidateView<'_>, vs: &[&[f32]]) -> Vec<f32> {
    let m = vs.len();
    let mut out = vec![0.0f32; view.len() * m];
    if m == 0 {
        return out;
    }
    let gathered = !view.is_contiguous_full();
    out.par_chunks_mut(PAR_CHUNK_ROWS * m)
        .enumerate()
        .for_each(|(chunk, dst)| {
            let base = chunk * PAR_CHUNK_ROWS;
            for (j, cells) in dst.chunks_exact_mut(m).enumerate() {
                if gathered && base + j + PREFETCH_AHEAD < view.len() {
                    prefetch(view.row(base + j + PREFETCH_AHEAD));
                }
                let row = view.row(base + j);
                for (o, v) in cells.iter_mut().zip(vs) {
                    *o = dot(row, v);
                }
            }
        });
    out
}

pub fn project_many(view: &CandidateView<'_>, vs: &[&[f32]]) -> Vec<f32> {
    #[cfg(feature = "parallel")]
    {
        project_many_parallel(view, vs)
    }
    #[cfg(not(feature = "parallel"))]
    {
        project_many_sequential(view, vs)
    }
}

/// Projects every candidate onto `v` using the configured execution path.
pub fn project(view: &CandidateView<'_>, v: &[f32]) -> Vec<f32> {
    #[cfg(feature = "parallel")]
    {
        project_parallel(view, v)
    }
    #[cfg(not(feature = "parallel"))]
    {
        project_sequential(view, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::EmbeddingStore;

    #[test]
    fn dot_handles_remainder_lanes() {
        let a: Vec<f32> = (0..11).map(|i| i as f32).collect();
        let b = vec![1.0f32; 11];
        assert_eq!(dot(&a, &b), 55.0);
        let long: Vec<f32> = (0..75).map(|i| i as f32).collect();
        assert_eq!(dot(&long, &vec![1.0; 75]), (0..75).sum::<i32>() as f32);
    }

    #[test]
    fn dot_rows_matches_dot_bitwise() {
        for dim in [3usize, 32, 100, 128] {
            let c: Vec<f32> = (0..dim).map(|i| (i as f32 * 0.37).sin()).collect();
            let rows: Vec<f32> = (0..dim * 11).map(|i| (i as f32 * 0.11).cos()).collect();
            let mut out = Vec::new();
            dot_rows(&c, &rows, dim, &mut out);
            assert_eq!(out.len(), 11);
            for (i, row) in rows.chunks_exact(dim).enumerate() {
                assert_eq!(out[i].to_bits(), dot(&c, row).to_bits(), "dim {dim} row {i}");
                assert_eq!(out[i].to_bits(), dot_portable(&c, row).to_bits());
            }
        }
    }

    #[test]
    fn dispatched_dot_matches_portable_bitwise() {
        for n in [1usize, 7, 32, 100, 128, 384] {
            let a: Vec<f32> = (0..n).map(|i| ((i * 37 % 101) as f32 / 7.0).sin()).collect();
            let b: Vec<f32> = (0..n).map(|i| ((i * 53 % 97) as f32 / 5.0).cos()).collect();
            assert_eq!(dot(&a, &b).to_bits(), dot_portable(&a, &b).to_bits(), "n = {n}");
        }
    }

    #[test]
    fn sequential_and_default_paths_agree() {
        let rows = (0..100).map(|i| {
            let v: Vec<f32> = (0..16).map(|j| ((i * 31 + j * 7) % 13) as f32 - 6.0).collect();
            (format!("r{i}"), v)
        });
        let (store, _) = EmbeddingStore::from_rows(16, rows.filter(|(_, v)| v.iter().any(|x| *x != 0.0))).unwrap();
        let q: Vec<f32> = (0..16).map(|j| (j as f32).sin()).collect();
        let full = store.full_view(0.0);
        assert_eq!(project_sequential(&full, &q), project(&full, &q));
        let picked: Vec<&str> = store.ids().iter().rev().step_by(3).map(String::as_str).collect();
        let sub = store.subset(picked, 0.0);
        assert_eq!(project_sequential(&sub, &q), project(&sub, &q));

        let r: Vec<f32> = (0..16).map(|j| (j as f32).cos()).collect();
        let many = project_many(&sub, &[&q, &r]);
        assert_eq!(many, project_many_sequential(&sub, &[&q, &r]));
        let by_one = project(&sub, &r);
        for (i, cells) in many.chunks_exact(2).enumerate() {
            assert_eq!(cells[1], by_one[i]);
        }
    }
}
