//! Slice-level kernels. Each output row is computed by the same sequential
//! loop regardless of execution mode, so results are bit-identical between
//! sequential and parallel runs.

use super::Real;
use crate::exec;

/// `a[m×k] · b[k×n]`.
pub fn matmul_nn<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    exec::for_each_row(&mut out, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    exec::for_each_row(&mut out, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o = acc;
        }
    });
    out
}

/// `a[m×k]ᵀ · b[m×n]`, a `k×n` result.
pub fn matmul_tn<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    exec::for_each_row(&mut out, n, m * k * n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// Rotation angles for a rotary embedding of `head_size` at `pos`.
fn rope_angles(pos: usize, head_size: usize, base: f64) -> impl Iterator<Item = (f64, f64)> {
    (0..head_size / 2).map(move |m| {
        let theta = base.powf(-2.0 * m as f64 / head_size as f64);
        let a = pos as f64 * theta;
        (a.cos(), a.sin())
    })
}

/// Rotates consecutive pairs of every head of every row. `inverse` applies
/// the transposed rotation (used for gradients).
pub fn rope<F: Real>(
    x: &[F],
    cols: usize,
    positions: &[usize],
    heads: usize,
    base: f64,
    inverse: bool,
) -> Vec<F> {
    let hs = cols / heads;
    let mut out = x.to_vec();
    exec::for_each_row(&mut out, cols, x.len() * 4, |i, row| {
        let angles: Vec<(F, F)> = rope_angles(positions[i], hs, base)
            .map(|(c, s)| (F::from_f64(c), F::from_f64(if inverse { -s } else { s })))
            .collect();
        for h in 0..heads {
            let head = &mut row[h * hs..(h + 1) * hs];
            for (m, &(c, s)) in angles.iter().enumerate() {
                let x0 = head[2 * m];
                let x1 = head[2 * m + 1];
                head[2 * m] = x0 * c - x1 * s;
                head[2 * m + 1] = x0 * s + x1 * c;
            }
        }
    });
    out
}

/// Attention probabilities of one query: for each head, a run of
/// `hi - lo` weights stored back to back.
pub struct AttnForward<F> {
    pub out: Vec<F>,
    pub probs: Vec<Vec<F>>,
}

/// Multi-head scaled dot-product attention where query `i` attends to keys
/// `ranges[i].0 .. ranges[i].1`.
pub fn attention<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    cols: usize,
    heads: usize,
    ranges: &[(usize, usize)],
) -> AttnForward<F> {
    let hs = cols / heads;
    let scale = F::from_f64(1.0 / (hs as f64).sqrt());
    let rows = exec::map_range(ranges.len(), |i| {
        let (lo, hi) = ranges[i];
        let span = hi - lo;
        let qi = &q[i * cols..(i + 1) * cols];
        let mut out = vec![F::zero(); cols];
        let mut probs = vec![F::zero(); heads * span];
        for h in 0..heads {
            let qh = &qi[h * hs..(h + 1) * hs];
            let p = &mut probs[h * span..(h + 1) * span];
            for (t, j) in (lo..hi).enumerate() {
                let kj = &k[j * cols + h * hs..j * cols + (h + 1) * hs];
                let mut dot = F::zero();
                for (&a, &b) in qh.iter().zip(kj) {
                    dot += a * b;
                }
                p[t] = dot * scale;
            }
            super::softmax_in_place(p);
            let oh = &mut out[h * hs..(h + 1) * hs];
            for (t, j) in (lo..hi).enumerate() {
                let vj = &v[j * cols + h * hs..j * cols + (h + 1) * hs];
                for (o, &b) in oh.iter_mut().zip(vj) {
                    *o += p[t] * b;
                }
            }
        }
        (out, probs)
    });
    let mut out = Vec::with_capacity(ranges.len() * cols);
    let mut probs = Vec::with_capacity(ranges.len());
    for (o, p) in rows {
        out.extend(o);
        probs.push(p);
    }
    AttnForward { out, probs }
}

pub struct AttnBackward<F> {
    pub dq: Vec<F>,
    pub dk: Vec<F>,
    pub dv: Vec<F>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[Vec<F>],
    dout: &[F],
    cols: usize,
    heads: usize,
    ranges: &[(usize, usize)],
    kv_rows: usize,
) -> AttnBackward<F> {
    let hs = cols / heads;
    let scale = F::from_f64(1.0 / (hs as f64).sqrt());
    // per query: dq row and the score gradients ds
    let per_query = exec::map_range(ranges.len(), |i| {
        let (lo, hi) = ranges[i];
        let span = hi - lo;
        let doi = &dout[i * cols..(i + 1) * cols];
        let mut dq = vec![F::zero(); cols];
        let mut ds = vec![F::zero(); heads * span];
        for h in 0..heads {
            let p = &probs[i][h * span..(h + 1) * span];
            let doh = &doi[h * hs..(h + 1) * hs];
            let dsh = &mut ds[h * span..(h + 1) * span];
            let mut weighted = F::zero();
            for (t, j) in (lo..hi).enumerate() {
                let vj = &v[j * cols + h * hs..j * cols + (h + 1) * hs];
                let mut dp = F::zero();
                for (&a, &b) in doh.iter().zip(vj) {
                    dp += a * b;
                }
                dsh[t] = dp;
                weighted += p[t] * dp;
            }
            for t in 0..span {
                dsh[t] = p[t] * (dsh[t] - weighted);
            }
            let dqh = &mut dq[h * hs..(h + 1) * hs];
            for (t, j) in (lo..hi).enumerate() {
                let kj = &k[j * cols + h * hs..j * cols + (h + 1) * hs];
                let g = dsh[t] * scale;
                for (o, &b) in dqh.iter_mut().zip(kj) {
                    *o += g * b;
                }
            }
        }
        (dq, ds)
    });
    let mut dq = Vec::with_capacity(q.len());
    let mut dk = vec![F::zero(); kv_rows * cols];
    let mut dv = vec![F::zero(); kv_rows * cols];
    for (i, (dqi, ds)) in per_query.into_iter().enumerate() {
        dq.extend(dqi);
        let (lo, hi) = ranges[i];
        let span = hi - lo;
        let qi = &q[i * cols..(i + 1) * cols];
        let doi = &dout[i * cols..(i + 1) * cols];
        for h in 0..heads {
            let p = &probs[i][h * span..(h + 1) * span];
            for (t, j) in (lo..hi).enumerate() {
                let g = ds[h * span + t] * scale;
                let pt = p[t];
                let base = j * cols + h * hs;
                for c in 0..hs {
                    dk[base + c] += g * qi[h * hs + c];
                    dv[base + c] += pt * doi[h * hs + c];
                }
            }
        }
    }
    AttnBackward { dq, dk, dv }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3×4
        let nn = matmul_nn(&a, &b, 2, 3, 4);
        // bᵀ as 4×3
        let bt: Vec<f64> = (0..4).flat_map(|j| (0..3).map(move |p| (p * 4 + j) as f64 * 0.5)).collect();
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), nn);
        // aᵀ as 3×2, then (aᵀ)ᵀ·b
        let at: Vec<f64> = (0..3).flat_map(|p| (0..2).map(move |i| (i * 3 + p) as f64)).collect();
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), nn);
    }

    #[test]
    fn rope_inverse_restores_input() {
        let x: Vec<f64> = (0..16).map(|v| (v as f64).sin()).collect();
        let pos = [3, 7];
        let y = rope(&x, 8, &pos, 2, 10_000.0, false);
        let back = rope(&y, 8, &pos, 2, 10_000.0, true);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        // position 0 is the identity
        assert_eq!(rope(&x, 8, &[0, 0], 2, 10_000.0, false), x);
    }
}
