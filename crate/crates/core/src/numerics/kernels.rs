//! Raw buffer kernels shared by the tape's forward and backward passes.

use super::Element;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `trans_a` the buffer `a` is stored `k×m`; with `trans_b`, `b` is
/// stored `n×k`. `c` is always `m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths are asserted above and the strides describe exactly
    // those row-major buffers.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfold `[C, H, W]` into `[C·kh·kw, out_h·out_w]` with zero padding.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let out_len = g.out_h * g.out_w;
    let mut cols = vec![T::zero(); g.patch_len() * out_len];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            dst[oy * g.out_w + ox] = src_row[x as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto `[C, H, W]`.
pub fn col2im_add<T: Element>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let out_len = g.out_h * g.out_w;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * out_len..(row + 1) * out_len];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            dst_row[x as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Two-tap linear interpolation weights for resizing one axis
/// (half-pixel centers, edge clamped).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LinearTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize of every plane in `[C, H, W]`, done as a horizontal pass
/// followed by a vertical one.
pub fn resize_bilinear<T: Element>(
    x: &[T],
    channels: usize,
    (h, w): (usize, usize),
    rows: &LinearTaps,
    cols: &LinearTaps,
) -> Vec<T> {
    let (oh, ow) = (rows.lo.len(), cols.lo.len());
    let fx: Vec<T> = cols.frac.iter().map(|&f| T::of(f)).collect();
    let mut out = vec![T::zero(); channels * oh * ow];
    let mut tmp = vec![T::zero(); h * ow];
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for (src, dst) in plane.chunks_exact(w).zip(tmp.chunks_exact_mut(ow)) {
            for (ox, d) in dst.iter_mut().enumerate() {
                let (a, b) = (src[cols.lo[ox]], src[cols.hi[ox]]);
                *d = a + (b - a) * fx[ox];
            }
        }
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (oy, row) in dst.chunks_exact_mut(ow).enumerate() {
            let fy = T::of(rows.frac[oy]);
            let r0 = &tmp[rows.lo[oy] * ow..(rows.lo[oy] + 1) * ow];
            let r1 = &tmp[rows.hi[oy] * ow..(rows.hi[oy] + 1) * ow];
            for ((d, &a), &b) in row.iter_mut().zip(r0).zip(r1) {
                *d = a + (b - a) * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_adjoint<T: Element>(
    g: &[T],
    channels: usize,
    (h, w): (usize, usize),
    rows: &LinearTaps,
    cols: &LinearTaps,
    dx: &mut [T],
) {
    let (oh, ow) = (rows.lo.len(), cols.lo.len());
    let fx: Vec<T> = cols.frac.iter().map(|&f| T::of(f)).collect();
    let one = T::one();
    let mut tmp = vec![T::zero(); h * ow];
    for c in 0..channels {
        tmp.iter_mut().for_each(|v| *v = T::zero());
        let src = &g[c * oh * ow..(c + 1) * oh * ow];
        for (oy, row) in src.chunks_exact(ow).enumerate() {
            let fy = T::of(rows.frac[oy]);
            let (w0, w1) = (one - fy, fy);
            let (y0, y1) = (rows.lo[oy], rows.hi[oy]);
            for (t, &v) in tmp[y0 * ow..(y0 + 1) * ow].iter_mut().zip(row) {
                *t += v * w0;
            }
            for (t, &v) in tmp[y1 * ow..(y1 + 1) * ow].iter_mut().zip(row) {
                *t += v * w1;
            }
        }
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for (t, d) in tmp.chunks_exact(ow).zip(plane.chunks_exact_mut(w)) {
            for (ox, &v) in t.iter().enumerate() {
                d[cols.lo[ox]] += v * (one - fx[ox]);
                d[cols.hi[ox]] += v * fx[ox];
            }
        }
    }
}

/// Adaptive pooling bins: output cell `i` covers `[floor(i·n/k), ceil((i+1)·n/k))`.
pub fn pool_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let want = [4.0, 5.0, 10.0, 11.0];
        for (lhs, ta) in [(&a, false), (&at, true)] {
            for (rhs, tb) in [(&b, false), (&bt, true)] {
                let mut c = [0.0f64; 4];
                gemm(lhs, ta, rhs, tb, 2, 3, 2, &mut c, false);
                assert_eq!(c, want);
            }
        }
    }

    #[test]
    fn same_size_resize_is_exact() {
        let taps = LinearTaps::new(5, 5);
        assert!(taps.frac.iter().all(|&f| f == 0.0));
        assert_eq!(taps.lo, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn pool_bins_cover_axis() {
        assert_eq!(pool_bins(8, 2), vec![(0, 4), (4, 8)]);
        assert_eq!(pool_bins(5, 2), vec![(0, 3), (2, 5)]);
        assert_eq!(pool_bins(7, 1), vec![(0, 7)]);
    }
}
