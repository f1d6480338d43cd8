//! Raw numeric kernels behind the graph ops.

use std::ops::Range;

/// `out = floor((input + 2*pad - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv2d_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// `C = alpha * A * B + beta * C` on strided row/column layouts.
///
/// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`; each operand is described by
/// its (row stride, column stride) so transposes are free.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(span(m, k, a_strides) as usize <= a.len(), "gemm: A out of bounds");
    assert!(span(k, n, b_strides) as usize <= b.len(), "gemm: B out of bounds");
    assert!(span(m, n, c_strides) as usize <= c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

/// Geometry of one 2-D convolution over a single sample.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `ox` whose input column `ox*sw + kx - pw` is inside `0..w`.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pw {
            0
        } else {
            (self.pw - kx).div_ceil(self.sw)
        };
        // ox*sw + kx - pw <= w - 1  =>  ox <= (w - 1 + pw - kx) / sw
        let hi = if self.w + self.pw > kx {
            ((self.w - 1 + self.pw - kx) / self.sw + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Output rows per im2col tile, sized so a tile of the column matrix stays
/// in cache.
pub(crate) fn tile_rows(g: &ConvGeom) -> usize {
    const TILE_ELEMS: usize = 1 << 15;
    (TILE_ELEMS / (g.col_rows() * g.wo).max(1)).clamp(1, g.ho.max(1))
}

/// Unfolds output rows `rows` of one sample `x[c_in, h, w]` into
/// `col[c_in*kh*kw, rows.len()*wo]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, rows: Range<usize>, col: &mut [f64]) {
    let p = rows.len() * g.wo;
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_ox(kx);
                for (r, oy) in rows.clone().enumerate() {
                    let out = &mut dst[r * g.wo..(r + 1) * g.wo];
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    if g.sw == 1 {
                        let start = lo + kx - g.pw;
                        out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out[ox] = src[ox * g.sw + kx - g.pw];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back, adding into `dx`.
pub(crate) fn col2im_add(col: &[f64], g: &ConvGeom, rows: Range<usize>, dx: &mut [f64]) {
    let p = rows.len() * g.wo;
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src_row = &col[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_ox(kx);
                for (r, oy) in rows.clone().enumerate() {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &src_row[r * g.wo..(r + 1) * g.wo];
                    if g.sw == 1 {
                        let start = lo + kx - g.pw;
                        for (d, s) in dst[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * g.sw + kx - g.pw] += src[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_size_formula() {
        assert_eq!(conv2d_out_size(640, 3, 2, 1), Some(320));
        assert_eq!(conv2d_out_size(126, 3, 2, 1), Some(63));
        assert_eq!(conv2d_out_size(63, 3, 2, 0), Some(31));
        assert_eq!(conv2d_out_size(2, 5, 1, 0), None);
    }

    #[test]
    fn gemm_transposed_views() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, (2, 1), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // A^T B
        gemm(2, 2, 2, 1.0, &a, (1, 2), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn im2col_adjoint_identity() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let g = ConvGeom {
            c_in: 2,
            h: 7,
            w: 6,
            kh: 3,
            kw: 3,
            sh: 2,
            sw: 2,
            ph: 1,
            pw: 0,
            ho: conv2d_out_size(7, 3, 2, 1).unwrap(),
            wo: conv2d_out_size(6, 3, 2, 0).unwrap(),
        };
        let x: Vec<f64> = (0..2 * 7 * 6).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &g, 0..g.ho, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im_add(&y, &g, 0..g.ho, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn row_tiles_match_the_full_unfold() {
        let g = ConvGeom {
            c_in: 2,
            h: 9,
            w: 5,
            kh: 3,
            kw: 3,
            sh: 1,
            sw: 1,
            ph: 1,
            pw: 1,
            ho: 9,
            wo: 5,
        };
        let x: Vec<f64> = (0..2 * 9 * 5).map(|i| (i as f64 * 0.7).cos()).collect();
        let (k, p) = (g.col_rows(), g.col_cols());
        let mut full = vec![0.0; k * p];
        im2col(&x, &g, 0..g.ho, &mut full);
        for (a, b) in [(0, 4), (4, 9)] {
            let n = (b - a) * g.wo;
            let mut tile = vec![0.0; k * n];
            im2col(&x, &g, a..b, &mut tile);
            for r in 0..k {
                assert_eq!(tile[r * n..(r + 1) * n], full[r * p + a * g.wo..r * p + b * g.wo]);
            }
        }
    }
}
