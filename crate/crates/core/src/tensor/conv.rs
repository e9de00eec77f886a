//! Raw kernels behind the spatial primitives of the tape.

use super::Real;

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 -> 1`, `n -> n - 2`). Single-sample axes clamp to 0.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out,
            w_out,
        }
    }

    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Source row for output row `oy` and kernel row `ky`.
    #[inline]
    fn src(&self, o: usize, kk: usize, n: usize) -> usize {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        if self.pad == 0 {
            i as usize
        } else {
            reflect(i, n)
        }
    }
}

/// Unfold `[C, H, W]` into a `(C·k·k) × (H_out·W_out)` matrix.
pub(crate) fn im2col<T: Real>(input: &[T], g: &ConvGeom, cols: &mut Vec<T>) {
    let n_cols = g.cols();
    cols.clear();
    cols.resize(g.rows() * n_cols, T::zero());
    let plane = g.h * g.w;
    let xs: Vec<Vec<usize>> = (0..g.k)
        .map(|kx| (0..g.w_out).map(|ox| g.src(ox, kx, g.w)).collect())
        .collect();
    for c in 0..g.c_in {
        let src_plane = &input[c * plane..(c + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                let xmap = &xs[kx];
                for oy in 0..g.h_out {
                    let sy = g.src(oy, ky, g.h);
                    let src_row = &src_plane[sy * g.w..(sy + 1) * g.w];
                    let out = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    for (o, &sx) in out.iter_mut().zip(xmap) {
                        *o = src_row[sx];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the input.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let n_cols = g.cols();
    let plane = g.h * g.w;
    let xs: Vec<Vec<usize>> = (0..g.k)
        .map(|kx| (0..g.w_out).map(|ox| g.src(ox, kx, g.w)).collect())
        .collect();
    for c in 0..g.c_in {
        let dst_plane = &mut out[c * plane..(c + 1) * plane];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                let xmap = &xs[kx];
                for oy in 0..g.h_out {
                    let sy = g.src(oy, ky, g.h);
                    let dst_row = &mut dst_plane[sy * g.w..(sy + 1) * g.w];
                    let vals = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for (&v, &sx) in vals.iter().zip(xmap) {
                        dst_row[sx] = dst_row[sx] + v;
                    }
                }
            }
        }
    }
}

/// Bilinear taps for 2× upsampling of an axis of length `n` with aligned
/// corners: output `i` samples source coordinate `i·(n-1)/(2n-1)`.
pub(crate) fn resize_taps<T: Real>(n: usize) -> Vec<(usize, usize, T)> {
    let m = 2 * n;
    let scale = (n - 1) as f64 / (m - 1) as f64;
    (0..m)
        .map(|i| {
            let s = i as f64 * scale;
            let i0 = (s.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, T::lit(s - i0 as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(0, 1), 0);
        assert_eq!(reflect(-1, 2), 1);
        assert_eq!(reflect(2, 2), 0);
    }

    #[test]
    fn geometry_same_padding_with_stride() {
        let g = ConvGeom::new(1, 7, 8, 3, 2, 1);
        assert_eq!((g.h_out, g.w_out), (4, 4));
        let g = ConvGeom::new(1, 7, 8, 3, 1, 0);
        assert_eq!((g.h_out, g.w_out), (5, 6));
    }
}
