//! im2col-based convolution kernels shared by `conv2d` and its transpose.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Geometry of a forward cross-correlation from `in_*` to `out_*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        [c, h, w]: [usize; 3],
        out_channels: usize,
        [kh, kw]: [usize; 2],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(dim_err(op, "stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(dim_err(
                op,
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
            ));
        }
        Ok(Self {
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
            kh,
            kw,
            stride,
            padding,
        })
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }

    /// Visits every (output position, patch column, input offset) triple whose
    /// input location lies inside the unpadded image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let patch = self.patch();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let p = oy * self.out_w + ox;
                for c in 0..self.in_channels {
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let q = (c * self.kh + ky) * self.kw + kx;
                            let src = (c * self.in_h + iy as usize) * self.in_w + ix as usize;
                            f(p * patch + q, p, src);
                        }
                    }
                }
            }
        }
    }

    /// `cols[p, q]` = input value under tap `q` of output position `p`.
    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(|dst, _, src| cols[dst] = image[src]);
    }

    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        self.for_each_tap(|dst, _, src| image[src] += cols[dst]);
    }
}

pub(crate) fn forward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    k: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let (patch, pos) = (g.patch(), g.positions());
    let mut out = vec![T::zero(); batch * g.out_len()];
    let mut cols = vec![T::zero(); pos * patch];
    for n in 0..batch {
        g.im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
        let o = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
        T::gemm(
            g.out_channels,
            patch,
            pos,
            T::one(),
            k,
            (patch as isize, 1),
            &cols,
            (1, patch as isize),
            T::zero(),
            o,
            (pos as isize, 1),
        );
        if let Some(b) = b {
            for (ch, plane) in o.chunks_mut(pos).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[ch]);
            }
        }
    }
    out
}

pub(crate) fn backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    k: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
) {
    let (patch, pos) = (g.patch(), g.positions());
    let mut cols = vec![T::zero(); pos * patch];
    for n in 0..batch {
        let go = &dout[n * g.out_len()..(n + 1) * g.out_len()];
        if let Some(dk) = dk.as_deref_mut() {
            g.im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
            T::gemm(
                g.out_channels,
                pos,
                patch,
                T::one(),
                go,
                (pos as isize, 1),
                &cols,
                (patch as isize, 1),
                T::one(),
                dk,
                (patch as isize, 1),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(
                pos,
                g.out_channels,
                patch,
                T::one(),
                go,
                (1, pos as isize),
                k,
                (patch as isize, 1),
                T::zero(),
                &mut cols,
                (patch as isize, 1),
            );
            g.col2im(&cols, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
}

/// Transposed convolution: `x` lives on the `out_*` side of `g` with
/// `g.out_channels` channels, kernel is `[out_channels, in_channels, kh, kw]`,
/// result lives on the `in_*` side.
pub(crate) fn transpose_forward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    k: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let (patch, pos) = (g.patch(), g.positions());
    let mut out = vec![T::zero(); batch * g.in_len()];
    let mut cols = vec![T::zero(); pos * patch];
    for n in 0..batch {
        let xi = &x[n * g.out_len()..(n + 1) * g.out_len()];
        T::gemm(
            pos,
            g.out_channels,
            patch,
            T::one(),
            xi,
            (1, pos as isize),
            k,
            (patch as isize, 1),
            T::zero(),
            &mut cols,
            (patch as isize, 1),
        );
        let o = &mut out[n * g.in_len()..(n + 1) * g.in_len()];
        g.col2im(&cols, o);
        if let Some(b) = b {
            let plane = g.in_h * g.in_w;
            for (ch, p) in o.chunks_mut(plane).enumerate() {
                p.iter_mut().for_each(|v| *v += b[ch]);
            }
        }
    }
    out
}

pub(crate) fn transpose_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    k: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
) {
    let (patch, pos) = (g.patch(), g.positions());
    let mut cols = vec![T::zero(); pos * patch];
    for n in 0..batch {
        g.im2col(&dout[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(
                g.out_channels,
                patch,
                pos,
                T::one(),
                k,
                (patch as isize, 1),
                &cols,
                (1, patch as isize),
                T::one(),
                &mut dx[n * g.out_len()..(n + 1) * g.out_len()],
                (pos as isize, 1),
            );
        }
        if let Some(dk) = dk.as_deref_mut() {
            T::gemm(
                g.out_channels,
                pos,
                patch,
                T::one(),
                &x[n * g.out_len()..(n + 1) * g.out_len()],
                (pos as isize, 1),
                &cols,
                (patch as isize, 1),
                T::one(),
                dk,
                (patch as isize, 1),
            );
        }
    }
}
