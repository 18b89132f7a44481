//! im2col-based convolution kernels (forward and adjoints).

use crate::scalar::{matmul, Scalar};

/// Geometry of a square-kernel convolution over a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, in_h: usize, in_w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if in_h + 2 * pad < k || in_w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            in_h,
            in_w,
            k,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `img` (`[channels, in_h, in_w]`) into `[channels*k*k, out_h*out_w]`.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    let ow = g.out_w;
    let n = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s - p + ky as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= ih {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    if s == 1 {
                        let off = kx as isize - p;
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize + off;
                            *d = if ix >= 0 && ix < iw { srow[ix as usize] } else { T::zero() };
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize * s - p + kx as isize;
                            *d = if ix >= 0 && ix < iw { srow[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `img`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let (ih, iw) = (g.in_h as isize, g.in_w as isize);
    let ow = g.out_w;
    let n = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= ih {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < iw {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Scalar>(dy: &[T], channels: usize, plane: usize) -> Vec<T> {
    (0..channels)
        .map(|c| dy[c * plane..(c + 1) * plane].iter().copied().sum())
        .collect()
}

/// `y = W * x + b` with `W` shaped `[cout, cin, k, k]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom, cout: usize) -> Vec<T> {
    let n = g.col_cols();
    let mut y = vec![T::zero(); cout * n];
    if g.is_pointwise() {
        matmul(cout, g.channels, n, w, false, x, false, &mut y, false);
    } else {
        T::with_scratch(0, g.col_rows() * n, |cols| {
            im2col(x, g, cols);
            matmul(cout, g.col_rows(), n, w, false, cols, false, &mut y, false);
        });
    }
    if let Some(b) = b {
        add_bias(&mut y, b, n);
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    cout: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let n = g.col_cols();
    let rows = g.col_rows();
    let db = need.2.then(|| bias_grad(dy, cout, n));
    if g.is_pointwise() {
        let dw = need.1.then(|| {
            let mut dw = vec![T::zero(); cout * rows];
            matmul(cout, n, rows, dy, false, x, true, &mut dw, false);
            dw
        });
        let dx = need.0.then(|| {
            let mut dx = vec![T::zero(); g.channels * n];
            matmul(g.channels, cout, n, w, true, dy, false, &mut dx, false);
            dx
        });
        return ConvGrads { dx, dw, db };
    }
    let dw = need.1.then(|| {
        T::with_scratch(0, rows * n, |cols| {
            im2col(x, g, cols);
            let mut dw = vec![T::zero(); cout * rows];
            matmul(cout, n, rows, dy, false, cols, true, &mut dw, false);
            dw
        })
    });
    let dx = need.0.then(|| {
        T::with_scratch(0, rows * n, |dcols| {
            matmul(rows, cout, n, w, true, dy, false, dcols, false);
            let mut dx = vec![T::zero(); g.channels * g.in_h * g.in_w];
            col2im(dcols, g, &mut dx);
            dx
        })
    });
    ConvGrads { dx, dw, db }
}

/// Transposed convolution. `W` is `[cin, cout, k, k]`; `g` describes the
/// *forward* convolution from the `[cout, out_h, out_w]` output back onto
/// the `[cin, h, w]` input grid (so `g.out_h == h`).
pub fn conv_t_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom, cin: usize) -> Vec<T> {
    let n = g.col_cols();
    let rows = g.col_rows();
    let mut y = vec![T::zero(); g.channels * g.in_h * g.in_w];
    T::with_scratch(0, rows * n, |cols| {
        matmul(rows, cin, n, w, true, x, false, cols, false);
        col2im(cols, g, &mut y);
    });
    if let Some(b) = b {
        add_bias(&mut y, b, g.in_h * g.in_w);
    }
    y
}

pub fn conv_t_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    cin: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let n = g.col_cols();
    let rows = g.col_rows();
    let (dx, dw) = if need.0 || need.1 {
        T::with_scratch(0, rows * n, |cols| {
            im2col(dy, g, cols);
            let dx = need.0.then(|| {
                let mut dx = vec![T::zero(); cin * n];
                matmul(cin, rows, n, w, false, cols, false, &mut dx, false);
                dx
            });
            let dw = need.1.then(|| {
                let mut dw = vec![T::zero(); cin * rows];
                matmul(cin, n, rows, x, false, cols, true, &mut dw, false);
                dw
            });
            (dx, dw)
        })
    } else {
        (None, None)
    };
    let db = need.2.then(|| bias_grad(dy, g.channels, g.in_h * g.in_w));
    ConvGrads { dx, dw, db }
}
