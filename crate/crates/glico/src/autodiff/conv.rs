//! im2col-based convolution kernels shared by forward and backward passes.

use ndarray::{Array2, Array4, ArrayView2, ArrayView3, ArrayView4, ArrayViewMut3, Axis};

/// Unfolds `(C, H, W)` into `(C*kh*kw, gh*gw)` where `(gh, gw)` enumerate the
/// sliding-window grid: `grid_pos * stride + k - pad` indexes the image.
pub fn im2col(
    x: &ArrayView3<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut cols = Array2::<f32>::zeros((c * kh * kw, gh * gw));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let rbase = row * gh * gw;
                for gy in 0..gh {
                    let iy = (gy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xbase = (ci * h + iy as usize) * w;
                    let obase = rbase + gy * gw;
                    for gx in 0..gw {
                        let ix = (gx * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cs[obase + gx] = xs[xbase + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`]: folds `(C*kh*kw, gh*gw)` back onto the
/// `(C, H, W)` image, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &ArrayView2<f32>,
    img: &mut ArrayViewMut3<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) {
    let (c, h, w) = img.dim();
    debug_assert_eq!(cols.dim(), (c * kh * kw, gh * gw));
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    let is = img.as_slice_mut().expect("col2im: image must be contiguous");
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let rbase = row * gh * gw;
                for gy in 0..gh {
                    let iy = (gy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ibase = (ci * h + iy as usize) * w;
                    let obase = rbase + gy * gw;
                    for gx in 0..gw {
                        let ix = (gx * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            is[ibase + ix as usize] += cs[obase + gx];
                        }
                    }
                }
            }
        }
    }
}

/// `x (N,Cin,H,W) * w (Cout,Cin,kh,kw) -> (N,Cout,OH,OW)`.
pub fn conv2d_forward(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (n, cin, h, wdt) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wdt + 2 * pad - kw) / stride + 1;
    let w2 = w.to_shape((cout, cin * kh * kw)).unwrap().to_owned();
    let mut out = Array4::<f32>::zeros((n, cout, oh, ow));
    for i in 0..n {
        let cols = im2col(&x.index_axis(Axis(0), i), kh, kw, stride, pad, oh, ow);
        let y = w2.dot(&cols);
        out.index_axis_mut(Axis(0), i)
            .assign(&y.to_shape((cout, oh, ow)).unwrap());
    }
    out
}

/// `x (N,Cin,H,W) * w (Cin,Cout,kh,kw) -> (N,Cout,(H-1)s-2p+kh,(W-1)s-2p+kw)`.
pub fn conv_transpose2d_forward(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (n, cin, h, wdt) = x.dim();
    let (_, cout, kh, kw) = w.dim();
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wdt - 1) * stride + kw - 2 * pad;
    let w2 = w.to_shape((cin, cout * kh * kw)).unwrap().to_owned();
    let mut out = Array4::<f32>::zeros((n, cout, oh, ow));
    for i in 0..n {
        let x_n = x
            .index_axis(Axis(0), i)
            .to_shape((cin, h * wdt))
            .unwrap()
            .to_owned();
        let cols = w2.t().dot(&x_n);
        col2im(
            &cols.view(),
            &mut out.index_axis_mut(Axis(0), i),
            kh,
            kw,
            stride,
            pad,
            h,
            wdt,
        );
    }
    out
}
