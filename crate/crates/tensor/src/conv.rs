//! Convolution kernels on raw NCHW buffers.
//!
//! Both directions lower to `im2col` + GEMM. The transposed convolution is
//! implemented literally as the adjoint of [`conv2d_forward`] with the same
//! weight tensor, so its forward pass is conv2d's input-gradient path.

use crate::error::{shape_err, Result};
use crate::gemm::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Output extent of a forward convolution, if integral and positive.
    pub fn conv_out(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel || !(padded - kernel).is_multiple_of(self.stride) {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution: `(in - 1) s - 2p + k`.
    pub fn conv_transpose_out(&self, input: usize, kernel: usize) -> Option<usize> {
        let full = (input.checked_sub(1)?) * self.stride + kernel;
        full.checked_sub(2 * self.padding).filter(|&v| v > 0)
    }
}

/// Unfolds one `c x h x w` image into a `(c*k*k) x (oh*ow)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geo: ConvGeometry,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let cols = oh * ow;
    let (s, p) = (geo.stride as isize, geo.padding as isize);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ki as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into the image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geo: ConvGeometry,
    oh: usize,
    ow: usize,
    dst: &mut [f64],
) {
    let cols = oh * ow;
    let (s, p) = (geo.stride as isize, geo.padding as isize);
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ki as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize * s - p + kj as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Shapes involved in a convolution, named from the forward conv2d viewpoint:
/// `x: n x cin x h x w`, `weight: cout x cin x k x k`, `y: n x cout x oh x ow`.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
    pub geo: ConvGeometry,
}

impl ConvShape {
    pub fn for_conv(x: &[usize], weight: &[usize], geo: ConvGeometry) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, wcin, k, k2]) = (x, weight) else {
            return Err(shape_err("conv2d", format!("x {x:?}, weight {weight:?} must be rank 4")));
        };
        if wcin != cin || k != k2 {
            return Err(shape_err(
                "conv2d",
                format!("input {x:?} incompatible with weight {weight:?}"),
            ));
        }
        let (Some(oh), Some(ow)) = (geo.conv_out(h, k), geo.conv_out(w, k)) else {
            return Err(shape_err(
                "conv2d",
                format!("extent {h}x{w} with k={k} s={} p={} is not integral", geo.stride, geo.padding),
            ));
        };
        Ok(Self { n, cin, h, w, cout, k, oh, ow, geo })
    }

    /// For a transposed convolution the roles flip: its input is the conv
    /// output (`cout x oh x ow`) and its output the conv input (`cin x h x w`).
    /// `weight` is laid out `t_in x t_out x k x k`.
    pub fn for_transpose(x: &[usize], weight: &[usize], geo: ConvGeometry) -> Result<Self> {
        let (&[n, t_in, ih, iw], &[wt_in, t_out, k, k2]) = (x, weight) else {
            return Err(shape_err(
                "conv_transpose2d",
                format!("x {x:?}, weight {weight:?} must be rank 4"),
            ));
        };
        if wt_in != t_in || k != k2 {
            return Err(shape_err(
                "conv_transpose2d",
                format!("input {x:?} incompatible with weight {weight:?}"),
            ));
        }
        let (Some(h), Some(w)) = (geo.conv_transpose_out(ih, k), geo.conv_transpose_out(iw, k)) else {
            return Err(shape_err("conv_transpose2d", format!("extent {ih}x{iw} too small")));
        };
        Ok(Self {
            n,
            cin: t_out,
            h,
            w,
            cout: t_in,
            k,
            oh: ih,
            ow: iw,
            geo,
        })
    }

    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }
}

pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, s: &ConvShape) -> Vec<f64> {
    let (in_sz, out_sz, cols) = (s.cin * s.h * s.w, s.cout * s.oh * s.ow, s.oh * s.ow);
    let mut out = vec![0.0; s.n * out_sz];
    let mut col = vec![0.0; s.ckk() * cols];
    for b in 0..s.n {
        im2col(&x[b * in_sz..(b + 1) * in_sz], s.cin, s.h, s.w, s.k, s.geo, s.oh, s.ow, &mut col);
        let y = &mut out[b * out_sz..(b + 1) * out_sz];
        gemm(s.cout, s.ckk(), cols, weight, false, &col, false, y, 0.0);
        if let Some(bias) = bias {
            for (co, plane) in y.chunks_mut(cols).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    out
}

/// Gradients of conv2d. Any of the requested outputs may be skipped.
pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dweight: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    s: &ConvShape,
    need: [bool; 3],
) -> ConvGrads {
    let (in_sz, out_sz, cols) = (s.cin * s.h * s.w, s.cout * s.oh * s.ow, s.oh * s.ow);
    let mut dx = need[0].then(|| vec![0.0; s.n * in_sz]);
    let mut dw = need[1].then(|| vec![0.0; weight.len()]);
    let mut db = need[2].then(|| vec![0.0; s.cout]);
    let mut col = vec![0.0; s.ckk() * cols];
    for b in 0..s.n {
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_sz..(b + 1) * in_sz], s.cin, s.h, s.w, s.k, s.geo, s.oh, s.ow, &mut col);
            gemm(s.cout, cols, s.ckk(), dyb, false, &col, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(s.ckk(), s.cout, cols, weight, true, dyb, false, &mut col, 0.0);
            col2im(&col, s.cin, s.h, s.w, s.k, s.geo, s.oh, s.ow, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
        if let Some(db) = db.as_mut() {
            for (co, plane) in dyb.chunks(cols).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
        }
    }
    ConvGrads { dx, dweight: dw, dbias: db }
}

/// Transposed convolution: `x` has shape `n x s.cout x s.oh x s.ow`, the
/// result `n x s.cin x s.h x s.w`. Bias is indexed by output channel.
pub fn conv_transpose2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    s: &ConvShape,
) -> Vec<f64> {
    let (in_sz, out_sz, cols) = (s.cout * s.oh * s.ow, s.cin * s.h * s.w, s.oh * s.ow);
    let mut out = vec![0.0; s.n * out_sz];
    let mut col = vec![0.0; s.ckk() * cols];
    for b in 0..s.n {
        gemm(s.ckk(), s.cout, cols, weight, true, &x[b * in_sz..(b + 1) * in_sz], false, &mut col, 0.0);
        let y = &mut out[b * out_sz..(b + 1) * out_sz];
        col2im(&col, s.cin, s.h, s.w, s.k, s.geo, s.oh, s.ow, y);
        if let Some(bias) = bias {
            for (c, plane) in y.chunks_mut(s.h * s.w).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    s: &ConvShape,
    need: [bool; 3],
) -> ConvGrads {
    let (in_sz, out_sz, cols) = (s.cout * s.oh * s.ow, s.cin * s.h * s.w, s.oh * s.ow);
    let mut dx = need[0].then(|| vec![0.0; s.n * in_sz]);
    let mut dw = need[1].then(|| vec![0.0; weight.len()]);
    let mut db = need[2].then(|| vec![0.0; s.cin]);
    let mut col = vec![0.0; s.ckk() * cols];
    for b in 0..s.n {
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        if dx.is_some() || dw.is_some() {
            im2col(dyb, s.cin, s.h, s.w, s.k, s.geo, s.oh, s.ow, &mut col);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(s.cout, s.ckk(), cols, weight, false, &col, false, &mut dx[b * in_sz..(b + 1) * in_sz], 0.0);
        }
        if let Some(dw) = dw.as_mut() {
            gemm(s.cout, cols, s.ckk(), &x[b * in_sz..(b + 1) * in_sz], false, &col, true, dw, 1.0);
        }
        if let Some(db) = db.as_mut() {
            for (c, plane) in dyb.chunks(s.h * s.w).enumerate() {
                db[c] += plane.iter().sum::<f64>();
            }
        }
    }
    ConvGrads { dx, dweight: dw, dbias: db }
}
