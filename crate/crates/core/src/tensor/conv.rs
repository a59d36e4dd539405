//! im2col kernels for 3x3 cross-correlation, forward and backward.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

pub(crate) const KSIZE: usize = 3;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.padding - (KSIZE - 1)
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.padding - (KSIZE - 1)
    }

    fn col_rows(&self) -> usize {
        self.c_in * KSIZE * KSIZE
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.padding as isize;
    for ch in 0..g.c_in {
        let plane = &image[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (ch * KSIZE + ky) * KSIZE + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.padding as isize;
    for ch in 0..g.c_in {
        let plane = &mut image[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (ch * KSIZE + ky) * KSIZE + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn view(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous view")
}

fn view_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("contiguous view")
}

pub(crate) fn forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * ncols];
    let mut out = vec![0.0; g.batch * g.c_out * ncols];
    let k = view(kernel, g.c_out, rows);
    let in_len = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        im2col(g, &input[b * in_len..(b + 1) * in_len], &mut cols);
        let dst = &mut out[b * g.c_out * ncols..(b + 1) * g.c_out * ncols];
        for (o, chunk) in dst.chunks_mut(ncols).enumerate() {
            chunk.fill(bias[o]);
        }
        let mut y = view_mut(dst, g.c_out, ncols);
        general_mat_mul(1.0, &k, &view(&cols, rows, ncols), 1.0, &mut y);
    }
    out
}

/// Gradients w.r.t. (input, kernel, bias); the input gradient is skipped when
/// `need_input` is false.
pub(crate) fn backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; rows * ncols];
    let mut dcols = vec![0.0; rows * ncols];
    let mut dkernel = vec![0.0; g.c_out * rows];
    let mut dbias = vec![0.0; g.c_out];
    let mut dinput = need_input.then(|| vec![0.0; g.batch * in_len]);
    let k = view(kernel, g.c_out, rows);
    for b in 0..g.batch {
        let dy_slice = &grad_out[b * g.c_out * ncols..(b + 1) * g.c_out * ncols];
        for (o, chunk) in dy_slice.chunks(ncols).enumerate() {
            dbias[o] += chunk.iter().sum::<f64>();
        }
        let dy = view(dy_slice, g.c_out, ncols);
        im2col(g, &input[b * in_len..(b + 1) * in_len], &mut cols);
        let mut dk = view_mut(&mut dkernel, g.c_out, rows);
        general_mat_mul(1.0, &dy, &view(&cols, rows, ncols).t(), 1.0, &mut dk);
        if let Some(dx) = dinput.as_mut() {
            let mut dc = view_mut(&mut dcols, rows, ncols);
            general_mat_mul(1.0, &k.t(), &dy, 0.0, &mut dc);
            col2im_add(g, &dcols, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dinput, dkernel, dbias)
}
