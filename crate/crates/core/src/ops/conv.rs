//! 2-D convolution via im2col + gemm, grouped and dilated, no bias.

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    /// Output extent along one axis, `None` when it would be < 1.
    pub fn out_dim(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

impl Geometry {
    fn new<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, p: &Conv2dParams) -> Self {
        let [n, cin, h, w] = x.dims4().expect("conv input is NCHW");
        let [cout, cin_g, kh, kw] = weight.dims4().expect("conv weight is rank 4");
        let ho = p.out_dim(h, kh).expect("validated output height");
        let wo = p.out_dim(w, kw).expect("validated output width");
        debug_assert_eq!(cin_g * p.groups, cin);
        Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            cin_g,
            cout_g: cout / p.groups,
        }
    }

    fn col_rows(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold one group of one sample (`src` = `cin_g` planes of H×W) into
/// `cols` of shape (cin_g·kh·kw) × (Ho·Wo).
fn im2col<T: Scalar>(src: &[T], g: &Geometry, p: &Conv2dParams, cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.cin_g {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * p.stride + ki * p.dilation) as isize - p.padding as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * p.stride + kj * p.dilation) as isize - p.padding as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: scatter-add `cols` back onto the input planes.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, p: &Conv2dParams, dst: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.cin_g {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * p.stride + ki * p.dilation) as isize - p.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let in_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * p.stride + kj * p.dilation) as isize - p.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            in_row[ix as usize] = in_row[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, p: &Conv2dParams) -> Tensor<T> {
    let g = Geometry::new(x, weight, p);
    let pointwise = p.is_pointwise(g.kh, g.kw);
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(&[g.n, g.cout, g.ho, g.wo]);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); rows * ncols]
    };
    let xs = x.data();
    let ws = weight.data();
    let out_data = out.data_mut();
    for b in 0..g.n {
        for grp in 0..p.groups {
            let in_off = (b * g.cin + grp * g.cin_g) * g.h * g.w;
            let src = &xs[in_off..in_off + g.cin_g * g.h * g.w];
            let cols_ref: &[T] = if pointwise {
                src
            } else {
                im2col(src, &g, p, &mut cols);
                &cols
            };
            let w_g = &ws[grp * g.cout_g * rows..(grp + 1) * g.cout_g * rows];
            let out_off = (b * g.cout + grp * g.cout_g) * ncols;
            let dst = &mut out_data[out_off..out_off + g.cout_g * ncols];
            T::gemm(
                g.cout_g,
                rows,
                ncols,
                T::one(),
                w_g,
                rows as isize,
                1,
                cols_ref,
                ncols as isize,
                1,
                T::zero(),
                dst,
                ncols as isize,
                1,
            );
        }
    }
    out
}

/// Returns `(dx, dw)`; `dx` is skipped when the input needs no gradient.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    p: &Conv2dParams,
    grad_out: &Tensor<T>,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = Geometry::new(x, weight, p);
    let pointwise = p.is_pointwise(g.kh, g.kw);
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_dw.then(|| Tensor::zeros(weight.shape()));
    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * ncols }];
    let mut dcols = vec![T::zero(); if pointwise || !want_dx { 0 } else { rows * ncols }];
    let xs = x.data();
    let ws = weight.data();
    let gs = grad_out.data();
    for b in 0..g.n {
        for grp in 0..p.groups {
            let in_off = (b * g.cin + grp * g.cin_g) * g.h * g.w;
            let in_len = g.cin_g * g.h * g.w;
            let out_off = (b * g.cout + grp * g.cout_g) * ncols;
            let go = &gs[out_off..out_off + g.cout_g * ncols];
            let w_range = grp * g.cout_g * rows..(grp + 1) * g.cout_g * rows;

            if let Some(dw) = dw.as_mut() {
                let src = &xs[in_off..in_off + in_len];
                let cols_ref: &[T] = if pointwise {
                    src
                } else {
                    im2col(src, &g, p, &mut cols);
                    &cols
                };
                // dW_g += gout_g · colsᵀ
                T::gemm(
                    g.cout_g,
                    ncols,
                    rows,
                    T::one(),
                    go,
                    ncols as isize,
                    1,
                    cols_ref,
                    1,
                    ncols as isize,
                    T::one(),
                    &mut dw.data_mut()[w_range.clone()],
                    rows as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let w_g = &ws[w_range];
                let dst = &mut dx.data_mut()[in_off..in_off + in_len];
                // dcols = W_gᵀ · gout_g
                if pointwise {
                    T::gemm(
                        rows,
                        g.cout_g,
                        ncols,
                        T::one(),
                        w_g,
                        1,
                        rows as isize,
                        go,
                        ncols as isize,
                        1,
                        T::zero(),
                        dst,
                        ncols as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        rows,
                        g.cout_g,
                        ncols,
                        T::one(),
                        w_g,
                        1,
                        rows as isize,
                        go,
                        ncols as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        ncols as isize,
                        1,
                    );
                    col2im(&dcols, &g, p, dst);
                }
            }
        }
    }
    (dx, dw)
}
