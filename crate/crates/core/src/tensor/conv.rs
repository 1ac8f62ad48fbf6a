use super::graph::{BackwardOp, Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{ConvGeometry, ConvKind};

/// `c = a·b + beta·c` with `a` m×k and `b` k×n, both row-major unless transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major (or transposed) buffers whose lengths are asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Dims of a forward-convolution "gather": an image of `c × h × w` read by a
/// `kernel × kernel` window onto an `oh × ow` grid.
#[derive(Clone, Copy)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl Window {
    fn geom(&self) -> ConvGeometry {
        ConvGeometry::forward(self.stride, self.padding)
    }

    fn rows(&self) -> usize {
        self.c * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let geom = self.geom();
        let n = self.cols();
        for c in 0..self.c {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = ((c * self.kernel + ky) * self.kernel + kx) * n;
                    for oy in 0..self.oh {
                        let iy = geom.input_index(oy, ky, self.h);
                        for ox in 0..self.ow {
                            let v = match (iy, geom.input_index(ox, kx, self.w)) {
                                (Some(iy), Some(ix)) => img[(c * self.h + iy) * self.w + ix],
                                _ => 0.0,
                            };
                            cols[row + oy * self.ow + ox] = v;
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let geom = self.geom();
        let n = self.cols();
        for c in 0..self.c {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = ((c * self.kernel + ky) * self.kernel + kx) * n;
                    for oy in 0..self.oh {
                        let Some(iy) = geom.input_index(oy, ky, self.h) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            let Some(ix) = geom.input_index(ox, kx, self.w) else {
                                continue;
                            };
                            img[(c * self.h + iy) * self.w + ix] += cols[row + oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kernel: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeometry,
}

impl ConvDims {
    fn infer(x: &[usize], w: &[usize], bias: Option<&[usize]>, geom: ConvGeometry) -> Result<Self> {
        let (&[batch, c_in, h, wid], &[c_out, wc_in, kh, kw]) = (x, w) else {
            return Err(Error::shape(format!(
                "conv expects 4-D input and weight, got {x:?} and {w:?}"
            )));
        };
        if wc_in != c_in || kh != kw {
            return Err(Error::shape(format!(
                "weight {w:?} incompatible with input {x:?}"
            )));
        }
        if let Some(b) = bias {
            if b != [c_out] {
                return Err(Error::shape(format!(
                    "bias {b:?} for {c_out} output channels"
                )));
            }
        }
        let oh = geom.output_len(h, kh)?;
        let ow = geom.output_len(wid, kw)?;
        Ok(Self {
            batch,
            c_in,
            h,
            w: wid,
            c_out,
            kernel: kh,
            oh,
            ow,
            geom,
        })
    }

    /// The forward-convolution window: over the input for a regular
    /// convolution, over the output for a transposed one.
    fn window(&self) -> Window {
        let (stride, padding) = (self.geom.stride, self.geom.padding);
        match self.geom.kind {
            ConvKind::Forward => Window {
                c: self.c_in,
                h: self.h,
                w: self.w,
                kernel: self.kernel,
                oh: self.oh,
                ow: self.ow,
                stride,
                padding,
            },
            ConvKind::Transposed => Window {
                c: self.c_out,
                h: self.oh,
                w: self.ow,
                kernel: self.kernel,
                oh: self.h,
                ow: self.w,
                stride,
                padding,
            },
        }
    }
}

/// `[C_out, C_in, K, K]` to `[C_in, C_out, K, K]` and back (the permutation is
/// its own inverse when the two channel counts are swapped).
fn swap_channels(w: &[f64], a: usize, b: usize, kk: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * kk;
            let dst = (j * a + i) * kk;
            out[dst..dst + kk].copy_from_slice(&w[src..src + kk]);
        }
    }
    out
}

/// Convolution forward pass without recording a graph.
pub fn conv_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let d = ConvDims::infer(x.shape(), w.shape(), bias.map(Tensor::shape), geom)?;
    let win = d.window();
    let kk = d.kernel * d.kernel;
    let in_plane = d.c_in * d.h * d.w;
    let out_plane = d.c_out * d.oh * d.ow;
    let mut out = vec![0.0; d.batch * out_plane];
    let mut cols = vec![0.0; win.rows() * win.cols()];
    match geom.kind {
        ConvKind::Forward => {
            for b in 0..d.batch {
                win.im2col(&x.data()[b * in_plane..(b + 1) * in_plane], &mut cols);
                let o = &mut out[b * out_plane..(b + 1) * out_plane];
                gemm(
                    d.c_out,
                    win.rows(),
                    win.cols(),
                    w.data(),
                    false,
                    &cols,
                    false,
                    o,
                    0.0,
                );
            }
        }
        ConvKind::Transposed => {
            let wp = swap_channels(w.data(), d.c_out, d.c_in, kk);
            for b in 0..d.batch {
                let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
                // cols [C_out·K·K, H·W] = wp^T [C_out·K·K, C_in] · x [C_in, H·W]
                gemm(
                    win.rows(),
                    d.c_in,
                    d.h * d.w,
                    &wp,
                    true,
                    xb,
                    false,
                    &mut cols,
                    0.0,
                );
                win.col2im(&cols, &mut out[b * out_plane..(b + 1) * out_plane]);
            }
        }
    }
    if let Some(bias) = bias {
        let plane = d.oh * d.ow;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bk = bias.data()[i % d.c_out];
            chunk.iter_mut().for_each(|v| *v += bk);
        }
    }
    Tensor::new(vec![d.batch, d.c_out, d.oh, d.ow], out)
}

struct ConvBackward {
    dims: ConvDims,
    has_bias: bool,
}

impl BackwardOp for ConvBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let d = self.dims;
        let (x, w) = (inputs[0], inputs[1]);
        let win = d.window();
        let kk = d.kernel * d.kernel;
        let in_plane = d.c_in * d.h * d.w;
        let out_plane = d.c_out * d.oh * d.ow;
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut cols = vec![0.0; win.rows() * win.cols()];
        match d.geom.kind {
            ConvKind::Forward => {
                for b in 0..d.batch {
                    let g = &grad[b * out_plane..(b + 1) * out_plane];
                    win.im2col(&x.data()[b * in_plane..(b + 1) * in_plane], &mut cols);
                    // dW += g [C_out, OHW] · cols^T [OHW, rows]
                    gemm(
                        d.c_out,
                        win.cols(),
                        win.rows(),
                        g,
                        false,
                        &cols,
                        true,
                        &mut dw,
                        1.0,
                    );
                    // dcols = W^T [rows, C_out] · g [C_out, OHW]
                    gemm(
                        win.rows(),
                        d.c_out,
                        win.cols(),
                        w.data(),
                        true,
                        g,
                        false,
                        &mut cols,
                        0.0,
                    );
                    win.col2im(&cols, &mut dx[b * in_plane..(b + 1) * in_plane]);
                }
            }
            ConvKind::Transposed => {
                let wp = swap_channels(w.data(), d.c_out, d.c_in, kk);
                let mut dwp = vec![0.0; w.len()];
                for b in 0..d.batch {
                    let g = &grad[b * out_plane..(b + 1) * out_plane];
                    win.im2col(g, &mut cols);
                    let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
                    // dx = wp [C_in, rows] · cols [rows, HW]
                    gemm(
                        d.c_in,
                        win.rows(),
                        d.h * d.w,
                        &wp,
                        false,
                        &cols,
                        false,
                        &mut dx[b * in_plane..(b + 1) * in_plane],
                        0.0,
                    );
                    // dwp += x [C_in, HW] · cols^T [HW, rows]
                    gemm(
                        d.c_in,
                        d.h * d.w,
                        win.rows(),
                        xb,
                        false,
                        &cols,
                        true,
                        &mut dwp,
                        1.0,
                    );
                }
                dw = swap_channels(&dwp, d.c_in, d.c_out, kk);
            }
        }
        let mut out = vec![Some(dx), Some(dw)];
        if self.has_bias {
            let plane = d.oh * d.ow;
            let mut db = vec![0.0; d.c_out];
            for (i, chunk) in grad.chunks(plane).enumerate() {
                db[i % d.c_out] += chunk.iter().sum::<f64>();
            }
            out.push(Some(db));
        }
        out
    }
}

impl Graph {
    /// 2-D cross-correlation (or its transpose) with optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let value = conv_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let dims = ConvDims::infer(self.shape(x), self.shape(w), None, geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.custom(
            &inputs,
            value,
            Box::new(ConvBackward {
                dims,
                has_bias: bias.is_some(),
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_passes_input() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv_forward(
            &x,
            &w,
            Some(&Tensor::zeros(&[1])),
            ConvGeometry::forward(1, 0),
        )
        .unwrap();
        assert_eq!(y, x);
        let y = conv_forward(&x, &w, None, ConvGeometry::transposed(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_pixel_with_bias() {
        let x = Tensor::full(&[1, 1, 1, 1], 2.0);
        let w = Tensor::full(&[1, 1, 1, 1], 3.0);
        let b = Tensor::full(&[1], 1.0);
        let y = conv_forward(&x, &w, Some(&b), ConvGeometry::forward(1, 0)).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn transposed_stride_two_upsamples() {
        let x = Tensor::full(&[1, 1, 1, 1], 1.75);
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv_forward(&x, &w, None, ConvGeometry::transposed(2, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.75; 4]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv_forward(&x, &w, None, ConvGeometry::forward(1, 1)),
            Err(Error::Shape(_))
        ));
    }
}
