//! Dense 3D convolution kernels (2D is the depth-1 special case).
//!
//! All variants are expressed as im2col / col2im plus one GEMM, which keeps
//! the arithmetic in `matrixmultiply::dgemm` where a single core is fast
//! enough for desk-scale training. Layouts:
//!
//! * convolution weight: `[C_out, C_in, Kd, Kh, Kw]`
//! * transposed-convolution weight: `[C_in, C_out, Kd, Kh, Kw]`
//! * activations: `[C, D, H, W]` row-major.

use crate::tensor::Tensor;

/// Spatial geometry of a (possibly transposed) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    /// Extra size appended to each output dim of a transposed convolution so
    /// that stride-2 upsampling exactly doubles odd-kernel inputs.
    pub out_pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        ConvGeom {
            kernel,
            stride,
            pad,
            out_pad: [0; 3],
        }
    }

    pub fn with_out_pad(mut self, out_pad: [usize; 3]) -> Self {
        self.out_pad = out_pad;
        self
    }

    /// Output dims of a forward convolution over `input` dims, or None when
    /// the kernel does not fit.
    pub fn conv_out_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = input[i] + 2 * self.pad[i];
            if padded < self.kernel[i] {
                return None;
            }
            out[i] = (padded - self.kernel[i]) / self.stride[i] + 1;
        }
        Some(out)
    }

    /// Output dims of a transposed convolution over `input` dims.
    pub fn convt_out_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let grown = (input[i] - 1) * self.stride[i] + self.kernel[i] + self.out_pad[i];
            if grown < 2 * self.pad[i] {
                return None;
            }
            out[i] = grown - 2 * self.pad[i];
        }
        Some(out)
    }

    fn kernel_len(&self) -> usize {
        self.kernel[0] * self.kernel[1] * self.kernel[2]
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gather `src` patches into a `[channels * K, L]` column matrix, where `L`
/// iterates the `grid` positions and each column holds the receptive field
/// feeding that position. Out-of-bounds reads are zero.
fn im2col(
    src: &[f64],
    channels: usize,
    src_dims: [usize; 3],
    grid: [usize; 3],
    geom: &ConvGeom,
) -> Vec<f64> {
    let k_len = geom.kernel_len();
    let l = grid[0] * grid[1] * grid[2];
    let mut col = vec![0.0; channels * k_len * l];
    let (sd, sh, sw) = (src_dims[0], src_dims[1], src_dims[2]);
    let (kd, kh, kw) = (geom.kernel[0], geom.kernel[1], geom.kernel[2]);

    for c in 0..channels {
        let src_c = &src[c * sd * sh * sw..(c + 1) * sd * sh * sw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let k_idx = (kz * kh + ky) * kw + kx;
                    let row = &mut col[(c * k_len + k_idx) * l..(c * k_len + k_idx + 1) * l];
                    let mut li = 0;
                    for gz in 0..grid[0] {
                        let z = (gz * geom.stride[0] + kz) as isize - geom.pad[0] as isize;
                        let z_ok = z >= 0 && (z as usize) < sd;
                        for gy in 0..grid[1] {
                            let y = (gy * geom.stride[1] + ky) as isize - geom.pad[1] as isize;
                            let row_ok = z_ok && y >= 0 && (y as usize) < sh;
                            if !row_ok {
                                li += grid[2];
                                continue;
                            }
                            let base = (z as usize * sh + y as usize) * sw;
                            for gx in 0..grid[2] {
                                let x = (gx * geom.stride[2] + kx) as isize - geom.pad[2] as isize;
                                if x >= 0 && (x as usize) < sw {
                                    row[li] = src_c[base + x as usize];
                                }
                                li += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a `[channels * K, L]` column matrix back into a
/// `[channels, target_dims]` tensor; the adjoint of [`im2col`].
fn col2im(
    col: &[f64],
    channels: usize,
    target_dims: [usize; 3],
    grid: [usize; 3],
    geom: &ConvGeom,
) -> Vec<f64> {
    let k_len = geom.kernel_len();
    let l = grid[0] * grid[1] * grid[2];
    let (td, th, tw) = (target_dims[0], target_dims[1], target_dims[2]);
    let mut out = vec![0.0; channels * td * th * tw];
    let (kd, kh, kw) = (geom.kernel[0], geom.kernel[1], geom.kernel[2]);

    for c in 0..channels {
        let out_c = &mut out[c * td * th * tw..(c + 1) * td * th * tw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let k_idx = (kz * kh + ky) * kw + kx;
                    let row = &col[(c * k_len + k_idx) * l..(c * k_len + k_idx + 1) * l];
                    let mut li = 0;
                    for gz in 0..grid[0] {
                        let z = (gz * geom.stride[0] + kz) as isize - geom.pad[0] as isize;
                        let z_ok = z >= 0 && (z as usize) < td;
                        for gy in 0..grid[1] {
                            let y = (gy * geom.stride[1] + ky) as isize - geom.pad[1] as isize;
                            let row_ok = z_ok && y >= 0 && (y as usize) < th;
                            if !row_ok {
                                li += grid[2];
                                continue;
                            }
                            let base = (z as usize * th + y as usize) * tw;
                            for gx in 0..grid[2] {
                                let x = (gx * geom.stride[2] + kx) as isize - geom.pad[2] as isize;
                                if x >= 0 && (x as usize) < tw {
                                    out_c[base + x as usize] += row[li];
                                }
                                li += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    [shape[1], shape[2], shape[3]]
}

/// `y[o] = sum_{c,k} x[c, o*s + k - p] * w[o_ch, c, k]`
pub fn conv3d_forward(x: &Tensor, w: &Tensor, geom: &ConvGeom) -> Tensor {
    let (c_out, c_in) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.shape()[0], c_in, "conv input channels");
    let in_dims = dims3(x.shape());
    let out_dims = geom.conv_out_dims(in_dims).expect("kernel larger than input");
    let l = out_dims[0] * out_dims[1] * out_dims[2];
    let ck = c_in * geom.kernel_len();

    let col = im2col(x.data(), c_in, in_dims, out_dims, geom);
    let mut y = vec![0.0; c_out * l];
    gemm(c_out, ck, l, w.data(), (ck as isize, 1), &col, (l as isize, 1), &mut y);
    Tensor::new(vec![c_out, out_dims[0], out_dims[1], out_dims[2]], y)
}

/// Gradient of a conv3d output w.r.t. its input.
pub fn conv3d_input_grad(gy: &Tensor, w: &Tensor, geom: &ConvGeom, in_dims: [usize; 3]) -> Tensor {
    let (c_out, c_in) = (w.shape()[0], w.shape()[1]);
    let out_dims = dims3(gy.shape());
    let l = out_dims[0] * out_dims[1] * out_dims[2];
    let ck = c_in * geom.kernel_len();

    // col grad = W^T (ck x c_out) * gy (c_out x L)
    let mut colg = vec![0.0; ck * l];
    gemm(ck, c_out, l, w.data(), (1, ck as isize), gy.data(), (l as isize, 1), &mut colg);
    let gx = col2im(&colg, c_in, in_dims, out_dims, geom);
    Tensor::new(vec![c_in, in_dims[0], in_dims[1], in_dims[2]], gx)
}

/// Gradient of a conv3d output w.r.t. its weights.
pub fn conv3d_weight_grad(x: &Tensor, gy: &Tensor, geom: &ConvGeom) -> Tensor {
    let c_in = x.shape()[0];
    let c_out = gy.shape()[0];
    let in_dims = dims3(x.shape());
    let out_dims = dims3(gy.shape());
    let l = out_dims[0] * out_dims[1] * out_dims[2];
    let ck = c_in * geom.kernel_len();

    let col = im2col(x.data(), c_in, in_dims, out_dims, geom);
    // gw = gy (c_out x L) * col^T (L x ck)
    let mut gw = vec![0.0; c_out * ck];
    gemm(c_out, l, ck, gy.data(), (l as isize, 1), &col, (1, l as isize), &mut gw);
    let k = geom.kernel;
    Tensor::new(vec![c_out, c_in, k[0], k[1], k[2]], gw)
}

/// Transposed convolution: scatter each input voxel through the kernel.
/// Weight layout `[C_in, C_out, Kd, Kh, Kw]`.
pub fn convt3d_forward(x: &Tensor, w: &Tensor, geom: &ConvGeom) -> Tensor {
    let (c_in, c_out) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.shape()[0], c_in, "transposed conv input channels");
    let in_dims = dims3(x.shape());
    let out_dims = geom
        .convt_out_dims(in_dims)
        .expect("transposed conv geometry underflow");
    let l_in = in_dims[0] * in_dims[1] * in_dims[2];
    let ok = c_out * geom.kernel_len();

    // colY (ok x L_in) = W^T (ok x c_in) * x (c_in x L_in)
    let mut coly = vec![0.0; ok * l_in];
    gemm(
        ok,
        c_in,
        l_in,
        w.data(),
        (1, ok as isize),
        x.data(),
        (l_in as isize, 1),
        &mut coly,
    );
    let y = col2im(&coly, c_out, out_dims, in_dims, geom);
    Tensor::new(vec![c_out, out_dims[0], out_dims[1], out_dims[2]], y)
}

/// Gradient of a transposed conv output w.r.t. its input: an ordinary
/// convolution of the output gradient with the same kernel.
pub fn convt3d_input_grad(gy: &Tensor, w: &Tensor, geom: &ConvGeom, in_dims: [usize; 3]) -> Tensor {
    let (c_in, c_out) = (w.shape()[0], w.shape()[1]);
    let out_dims = dims3(gy.shape());
    let l_in = in_dims[0] * in_dims[1] * in_dims[2];
    let ok = c_out * geom.kernel_len();

    let col = im2col(gy.data(), c_out, out_dims, in_dims, geom);
    // gx (c_in x L_in) = W (c_in x ok) * col (ok x L_in)
    let mut gx = vec![0.0; c_in * l_in];
    gemm(c_in, ok, l_in, w.data(), (ok as isize, 1), &col, (l_in as isize, 1), &mut gx);
    Tensor::new(vec![c_in, in_dims[0], in_dims[1], in_dims[2]], gx)
}

/// Gradient of a transposed conv output w.r.t. its weights.
pub fn convt3d_weight_grad(x: &Tensor, gy: &Tensor, geom: &ConvGeom) -> Tensor {
    let c_in = x.shape()[0];
    let c_out = gy.shape()[0];
    let in_dims = dims3(x.shape());
    let out_dims = dims3(gy.shape());
    let l_in = in_dims[0] * in_dims[1] * in_dims[2];
    let ok = c_out * geom.kernel_len();

    let col = im2col(gy.data(), c_out, out_dims, in_dims, geom);
    // gw (c_in x ok) = x (c_in x L_in) * col^T (L_in x ok)
    let mut gw = vec![0.0; c_in * ok];
    gemm(c_in, l_in, ok, x.data(), (l_in as isize, 1), &col, (1, l_in as isize), &mut gw);
    let k = geom.kernel;
    Tensor::new(vec![c_in, c_out, k[0], k[1], k[2]], gw)
}
