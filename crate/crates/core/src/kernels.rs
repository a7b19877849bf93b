//! Forward and backward kernels behind the autograd graph.
//!
//! Convolution is lowered to im2col + GEMM one output z-plane at a time. The
//! plane partition depends only on the tensor shapes, which keeps every
//! reduction in a fixed order.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// Geometry of a 3-D convolution. Weights are stored as a tensor of shape
/// `(kx, ky, kz, c_in * c_out)`, i.e. for every kernel tap a row-major
/// `c_in x c_out` matrix. Viewed flat this is the `(kx*ky*kz*c_in) x c_out`
/// GEMM operand with rows ordered `ci + c_in * (ix + kx * (iy + ky * iz))`,
/// matching the im2col column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvGeometry {
    /// Stride 1 with "same" zero padding for odd kernels.
    pub fn same(kernel: usize, c_in: usize, c_out: usize) -> Self {
        ConvGeometry {
            kernel: [kernel; 3],
            stride: [1; 3],
            padding: [kernel / 2; 3],
            c_in,
            c_out,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4 {
            x: self.kernel[0],
            y: self.kernel[1],
            z: self.kernel[2],
            c: self.c_in * self.c_out,
        }
    }

    pub fn bias_shape(&self) -> Shape4 {
        Shape4 { x: 1, y: 1, z: 1, c: self.c_out }
    }

    pub fn param_count(&self) -> usize {
        self.taps() * self.c_in * self.c_out + self.c_out
    }

    /// `floor((in + 2p - k) / s) + 1` per axis.
    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.c != self.c_in {
            return Err(Error::InvalidShape(format!(
                "conv3d expects {} input channels, got {}",
                self.c_in, input.c
            )));
        }
        if self.stride.contains(&0) || self.kernel.contains(&0) || self.c_out == 0 {
            return Err(Error::InvalidArgument(format!("degenerate conv geometry {self:?}")));
        }
        let ext = input.spatial();
        let mut out = [0usize; 3];
        for a in 0..3 {
            let padded = ext[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::InvalidShape(format!(
                    "conv3d output extent is empty on axis {a}: input {} padding {} kernel {}",
                    ext[a], self.padding[a], self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Shape4::new(out[0], out[1], out[2], self.c_out)
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    // Operand extents are checked here so the unsafe call stays in bounds.
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= m * n);
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

/// Fills `cols` (rows = output voxels of plane `zo`, row-major) with the
/// receptive fields of that plane.
fn im2col_plane(input: &Tensor4, g: &ConvGeometry, out: Shape4, zo: usize, cols: &mut [f64]) {
    let s = input.shape();
    let cin = g.c_in;
    let k_len = g.taps() * cin;
    let data = input.data();
    let [kx, ky, kz] = g.kernel;
    for yo in 0..out.y {
        for xo in 0..out.x {
            let row = &mut cols[(xo + out.x * yo) * k_len..][..k_len];
            let mut col = 0;
            for iz in 0..kz {
                let zi = (zo * g.stride[2] + iz) as isize - g.padding[2] as isize;
                for iy in 0..ky {
                    let yi = (yo * g.stride[1] + iy) as isize - g.padding[1] as isize;
                    for ix in 0..kx {
                        let xi = (xo * g.stride[0] + ix) as isize - g.padding[0] as isize;
                        let dst = &mut row[col..col + cin];
                        if zi < 0 || yi < 0 || xi < 0 || zi as usize >= s.z || yi as usize >= s.y || xi as usize >= s.x {
                            dst.fill(0.0);
                        } else {
                            let o = s.offset(xi as usize, yi as usize, zi as usize, 0);
                            dst.copy_from_slice(&data[o..o + cin]);
                        }
                        col += cin;
                    }
                }
            }
        }
    }
}

fn col2im_plane_add(grad_in: &mut [f64], s: Shape4, g: &ConvGeometry, out: Shape4, zo: usize, cols: &[f64]) {
    let cin = g.c_in;
    let k_len = g.taps() * cin;
    let [kx, ky, kz] = g.kernel;
    for yo in 0..out.y {
        for xo in 0..out.x {
            let row = &cols[(xo + out.x * yo) * k_len..][..k_len];
            let mut col = 0;
            for iz in 0..kz {
                let zi = (zo * g.stride[2] + iz) as isize - g.padding[2] as isize;
                for iy in 0..ky {
                    let yi = (yo * g.stride[1] + iy) as isize - g.padding[1] as isize;
                    for ix in 0..kx {
                        let xi = (xo * g.stride[0] + ix) as isize - g.padding[0] as isize;
                        if !(zi < 0 || yi < 0 || xi < 0 || zi as usize >= s.z || yi as usize >= s.y || xi as usize >= s.x) {
                            let o = s.offset(xi as usize, yi as usize, zi as usize, 0);
                            for (d, v) in grad_in[o..o + cin].iter_mut().zip(&row[col..col + cin]) {
                                *d += v;
                            }
                        }
                        col += cin;
                    }
                }
            }
        }
    }
}

fn check_params(g: &ConvGeometry, weight: &Tensor4, bias: &Tensor4) -> Result<()> {
    if weight.shape() != g.weight_shape() {
        return Err(Error::ShapeMismatch { expected: g.weight_shape(), actual: weight.shape() });
    }
    if bias.shape() != g.bias_shape() {
        return Err(Error::ShapeMismatch { expected: g.bias_shape(), actual: bias.shape() });
    }
    Ok(())
}

/// Cross-correlation (no kernel flip) with zero padding.
pub fn conv3d_forward(input: &Tensor4, weight: &Tensor4, bias: &Tensor4, g: &ConvGeometry) -> Result<Tensor4> {
    check_params(g, weight, bias)?;
    let out = g.output_shape(input.shape())?;
    let rows = out.x * out.y;
    let k_len = g.taps() * g.c_in;
    let plane = rows * g.c_out;
    let mut cols = vec![0.0; rows * k_len];
    let mut result = vec![0.0; out.len()];
    for zo in 0..out.z {
        let dst = &mut result[zo * plane..(zo + 1) * plane];
        for r in dst.chunks_exact_mut(g.c_out) {
            r.copy_from_slice(bias.data());
        }
        im2col_plane(input, g, out, zo, &mut cols);
        gemm(rows, k_len, g.c_out, &cols, (k_len as isize, 1), weight.data(), (g.c_out as isize, 1), 1.0, dst);
    }
    Tensor4::from_vec(out, result)
}

pub struct ConvGrads {
    pub input: Option<Tensor4>,
    pub weight: Tensor4,
    pub bias: Tensor4,
}

pub fn conv3d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    g: &ConvGeometry,
    grad_out: &Tensor4,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let s = input.shape();
    let out = g.output_shape(s)?;
    if grad_out.shape() != out {
        return Err(Error::ShapeMismatch { expected: out, actual: grad_out.shape() });
    }
    let rows = out.x * out.y;
    let k_len = g.taps() * g.c_in;
    let plane = rows * g.c_out;
    let mut cols = vec![0.0; rows * k_len];
    let mut dcols = vec![0.0; rows * k_len];
    let mut dw = vec![0.0; k_len * g.c_out];
    let mut db = vec![0.0; g.c_out];
    let mut dx = if need_input_grad { Some(vec![0.0; s.len()]) } else { None };
    let gd = grad_out.data();
    for zo in 0..out.z {
        let gp = &gd[zo * plane..(zo + 1) * plane];
        for r in gp.chunks_exact(g.c_out) {
            for (b, v) in db.iter_mut().zip(r) {
                *b += v;
            }
        }
        im2col_plane(input, g, out, zo, &mut cols);
        // dW += cols^T * dY
        gemm(k_len, rows, g.c_out, &cols, (1, k_len as isize), gp, (g.c_out as isize, 1), 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            // dcols = dY * W^T
            gemm(rows, g.c_out, k_len, gp, (g.c_out as isize, 1), weight.data(), (1, g.c_out as isize), 0.0, &mut dcols);
            col2im_plane_add(dx, s, g, out, zo, &dcols);
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor4::from_vec(s, d)).transpose()?,
        weight: Tensor4::from_vec(g.weight_shape(), dw)?,
        bias: Tensor4::from_vec(g.bias_shape(), db)?,
    })
}

fn pooled_shape(s: Shape4, f: [usize; 3]) -> Result<Shape4> {
    for (a, (&e, &k)) in s.spatial().iter().zip(&f).enumerate() {
        if k == 0 {
            return Err(Error::InvalidArgument("pool factor must be positive".into()));
        }
        if e % k != 0 {
            return Err(Error::NotDivisible { axis: ['x', 'y', 'z'][a], extent: e, factor: k });
        }
    }
    Shape4::new(s.x / f[0], s.y / f[1], s.z / f[2], s.c)
}

/// Non-overlapping max pooling. Returns the pooled tensor and, per output
/// element, the flat input offset of the first maximum in layout order.
pub fn maxpool_forward(input: &Tensor4, f: [usize; 3]) -> Result<(Tensor4, Vec<usize>)> {
    let s = input.shape();
    let out = pooled_shape(s, f)?;
    let data = input.data();
    let mut vals = Vec::with_capacity(out.len());
    let mut arg = Vec::with_capacity(out.len());
    for zo in 0..out.z {
        for yo in 0..out.y {
            for xo in 0..out.x {
                for c in 0..s.c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for iz in 0..f[2] {
                        for iy in 0..f[1] {
                            for ix in 0..f[0] {
                                let o = s.offset(xo * f[0] + ix, yo * f[1] + iy, zo * f[2] + iz, c);
                                if best_i == usize::MAX || data[o] > best {
                                    best = data[o];
                                    best_i = o;
                                }
                            }
                        }
                    }
                    vals.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((Tensor4::from_vec(out, vals)?, arg))
}

pub fn maxpool_backward(input_shape: Shape4, argmax: &[usize], grad_out: &Tensor4) -> Result<Tensor4> {
    let mut dx = Tensor4::zeros(input_shape)?;
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// Nearest-neighbour upsampling by integer factors.
pub fn upsample_forward(input: &Tensor4, f: [usize; 3]) -> Result<Tensor4> {
    let s = input.shape();
    let out = Shape4::new(s.x * f[0], s.y * f[1], s.z * f[2], s.c)?;
    let mut data = Vec::with_capacity(out.len());
    for z in 0..out.z {
        for y in 0..out.y {
            for x in 0..out.x {
                data.extend_from_slice(input.fiber(x / f[0], y / f[1], z / f[2]));
            }
        }
    }
    Tensor4::from_vec(out, data)
}

pub fn upsample_backward(input_shape: Shape4, f: [usize; 3], grad_out: &Tensor4) -> Result<Tensor4> {
    let out = grad_out.shape();
    let mut dx = Tensor4::zeros(input_shape)?;
    let c = out.c;
    for z in 0..out.z {
        for y in 0..out.y {
            for x in 0..out.x {
                let src = out.offset(x, y, z, 0);
                let dst = input_shape.offset(x / f[0], y / f[1], z / f[2], 0);
                let gd = &grad_out.data()[src..src + c];
                for (d, g) in dx.data_mut()[dst..dst + c].iter_mut().zip(gd) {
                    *d += g;
                }
            }
        }
    }
    Ok(dx)
}

/// Per-voxel softmax over channels, stabilised by subtracting the fiber max.
pub fn softmax_forward(input: &Tensor4) -> Tensor4 {
    let c = input.shape().c;
    let mut out = input.clone();
    for fiber in out.data_mut().chunks_exact_mut(c) {
        let m = fiber.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in fiber.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in fiber.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub fn softmax_backward(probs: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let c = probs.shape().c;
    let mut dx = probs.clone();
    for (d, g) in dx.data_mut().chunks_exact_mut(c).zip(grad_out.data().chunks_exact(c)) {
        let dot: f64 = d.iter().zip(g).map(|(p, g)| p * g).sum();
        for (p, g) in d.iter_mut().zip(g) {
            *p *= g - dot;
        }
    }
    dx
}

/// Weights and smoothing of the combined cross-entropy + soft-Dice loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 1.0, dice: 1.0, dice_eps: 1e-5 }
    }
}

/// Probabilities are clamped to this floor inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cross_entropy: f64,
    /// Soft Dice per foreground class `1..K`.
    pub dice: Vec<f64>,
}

pub fn check_one_hot(labels: &Tensor4) -> Result<()> {
    let c = labels.shape().c;
    for fiber in labels.data().chunks_exact(c) {
        let ones = fiber.iter().filter(|&&v| v == 1.0).count();
        let zeros = fiber.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::InvalidArgument(format!("labels are not one-hot: {fiber:?}")));
        }
    }
    Ok(())
}

fn check_loss_inputs(probs: &Tensor4, labels: &Tensor4) -> Result<()> {
    if probs.shape() != labels.shape() {
        return Err(Error::ShapeMismatch { expected: probs.shape(), actual: labels.shape() });
    }
    if probs.shape().c < 2 {
        return Err(Error::InvalidShape("the combined loss needs at least two classes".into()));
    }
    Ok(())
}

/// `ce * mean_voxel(-sum_k g ln p) + dice * (1 - mean_{k>=1} (2 sum p g + eps) / (sum p + sum g + eps))`
pub fn ce_dice_forward(probs: &Tensor4, labels: &Tensor4, w: LossWeights) -> Result<LossParts> {
    check_loss_inputs(probs, labels)?;
    let k = probs.shape().c;
    let n = probs.shape().voxels() as f64;
    let mut ce = 0.0;
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    for (p, g) in probs.data().chunks_exact(k).zip(labels.data().chunks_exact(k)) {
        for c in 0..k {
            if g[c] != 0.0 {
                ce -= g[c] * p[c].max(PROB_FLOOR).ln();
            }
            inter[c] += p[c] * g[c];
            psum[c] += p[c];
            gsum[c] += g[c];
        }
    }
    ce /= n;
    let dice: Vec<f64> = (1..k)
        .map(|c| (2.0 * inter[c] + w.dice_eps) / (psum[c] + gsum[c] + w.dice_eps))
        .collect();
    let mean_dice = dice.iter().sum::<f64>() / dice.len() as f64;
    Ok(LossParts {
        total: w.ce * ce + w.dice * (1.0 - mean_dice),
        cross_entropy: ce,
        dice,
    })
}

/// Gradient of [`ce_dice_forward`]'s total with respect to `probs`, scaled by `upstream`.
pub fn ce_dice_backward(probs: &Tensor4, labels: &Tensor4, w: LossWeights, upstream: f64) -> Result<Tensor4> {
    check_loss_inputs(probs, labels)?;
    let k = probs.shape().c;
    let n = probs.shape().voxels() as f64;
    let mut inter = vec![0.0; k];
    let mut denom = vec![0.0; k];
    for (p, g) in probs.data().chunks_exact(k).zip(labels.data().chunks_exact(k)) {
        for c in 0..k {
            inter[c] += p[c] * g[c];
            denom[c] += p[c] + g[c];
        }
    }
    let fg = (k - 1) as f64;
    let mut dx = probs.clone();
    for (d, g) in dx.data_mut().chunks_exact_mut(k).zip(labels.data().chunks_exact(k)) {
        for c in 0..k {
            let p = d[c];
            let mut v = 0.0;
            if g[c] != 0.0 && p > PROB_FLOOR {
                v -= w.ce * g[c] / (n * p);
            }
            if c >= 1 {
                let s = denom[c] + w.dice_eps;
                let num = 2.0 * inter[c] + w.dice_eps;
                let dd = (2.0 * g[c] * s - num) / (s * s);
                v -= w.dice * dd / fg;
            }
            d[c] = upstream * v;
        }
    }
    Ok(dx)
}
