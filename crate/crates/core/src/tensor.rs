//! Dense `(batch, channels, height, width)` arrays and the planar operators
//! the networks are built from.
//!
//! Convolution is cross-correlation (no kernel flip) with stride 1, lowered
//! to `im2col` followed by a dense matrix product. Every operator here is a
//! pure function; backward rules live next to their forward pass.

use std::cell::RefCell;

use rayon::prelude::*;

use crate::error::{invalid_arg, shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(shape_err!("{} values for shape {:?}", data.len(), shape));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [b, c, h, w] = shape;
        let mut data = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(bi, ci, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cs, h, w] = self.shape;
        self.data[((b * cs + c) * h + y) * w + x]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let area = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * area;
        &self.data[start..start + area]
    }

    /// Same data, reinterpreted with another shape of equal size.
    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Drops `border` pixels on each side.
    pub fn crop(&self, border: usize) -> Tensor4 {
        let [b, c, h, w] = self.shape;
        assert!(2 * border < h && 2 * border < w, "crop border too large");
        Tensor4::from_fn([b, c, h - 2 * border, w - 2 * border], |bi, ci, y, x| {
            self.get(bi, ci, y + border, x + border)
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// Convolution kernels of shape `(out, in, kh, kw)`, both spatial sizes odd.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStack {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl KernelStack {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(shape_err!("{} kernel values for shape {:?}", data.len(), shape));
        }
        if shape[2] % 2 == 0 || shape[3] % 2 == 0 {
            return Err(shape_err!("kernel sizes must be odd, got {}x{}", shape[2], shape[3]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::new(shape, vec![0.0; shape.iter().product()]).expect("odd kernel shape")
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero fill so the output keeps the input's spatial size.
    Same,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kh: usize,
    kw: usize,
    pad_y: usize,
    pad_x: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(input: [usize; 4], kernel: [usize; 4], padding: Padding) -> Result<Self> {
        let [batch, in_channels, height, width] = input;
        let [out_channels, kc, kh, kw] = kernel;
        if kc != in_channels {
            return Err(shape_err!("input has {in_channels} channels, kernels expect {kc}"));
        }
        let (pad_y, pad_x) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (0, 0),
        };
        if height + 2 * pad_y < kh || width + 2 * pad_x < kw {
            return Err(shape_err!("{height}x{width} input is smaller than {kh}x{kw} kernel"));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kh,
            kw,
            pad_y,
            pad_x,
            out_h: height + 2 * pad_y - kh + 1,
            out_w: width + 2 * pad_x - kw + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_sample(&self) -> usize {
        self.out_channels * self.out_area()
    }

    /// Samples per im2col block, bounded so a block stays a few MB.
    fn chunk(&self) -> usize {
        let budget_cols = (500_000 / self.patch_len().max(1)).clamp(1, 8192);
        (budget_cols / self.out_area().max(1)).clamp(1, self.batch.max(1))
    }

    /// Fills `cols` (`patch_len x (samples * out_area)`) from `input` samples.
    fn im2col(&self, input: &[f64], samples: usize, cols: &mut [f64]) {
        let area = self.out_area();
        let ncols = samples * area;
        let mut row = 0;
        for c in 0..self.in_channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                    let x_lo = self.pad_x.saturating_sub(kx);
                    let x_hi = (self.width + self.pad_x).saturating_sub(kx).min(self.out_w);
                    for s in 0..samples {
                        let plane = &input[s * self.in_sample() + c * self.height * self.width..];
                        for oy in 0..self.out_h {
                            let dst = &mut dst_row[s * area + oy * self.out_w..s * area + (oy + 1) * self.out_w];
                            let iy = oy + ky;
                            if iy < self.pad_y || iy >= self.height + self.pad_y || x_lo >= x_hi {
                                dst.fill(0.0);
                                continue;
                            }
                            let src_row = &plane[(iy - self.pad_y) * self.width..];
                            dst[..x_lo].fill(0.0);
                            let ix0 = x_lo + kx - self.pad_x;
                            dst[x_lo..x_hi].copy_from_slice(&src_row[ix0..ix0 + (x_hi - x_lo)]);
                            dst[x_hi..].fill(0.0);
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds `cols` back into input-shaped `grad`.
    fn col2im(&self, cols: &[f64], samples: usize, grad: &mut [f64]) {
        let area = self.out_area();
        let ncols = samples * area;
        let mut row = 0;
        for c in 0..self.in_channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src_row = &cols[row * ncols..(row + 1) * ncols];
                    let x_lo = self.pad_x.saturating_sub(kx);
                    let x_hi = (self.width + self.pad_x).saturating_sub(kx).min(self.out_w);
                    for s in 0..samples {
                        let base = s * self.in_sample() + c * self.height * self.width;
                        for oy in 0..self.out_h {
                            let iy = oy + ky;
                            if iy < self.pad_y || iy >= self.height + self.pad_y || x_lo >= x_hi {
                                continue;
                            }
                            let src = &src_row[s * area + oy * self.out_w..];
                            let ix0 = x_lo + kx - self.pad_x;
                            let dst = &mut grad[base + (iy - self.pad_y) * self.width + ix0..];
                            for (d, v) in dst[..x_hi - x_lo].iter_mut().zip(&src[x_lo..x_hi]) {
                                *d += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c = alpha * a b + beta * c` on row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index reachable through the given
    // strides for the stated dimensions; callers construct the strides from
    // the same dimensions.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

thread_local! {
    // Reused im2col buffers; fresh multi-megabyte allocations spend more
    // time faulting in pages than the matrix product takes.
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

/// Runs `f` with two scratch slices of the requested lengths. Contents are
/// unspecified on entry.
fn with_scratch<R>(a_len: usize, b_len: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (a, b) = &mut *guard;
        if a.len() < a_len {
            a.resize(a_len, 0.0);
        }
        if b.len() < b_len {
            b.resize(b_len, 0.0);
        }
        f(&mut a[..a_len], &mut b[..b_len])
    })
}

/// Strided cross-correlation, stride 1.
pub fn conv2d(input: &Tensor4, kernels: &KernelStack, padding: Padding) -> Result<Tensor4> {
    let g = ConvGeometry::new(input.shape, kernels.shape, padding)?;
    let data = conv2d_raw(&g, &input.data, &kernels.data);
    Tensor4::new([g.batch, g.out_channels, g.out_h, g.out_w], data)
}

fn conv2d_raw(g: &ConvGeometry, input: &[f64], kernels: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_sample()];
    if g.batch == 0 {
        return out;
    }
    let chunk = g.chunk();
    let (plen, area, oc) = (g.patch_len(), g.out_area(), g.out_channels);
    out.par_chunks_mut(chunk * g.out_sample())
        .zip(input.par_chunks(chunk * g.in_sample()))
        .for_each(|(out_block, in_block)| {
            let samples = in_block.len() / g.in_sample();
            let ncols = samples * area;
            with_scratch(plen * ncols, oc * ncols, |cols, prod| {
                g.im2col(in_block, samples, cols);
                gemm(oc, plen, ncols, kernels, (plen as isize, 1), cols, (ncols as isize, 1), 0.0, prod);
                for s in 0..samples {
                    for o in 0..oc {
                        out_block[(s * oc + o) * area..(s * oc + o + 1) * area]
                            .copy_from_slice(&prod[o * ncols + s * area..o * ncols + (s + 1) * area]);
                    }
                }
            });
        });
    out
}

/// Rearranges `(samples, oc, area)` into the `(oc, samples * area)` matrix layout.
fn gather_grad(block: &[f64], samples: usize, oc: usize, area: usize, m: &mut [f64]) {
    let ncols = samples * area;
    for s in 0..samples {
        for o in 0..oc {
            m[o * ncols + s * area..o * ncols + (s + 1) * area]
                .copy_from_slice(&block[(s * oc + o) * area..(s * oc + o + 1) * area]);
        }
    }
}

/// Gradient of a conv2d output with respect to its input.
pub fn conv2d_backward_input(
    grad_out: &Tensor4,
    kernels: &KernelStack,
    input_shape: [usize; 4],
    padding: Padding,
) -> Result<Tensor4> {
    let g = ConvGeometry::new(input_shape, kernels.shape, padding)?;
    if grad_out.shape != [g.batch, g.out_channels, g.out_h, g.out_w] {
        return Err(shape_err!("output gradient shape {:?} does not match convolution", grad_out.shape));
    }
    let mut grad = vec![0.0; g.batch * g.in_sample()];
    if g.batch == 0 {
        return Tensor4::new(input_shape, grad);
    }
    let chunk = g.chunk();
    let (plen, area, oc) = (g.patch_len(), g.out_area(), g.out_channels);
    grad.par_chunks_mut(chunk * g.in_sample())
        .zip(grad_out.data.par_chunks(chunk * g.out_sample()))
        .for_each(|(grad_block, gout_block)| {
            let samples = grad_block.len() / g.in_sample();
            let ncols = samples * area;
            with_scratch(plen * ncols, oc * ncols, |cols, gm| {
                gather_grad(gout_block, samples, oc, area, gm);
                // cols = K^T * gm
                gemm(plen, oc, ncols, &kernels.data, (1, plen as isize), gm, (ncols as isize, 1), 0.0, cols);
                g.col2im(cols, samples, grad_block);
            });
        });
    Tensor4::new(input_shape, grad)
}

/// Gradient of a conv2d output with respect to its kernels.
pub fn conv2d_backward_kernel(
    input: &Tensor4,
    grad_out: &Tensor4,
    kernel_shape: [usize; 4],
    padding: Padding,
) -> Result<KernelStack> {
    let g = ConvGeometry::new(input.shape, kernel_shape, padding)?;
    if grad_out.shape != [g.batch, g.out_channels, g.out_h, g.out_w] {
        return Err(shape_err!("output gradient shape {:?} does not match convolution", grad_out.shape));
    }
    let klen = kernel_shape.iter().product::<usize>();
    if g.batch == 0 {
        return KernelStack::new(kernel_shape, vec![0.0; klen]);
    }
    let chunk = g.chunk();
    let (plen, area, oc) = (g.patch_len(), g.out_area(), g.out_channels);
    let partials: Vec<Vec<f64>> = input
        .data
        .par_chunks(chunk * g.in_sample())
        .zip(grad_out.data.par_chunks(chunk * g.out_sample()))
        .map(|(in_block, gout_block)| {
            let samples = in_block.len() / g.in_sample();
            let ncols = samples * area;
            let mut dk = vec![0.0; klen];
            with_scratch(plen * ncols, oc * ncols, |cols, gm| {
                g.im2col(in_block, samples, cols);
                gather_grad(gout_block, samples, oc, area, gm);
                // dk = gm * cols^T
                gemm(oc, ncols, plen, gm, (ncols as isize, 1), cols, (1, ncols as isize), 0.0, &mut dk);
            });
            dk
        })
        .collect();
    let mut total = vec![0.0; klen];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    KernelStack::new(kernel_shape, total)
}

/// Counter-clockwise rotation by `quarter_turns * 90` degrees (index permutation).
pub fn rot90(t: &Tensor4, quarter_turns: i64) -> Tensor4 {
    let q = quarter_turns.rem_euclid(4);
    let [b, c, h, w] = t.shape;
    let (oh, ow) = if q % 2 == 0 { (h, w) } else { (w, h) };
    Tensor4::from_fn([b, c, oh, ow], |bi, ci, y, x| match q {
        0 => t.get(bi, ci, y, x),
        1 => t.get(bi, ci, x, w - 1 - y),
        2 => t.get(bi, ci, h - 1 - y, w - 1 - x),
        _ => t.get(bi, ci, h - 1 - x, y),
    })
}

/// Bilinear sample of one row-major plane; zero outside.
fn sample_bilinear(plane: &[f64], h: usize, w: usize, sx: f64, sy: f64) -> f64 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let at = |x: f64, y: f64| -> f64 {
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let weight = wy * wx;
            if weight != 0.0 {
                v += weight * at(x0 + dx, y0 + dy);
            }
        }
    }
    v
}

/// Counter-clockwise rotation by `theta` about the grid center with bilinear
/// interpolation; samples falling outside the grid read as zero.
pub fn rotate_interp(t: &Tensor4, theta: f64) -> Tensor4 {
    let [b, c, h, w] = t.shape;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    let mut out = Tensor4::zeros(t.shape);
    for bi in 0..b {
        for ci in 0..c {
            let plane = t.plane(bi, ci);
            let start = (bi * c + ci) * h * w;
            for y in 0..h {
                for x in 0..w {
                    // Output point u = (x - cx) + i (cy - y); source is exp(-i theta) u.
                    let ur = x as f64 - cx;
                    let ui = cy - y as f64;
                    let sr = cos * ur + sin * ui;
                    let si = -sin * ur + cos * ui;
                    out.data[start + y * w + x] = sample_bilinear(plane, h, w, cx + sr, cy - si);
                }
            }
        }
    }
    out
}

/// 2x2 max pooling with stride 2; also returns the flat input index chosen for
/// every output (first maximum in row-major window order wins ties).
pub fn max_pool2_with_indices(t: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
    let [b, c, h, w] = t.shape;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("max_pool2 needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for cand in [
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ] {
                    if t.data[cand] > t.data[best] {
                        best = cand;
                    }
                }
                out.push(t.data[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor4::new([b, c, oh, ow], out)?, idx))
}

pub fn max_pool2(t: &Tensor4) -> Result<Tensor4> {
    max_pool2_with_indices(t).map(|(o, _)| o)
}

pub fn max_pool2_backward(grad_out: &Tensor4, indices: &[usize], input_shape: [usize; 4]) -> Tensor4 {
    let mut g = Tensor4::zeros(input_shape);
    for (&i, &v) in indices.iter().zip(&grad_out.data) {
        g.data[i] += v;
    }
    g
}

/// Source index pair and weight of the upper neighbour for each output
/// coordinate of a factor-2 half-pixel (align-corners = false) resize.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Factor-2 bilinear upsampling, half-pixel centers, edge clamped.
pub fn bilinear_up2(t: &Tensor4) -> Tensor4 {
    let [b, c, h, w] = t.shape;
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut out = Tensor4::zeros([b, c, 2 * h, 2 * w]);
    for p in 0..b * c {
        let plane = &t.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * 4 * h * w..(p + 1) * 4 * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                dst[oy * 2 * w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_up2_backward(grad_out: &Tensor4, input_shape: [usize; 4]) -> Tensor4 {
    let [b, c, h, w] = input_shape;
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut g = Tensor4::zeros(input_shape);
    for p in 0..b * c {
        let src = &grad_out.data[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut g.data[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = src[oy * 2 * w + ox];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    g
}

pub fn relu(t: &Tensor4) -> Tensor4 {
    Tensor4 { shape: t.shape, data: t.data.iter().map(|&v| v.max(0.0)).collect() }
}

/// Subgradient 0 at 0.
pub fn relu_backward(grad_out: &Tensor4, input: &Tensor4) -> Tensor4 {
    Tensor4 {
        shape: input.shape,
        data: grad_out
            .data
            .iter()
            .zip(&input.data)
            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// Mean over the spatial dims: `(B, C, H, W) -> (B, C, 1, 1)`.
pub fn global_avg_pool(t: &Tensor4) -> Tensor4 {
    let [b, c, h, w] = t.shape;
    let area = (h * w) as f64;
    Tensor4 {
        shape: [b, c, 1, 1],
        data: t.data.chunks(h * w).map(|p| p.iter().sum::<f64>() / area).collect(),
    }
}

pub fn global_avg_pool_backward(grad_out: &Tensor4, input_shape: [usize; 4]) -> Tensor4 {
    let [b, c, h, w] = input_shape;
    let area = (h * w) as f64;
    let mut data = Vec::with_capacity(b * c * h * w);
    for &g in &grad_out.data {
        data.extend(std::iter::repeat(g / area).take(h * w));
    }
    Tensor4 { shape: input_shape, data }
}

/// Adds `bias[c]` to every pixel of channel `c`.
pub fn add_channel_bias(t: &Tensor4, bias: &[f64]) -> Result<Tensor4> {
    let [_, c, h, w] = t.shape;
    if bias.len() != c {
        return Err(shape_err!("{} biases for {c} channels", bias.len()));
    }
    let mut out = t.clone();
    for (i, plane) in out.data.chunks_mut(h * w).enumerate() {
        let bv = bias[i % c];
        plane.iter_mut().for_each(|v| *v += bv);
    }
    Ok(out)
}

pub fn channel_sums(t: &Tensor4) -> Vec<f64> {
    let [_, c, h, w] = t.shape;
    let mut sums = vec![0.0; c];
    for (i, plane) in t.data.chunks(h * w).enumerate() {
        sums[i % c] += plane.iter().sum::<f64>();
    }
    sums
}

/// Joins tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor4]) -> Result<Tensor4> {
    let first = parts.first().ok_or_else(|| invalid_arg!("nothing to concatenate"))?;
    let [b, _, h, w] = first.shape;
    if parts.iter().any(|p| p.shape[0] != b || p.shape[2] != h || p.shape[3] != w) {
        return Err(shape_err!("concatenated tensors disagree on batch or spatial dims"));
    }
    let total: usize = parts.iter().map(|p| p.shape[1]).sum();
    let mut data = Vec::with_capacity(b * total * h * w);
    for bi in 0..b {
        for p in parts {
            let n = p.shape[1] * h * w;
            data.extend_from_slice(&p.data[bi * n..(bi + 1) * n]);
        }
    }
    Tensor4::new([b, total, h, w], data)
}

/// Splits a channel-axis gradient back into the parts' shapes.
pub fn split_channels(t: &Tensor4, channels: &[usize]) -> Vec<Tensor4> {
    let [b, c, h, w] = t.shape;
    assert_eq!(channels.iter().sum::<usize>(), c);
    let mut parts: Vec<Vec<f64>> = channels.iter().map(|&k| Vec::with_capacity(b * k * h * w)).collect();
    for bi in 0..b {
        let mut offset = bi * c * h * w;
        for (part, &k) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&t.data[offset..offset + k * h * w]);
            offset += k * h * w;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &k)| Tensor4 { shape: [b, k, h, w], data: d })
        .collect()
}

/// Mean cross-entropy of `softmax(logits)` against `labels`; `logits` must be
/// `(B, C, 1, 1)`. Returns the loss and the row-major `(B, C)` probabilities.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let [b, c, h, w] = logits.shape;
    if h != 1 || w != 1 {
        return Err(shape_err!("logits must be 1x1 spatially, got {h}x{w}"));
    }
    if labels.len() != b {
        return Err(shape_err!("{} labels for batch of {b}", labels.len()));
    }
    if b == 0 {
        return Err(invalid_arg!("empty batch"));
    }
    let mut probs = Vec::with_capacity(b * c);
    let mut loss = 0.0;
    for (row, &label) in logits.data.chunks(c).zip(labels) {
        if label >= c {
            return Err(invalid_arg!("label {label} out of range for {c} classes"));
        }
        let (arg_max, max) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        // log-sum-exp as max + ln(1 + rest) keeps precision when one logit dominates.
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != arg_max)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        let log_z = max + rest.ln_1p();
        loss += (max - row[label]) + rest.ln_1p();
        probs.extend(row.iter().map(|&v| (v - log_z).exp()));
    }
    Ok((loss / b as f64, probs))
}

/// `(softmax - onehot) / B`, shaped like the logits.
pub fn softmax_cross_entropy_backward(probs: &[f64], labels: &[usize], classes: usize) -> Tensor4 {
    let b = labels.len();
    let mut g = probs.to_vec();
    for (i, &l) in labels.iter().enumerate() {
        g[i * classes + l] -= 1.0;
    }
    g.iter_mut().for_each(|v| *v /= b as f64);
    Tensor4 { shape: [b, classes, 1, 1], data: g }
}
