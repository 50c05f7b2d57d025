//! Dense row-major `f64` tensors and the handful of kernels the networks need.
//!
//! Image batches use the `[N, C, H, W]` layout, vector batches `[N, D]`.
//! Convolutions are stride-1 "same" convolutions lowered to GEMM through
//! an im2col buffer.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements per batch entry.
    pub fn per_sample(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.shape[0].max(1)
        }
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.per_sample();
        &self.data[i * k..(i + 1) * k]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len(), "shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Self {
        assert!(!items.is_empty(), "stack of nothing");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Self::new(shape, data)
    }

    /// Concatenates along the leading axis.
    pub fn concat_batch(items: &[&Tensor]) -> Self {
        assert!(!items.is_empty(), "concat of nothing");
        let inner = items[0].shape[1..].to_vec();
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            assert_eq!(&t.shape[1..], &inner[..], "concat shape mismatch");
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![n];
        shape.extend(inner);
        Self::new(shape, data)
    }

    /// Gathers batch entries by index.
    pub fn select(&self, idx: &[usize]) -> Self {
        let k = self.per_sample();
        let mut data = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            data.extend_from_slice(&self.data[i * k..(i + 1) * k]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::new(shape, data)
    }
}

/// `c = alpha * a·b + beta * c` on strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= if k == 0 { 0 } else { (m - 1) * a_strides.0.max(0) as usize + (k - 1) * a_strides.1.max(0) as usize + 1 });
    debug_assert!(c.len() > (m - 1) * c_strides.0 as usize + (n - 1) * c_strides.1 as usize);
    // SAFETY: the slices cover every element addressed by the given shapes and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

/// Geometry of a stride-1, zero-padded square convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    /// Unfolds one `[C, H, W]` image into `[C·k·k, H·W]` columns.
    pub fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let (h, w, k, pad) = (self.height as isize, self.width as isize, self.kernel, self.pad());
        let hw = self.spatial();
        for c in 0..self.channels {
            let plane = &img[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y + dy;
                        let line = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                        if sy < 0 || sy >= h {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                        for x in 0..w {
                            let sx = x + dx;
                            line[x as usize] = if sx < 0 || sx >= w { 0.0 } else { src[sx as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back into an image gradient.
    pub fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let (h, w, k, pad) = (self.height as isize, self.width as isize, self.kernel, self.pad());
        let hw = self.spatial();
        for c in 0..self.channels {
            let plane = &mut img[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let line = &src[(y * w) as usize..((y + 1) * w) as usize];
                        let dst = &mut plane[(sy * w) as usize..((sy + 1) * w) as usize];
                        for x in 0..w {
                            let sx = x + dx;
                            if sx >= 0 && sx < w {
                                dst[sx as usize] += line[x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Same-size convolution: `[N,C,H,W] * [O,C,k,k] + [O] -> [N,O,H,W]`.
pub(crate) fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(input);
    let (o, wc, k, k2) = dims4(weight);
    assert_eq!(c, wc, "conv channel mismatch: input {c}, weight {wc}");
    assert_eq!(k, k2, "non-square kernel");
    assert_eq!(bias.len(), o, "bias length");
    let geom = ConvGeom { channels: c, height: h, width: w, kernel: k };
    let (rows, hw) = (geom.col_rows(), geom.spatial());
    let mut out = vec![0.0; n * o * hw];
    let mut cols = vec![0.0; rows * hw];
    for s in 0..n {
        let img = &input.data[s * c * hw..(s + 1) * c * hw];
        let dst = &mut out[s * o * hw..(s + 1) * o * hw];
        for (oc, chunk) in dst.chunks_mut(hw).enumerate() {
            chunk.fill(bias.data[oc]);
        }
        if k == 1 {
            gemm(o, c, hw, 1.0, &weight.data, (c as isize, 1), img, (hw as isize, 1), 1.0, dst, (hw as isize, 1));
        } else {
            geom.im2col(img, &mut cols);
            gemm(o, rows, hw, 1.0, &weight.data, (rows as isize, 1), &cols, (hw as isize, 1), 1.0, dst, (hw as isize, 1));
        }
    }
    Tensor::new(vec![n, o, h, w], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
    need_params: bool,
) -> ConvGrads {
    let (n, c, h, w) = dims4(input);
    let (o, _, k, _) = dims4(weight);
    let geom = ConvGeom { channels: c, height: h, width: w, kernel: k };
    let (rows, hw) = (geom.col_rows(), geom.spatial());
    let mut d_in = need_input.then(|| vec![0.0; n * c * hw]);
    let mut d_w = need_params.then(|| vec![0.0; o * rows]);
    let mut d_b = need_params.then(|| vec![0.0; o]);
    let mut cols = vec![0.0; rows * hw];
    for s in 0..n {
        let img = &input.data[s * c * hw..(s + 1) * c * hw];
        let go = &grad_out.data[s * o * hw..(s + 1) * o * hw];
        if let Some(db) = d_b.as_mut() {
            for (oc, chunk) in go.chunks(hw).enumerate() {
                db[oc] += chunk.iter().sum::<f64>();
            }
        }
        if k == 1 {
            if let Some(dw) = d_w.as_mut() {
                // dW[o,c] += go[o,:] · img[c,:]
                gemm(o, hw, c, 1.0, go, (hw as isize, 1), img, (1, hw as isize), 1.0, dw, (c as isize, 1));
            }
            if let Some(di) = d_in.as_mut() {
                let dst = &mut di[s * c * hw..(s + 1) * c * hw];
                gemm(c, o, hw, 1.0, &weight.data, (1, c as isize), go, (hw as isize, 1), 0.0, dst, (hw as isize, 1));
            }
            continue;
        }
        if let Some(dw) = d_w.as_mut() {
            geom.im2col(img, &mut cols);
            gemm(o, hw, rows, 1.0, go, (hw as isize, 1), &cols, (1, hw as isize), 1.0, dw, (rows as isize, 1));
        }
        if let Some(di) = d_in.as_mut() {
            gemm(rows, o, hw, 1.0, &weight.data, (1, rows as isize), go, (hw as isize, 1), 0.0, &mut cols, (hw as isize, 1));
            geom.col2im(&cols, &mut di[s * c * hw..(s + 1) * c * hw]);
        }
    }
    ConvGrads {
        input: d_in.map(|d| Tensor::new(input.shape.clone(), d)),
        weight: d_w.map(|d| Tensor::new(weight.shape.clone(), d)),
        bias: d_b.map(|d| Tensor::new(vec![o], d)),
    }
}

pub(crate) fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    match t.shape.as_slice() {
        &[a, b, c, d] => (a, b, c, d),
        s => panic!("expected a rank-4 tensor, got shape {s:?}"),
    }
}

pub(crate) fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape.as_slice() {
        &[a, b] => (a, b),
        s => panic!("expected a rank-2 tensor, got shape {s:?}"),
    }
}
