//! Dense row-major `f64` tensors and the handful of kernels the layers need.
//!
//! Convolution is always lowered through [`im2col`] followed by a matrix
//! product, so the fully-connected view of a convolution used for parameter
//! relevance is the same code path as the forward pass.

use crate::error::{Error, Result};

/// Dense N-dimensional array, row-major and contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Gradient of a scalar loss with respect to each element of a [`Tensor`].
pub type Gradient = Tensor;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Input(format!("tensor extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor data length", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Builds a tensor from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent, i.e. the batch size for batched activations.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading index.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.row_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Fails with [`Error::NonFinite`] if any element is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Gathers the given leading-index rows into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let n = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub(crate) fn dims2(&self, context: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::dim(format!("{context}: expected a matrix"), &self.shape, &[0, 0])),
        }
    }
}

/// `c[i][j] = Σ_k a[i][k]·b[k][j]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("matmul lhs")?;
    let (n2, p) = b.dims2("matmul rhs")?;
    if n != n2 {
        return Err(Error::dim("matmul inner dimensions", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * p];
    gemm_nn(m, n, p, &a.data, &b.data, &mut out);
    Ok(Tensor {
        shape: vec![m, p],
        data: out,
    })
}

/// `c += a·b` with `a: m×n`, `b: n×p`, `c: m×p`.
pub(crate) fn gemm_nn(m: usize, n: usize, p: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(c.len(), m * p);
    for i in 0..m {
        let c_row = &mut c[i * p..(i + 1) * p];
        let a_row = &a[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            // ReLU outputs and masked channels make zeros common.
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * p..(k + 1) * p];
            for (cj, &bkj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bkj;
            }
        }
    }
}

/// `c += a·bᵀ` with `a: m×n`, `b: p×n`, `c: m×p`.
pub(crate) fn gemm_nt(m: usize, n: usize, p: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * p);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let b_row = &b[j * n..(j + 1) * n];
            c[i * p + j] += dot(a_row, b_row);
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c += aᵀ·b` with `a: n×m`, `b: n×p`, `c: m×p`.
pub(crate) fn gemm_tn(m: usize, n: usize, p: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(c.len(), m * p);
    for k in 0..n {
        let a_row = &a[k * m..(k + 1) * m];
        let b_row = &b[k * p..(k + 1) * p];
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let c_row = &mut c[i * p..(i + 1) * p];
            for (cj, &bkj) in c_row.iter_mut().zip(b_row) {
                *cj += aki * bkj;
            }
        }
    }
}

/// Shape bookkeeping for lowering one `C×H×W` image into patch columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PatchGeometry {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        (kernel_h, kernel_w): (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::Geometry("stride and kernel extents must be positive".into()));
        }
        let out_extent = |size: usize, k: usize, axis: &str| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k || (padded - k) % stride != 0 {
                return Err(Error::Geometry(format!(
                    "{axis}: ({size} + 2·{padding} − {k}) / {stride} + 1 is not a positive integer"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(PatchGeometry {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: out_extent(height, kernel_h, "height")?,
            out_w: out_extent(width, kernel_w, "width")?,
        })
    }

    /// Rows of the column matrix: `C·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the column matrix: `Ho·Wo`.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Index of the input element read by patch row `row` at output `position`,
    /// or `None` when it falls in the zero padding.
    pub fn source_index(&self, row: usize, position: usize) -> Option<usize> {
        let c = row / (self.kernel_h * self.kernel_w);
        let ky = (row / self.kernel_w) % self.kernel_h;
        let kx = row % self.kernel_w;
        let oy = position / self.out_w;
        let ox = position % self.out_w;
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then(|| (c * self.height + y) * self.width + x)
    }

    /// Writes the `patch_len × positions` column matrix of `input` into `out`.
    pub(crate) fn im2col_into(&self, input: &[f64], out: &mut [f64]) {
        let positions = self.positions();
        let (h, w, pad) = (self.height as isize, self.width as isize, self.padding as isize);
        for c in 0..self.channels {
            let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut out[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ky) as isize - pad;
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + kx) as isize - pad;
                            dst[oy * self.out_w + ox] = if y >= 0 && y < h && x >= 0 && x < w {
                                plane[(y * w + x) as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col_into`](Self::im2col_into): scatters-and-adds columns
    /// back onto an image buffer.
    pub(crate) fn col2im_add(&self, cols: &[f64], out: &mut [f64]) {
        let positions = self.positions();
        let (h, w, pad) = (self.height as isize, self.width as isize, self.padding as isize);
        for c in 0..self.channels {
            let plane = &mut out[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ky) as isize - pad;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + kx) as isize - pad;
                            if x >= 0 && x < w {
                                plane[(y * w + x) as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn chw(input: &Tensor) -> Result<(usize, usize, usize)> {
    match input.shape()[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim("expected a C×H×W image", input.shape(), &[0, 0, 0])),
    }
}

/// Unrolls every receptive field of a `C×H×W` image into one column,
/// flattened channel-major, giving a `(C·kh·kw) × (Ho·Wo)` matrix.
pub fn im2col(input: &Tensor, kernel: (usize, usize), stride: usize, padding: usize) -> Result<Tensor> {
    let geom = PatchGeometry::new(chw(input)?, kernel, stride, padding)?;
    let mut out = vec![0.0; geom.patch_len() * geom.positions()];
    geom.im2col_into(input.data(), &mut out);
    Tensor::new(vec![geom.patch_len(), geom.positions()], out)
}

/// Folds a column matrix back onto a `C×H×W` image, summing overlaps.
pub fn col2im(
    cols: &Tensor,
    image: (usize, usize, usize),
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let geom = PatchGeometry::new(image, kernel, stride, padding)?;
    if cols.shape() != [geom.patch_len(), geom.positions()] {
        return Err(Error::dim(
            "col2im columns",
            cols.shape(),
            &[geom.patch_len(), geom.positions()],
        ));
    }
    let mut out = vec![0.0; geom.input_len()];
    geom.col2im_add(cols.data(), &mut out);
    Tensor::new(vec![image.0, image.1, image.2], out)
}

/// Sum that does not depend on the order of `values`: the summands are sorted
/// by total order first.
pub fn order_independent_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}
