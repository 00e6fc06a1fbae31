//! Dense row-major f64 matrix and the three matmul kernels the tape needs.

/// A dense 2-d value: `rows x cols`, row-major.
///
/// All training arithmetic is double precision; checkpoints round to f32 on
/// save.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major buffer. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "buffer length {} != {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `out[i] += a_ik * b[i]` over a row; kept separate so all three kernels
/// share the one loop the autovectorizer likes.
#[inline]
fn axpy(out: &mut [f64], a_ik: f64, b_row: &[f64]) {
    for (o, &b) in out.iter_mut().zip(b_row) {
        *o += a_ik * b;
    }
}

/// C = A * B, shapes (m,k)x(k,n). Row-at-a-time axpy form: deterministic
/// summation order (k ascending) and sequential access on B and C.
pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            axpy(out_row, a_il, &b.data[l * n..(l + 1) * n]);
        }
    }
    out
}

/// C = A^T * B, shapes (m,k)x(m,n) -> (k,n). Accumulates with i ascending.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.rows, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(k, n);
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let b_row = &b.data[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            axpy(&mut out.data[l * n..(l + 1) * n], a_il, b_row);
        }
    }
    out
}

/// C = A * B^T, shapes (m,k)x(n,k) -> (m,n). Transposes B once and reuses
/// the nn kernel; the transpose is tiny next to the multiply.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.cols, b.cols);
    matmul_nn(a, &b.transpose())
}
