//! Dense row-major matrices and the few products the model needs.
//!
//! Everything is `f64`. Loops fix the accumulation order, so results are
//! bit-identical across runs and thread counts.

use serde::{Deserialize, Serialize};

/// Row-major 2-D array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorWire", into = "TensorWire")]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorWire {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<TensorWire> for Tensor {
    type Error = String;

    fn try_from(w: TensorWire) -> Result<Self, String> {
        if w.data.len() != w.rows * w.cols {
            return Err(format!(
                "tensor data length {} does not match shape {}x{}",
                w.data.len(),
                w.rows,
                w.cols
            ));
        }
        if w.data.iter().any(|v| !v.is_finite()) {
            return Err("tensor contains non-finite values".into());
        }
        Ok(Tensor { rows: w.rows, cols: w.cols, data: w.data })
    }
}

impl From<Tensor> for TensorWire {
    fn from(t: Tensor) -> TensorWire {
        TensorWire { rows: t.rows, cols: t.cols, data: t.data }
    }
}

impl Tensor {
    /// Zero-filled `rows x cols` tensor.
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Tensor built from a flat row-major vector.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "tensor data does not match shape");
        Tensor { rows, cols, data }
    }

    /// Tensor with each entry produced by `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Tensor {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    /// Copies `src` into row `i`.
    pub fn set_row(&mut self, i: usize, src: &[f64]) {
        self.row_mut(i).copy_from_slice(src);
    }

    /// New tensor holding columns `[c0, c1)` of every row.
    pub fn col_slice(&self, c0: usize, c1: usize) -> Tensor {
        assert!(c0 <= c1 && c1 <= self.cols, "column range out of bounds");
        let mut out = Tensor::zeros(self.rows, c1 - c0);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[c0..c1]);
        }
        out
    }

    /// Adds `src` into columns starting at `c0` of every row.
    pub fn add_col_slice(&mut self, c0: usize, src: &Tensor) {
        assert_eq!(self.rows, src.rows, "row count mismatch");
        assert!(c0 + src.cols <= self.cols, "column range out of bounds");
        for i in 0..self.rows {
            let dst = &mut self.row_mut(i)[c0..c0 + src.cols];
            for (d, s) in dst.iter_mut().zip(src.row(i)) {
                *d += *s;
            }
        }
    }

    /// New tensor holding rows `[r0, r1)`.
    pub fn row_slice(&self, r0: usize, r1: usize) -> Tensor {
        assert!(r0 <= r1 && r1 <= self.rows, "row range out of bounds");
        Tensor {
            rows: r1 - r0,
            cols: self.cols,
            data: self.data[r0 * self.cols..r1 * self.cols].to_vec(),
        }
    }

    /// Entry-wise sum into `self`.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Multiplies every entry by `s`.
    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Adds the single-row tensor `bias` to every row.
    pub fn add_bias(&mut self, bias: &Tensor) {
        assert_eq!(bias.rows, 1, "bias must be a single row");
        assert_eq!(bias.cols, self.cols, "bias width mismatch");
        for i in 0..self.rows {
            for (v, b) in self.row_mut(i).iter_mut().zip(&bias.data) {
                *v += *b;
            }
        }
    }

    /// Column sums as a single-row tensor.
    pub fn col_sums(&self) -> Tensor {
        let mut out = Tensor::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(i)) {
                *o += *v;
            }
        }
        out
    }

    /// Entry-wise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// `a · b` for `a: m x k`, `b: k x n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "inner dimension mismatch");
    let mut c = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let crow = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for j in 0..a.cols {
            let av = a.data[i * a.cols + j];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[j * b.cols..(j + 1) * b.cols];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
    c
}

/// `a · bᵀ` for `a: m x k`, `b: n x k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "inner dimension mismatch");
    let mut c = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        let crow = &mut c.data[i * b.rows..(i + 1) * b.rows];
        for j in 0..b.rows {
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(b.row(j)) {
                acc += *av * *bv;
            }
            crow[j] = acc;
        }
    }
    c
}

/// `aᵀ · b` for `a: k x m`, `b: k x n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "inner dimension mismatch");
    let mut c = Tensor::zeros(a.cols, b.cols);
    for i in 0..a.rows {
        let brow = b.row(i);
        for j in 0..a.cols {
            let av = a.data[i * a.cols + j];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c.data[j * b.cols..(j + 1) * b.cols];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
    c
}
