use serde::{Deserialize, Serialize};

/// Dense row-major matrix. Vectors are `1 × c` or `r × 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Tensor { rows, cols, data }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::from_vec(1, 1, vec![x])
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor::from_vec(1, data.len(), data)
    }

    pub fn column(data: Vec<f64>) -> Self {
        Tensor::from_vec(data.len(), 1, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `a · b`.
    pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!(a.cols, b.rows);
        let mut out = Tensor::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            let o = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (k, &x) in a.row_slice(i).iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (y, &w) in o.iter_mut().zip(b.row_slice(k)) {
                    *y += x * w;
                }
            }
        }
        out
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!(a.rows, b.rows);
        let mut out = Tensor::zeros(a.cols, b.cols);
        for r in 0..a.rows {
            let brow = b.row_slice(r);
            for (i, &x) in a.row_slice(r).iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (y, &w) in out.data[i * b.cols..(i + 1) * b.cols].iter_mut().zip(brow) {
                    *y += x * w;
                }
            }
        }
        out
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!(a.cols, b.cols);
        let mut out = Tensor::zeros(a.rows, b.rows);
        for i in 0..a.rows {
            let arow = a.row_slice(i);
            for j in 0..b.rows {
                out.data[i * b.rows + j] = arow.iter().zip(b.row_slice(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}
