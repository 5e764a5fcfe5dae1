//! Internal `f64` matrices.
//!
//! All arithmetic in the crate happens here at double precision; the public
//! `f32` tensor API converts on the way in and rounds once on the way out.
//! Loops are plain serial scalar code — evaluation order is fixed, so
//! results are bit-stable across runs and platforms.

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    /// Upcast from the public f32 tensor (rank 2 required by the caller).
    pub fn from_tensor(t: &Tensor) -> Self {
        let (r, c) = t.dims2().expect("from_tensor needs rank 2");
        Mat {
            rows: r,
            cols: c,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    /// Round to f32 storage. The single precision-losing step.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("finite by construction")
    }

    /// Round every entry to the nearest f32 but keep computing in f64.
    /// Used where a value must agree bit-for-bit with an f32 snapshot.
    pub fn snap_f32(&self) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · b`
    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows, "matmul inner dims");
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a_ik = self.at(i, k);
                if a_ik == 0.0 {
                    continue;
                }
                let brow = b.row(k);
                let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
                for j in 0..b.cols {
                    orow[j] += a_ik * brow[j];
                }
            }
        }
        out
    }

    /// `self · bᵀ`
    pub fn matmul_nt(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.cols, "matmul_nt inner dims");
        let mut out = Mat::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            for j in 0..b.rows {
                let mut acc = 0.0;
                let ar = self.row(i);
                let br = b.row(j);
                for k in 0..self.cols {
                    acc += ar[k] * br[k];
                }
                *out.at_mut(i, j) = acc;
            }
        }
        out
    }

    /// `selfᵀ · b`
    pub fn matmul_tn(&self, b: &Mat) -> Mat {
        assert_eq!(self.rows, b.rows, "matmul_tn inner dims");
        let mut out = Mat::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a_ki = self.at(k, i);
                if a_ki == 0.0 {
                    continue;
                }
                let brow = b.row(k);
                let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
                for j in 0..b.cols {
                    orow[j] += a_ki * brow[j];
                }
            }
        }
        out
    }

    pub fn add(&self, b: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (b.rows, b.cols), "add shapes");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
        }
    }

    pub fn sub(&self, b: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (b.rows, b.cols), "sub shapes");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&self) -> Mat {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = &mut out.data[i * self.cols..(i + 1) * self.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    pub fn concat_rows(parts: &[&Mat]) -> Mat {
        let cols = parts.iter().map(|p| p.cols).max().unwrap_or(0);
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert!(p.rows == 0 || p.cols == cols, "concat_rows col mismatch");
            data.extend_from_slice(&p.data);
        }
        Mat { rows, cols, data }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Mat {
        assert!(start + len <= self.rows, "slice_rows range");
        Mat {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `start..start+len` as a new matrix (used for head slicing).
    pub fn slice_cols(&self, start: usize, len: usize) -> Mat {
        assert!(start + len <= self.cols, "slice_cols range");
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            let r = self.row(i);
            data.extend_from_slice(&r[start..start + len]);
        }
        Mat {
            rows: self.rows,
            cols: len,
            data,
        }
    }

    pub fn concat_cols(parts: &[&Mat]) -> Mat {
        let rows = parts.first().map(|p| p.rows).unwrap_or(0);
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                assert_eq!(p.rows, rows, "concat_cols row mismatch");
                data.extend_from_slice(p.row(i));
            }
        }
        Mat { rows, cols, data }
    }

}

#[cfg(test)]
impl Mat {
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Multi-head attention: columns split into `heads` equal slices, each run
/// through [`attn_core`] with per-head key width, outputs re-concatenated.
pub(crate) fn mha_mat(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    assert!(heads > 0 && q.cols % heads == 0, "head split");
    let dh = q.cols / heads;
    let outs: Vec<Mat> = (0..heads)
        .map(|h| {
            attn_core(
                &q.slice_cols(h * dh, dh),
                &k.slice_cols(h * dh, dh),
                &v.slice_cols(h * dh, dh),
                dh,
            )
        })
        .collect();
    Mat::concat_cols(&outs.iter().collect::<Vec<_>>())
}

/// Scaled dot-product attention over f64 matrices:
/// `softmax(q·kᵀ / sqrt(d_k)) · v`. Requires at least one key when there is
/// at least one query (softmax over zero keys is undefined).
pub(crate) fn attn_core(q: &Mat, k: &Mat, v: &Mat, d_k: usize) -> Mat {
    assert_eq!(q.cols, k.cols, "attn q/k width");
    assert_eq!(k.rows, v.rows, "attn k/v rows");
    if q.rows == 0 {
        return Mat::zeros(0, v.cols);
    }
    assert!(k.rows > 0, "attention needs at least one key");
    let scale = 1.0 / (d_k as f64).sqrt();
    let scores = q.matmul_nt(k).scale(scale);
    scores.softmax_rows().matmul(v)
}
