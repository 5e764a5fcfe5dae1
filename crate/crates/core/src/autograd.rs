//! Reverse-mode autodiff over a flat tape of `f64` matrices.
//!
//! The model records one tape per forward pass; [`Tape::backward`] walks it
//! in reverse and accumulates gradients for every node. The op set is
//! exactly what the transformer blocks need — nothing speculative. All
//! values stay in `f64`; the one deliberately lossy op is [`Tape::snap`],
//! which rounds values through `f32` (used on cached tensors so cached and
//! recomputed paths agree bit-for-bit) and passes gradients through
//! unchanged.

use crate::kernels::{gelu_tanh, gelu_tanh_deriv};
use crate::mat::Mat;

pub(crate) type Var = usize;

const RMS_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    /// a · b
    Matmul(Var, Var),
    /// a · bᵀ
    MatmulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// matrix + row vector broadcast over rows
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    /// per-row RMS normalization with a learned per-column gain
    RmsNorm(Var, Var),
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    /// row i scaled by column vector entry i
    MulRows(Var, Var),
    /// [‖row‖₂, row] feature expansion
    RowL2Append(Var),
    /// scalar 1×1: mean of squared entries
    MeanSq(Var),
    /// round values through f32; identity for gradients
    Snap(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v].value
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(v, Op::Matmul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a].value.matmul_nt(&self.nodes[b].value);
        self.push(v, Op::MatmulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a].value.add(&self.nodes[b].value);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a].value.sub(&self.nodes[b].value);
        self.push(v, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, r) = (&self.nodes[a].value, &self.nodes[row].value);
        assert_eq!(r.rows, 1, "add_row needs a 1×n row");
        assert_eq!(r.cols, m.cols, "add_row width");
        let mut v = m.clone();
        for i in 0..v.rows {
            for j in 0..v.cols {
                *v.at_mut(i, j) += r.at(0, j);
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a].value.scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a].value.map(gelu_tanh);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a].value.map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let (xm, g) = (&self.nodes[x].value, &self.nodes[gain].value);
        assert_eq!(g.rows, 1, "rms gain is 1×n");
        assert_eq!(g.cols, xm.cols, "rms gain width");
        let mut v = xm.clone();
        for i in 0..v.rows {
            let ms: f64 =
                v.row(i).iter().map(|a| a * a).sum::<f64>() / v.cols as f64;
            let r = (ms + RMS_EPS).sqrt();
            for j in 0..v.cols {
                *v.at_mut(i, j) = v.at(i, j) / r * g.at(0, j);
            }
        }
        self.push(v, Op::RmsNorm(x, gain))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.nodes[a].value.softmax_rows();
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| &self.nodes[p].value).collect();
        let v = Mat::concat_rows(&mats);
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| &self.nodes[p].value).collect();
        let v = Mat::concat_cols(&mats);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.nodes[a].value.gather_rows(&idx);
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.gather_rows(a, (start..start + len).collect())
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a].value.slice_cols(start, len);
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn mul_rows(&mut self, a: Var, col: Var) -> Var {
        let (m, c) = (&self.nodes[a].value, &self.nodes[col].value);
        assert_eq!(c.cols, 1, "mul_rows needs an m×1 column");
        assert_eq!(c.rows, m.rows, "mul_rows height");
        let mut v = m.clone();
        for i in 0..v.rows {
            let s = c.at(i, 0);
            for j in 0..v.cols {
                *v.at_mut(i, j) *= s;
            }
        }
        self.push(v, Op::MulRows(a, col))
    }

    pub fn row_l2_append(&mut self, a: Var) -> Var {
        let m = &self.nodes[a].value;
        let mut v = Mat::zeros(m.rows, m.cols + 1);
        for i in 0..m.rows {
            let norm: f64 = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            *v.at_mut(i, 0) = norm;
            for j in 0..m.cols {
                *v.at_mut(i, j + 1) = m.at(i, j);
            }
        }
        self.push(v, Op::RowL2Append(a))
    }

    pub fn mean_sq(&mut self, a: Var) -> Var {
        let m = &self.nodes[a].value;
        let n = (m.rows * m.cols).max(1) as f64;
        let v = Mat::from_vec(1, 1, vec![m.data.iter().map(|x| x * x).sum::<f64>() / n]);
        self.push(v, Op::MeanSq(a))
    }

    pub fn snap(&mut self, a: Var) -> Var {
        let v = self.nodes[a].value.snap_f32();
        self.push(v, Op::Snap(a))
    }

    /// Gradients of a scalar (1×1) node with respect to every node on the
    /// tape. Entries that the loss does not depend on are zero matrices.
    pub fn backward(&self, loss: Var) -> Vec<Mat> {
        let lv = &self.nodes[loss].value;
        assert_eq!((lv.rows, lv.cols), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for id in (0..self.nodes.len()).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    accumulate(&mut grads, *a, g.matmul_nt(bv));
                    accumulate(&mut grads, *b, av.matmul_tn(&g));
                }
                Op::MatmulNt(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    accumulate(&mut grads, *a, g.matmul(bv));
                    accumulate(&mut grads, *b, g.matmul_tn(av));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut rg = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            *rg.at_mut(0, j) += g.at(i, j);
                        }
                    }
                    accumulate(&mut grads, *row, rg);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::Gelu(a) => {
                    let av = &self.nodes[*a].value;
                    let mut dg = g.clone();
                    for (d, x) in dg.data.iter_mut().zip(&av.data) {
                        *d *= gelu_tanh_deriv(*x);
                    }
                    accumulate(&mut grads, *a, dg);
                }
                Op::Sigmoid(a) => {
                    let yv = &self.nodes[id].value;
                    let mut dg = g.clone();
                    for (d, y) in dg.data.iter_mut().zip(&yv.data) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *a, dg);
                }
                Op::RmsNorm(x, gain) => {
                    let (xv, gv) = (&self.nodes[*x].value, &self.nodes[*gain].value);
                    let n = xv.cols as f64;
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    let mut dgain = Mat::zeros(1, xv.cols);
                    for i in 0..xv.rows {
                        let ms: f64 =
                            xv.row(i).iter().map(|a| a * a).sum::<f64>() / n;
                        let r = (ms + RMS_EPS).sqrt();
                        let mut s = 0.0;
                        for j in 0..xv.cols {
                            s += g.at(i, j) * gv.at(0, j) * xv.at(i, j);
                        }
                        for j in 0..xv.cols {
                            *dx.at_mut(i, j) = g.at(i, j) * gv.at(0, j) / r
                                - xv.at(i, j) * s / (n * r * r * r);
                            *dgain.at_mut(0, j) += g.at(i, j) * xv.at(i, j) / r;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                }
                Op::SoftmaxRows(a) => {
                    let yv = &self.nodes[id].value;
                    let mut dx = Mat::zeros(yv.rows, yv.cols);
                    for i in 0..yv.rows {
                        let dot: f64 = (0..yv.cols)
                            .map(|j| g.at(i, j) * yv.at(i, j))
                            .sum();
                        for j in 0..yv.cols {
                            *dx.at_mut(i, j) = yv.at(i, j) * (g.at(i, j) - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.rows;
                        accumulate(&mut grads, p, g.slice_rows(start, rows));
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.nodes[p].value.cols;
                        accumulate(&mut grads, p, g.slice_cols(start, cols));
                        start += cols;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let av = &self.nodes[*a].value;
                    let mut dx = Mat::zeros(av.rows, av.cols);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..av.cols {
                            *dx.at_mut(src, j) += g.at(r, j);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::SliceCols(a, start, len) => {
                    let av = &self.nodes[*a].value;
                    let mut dx = Mat::zeros(av.rows, av.cols);
                    for i in 0..av.rows {
                        for j in 0..*len {
                            *dx.at_mut(i, start + j) = g.at(i, j);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::MulRows(a, col) => {
                    let (av, cv) = (&self.nodes[*a].value, &self.nodes[*col].value);
                    let mut da = g.clone();
                    let mut dc = Mat::zeros(av.rows, 1);
                    for i in 0..av.rows {
                        let s = cv.at(i, 0);
                        let mut acc = 0.0;
                        for j in 0..av.cols {
                            acc += g.at(i, j) * av.at(i, j);
                            *da.at_mut(i, j) *= s;
                        }
                        *dc.at_mut(i, 0) = acc;
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *col, dc);
                }
                Op::RowL2Append(a) => {
                    let av = &self.nodes[*a].value;
                    let mut dx = Mat::zeros(av.rows, av.cols);
                    for i in 0..av.rows {
                        let norm: f64 =
                            av.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                        let dn = g.at(i, 0);
                        for j in 0..av.cols {
                            let mut v = g.at(i, j + 1);
                            // Subgradient 0 at the (measure-zero) origin.
                            if norm > 1e-12 {
                                v += dn * av.at(i, j) / norm;
                            }
                            *dx.at_mut(i, j) = v;
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::MeanSq(a) => {
                    let av = &self.nodes[*a].value;
                    let n = (av.rows * av.cols).max(1) as f64;
                    let c = 2.0 * g.at(0, 0) / n;
                    accumulate(&mut grads, *a, av.scale(c));
                }
                Op::Snap(a) => accumulate(&mut grads, *a, g),
            }
        }

        grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.unwrap_or_else(|| {
                    let v = &self.nodes[i].value;
                    Mat::zeros(v.rows, v.cols)
                })
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Mat>], var: Var, g: Mat) {
    match &mut grads[var] {
        Some(existing) => *existing = existing.add(&g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn rand_mat(rng: &mut Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.normal() * 0.7).collect())
    }

    /// Central-difference gradient of `f` with respect to entry `(idx)` of
    /// a leaf, where `f` rebuilds the whole tape from the perturbed leaf.
    fn fd_entry(f: &dyn Fn(&Mat) -> f64, m: &Mat, idx: usize) -> f64 {
        let eps = 1e-6;
        let mut hi = m.clone();
        hi.data[idx] += eps;
        let mut lo = m.clone();
        lo.data[idx] -= eps;
        (f(&hi) - f(&lo)) / (2.0 * eps)
    }

    fn check_grad(f: &dyn Fn(&Mat) -> f64, m: &Mat, analytic: &Mat, tol: f64) {
        for idx in 0..m.data.len() {
            let fd = fd_entry(f, m, idx);
            let a = analytic.data[idx];
            assert!(
                (fd - a).abs() <= tol * fd.abs().max(a.abs()).max(1.0),
                "entry {idx}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        let mut rng = Rng::new(1);
        let a0 = rand_mat(&mut rng, 3, 4);
        let b0 = rand_mat(&mut rng, 4, 2);

        let run = |a: &Mat, b: &Mat| -> (f64, Mat, Mat) {
            let mut t = Tape::new();
            let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
            let c = t.matmul(va, vb);
            let l = t.mean_sq(c);
            let loss = t.value(l).at(0, 0);
            let g = t.backward(l);
            (loss, g[va].clone(), g[vb].clone())
        };
        let (_, ga, gb) = run(&a0, &b0);
        check_grad(&|a| run(a, &b0).0, &a0, &ga, 1e-6);
        check_grad(&|b| run(&a0, b).0, &b0, &gb, 1e-6);
    }

    #[test]
    fn matmul_nt_gradients() {
        let mut rng = Rng::new(2);
        let a0 = rand_mat(&mut rng, 3, 4);
        let b0 = rand_mat(&mut rng, 5, 4);
        let run = |a: &Mat, b: &Mat| -> (f64, Mat, Mat) {
            let mut t = Tape::new();
            let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
            let c = t.matmul_nt(va, vb);
            let l = t.mean_sq(c);
            let loss = t.value(l).at(0, 0);
            let g = t.backward(l);
            (loss, g[va].clone(), g[vb].clone())
        };
        let (_, ga, gb) = run(&a0, &b0);
        check_grad(&|a| run(a, &b0).0, &a0, &ga, 1e-6);
        check_grad(&|b| run(&a0, b).0, &b0, &gb, 1e-6);
    }

    #[test]
    fn mlp_block_gradients() {
        // gelu(x·w + b) -> mean_sq, every input checked against FD.
        let mut rng = Rng::new(3);
        let x0 = rand_mat(&mut rng, 4, 3);
        let w0 = rand_mat(&mut rng, 3, 5);
        let b0 = rand_mat(&mut rng, 1, 5);
        let run = |x: &Mat, w: &Mat, b: &Mat| -> (f64, Mat, Mat, Mat) {
            let mut t = Tape::new();
            let (vx, vw, vb) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
            let h = t.matmul(vx, vw);
            let hb = t.add_row(h, vb);
            let a = t.gelu(hb);
            let l = t.mean_sq(a);
            let loss = t.value(l).at(0, 0);
            let g = t.backward(l);
            (loss, g[vx].clone(), g[vw].clone(), g[vb].clone())
        };
        let (_, gx, gw, gb) = run(&x0, &w0, &b0);
        check_grad(&|x| run(x, &w0, &b0).0, &x0, &gx, 1e-6);
        check_grad(&|w| run(&x0, w, &b0).0, &w0, &gw, 1e-6);
        check_grad(&|b| run(&x0, &w0, b).0, &b0, &gb, 1e-6);
    }

    #[test]
    fn rms_norm_gradients() {
        let mut rng = Rng::new(4);
        let x0 = rand_mat(&mut rng, 3, 6);
        let g0 = rand_mat(&mut rng, 1, 6);
        let run = |x: &Mat, gain: &Mat| -> (f64, Mat, Mat) {
            let mut t = Tape::new();
            let (vx, vg) = (t.leaf(x.clone()), t.leaf(gain.clone()));
            let y = t.rms_norm(vx, vg);
            let l = t.mean_sq(y);
            let loss = t.value(l).at(0, 0);
            let g = t.backward(l);
            (loss, g[vx].clone(), g[vg].clone())
        };
        let (_, gx, gg) = run(&x0, &g0);
        check_grad(&|x| run(x, &g0).0, &x0, &gx, 1e-5);
        check_grad(&|g| run(&x0, g).0, &g0, &gg, 1e-5);
    }

    #[test]
    fn softmax_attention_pattern_gradients() {
        // softmax(q·kᵀ)·v — the exact op pattern used by attention.
        let mut rng = Rng::new(5);
        let q0 = rand_mat(&mut rng, 3, 4);
        let k0 = rand_mat(&mut rng, 5, 4);
        let v0 = rand_mat(&mut rng, 5, 4);
        let run = |q: &Mat, k: &Mat, v: &Mat| -> (f64, Mat, Mat, Mat) {
            let mut t = Tape::new();
            let (vq, vk, vv) = (t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(v.clone()));
            let s = t.matmul_nt(vq, vk);
            let sc = t.scale(s, 0.5);
            let a = t.softmax_rows(sc);
            let o = t.matmul(a, vv);
            let l = t.mean_sq(o);
            let loss = t.value(l).at(0, 0);
            let g = t.backward(l);
            (loss, g[vq].clone(), g[vk].clone(), g[vv].clone())
        };
        let (_, gq, gk, gv) = run(&q0, &k0, &v0);
        check_grad(&|q| run(q, &k0, &v0).0, &q0, &gq, 1e-5);
        check_grad(&|k| run(&q0, k, &v0).0, &k0, &gk, 1e-5);
        check_grad(&|v| run(&q0, &k0, v).0, &v0, &gv, 1e-5);
    }

    #[test]
    fn routing_ops_gradients() {
        // gather -> mul_rows(sigmoid scores) -> concat -> mean_sq exercises
        // the whole token-selection gradient path.
        let mut rng = Rng::new(6);
        let x0 = rand_mat(&mut rng, 6, 3);
        let s0 = rand_mat(&mut rng, 2, 1);
        let run = |x: &Mat, s: &Mat| -> (f64, Mat, Mat) {
            let mut t = Tape::new();
            let (vx, vs) = (t.leaf(x.clone()), t.leaf(s.clone()));
            let kept = t.gather_rows(vx, vec![1, 4]);
            let gate = t.sigmoid(vs);
            let gated = t.mul_rows(kept, gate);
            let rest = t.gather_rows(vx, vec![0, 2, 3, 5]);
            let all = t.concat_rows(&[gated, rest]);
            let l = t.mean_sq(all);
            let loss = t.value(l).at(0, 0);
            let g = t.backward(l);
            (loss, g[vx].clone(), g[vs].clone())
        };
        let (_, gx, gs) = run(&x0, &s0);
        check_grad(&|x| run(x, &s0).0, &x0, &gx, 1e-6);
        check_grad(&|s| run(&x0, s).0, &s0, &gs, 1e-6);
    }

    #[test]
    fn row_l2_append_gradients() {
        let mut rng = Rng::new(7);
        let x0 = rand_mat(&mut rng, 4, 3);
        let run = |x: &Mat| -> (f64, Mat) {
            let mut t = Tape::new();
            let vx = t.leaf(x.clone());
            let f = t.row_l2_append(vx);
            let l = t.mean_sq(f);
            let loss = t.value(l).at(0, 0);
            let g = t.backward(l);
            (loss, g[vx].clone())
        };
        let (_, gx) = run(&x0);
        check_grad(&|x| run(x).0, &x0, &gx, 1e-6);
    }

    #[test]
    fn column_ops_gradients() {
        let mut rng = Rng::new(8);
        let x0 = rand_mat(&mut rng, 3, 6);
        let run = |x: &Mat| -> (f64, Mat) {
            let mut t = Tape::new();
            let vx = t.leaf(x.clone());
            let a = t.slice_cols(vx, 0, 3);
            let b = t.slice_cols(vx, 3, 3);
            let s = t.matmul_nt(a, b);
            let sm = t.softmax_rows(s);
            let o = t.matmul(sm, b);
            let back = t.concat_cols(&[o, a]);
            let l = t.mean_sq(back);
            let loss = t.value(l).at(0, 0);
            let g = t.backward(l);
            (loss, g[vx].clone())
        };
        let (_, gx) = run(&x0);
        check_grad(&|x| run(x).0, &x0, &gx, 1e-5);
    }

    #[test]
    fn snap_rounds_values_and_passes_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_vec(1, 2, vec![0.1, 1.0 / 3.0]));
        let s = t.snap(x);
        assert_eq!(t.value(s).at(0, 0), 0.1f32 as f64);
        assert_eq!(t.value(s).at(0, 1), (1.0f64 / 3.0) as f32 as f64);
        let l = t.mean_sq(s);
        let g = t.backward(l);
        // identity gradient: d mean_sq / dx = snap(x) (values post-snap)
        assert!((g[x].at(0, 0) - t.value(s).at(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn unreachable_nodes_get_zero_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::from_vec(1, 1, vec![2.0]));
        let unused = t.leaf(Mat::from_vec(2, 2, vec![1.0; 4]));
        let l = t.mean_sq(x);
        let g = t.backward(l);
        assert!(g[unused].data.iter().all(|&v| v == 0.0));
    }
}
