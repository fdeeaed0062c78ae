//! Matrix products. Every kernel accumulates in a fixed index order so results
//! are bitwise reproducible.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const MR: usize = 4;
const NR: usize = 8;

/// Register-tiled `out[m×n] (+)= a[m×k] · b[k×n]` over row-major operands.
///
/// Every output element is accumulated over `p = 0..k` in order. With
/// `fresh` the sum starts from zero and is then added to `out`; otherwise it
/// starts from the current `out` value. Tiling only changes which elements
/// are in flight together, never the order of any single sum.
fn kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize, fresh: bool) {
    let full_cols = n - n % NR;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j < full_cols {
            let mut acc = [[0.0f64; NR]; MR];
            if !fresh {
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + NR]);
                }
            }
            for p in 0..k {
                let bv: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile width");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..NR {
                        row[c] += av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let o = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                if fresh {
                    o.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                } else {
                    o.copy_from_slice(row);
                }
            }
            j += NR;
        }
        if full_cols < n {
            edge(a, b, out, i..i + MR, full_cols..n, k, n, fresh);
        }
        i += MR;
    }
    if i < m {
        edge(a, b, out, i..m, 0..n, k, n, fresh);
    }
}

#[allow(clippy::too_many_arguments)]
fn edge(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
    fresh: bool,
) {
    let w = cols.len();
    let mut acc = vec![0.0; w];
    for i in rows {
        let o = &mut out[i * n + cols.start..i * n + cols.end];
        if fresh {
            acc.fill(0.0);
        } else {
            acc.copy_from_slice(o);
        }
        for p in 0..k {
            let av = a[i * k + p];
            for (x, &bv) in acc.iter_mut().zip(&b[p * n + cols.start..p * n + cols.end]) {
                *x += av * bv;
            }
        }
        if fresh {
            o.iter_mut().zip(&acc).for_each(|(o, v)| *o += v);
        } else {
            o.copy_from_slice(&acc);
        }
    }
}

fn transposed(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// out[m×n] += a[m×k] · b[k×n], accumulating into `out` over `p` in order.
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    kernel(a, b, out, m, k, n, false);
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ. Each dot product is summed from zero over
/// `k` in order before being added to `out`, as a plain scalar loop would.
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    kernel(a, &transposed(b, n, k), out, m, k, n, true);
}

/// out[k×n] += a[m×k]ᵀ · b[m×n], accumulating into `out` over `i` in order.
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    kernel(&transposed(a, m, k), b, out, k, m, n, false);
}

fn dims_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tensor {
    /// `[m, k] · [k, n] → [m, n]`
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(dims_err("matmul", self, other));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data(), &other.data(), &mut out, m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            move |g| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, &b.data(), &mut ga, m, n, k);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(&a.data(), g, &mut gb, m, k, n);
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// `[m, k] · [n, k]ᵀ → [m, n]`; each entry is a plain dot product of rows.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape()[1] != other.shape()[1] {
            return Err(dims_err("matmul_nt", self, other));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(&self.data(), &other.data(), &mut out, m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            move |g| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm_nn(g, &b.data(), &mut ga, m, n, k);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; n * k];
                    gemm_tn(g, &a.data(), &mut gb, m, n, k);
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// Batched `[b, m, k] · [b, k, n] → [b, m, n]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        self.batched(other, false)
    }

    /// Batched `[b, m, k] · [b, n, k]ᵀ → [b, m, n]`.
    pub fn bmm_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.batched(other, true)
    }

    fn batched(&self, other: &Tensor, transpose_b: bool) -> Result<Tensor> {
        let op = if transpose_b { "bmm_nt" } else { "bmm" };
        if self.ndim() != 3 || other.ndim() != 3 || self.shape()[0] != other.shape()[0] {
            return Err(dims_err(op, self, other));
        }
        let (bs, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (bk, n) = if transpose_b {
            (other.shape()[2], other.shape()[1])
        } else {
            (other.shape()[1], other.shape()[2])
        };
        if bk != k {
            return Err(dims_err(op, self, other));
        }
        let mut out = vec![0.0; bs * m * n];
        {
            let ad = self.data();
            let bd = other.data();
            for s in 0..bs {
                let a = &ad[s * m * k..(s + 1) * m * k];
                let b = &bd[s * k * n..(s + 1) * k * n];
                let o = &mut out[s * m * n..(s + 1) * m * n];
                if transpose_b {
                    gemm_nt(a, b, o, m, k, n);
                } else {
                    gemm_nn(a, b, o, m, k, n);
                }
            }
        }
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![bs, m, n],
            out,
            vec![self.clone(), other.clone()],
            move |g| {
                let ad = a.data();
                let bd = b.data();
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; bs * m * k];
                    for s in 0..bs {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bsl = &bd[s * k * n..(s + 1) * k * n];
                        let out = &mut ga[s * m * k..(s + 1) * m * k];
                        if transpose_b {
                            gemm_nn(gs, bsl, out, m, n, k);
                        } else {
                            gemm_nt(gs, bsl, out, m, n, k);
                        }
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; bs * k * n];
                    for s in 0..bs {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let asl = &ad[s * m * k..(s + 1) * m * k];
                        let out = &mut gb[s * k * n..(s + 1) * k * n];
                        if transpose_b {
                            gemm_tn(gs, asl, out, m, n, k);
                        } else {
                            gemm_tn(asl, gs, out, m, k, n);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(TensorError::Contract(format!(
                "transpose expects a matrix, got {:?}",
                self.shape()
            )));
        }
        self.permute(&[1, 0])
    }

    /// Inner product of two 1-D tensors.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 1 || self.shape() != other.shape() {
            return Err(dims_err("dot", self, other));
        }
        let n = self.numel();
        self.reshape(&[1, n])?
            .matmul_nt(&other.reshape(&[1, n])?)?
            .reshape(&[])
    }
}
