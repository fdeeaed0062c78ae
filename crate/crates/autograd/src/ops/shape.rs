use std::ops::Range;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::Dimension {
                op: "reshape",
                left: self.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd
            || perm
                .iter()
                .any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Contract(format!(
                "invalid permutation {perm:?} for shape {:?}",
                self.shape()
            )));
        }
        let in_shape = self.shape().to_vec();
        let in_strides = strides(&in_shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        // source offset for every output position, in output order
        let n = self.numel();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        for _ in 0..n {
            src.push(
                idx.iter()
                    .zip(perm)
                    .map(|(&i, &p)| i * in_strides[p])
                    .sum::<usize>(),
            );
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let out = {
            let d = self.data();
            src.iter().map(|&s| d[s]).collect()
        };
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0.0; n];
                for (gv, &s) in g.iter().zip(&src) {
                    gx[s] = *gv;
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Sub-range along one axis.
    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(self.shape(), axis)?;
        if range.start > range.end || range.end > len {
            return Err(TensorError::Contract(format!(
                "slice {range:?} out of bounds for axis {axis} of {:?}",
                self.shape()
            )));
        }
        let width = range.end - range.start;
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = width;
        let mut out = Vec::with_capacity(outer * width * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = o * len * inner;
                out.extend_from_slice(&d[base + range.start * inner..base + range.end * inner]);
            }
        }
        let total = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0.0; total];
                for o in 0..outer {
                    let base = o * len * inner;
                    gx[base + range.start * inner..base + range.end * inner]
                        .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let (outer, _, inner) = axis_split(first.shape(), axis)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let ok = p.ndim() == first.ndim()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::Dimension {
                    op: "concat",
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            widths.push(p.shape()[axis]);
        }
        let total_w: usize = widths.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total_w;
        let mut out = Vec::with_capacity(outer * total_w * inner);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (d, &w) in datas.iter().zip(&widths) {
                out.extend_from_slice(&d[o * w * inner..(o + 1) * w * inner]);
            }
        }
        drop(datas);
        Ok(Tensor::from_op(out_shape, out, parts.to_vec(), move |g| {
            let mut grads: Vec<Vec<f64>> = widths
                .iter()
                .map(|w| Vec::with_capacity(outer * w * inner))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &w) in grads.iter_mut().zip(&widths) {
                    gp.extend_from_slice(&g[off..off + w * inner]);
                    off += w * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Rows of a tensor along axis 0 (embedding lookup). Gradients scatter-add.
    pub fn index_select(&self, rows: &[usize]) -> Result<Tensor> {
        if self.ndim() == 0 {
            return Err(TensorError::Contract("index_select on a scalar".into()));
        }
        let n_rows = self.shape()[0];
        let width = self.numel() / n_rows.max(1);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(TensorError::Contract(format!(
                "row index {bad} out of range for {n_rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(rows.len() * width);
        {
            let d = self.data();
            for &r in rows {
                out.extend_from_slice(&d[r * width..(r + 1) * width]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        let rows = rows.to_vec();
        let total = self.numel();
        Ok(Tensor::from_op(shape, out, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; total];
            for (i, &r) in rows.iter().enumerate() {
                gx[r * width..(r + 1) * width]
                    .iter_mut()
                    .zip(&g[i * width..(i + 1) * width])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(gx)]
        }))
    }

    /// Arbitrary elements by flat (row-major) index, arranged into `shape`.
    pub fn gather(&self, flat_indices: &[usize], shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != flat_indices.len() {
            return Err(TensorError::DataLength {
                op: "gather",
                shape: shape.to_vec(),
                len: flat_indices.len(),
            });
        }
        let total = self.numel();
        if let Some(&bad) = flat_indices.iter().find(|&&i| i >= total) {
            return Err(TensorError::Contract(format!(
                "gather index {bad} out of range for {total} elements"
            )));
        }
        let out = {
            let d = self.data();
            flat_indices.iter().map(|&i| d[i]).collect()
        };
        let idx = flat_indices.to_vec();
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0.0; total];
                for (gv, &i) in g.iter().zip(&idx) {
                    gx[i] += gv;
                }
                vec![Some(gx)]
            },
        ))
    }
}
