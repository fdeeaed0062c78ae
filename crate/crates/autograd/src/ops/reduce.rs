use crate::error::Result;
use crate::ops::shape::axis_split;
use crate::tensor::Tensor;

fn drop_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &s)| s)
        .collect()
}

impl Tensor {
    /// Sum of all elements, accumulated in storage order.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().fold(0.0, |acc, v| acc + v);
        let n = self.numel();
        Tensor::from_op(Vec::new(), vec![s], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(self.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        {
            let d = self.data();
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                for a in 0..len {
                    let src = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
            }
        }
        let total = self.numel();
        Ok(Tensor::from_op(
            drop_axis(self.shape(), axis),
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0.0; total];
                for o in 0..outer {
                    for a in 0..len {
                        gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = *self.shape().get(axis).unwrap_or(&1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len.max(1.0)))
    }

    /// Maximum over one axis. The whole upstream gradient of each slice goes to
    /// its first maximal position.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        let (arg, out) = self.argmax_axis_inner(axis)?;
        let total = self.numel();
        Ok(Tensor::from_op(
            drop_axis(self.shape(), axis),
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0.0; total];
                for (gv, &i) in g.iter().zip(&arg) {
                    gx[i] += gv;
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Positions (along `axis`) of the first maximum in each slice.
    pub fn argmax_axis(&self, axis: usize) -> Result<Vec<usize>> {
        let (_, _, inner) = axis_split(self.shape(), axis)?;
        let len = self.shape()[axis];
        let (flat, _) = self.argmax_axis_inner(axis)?;
        Ok(flat.iter().map(|&f| (f / inner) % len).collect())
    }

    fn argmax_axis_inner(&self, axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let (outer, len, inner) = axis_split(self.shape(), axis)?;
        let d = self.data();
        let mut arg = Vec::with_capacity(outer * inner);
        let mut val = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for a in 1..len {
                    let pos = (o * len + a) * inner + i;
                    if d[pos] > d[best] {
                        best = pos;
                    }
                }
                arg.push(best);
                val.push(d[best]);
            }
        }
        Ok((arg, val))
    }
}
