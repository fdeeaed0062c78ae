use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn last_dim_match(op: &'static str, x: &Tensor, v: &Tensor) -> Result<usize> {
    let n = *x.shape().last().unwrap_or(&1);
    if v.ndim() != 1 || v.numel() != n || x.ndim() == 0 {
        return Err(TensorError::Dimension {
            op,
            left: x.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    Ok(n)
}

impl Tensor {
    /// Applies `f` elementwise; `df(x, y)` is the local derivative given input and output.
    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = out.clone();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g| {
            let xd = x.data();
            let gx = g
                .iter()
                .zip(xd.iter().zip(&y))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            move |g| {
                let ga = b
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(b, g)| b * g)
                    .collect::<Vec<_>>();
                let gb = a.data().iter().zip(g).map(|(a, g)| a * g).collect();
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|v| v * factor).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let inner = C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            },
        )
    }

    /// `x + bias` with `bias` broadcast along the last axis.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let n = last_dim_match("add_bias", self, bias)?;
        let bd = bias.data();
        let out = self
            .data()
            .chunks(n)
            .flat_map(|row| {
                row.iter()
                    .zip(bd.iter())
                    .map(|(x, b)| x + b)
                    .collect::<Vec<_>>()
            })
            .collect();
        drop(bd);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            move |g| {
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gb)]
            },
        ))
    }

    /// `x * w` with `w` broadcast along the last axis.
    pub fn mul_bias(&self, w: &Tensor) -> Result<Tensor> {
        let n = last_dim_match("mul_bias", self, w)?;
        let out = {
            let wd = w.data();
            self.data()
                .chunks(n)
                .flat_map(|row| {
                    row.iter()
                        .zip(wd.iter())
                        .map(|(x, w)| x * w)
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let (x, wt) = (self.clone(), w.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), w.clone()],
            move |g| {
                let xd = x.data();
                let wd = wt.data();
                let mut gw = vec![0.0; n];
                let mut gx = Vec::with_capacity(g.len());
                for (grow, xrow) in g.chunks(n).zip(xd.chunks(n)) {
                    for j in 0..n {
                        gx.push(grow[j] * wd[j]);
                        gw[j] += grow[j] * xrow[j];
                    }
                }
                vec![Some(gx), Some(gw)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::TensorError;
    use crate::gradcheck::gradient_check;
    use crate::rng::RngState;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = RngState::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn unary_gradients() {
        let x = rand_tensor(&[3, 4], 1);
        let pos = Tensor::new(&[3, 4], x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
        assert!(gradient_check::<_, TensorError>(|t| Ok(t.exp().sum()), &x).unwrap() < 1e-6);
        assert!(gradient_check::<_, TensorError>(|t| Ok(t.log().sum()), &pos).unwrap() < 1e-6);
        assert!(gradient_check::<_, TensorError>(|t| Ok(t.gelu().sum()), &x).unwrap() < 1e-6);
        assert!(
            gradient_check::<_, TensorError>(|t| Ok(t.relu().mul(&t.relu())?.sum()), &x).unwrap()
                < 1e-6
        );
        assert!(
            gradient_check::<_, TensorError>(|t| Ok(t.scale(-2.5).add_scalar(1.0).exp().sum()), &x)
                .unwrap()
                < 1e-6
        );
    }

    #[test]
    fn binary_gradients() {
        let x = rand_tensor(&[2, 5], 2);
        let c = rand_tensor(&[2, 5], 3);
        let b = rand_tensor(&[5], 4);
        let c2 = c.clone();
        assert!(
            gradient_check::<_, TensorError>(move |t| Ok(t.mul(&c2)?.mul(t)?.sum()), &x).unwrap()
                < 1e-6
        );
        let c3 = c.clone();
        assert!(
            gradient_check::<_, TensorError>(move |t| Ok(t.sub(&c3)?.exp().add(t)?.sum()), &x)
                .unwrap()
                < 1e-6
        );
        let x2 = x.clone();
        assert!(
            gradient_check::<_, TensorError>(move |t| Ok(x2.add_bias(t)?.exp().sum()), &b).unwrap()
                < 1e-6
        );
        let x3 = x.clone();
        assert!(
            gradient_check::<_, TensorError>(move |t| Ok(x3.mul_bias(t)?.exp().sum()), &b).unwrap()
                < 1e-6
        );
        let b2 = b.clone();
        assert!(
            gradient_check::<_, TensorError>(move |t| Ok(t.mul_bias(&b2)?.exp().sum()), &x)
                .unwrap()
                < 1e-6
        );
    }
}
