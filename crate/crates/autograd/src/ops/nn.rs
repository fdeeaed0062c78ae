use crate::error::{Result, TensorError};
use crate::ops::shape::axis_split;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Lower clamp on the second argument of [`kl_divergence`] inside the log.
pub const KL_EPS: f64 = 1e-12;

/// Tolerance on row sums accepted as a probability distribution.
pub const NORMALIZATION_TOL: f64 = 1e-6;

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tensor {
    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_finite("softmax", self)?;
        let (outer, len, inner) = axis_split(self.shape(), axis)?;
        let mut out = vec![0.0; self.numel()];
        {
            let d = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let m = (0..len).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for a in 0..len {
                        let e = (d[at(a)] - m).exp();
                        out[at(a)] = e;
                        z += e;
                    }
                    for a in 0..len {
                        out[at(a)] /= z;
                    }
                }
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dotp: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] = y[at(a)] * (g[at(a)] - dotp);
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// `log(softmax(x))` computed via log-sum-exp.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_finite("log_softmax", self)?;
        let (outer, len, inner) = axis_split(self.shape(), axis)?;
        let mut out = vec![0.0; self.numel()];
        {
            let d = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let m = (0..len).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..len).map(|a| (d[at(a)] - m).exp()).sum();
                    let lse = m + z.ln();
                    for a in 0..len {
                        out[at(a)] = d[at(a)] - lse;
                    }
                }
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let gs: f64 = (0..len).map(|a| g[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] = g[at(a)] - y[at(a)].exp() * gs;
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let n = *self.shape().last().unwrap_or(&0);
        if n == 0 || gamma.shape() != [n] || beta.shape() != [n] {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                left: self.shape().to_vec(),
                right: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / n;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        {
            let d = self.data();
            let gd = gamma.data();
            let bd = beta.data();
            for r in 0..rows {
                let row = &d[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..n {
                    let h = (row[j] - mean) * is;
                    xhat[r * n + j] = h;
                    out[r * n + j] = h * gd[j] + bd[j];
                }
            }
        }
        let g_t = gamma.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let gd = g_t.data();
                let mut gx = vec![0.0; xhat.len()];
                let mut ggamma = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..n {
                        dxhat[j] = gr[j] * gd[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * hr[j];
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for j in 0..n {
                        gx[r * n + j] = inv_std[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            },
        ))
    }

    /// Divides every slice along the last axis by its sum.
    pub fn renormalize_last(&self) -> Result<Tensor> {
        self.rowwise(
            "renormalize_last",
            |row| row.iter().sum::<f64>(),
            |g, y, s| {
                let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                g.iter().map(|gv| (gv - gy) / s).collect()
            },
        )
    }

    /// Scales every slice along the last axis to unit Euclidean norm.
    pub fn l2_normalize_last(&self) -> Result<Tensor> {
        self.rowwise(
            "l2_normalize_last",
            |row| row.iter().map(|v| v * v).sum::<f64>().sqrt(),
            |g, y, n| {
                let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                g.iter().zip(y).map(|(gv, yv)| (gv - yv * gy) / n).collect()
            },
        )
    }

    /// `y = x / norm(x)` per last-axis slice, with `back(g, y, norm)` giving the input gradient.
    fn rowwise(
        &self,
        op: &'static str,
        norm: impl Fn(&[f64]) -> f64,
        back: impl Fn(&[f64], &[f64], f64) -> Vec<f64> + 'static,
    ) -> Result<Tensor> {
        check_finite(op, self)?;
        let n = *self.shape().last().unwrap_or(&1);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks(n.max(1)) {
            let s = norm(row);
            if s == 0.0 {
                return Err(TensorError::NonFinite { op });
            }
            norms.push(s);
            out.extend(row.iter().map(|v| v / s));
        }
        let y = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g| {
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), &s) in g.chunks(n).zip(y.chunks(n)).zip(&norms) {
                    gx.extend(back(gr, yr, s));
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`. The mask consumes
    /// one draw per element from `rng`.
    pub fn dropout(&self, p: f64, rng: &mut RngState) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Parameter(format!(
                "dropout rate must lie in [0, 1), got {p}"
            )));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.uniform() >= p { scale } else { 0.0 })
            .collect();
        let out = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |g| vec![Some(g.iter().zip(&mask).map(|(g, m)| g * m).collect())],
        ))
    }
}

fn check_distribution(name: &str, t: &Tensor) -> Result<()> {
    let n = *t.shape().last().unwrap_or(&1);
    for (r, row) in t.data().chunks(n.max(1)).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL || row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(TensorError::Contract(format!(
                "{name} row {r} is not a probability distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// `KL(p ‖ q)` summed along the last axis and averaged over the leading axes.
///
/// Entries with `p = 0` contribute nothing; `q` is clamped below at [`KL_EPS`]
/// inside the log. Gradients flow to whichever arguments track them.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.shape() != q.shape() || p.numel() == 0 {
        return Err(TensorError::Dimension {
            op: "kl_divergence",
            left: p.shape().to_vec(),
            right: q.shape().to_vec(),
        });
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    let n = *p.shape().last().unwrap_or(&1);
    let rows = (p.numel() / n) as f64;
    let total = {
        let pd = p.data();
        let qd = q.data();
        let mut total = 0.0;
        for (pr, qr) in pd.chunks(n).zip(qd.chunks(n)) {
            let mut row = 0.0;
            for (&pv, &qv) in pr.iter().zip(qr) {
                if pv > 0.0 {
                    row += pv * (pv.ln() - qv.max(KL_EPS).ln());
                }
            }
            total += row;
        }
        total / rows
    };
    let (pt, qt) = (p.clone(), q.clone());
    Ok(Tensor::from_op(
        Vec::new(),
        vec![total],
        vec![p.clone(), q.clone()],
        move |g| {
            let scale = g[0] / rows;
            let pd = pt.data();
            let qd = qt.data();
            let gp = pt.requires_grad().then(|| {
                pd.iter()
                    .zip(qd.iter())
                    .map(|(&pv, &qv)| scale * (pv.max(KL_EPS).ln() - qv.max(KL_EPS).ln() + 1.0))
                    .collect()
            });
            let gq = qt.requires_grad().then(|| {
                pd.iter()
                    .zip(qd.iter())
                    .map(|(&pv, &qv)| if qv > KL_EPS { -scale * pv / qv } else { 0.0 })
                    .collect()
            });
            vec![gp, gq]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::TensorError;
    use crate::gradcheck::gradient_check;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = RngState::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::from_vec(vec![0.0, 0.0])
            .softmax(0)
            .unwrap()
            .to_vec();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = Tensor::from_vec(vec![2f64.ln(), 0.0])
            .softmax(0)
            .unwrap()
            .to_vec();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_oracle() {
        let x = rand_tensor(&[7], 21);
        let s = x.softmax(0).unwrap().to_vec();
        let xd = x.to_vec();
        let z: f64 = xd.iter().map(|v| v.exp()).sum();
        for (a, b) in s.iter().zip(&xd) {
            assert!((a - b.exp() / z).abs() < 1e-12);
        }
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::from_vec(vec![0.0, f64::NAN]);
        assert!(matches!(x.softmax(0), Err(TensorError::NonFinite { .. })));
        let x = Tensor::from_vec(vec![0.0, f64::INFINITY]);
        assert!(x.softmax(0).is_err());
    }

    #[test]
    fn softmax_inner_axis() {
        let x = rand_tensor(&[3, 4, 2], 4);
        let s = x.softmax(1).unwrap();
        let sums = s.sum_axis(1).unwrap().to_vec();
        assert!(sums.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn log_softmax_agrees_with_softmax() {
        let x = rand_tensor(&[3, 5], 9);
        let a = x.log_softmax(1).unwrap().to_vec();
        let b = x.softmax(1).unwrap().log().to_vec();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        let p = Tensor::from_vec(vec![0.2, 0.3, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap().item(), 0.0);
        let p = Tensor::from_vec(vec![1.0, 0.0]);
        let q = Tensor::from_vec(vec![0.5, 0.5]);
        assert!((kl_divergence(&p, &q).unwrap().item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_unnormalized() {
        let p = Tensor::from_vec(vec![0.6, 0.6]);
        let q = Tensor::from_vec(vec![0.5, 0.5]);
        assert!(matches!(
            kl_divergence(&p, &q),
            Err(TensorError::Contract(_))
        ));
        assert!(kl_divergence(&q, &Tensor::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn kl_matches_scalar_loop() {
        let p = rand_tensor(&[3, 5], 31).softmax(1).unwrap();
        let q = rand_tensor(&[3, 5], 32).softmax(1).unwrap();
        let got = kl_divergence(&p, &q).unwrap().item();
        let (pd, qd) = (p.to_vec(), q.to_vec());
        let mut want = 0.0;
        for r in 0..3 {
            for j in 0..5 {
                let (a, b) = (pd[r * 5 + j], qd[r * 5 + j]);
                want += a * (a / b).ln();
            }
        }
        want /= 3.0;
        assert!((got - want).abs() < 1e-12);
        assert!(got > 0.0);
    }

    #[test]
    fn dropout_contract() {
        let x = rand_tensor(&[10], 1);
        let mut r = RngState::new(0);
        assert!(x.dropout(1.0, &mut r).is_err());
        assert!(x.dropout(-0.1, &mut r).is_err());
        assert_eq!(x.dropout(0.0, &mut r).unwrap().to_vec(), x.to_vec());
        let a = x.dropout(0.5, &mut RngState::new(5)).unwrap().to_vec();
        let b = x.dropout(0.5, &mut RngState::new(5)).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_survivor_fraction() {
        let x = Tensor::full(&[100_000], 1.0);
        let y = x.dropout(0.5, &mut RngState::new(77)).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((kept - 0.5).abs() < 0.01, "{kept}");
    }

    #[test]
    fn gradients() {
        let x = rand_tensor(&[3, 5], 1);
        let w = rand_tensor(&[3, 5], 2);
        let w1 = w.clone();
        assert!(
            gradient_check::<_, TensorError>(move |t| Ok(t.softmax(1)?.mul(&w1)?.sum()), &x)
                .unwrap()
                < 1e-6
        );
        let w2 = w.clone();
        assert!(
            gradient_check::<_, TensorError>(move |t| Ok(t.softmax(0)?.mul(&w2)?.sum()), &x)
                .unwrap()
                < 1e-6
        );
        let w3 = w.clone();
        assert!(
            gradient_check::<_, TensorError>(move |t| Ok(t.log_softmax(1)?.mul(&w3)?.sum()), &x)
                .unwrap()
                < 1e-6
        );

        let gamma = rand_tensor(&[5], 3);
        let beta = rand_tensor(&[5], 4);
        let (g1, b1, w4) = (gamma.clone(), beta.clone(), w.clone());
        assert!(
            gradient_check::<_, TensorError>(
                move |t| Ok(t.layer_norm(&g1, &b1, 1e-5)?.mul(&w4)?.sum()),
                &x
            )
            .unwrap()
                < 1e-6
        );
        let (x1, b2, w5) = (x.clone(), beta.clone(), w.clone());
        assert!(
            gradient_check::<_, TensorError>(
                move |t| Ok(x1.layer_norm(t, &b2, 1e-5)?.mul(&w5)?.sum()),
                &gamma
            )
            .unwrap()
                < 1e-6
        );
        let (x2, g2, w6) = (x.clone(), gamma.clone(), w.clone());
        assert!(
            gradient_check::<_, TensorError>(
                move |t| Ok(x2.layer_norm(&g2, t, 1e-5)?.mul(&w6)?.sum()),
                &beta
            )
            .unwrap()
                < 1e-6
        );

        let (w7,) = (w.clone(),);
        assert!(
            gradient_check::<_, TensorError>(
                move |t| Ok(t.dropout(0.3, &mut RngState::new(11))?.mul(&w7)?.sum()),
                &x
            )
            .unwrap()
                < 1e-8
        );

        let pos = Tensor::new(&[3, 5], x.data().iter().map(|v| v.abs() + 0.1).collect()).unwrap();
        let w8 = w.clone();
        assert!(
            gradient_check::<_, TensorError>(
                move |t| Ok(t.renormalize_last()?.mul(&w8)?.sum()),
                &pos
            )
            .unwrap()
                < 1e-6
        );
        let w9 = w.clone();
        assert!(
            gradient_check::<_, TensorError>(
                move |t| Ok(t.l2_normalize_last()?.mul(&w9)?.sum()),
                &x
            )
            .unwrap()
                < 1e-6
        );

        let p = rand_tensor(&[3, 5], 5).softmax(1).unwrap();
        let p1 = p.clone();
        assert!(
            gradient_check::<_, TensorError>(move |t| kl_divergence(&p1, &t.softmax(1)?), &x)
                .unwrap()
                < 1e-4
        );
        let q = rand_tensor(&[3, 5], 6).softmax(1).unwrap();
        assert!(
            gradient_check::<_, TensorError>(move |t| kl_divergence(&t.softmax(1)?, &q), &x)
                .unwrap()
                < 1e-4
        );
    }
}
