use super::{invalid, Real, Result, Tape, Tensor, TensorError, Var};

/// Updated running statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> Tape<T> {
    /// Batch normalization over the channel axis of an `N × C × H × W` input.
    ///
    /// In training mode the batch statistics normalize the input and the
    /// returned [`BatchStats`] carry the momentum-updated running statistics
    /// (unbiased variance), which the caller is responsible for storing. In
    /// eval mode the running statistics are used and nothing is returned.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        momentum: T,
        eps: T,
        train: bool,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(invalid("batch_norm2d", format!("expected NCHW input, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch { op: "batch_norm2d", lhs: vec![c], rhs: self.shape(p).to_vec() });
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(invalid("batch_norm2d", "running statistics length differs from channel count"));
        }
        let m = n * hw;
        if m == 0 {
            return Err(invalid("batch_norm2d", "zero-size batch"));
        }
        let x = self.value(input).data();
        let at = move |b: usize, ch: usize| (b * c + ch) * hw;

        let (mean, var) = if train {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let mt = T::of(m as f64);
            for ch in 0..c {
                let mut acc = T::zero();
                for b in 0..n {
                    acc += x[at(b, ch)..at(b, ch) + hw].iter().copied().sum::<T>();
                }
                mean[ch] = acc / mt;
                let mut sq = T::zero();
                for b in 0..n {
                    for &v in &x[at(b, ch)..at(b, ch) + hw] {
                        let d = v - mean[ch];
                        sq += d * d;
                    }
                }
                var[ch] = sq / mt;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = at(b, ch)..at(b, ch) + hw;
                for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&x[r]) {
                    *xh = (v - mean[ch]) * inv_std[ch];
                    *o = gv[ch] * *xh + bv[ch];
                }
            }
        }

        let stats = train.then(|| {
            let unbias = if m > 1 { T::of(m as f64 / (m as f64 - 1.0)) } else { T::one() };
            let keep = T::one() - momentum;
            BatchStats {
                running_mean: running_mean.iter().zip(&mean).map(|(&r, &b)| keep * r + momentum * b).collect(),
                running_var: running_var.iter().zip(&var).map(|(&r, &b)| keep * r + momentum * b * unbias).collect(),
            }
        });

        let value = Tensor::new(&s, out)?;
        let v = self.record(
            "batch_norm2d",
            &[input, gamma, beta],
            value,
            Box::new(move |g, inp, _, needs| {
                let gam = inp[1].data();
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = at(b, ch)..at(b, ch) + hw;
                        for (&gv, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                            gg[ch] += gv * xh;
                            gb[ch] += gv;
                        }
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); n * c * hw];
                    let mt = T::of(m as f64);
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch];
                        let (mg, mgx) = (gb[ch] / mt, gg[ch] / mt);
                        for b in 0..n {
                            let r = at(b, ch)..at(b, ch) + hw;
                            for ((o, &gv), &xh) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *o = if train { k * (gv - mg - xh * mgx) } else { k * gv };
                            }
                        }
                    }
                    gx
                });
                vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
            }),
        )?;
        Ok((v, stats))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let d = *s.last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: vec![d], rhs: self.shape(p).to_vec() });
            }
        }
        let x = self.value(input).data();
        let rows = x.len() / d;
        let dt = T::of(d as f64);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = gv[j] * xh + bv[j];
            }
        }
        let value = Tensor::new(&s, out)?;
        self.record(
            "layer_norm",
            &[input, gamma, beta],
            value,
            Box::new(move |g, inp, _, needs| {
                let gam = inp[1].data();
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                        gb[j] += g[r * d + j];
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let gh: Vec<T> = (0..d).map(|j| g[r * d + j] * gam[j]).collect();
                        let m1 = gh.iter().copied().sum::<T>() / dt;
                        let m2 = gh.iter().zip(&xhat[r * d..(r + 1) * d]).map(|(&a, &b)| a * b).sum::<T>() / dt;
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (gh[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    gx
                });
                vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 3], &[1., 2., 3.]).unwrap());
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y).data();
        for (a, e) in v.iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((a - e).abs() < 1e-3);
        }
        let c = tape.constant(Tensor::full(&[2, 4], 7.0));
        let g4 = tape.constant(Tensor::ones(&[4]));
        let b4 = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(c, g4, b4, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_gamma_scales() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 3], &[1., 5., 2., -1., 0., 4.]).unwrap());
        let one = tape.constant(Tensor::ones(&[3]));
        let two = tape.constant(Tensor::full(&[3], 2.0));
        let z = tape.constant(Tensor::zeros(&[3]));
        let a = tape.layer_norm(x, one, z, 1e-5).unwrap();
        let b = tape.layer_norm(x, two, z, 1e-5).unwrap();
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((2.0 * p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_constant_channels_train() {
        let mut tape = Tape::<f32>::new();
        let mut d = vec![3.0f32; 2 * 2 * 3 * 3];
        d[9..18].fill(-5.0);
        d[27..].fill(-5.0);
        let x = tape.constant(Tensor::new(&[2, 2, 3, 3], d).unwrap());
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, stats) = tape.batch_norm2d(x, g, b, &[0.0; 2], &[1.0; 2], 0.1, 1e-5, true).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-3));
        let stats = stats.unwrap();
        assert!((stats.running_mean[0] - 0.3).abs() < 1e-6);
        assert!((stats.running_mean[1] + 0.5).abs() < 1e-6);
        assert!((stats.running_var[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn batch_norm_eval_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x = tape.constant(Tensor::from_f64(&[2, 2, 2, 2], &data).unwrap());
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, stats) = tape.batch_norm2d(x, g, b, &[0.0; 2], &[1.0; 2], 0.1, 0.0, false).unwrap();
        assert!(stats.is_none());
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn batch_norm_rejects_wrong_param_len() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.batch_norm2d(x, g, b, &[0.0; 3], &[1.0; 3], 0.1, 1e-5, true).is_err());
    }
}
