use rand::Rng;

use super::{gemm, invalid, numel, MatRef, Real, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Broadcast output shape for two same-rank shapes whose dims agree or are 1.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` read through broadcasting into `out`; 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = contiguous_strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < n {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(o + j, ia + j * ia_step, ib + j * ib_step);
        }
        o += inner;
        // advance the outer multi-index
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

impl<T: Real> Tape<T> {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let op = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (sa_shape, sb_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(op, &sa_shape, &sb_shape)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); numel(&out_shape)];
        if sa_shape == sb_shape {
            for ((o, &x), &y) in out.iter_mut().zip(av).zip(bv) {
                *o = match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                };
            }
        } else {
            let sa = broadcast_strides(&sa_shape, &out_shape);
            let sb = broadcast_strides(&sb_shape, &out_shape);
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| {
                out[o] = match kind {
                    Binary::Add => av[i] + bv[j],
                    Binary::Sub => av[i] - bv[j],
                    Binary::Mul => av[i] * bv[j],
                };
            });
        }
        let value = Tensor::new(&out_shape, out)?;
        let os = out_shape.clone();
        self.record(
            op,
            &[a, b],
            value,
            Box::new(move |g, inp, _, needs| {
                let (x, y) = (inp[0], inp[1]);
                let ga = needs[0].then(|| match kind {
                    Binary::Add | Binary::Sub => reduce_generic(g, &os, x.shape()),
                    Binary::Mul => {
                        let prod = mul_broadcast(g, &os, y);
                        reduce_generic(&prod, &os, x.shape())
                    }
                });
                let gb = needs[1].then(|| match kind {
                    Binary::Add => reduce_generic(g, &os, y.shape()),
                    Binary::Sub => {
                        let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                        reduce_generic(&neg, &os, y.shape())
                    }
                    Binary::Mul => {
                        let prod = mul_broadcast(g, &os, x);
                        reduce_generic(&prod, &os, y.shape())
                    }
                });
                vec![ga, gb]
            }),
        )
    }

    /// Elementwise sum; operands may broadcast along size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise product; operands may broadcast along size-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| v * c).collect())?;
        self.record(
            "scale",
            &[a],
            value,
            Box::new(move |g, _, _, _| vec![Some(g.iter().map(|&v| v * c).collect())]),
        )
    }

    /// Matrix product over the last two axes; leading axes must agree.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k {
            return Err(mismatch());
        }
        let batch = numel(&sa[..r - 2]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                MatRef::new(&av[i * m * k..], m, k),
                MatRef::new(&bv[i * k * n..], k, n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut os = sa[..r - 2].to_vec();
        os.extend([m, n]);
        let value = Tensor::new(&os, out)?;
        self.record(
            "matmul",
            &[a, b],
            value,
            Box::new(move |g, inp, _, needs| {
                let (av, bv) = (inp[0].data(), inp[1].data());
                let ga = needs[0].then(|| {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm(
                            MatRef::new(&g[i * m * n..], m, n),
                            MatRef::t(&bv[i * k * n..], k, n),
                            T::zero(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        gemm(
                            MatRef::t(&av[i * m * k..], m, k),
                            MatRef::new(&g[i * m * n..], m, n),
                            T::zero(),
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// Affine map over the last axis: `x · weightᵀ + bias`, weight `out × in`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        let fin = *sx.last().ok_or_else(|| invalid("linear", "scalar input"))?;
        if sw.len() != 2 || sw[1] != fin {
            return Err(TensorError::ShapeMismatch { op: "linear", lhs: sx, rhs: sw });
        }
        let fout = sw[0];
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: vec![fout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = numel(&sx) / fin;
        let mut out = vec![T::zero(); rows * fout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * fout..(r + 1) * fout].copy_from_slice(bv);
            }
        }
        gemm(
            MatRef::new(self.value(x).data(), rows, fin),
            MatRef::t(self.value(weight).data(), fout, fin),
            if bias.is_some() { T::one() } else { T::zero() },
            &mut out,
        );
        let mut os = sx[..sx.len() - 1].to_vec();
        os.push(fout);
        let value = Tensor::new(&os, out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.record(
            "linear",
            &inputs,
            value,
            Box::new(move |g, inp, _, needs| {
                let gx = needs[0].then(|| {
                    let mut gx = vec![T::zero(); rows * fin];
                    gemm(
                        MatRef::new(g, rows, fout),
                        MatRef::new(inp[1].data(), fout, fin),
                        T::zero(),
                        &mut gx,
                    );
                    gx
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![T::zero(); fout * fin];
                    gemm(
                        MatRef::t(g, rows, fout),
                        MatRef::new(inp[0].data(), rows, fin),
                        T::zero(),
                        &mut gw,
                    );
                    gw
                });
                let mut res = vec![gx, gw];
                if needs.len() == 3 {
                    res.push(needs[2].then(|| {
                        let mut gb = vec![T::zero(); fout];
                        for r in 0..rows {
                            for (b, &v) in gb.iter_mut().zip(&g[r * fout..(r + 1) * fout]) {
                                *b += v;
                            }
                        }
                        gb
                    }));
                }
                res
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.record("reshape", &[a], value, Box::new(|g, _, _, _| vec![Some(g.to_vec())]))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.is_empty() {
            return Err(invalid("flatten", "scalar input"));
        }
        let shape = [s[0], numel(&s[1..])];
        self.reshape(a, &shape)
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&i| i >= s.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(invalid("permute", format!("{axes:?} is not a permutation of rank {}", s.len())));
        }
        let os: Vec<usize> = axes.iter().map(|&i| s[i]).collect();
        let src = contiguous_strides(&s);
        let gather: Vec<usize> = axes.iter().map(|&i| src[i]).collect();
        let map = permute_index_map(&os, &gather);
        let x = self.value(a).data();
        let out: Vec<T> = map.iter().map(|&i| x[i]).collect();
        let value = Tensor::new(&os, out)?;
        self.record(
            "permute",
            &[a],
            value,
            Box::new(move |g, inp, _, _| {
                let mut gx = vec![T::zero(); inp[0].len()];
                for (o, &i) in map.iter().enumerate() {
                    gx[i] = g[o];
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(invalid("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum();
        self.record(
            "sum",
            &[a],
            Tensor::scalar(s),
            Box::new(|g, inp, _, _| vec![Some(vec![g[0]; inp[0].len()])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = T::of(x.len() as f64);
        let s: T = x.data().iter().copied().sum::<T>() / n;
        self.record(
            "mean",
            &[a],
            Tensor::scalar(s),
            Box::new(move |g, inp, _, _| vec![Some(vec![g[0] / n; inp[0].len()])]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape(), out)?;
        self.record(
            "relu",
            &[a],
            value,
            Box::new(|g, inp, _, _| {
                vec![Some(
                    g.iter()
                        .zip(inp[0].data())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                )]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let c = T::of((2.0 / std::f64::consts::PI).sqrt());
        let k = T::of(0.044715);
        let half = T::of(0.5);
        let x = self.value(a);
        let out = x
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(x.shape(), out)?;
        self.record(
            "gelu",
            &[a],
            value,
            Box::new(move |g, inp, _, _| {
                let three = T::of(3.0);
                vec![Some(
                    g.iter()
                        .zip(inp[0].data())
                        .map(|(&g, &x)| {
                            let u = c * (x + k * x * x * x);
                            let t = u.tanh();
                            let du = c * (T::one() + three * k * x * x);
                            g * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                        })
                        .collect(),
                )]
            }),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for rank {}", s.len())));
        }
        let (outer, len, inner) = (numel(&s[..axis]), s[axis], numel(&s[axis + 1..]));
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        self.record(
            "softmax",
            &[a],
            value,
            Box::new(move |g, _, y, _| {
                let y = y.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Inverted dropout: kept units are scaled by `1/(1-p)`; identity when
    /// `train` is false.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let x = self.value(a);
        let value = Tensor::new(x.shape(), x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect())?;
        self.record(
            "dropout",
            &[a],
            value,
            Box::new(move |g, _, _, _| vec![Some(g.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]),
        )
    }

    /// Concatenates two tensors along `axis`; other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(TensorError::ShapeMismatch { op: "concat", lhs: sa, rhs: sb });
        }
        let outer = numel(&sa[..axis]);
        let inner = numel(&sa[axis + 1..]);
        let (ca, cb) = (sa[axis] * inner, sb[axis] * inner);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(outer * (ca + cb));
        for o in 0..outer {
            out.extend_from_slice(&av[o * ca..(o + 1) * ca]);
            out.extend_from_slice(&bv[o * cb..(o + 1) * cb]);
        }
        let mut os = sa.clone();
        os[axis] += sb[axis];
        let value = Tensor::new(&os, out)?;
        self.record(
            "concat",
            &[a, b],
            value,
            Box::new(move |g, _, _, needs| {
                let mut ga = needs[0].then(|| Vec::with_capacity(outer * ca));
                let mut gb = needs[1].then(|| Vec::with_capacity(outer * cb));
                for o in 0..outer {
                    let row = &g[o * (ca + cb)..(o + 1) * (ca + cb)];
                    if let Some(ga) = ga.as_mut() {
                        ga.extend_from_slice(&row[..ca]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb.extend_from_slice(&row[ca..]);
                    }
                }
                vec![ga, gb]
            }),
        )
    }

    /// Repeats size-1 axes up to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let out = broadcast_shape("broadcast_to", &s, shape)?;
        if out != shape {
            return Err(TensorError::ShapeMismatch { op: "broadcast_to", lhs: s, rhs: shape.to_vec() });
        }
        let st = broadcast_strides(&s, shape);
        let zero = vec![0; shape.len()];
        let x = self.value(a).data();
        let mut v = vec![T::zero(); numel(shape)];
        for_each_broadcast(shape, &st, &zero, |o, i, _| v[o] = x[i]);
        let value = Tensor::new(shape, v)?;
        let os = shape.to_vec();
        self.record(
            "broadcast_to",
            &[a],
            value,
            Box::new(move |g, inp, _, _| vec![Some(reduce_generic(g, &os, inp[0].shape()))]),
        )
    }

    /// Picks index `index` along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || index >= s[axis] {
            return Err(invalid("select", format!("index {index} on axis {axis} of {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let len = s[axis];
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * len + index) * inner;
            out.extend_from_slice(&x[base..base + inner]);
        }
        let mut os = s.clone();
        os.remove(axis);
        let value = Tensor::new(&os, out)?;
        self.record(
            "select",
            &[a],
            value,
            Box::new(move |g, inp, _, _| {
                let mut gx = vec![T::zero(); inp[0].len()];
                for o in 0..outer {
                    let base = (o * len + index) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Mean cross-entropy of `logits` (`B × C`) against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::ShapeMismatch { op: "cross_entropy", lhs: s, rhs: vec![labels.len()] });
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(invalid("cross_entropy", format!("label {bad} outside [0, {c})")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &x[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lz = z.ln() + m;
            loss += lz - row[labels[r]];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lz).exp();
            }
        }
        let bt = T::of(b as f64);
        let labels = labels.to_vec();
        self.record(
            "cross_entropy",
            &[logits],
            Tensor::scalar(loss / bt),
            Box::new(move |g, _, _, _| {
                let mut gx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * c + l] -= T::one();
                }
                let f = g[0] / bt;
                gx.iter_mut().for_each(|v| *v *= f);
                vec![Some(gx)]
            }),
        )
    }
}

fn permute_index_map(out_shape: &[usize], gather_strides: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let mut map = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(gather_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// Sums `g` (shaped like `out`) down to `shape` along broadcast axes.
fn reduce_generic<T: Real>(g: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    if out == shape {
        return g.to_vec();
    }
    let mut r = vec![T::zero(); numel(shape)];
    let s = broadcast_strides(shape, out);
    let zero = vec![0; out.len()];
    for_each_broadcast(out, &s, &zero, |o, i, _| r[i] += g[o]);
    r
}

/// `g ⊙ broadcast(y)` where `g` has the output shape.
fn mul_broadcast<T: Real>(g: &[T], out: &[usize], y: &Tensor<T>) -> Vec<T> {
    if y.shape() == out {
        return g.iter().zip(y.data()).map(|(&a, &b)| a * b).collect();
    }
    let s = broadcast_strides(y.shape(), out);
    let zero = vec![0; out.len()];
    let yv = y.data();
    let mut r = vec![T::zero(); g.len()];
    for_each_broadcast(out, &zero, &s, |o, _, j| r[o] = g[o] * yv[j]);
    r
}
