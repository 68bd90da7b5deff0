use super::{gemm, invalid, MatRef, Real, Result, Tape, Tensor, TensorError, Var};

/// Geometry of a stride-1 convolution.
#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image (`C × H × W`) into a `(C·kh·kw) × (oh·ow)` matrix.
fn im2col<T: Real>(x: &[T], g: ConvGeom, cols: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oi in 0..g.oh {
                    let ii = oi as isize + ki as isize - g.pad as isize;
                    let line = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for (oj, d) in line.iter_mut().enumerate() {
                        let jj = oj as isize + kj as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize { T::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<T: Real>(cols: &[T], g: ConvGeom, x: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oi in 0..g.oh {
                    let ii = oi as isize + ki as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.ow {
                        let jj = oj as isize + kj as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// 2-D convolution with stride 1 over an `N × C × H × W` input.
    ///
    /// `kernel` is `F × C × kh × kw`; `bias`, when given, has length `F`.
    /// With a 3×3 kernel and padding 1 the spatial size is preserved.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: si, rhs: sk });
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(invalid("conv2d", format!("input {h}×{w} smaller than kernel {kh}×{kw}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [f] {
                return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: vec![f], rhs: self.shape(b).to_vec() });
            }
        }
        let g = ConvGeom { c, h, w, kh, kw, pad: padding, oh: h + 2 * padding - kh + 1, ow: w + 2 * padding - kw + 1 };
        let (rows, ncol) = (g.col_rows(), g.col_cols());
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![T::zero(); n * f * ncol];
        let mut cols = vec![T::zero(); rows * ncol];
        for i in 0..n {
            im2col(&x[i * c * h * w..(i + 1) * c * h * w], g, &mut cols);
            let o = &mut out[i * f * ncol..(i + 1) * f * ncol];
            if let Some(b) = bias {
                for (fi, &bv) in self.value(b).data().iter().enumerate() {
                    o[fi * ncol..(fi + 1) * ncol].fill(bv);
                }
            }
            gemm(
                MatRef::new(k, f, rows),
                MatRef::new(&cols, rows, ncol),
                if bias.is_some() { T::one() } else { T::zero() },
                o,
            );
        }
        let value = Tensor::new(&[n, f, g.oh, g.ow], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.record(
            "conv2d",
            &inputs,
            value,
            Box::new(move |gr, inp, _, needs| {
                let x = inp[0].data();
                let k = inp[1].data();
                let mut gx = needs[0].then(|| vec![T::zero(); n * c * h * w]);
                let mut gk = needs[1].then(|| vec![T::zero(); f * rows]);
                let mut cols = vec![T::zero(); rows * ncol];
                for i in 0..n {
                    let go = &gr[i * f * ncol..(i + 1) * f * ncol];
                    if let Some(gk) = gk.as_mut() {
                        im2col(&x[i * c * h * w..(i + 1) * c * h * w], g, &mut cols);
                        gemm(MatRef::new(go, f, ncol), MatRef::t(&cols, rows, ncol), T::one(), gk);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(MatRef::t(k, f, rows), MatRef::new(go, f, ncol), T::zero(), &mut cols);
                        col2im(&cols, g, &mut gx[i * c * h * w..(i + 1) * c * h * w]);
                    }
                }
                let mut res = vec![gx, gk];
                if needs.len() == 3 {
                    res.push(needs[2].then(|| {
                        let mut gb = vec![T::zero(); f];
                        for i in 0..n {
                            for (fi, b) in gb.iter_mut().enumerate() {
                                let s = (i * f + fi) * ncol;
                                *b += gr[s..s + ncol].iter().copied().sum::<T>();
                            }
                        }
                        gb
                    }));
                }
                res
            }),
        )
    }

    /// Non-overlapping `k × k` max pooling; trailing rows/columns are dropped.
    ///
    /// The gradient flows only to the first maximal element of each window.
    pub fn max_pool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(invalid("max_pool2d", format!("cannot pool {s:?} with window {k}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(nc * oh * ow);
        let mut arg = Vec::with_capacity(nc * oh * ow);
        for p in 0..nc {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = oi * k * w + oj * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = (oi * k + di) * w + oj * k + dj;
                            if plane[idx] > plane[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(plane[best]);
                    arg.push(p * h * w + best);
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        self.record(
            "max_pool2d",
            &[input],
            value,
            Box::new(move |g, inp, _, _| {
                let mut gx = vec![T::zero(); inp[0].len()];
                for (&i, &gv) in arg.iter().zip(g) {
                    gx[i] += gv;
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Non-overlapping `k × k` average pooling.
    pub fn avg_pool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(invalid("avg_pool2d", format!("cannot pool {s:?} with window {k}")));
        }
        let windows = |len: usize| (0..len / k).map(|i| (i * k, i * k + k)).collect::<Vec<_>>();
        self.window_average("avg_pool2d", input, windows(s[2]), windows(s[3]))
    }

    /// Average pooling onto a fixed `oh × ow` grid (window `i` spans
    /// `floor(i·H/oh) .. ceil((i+1)·H/oh)`).
    pub fn adaptive_avg_pool2d(&mut self, input: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || oh == 0 || ow == 0 {
            return Err(invalid("adaptive_avg_pool2d", format!("cannot pool {s:?} onto {oh}×{ow}")));
        }
        let windows = |len: usize, out: usize| {
            (0..out).map(|i| (i * len / out, ((i + 1) * len).div_ceil(out))).collect::<Vec<_>>()
        };
        self.window_average("adaptive_avg_pool2d", input, windows(s[2], oh), windows(s[3], ow))
    }

    fn window_average(
        &mut self,
        op: &'static str,
        input: Var,
        rows: Vec<(usize, usize)>,
        cols: Vec<(usize, usize)>,
    ) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(nc * rows.len() * cols.len());
        for p in 0..nc {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for &(r0, r1) in &rows {
                for &(c0, c1) in &cols {
                    let mut acc = T::zero();
                    for i in r0..r1 {
                        for j in c0..c1 {
                            acc += plane[i * w + j];
                        }
                    }
                    out.push(acc / T::of(((r1 - r0) * (c1 - c0)) as f64));
                }
            }
        }
        let value = Tensor::new(&[s[0], s[1], rows.len(), cols.len()], out)?;
        self.record(
            op,
            &[input],
            value,
            Box::new(move |g, _, _, _| {
                let mut gx = vec![T::zero(); nc * h * w];
                let mut o = 0;
                for p in 0..nc {
                    for &(r0, r1) in &rows {
                        for &(c0, c1) in &cols {
                            let gv = g[o] / T::of(((r1 - r0) * (c1 - c0)) as f64);
                            o += 1;
                            for i in r0..r1 {
                                for j in c0..c1 {
                                    gx[p * h * w + i * w + j] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
