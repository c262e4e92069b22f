//! Reverse-mode autodiff on dynamically shaped `ndarray` tensors.
//!
//! A [`Graph`] records every op's output plus a backward closure; calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every leaf. Heavy ops (matmul, conv3d) route through `ndarray`'s
//! GEMM; conv recomputes its im2col buffers in the backward pass instead of
//! storing them.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix4, Ix5, Slice};

use crate::scalar::Scalar;

/// Handle to one node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<S> = Box<dyn Fn(&[ArrayD<S>], &ArrayD<S>, &ArrayD<S>) -> Vec<ArrayD<S>>>;

struct Back<S> {
    parents: Vec<usize>,
    f: BackFn<S>,
}

/// Gradients keyed by [`Var`], produced by [`Graph::backward`].
pub struct Grads<S: Scalar> {
    g: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }
}

/// Precomputed rotation tables for rotary position embedding: `cos`/`sin`
/// are `T x (head_dim / 2)`, shared across heads.
#[derive(Debug, Clone)]
pub struct RotationTable<S: Scalar> {
    pub cos: Array2<S>,
    pub sin: Array2<S>,
}

/// One tape of recorded operations.
pub struct Graph<S: Scalar> {
    values: Vec<ArrayD<S>>,
    backs: Vec<Option<Back<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn as2<S: Scalar>(a: &ArrayD<S>) -> ndarray::ArrayView2<'_, S> {
    a.view().into_dimensionality::<Ix2>().expect("2-d value")
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            backs: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<S>, back: Option<Back<S>>) -> Var {
        self.values.push(value);
        self.backs.push(back);
        Var(self.values.len() - 1)
    }

    /// Insert a leaf (input or parameter). Gradients accumulate here.
    pub fn leaf(&mut self, value: ArrayD<S>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> S {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar node expected");
        *val.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = &self.values[a.0] + &self.values[b.0];
        self.push(
            out,
            Some(Back {
                parents: vec![a.0, b.0],
                f: Box::new(|_, g, _| vec![g.clone(), g.clone()]),
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = &self.values[a.0] - &self.values[b.0];
        self.push(
            out,
            Some(Back {
                parents: vec![a.0, b.0],
                f: Box::new(|_, g, _| vec![g.clone(), g.mapv(|v| -v)]),
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = &self.values[a.0] * &self.values[b.0];
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            Some(Back {
                parents: vec![ai, bi],
                f: Box::new(move |vals, g, _| vec![g * &vals[bi], g * &vals[ai]]),
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.values[a.0].mapv(|v| v * c);
        self.push(
            out,
            Some(Back {
                parents: vec![a.0],
                f: Box::new(move |_, g, _| vec![g.mapv(|v| v * c)]),
            }),
        )
    }

    /// Elementwise multiply by a constant array (e.g. a loss mask).
    pub fn mul_const(&mut self, a: Var, c: Rc<ArrayD<S>>) -> Var {
        assert_eq!(self.shape(a), c.shape());
        let out = &self.values[a.0] * &*c;
        self.push(
            out,
            Some(Back {
                parents: vec![a.0],
                f: Box::new(move |_, g, _| vec![g * &*c]),
            }),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].mapv(|x| {
            let sig = S::one() / (S::one() + (-x).exp());
            x * sig
        });
        let ai = a.0;
        self.push(
            out,
            Some(Back {
                parents: vec![ai],
                f: Box::new(move |vals, g, _| {
                    let dx = vals[ai].mapv(|x| {
                        let sig = S::one() / (S::one() + (-x).exp());
                        sig * (S::one() + x * (S::one() - sig))
                    });
                    vec![g * &dx]
                }),
            }),
        )
    }

    // ---- linear algebra ----

    /// `a @ b` for 2-d operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = as2(&self.values[a.0]).dot(&as2(&self.values[b.0]));
        let (ai, bi) = (a.0, b.0);
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: vec![ai, bi],
                f: Box::new(move |vals, g, _| {
                    let g2 = as2(g);
                    let da = g2.dot(&as2(&vals[bi]).t());
                    let db = as2(&vals[ai]).t().dot(&g2);
                    vec![da.into_dyn(), db.into_dyn()]
                }),
            }),
        )
    }

    /// `a @ b.T` without materializing the transpose node.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = as2(&self.values[a.0]).dot(&as2(&self.values[b.0]).t());
        let (ai, bi) = (a.0, b.0);
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: vec![ai, bi],
                f: Box::new(move |vals, g, _| {
                    let g2 = as2(g);
                    let da = g2.dot(&as2(&vals[bi]));
                    let db = g2.t().dot(&as2(&vals[ai]));
                    vec![da.into_dyn(), db.into_dyn()]
                }),
            }),
        )
    }

    /// `x @ w + bias`, x: `[T, in]`, w: `[in, out]`, bias: `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let prod = self.matmul(x, w);
        self.add_bias(prod, bias)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b1 = self.values[bias.0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias is 1-d");
        let out = &as2(&self.values[x.0]) + &b1;
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: vec![x.0, bias.0],
                f: Box::new(|_, g, _| {
                    let db = as2(g).sum_axis(Axis(0));
                    vec![g.clone(), db.into_dyn()]
                }),
            }),
        )
    }

    /// Softmax along the last axis of a 2-d value.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = as2(&self.values[a.0]);
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: vec![a.0],
                f: Box::new(|_, g, y| {
                    let y2 = as2(y);
                    let g2 = as2(g);
                    let mut dx = (&g2 * &y2).into_owned();
                    let dot = dx.sum_axis(Axis(1));
                    for (mut row, (yrow, d)) in
                        dx.rows_mut().into_iter().zip(y2.rows().into_iter().zip(dot))
                    {
                        ndarray::Zip::from(&mut row).and(&yrow).for_each(|r, &yv| {
                            *r -= yv * d;
                        });
                    }
                    vec![dx.into_dyn()]
                }),
            }),
        )
    }

    /// Row-wise layer norm without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: S) -> Var {
        let x = as2(&self.values[a.0]);
        let d = S::from_f64(x.ncols() as f64);
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let mu = row.sum() / d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).fold(S::zero(), |a, b| a + b) / d;
            let inv = S::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mu) * inv);
        }
        let ai = a.0;
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: vec![ai],
                f: Box::new(move |vals, g, y| {
                    let x2 = as2(&vals[ai]);
                    let y2 = as2(y);
                    let g2 = as2(g);
                    let d = S::from_f64(x2.ncols() as f64);
                    let mut dx = Array2::<S>::zeros(x2.raw_dim());
                    for i in 0..x2.nrows() {
                        let xr = x2.row(i);
                        let yr = y2.row(i);
                        let gr = g2.row(i);
                        let mu = xr.sum() / d;
                        let var = xr
                            .iter()
                            .map(|&v| (v - mu) * (v - mu))
                            .fold(S::zero(), |a, b| a + b)
                            / d;
                        let inv = S::one() / (var + eps).sqrt();
                        let gmean = gr.sum() / d;
                        let gydot = gr
                            .iter()
                            .zip(yr.iter())
                            .map(|(&a, &b)| a * b)
                            .fold(S::zero(), |a, b| a + b)
                            / d;
                        let mut dr = dx.row_mut(i);
                        for j in 0..xr.len() {
                            dr[j] = inv * (gr[j] - gmean - yr[j] * gydot);
                        }
                    }
                    vec![dx.into_dyn()]
                }),
            }),
        )
    }

    /// Group norm over `[C, F, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, a: Var, groups: usize, gamma: Var, beta: Var, eps: S) -> Var {
        let x = self.values[a.0]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("group_norm input is [C, F, H, W]");
        let c = x.shape()[0];
        assert!(c % groups == 0, "channels divisible by groups");
        let gsize = c / groups;
        let gvec = self.values[gamma.0].clone();
        let bvec = self.values[beta.0].clone();
        let n = S::from_f64((gsize * x.shape()[1] * x.shape()[2] * x.shape()[3]) as f64);

        let mut out = x.to_owned();
        for g in 0..groups {
            let sl = Slice::from(g * gsize..(g + 1) * gsize);
            let view = x.slice_axis(Axis(0), sl);
            let mu = view.sum() / n;
            let var = view
                .iter()
                .map(|&v| (v - mu) * (v - mu))
                .fold(S::zero(), |a, b| a + b)
                / n;
            let inv = S::one() / (var + eps).sqrt();
            let mut oview = out.slice_axis_mut(Axis(0), sl);
            oview.mapv_inplace(|v| (v - mu) * inv);
        }
        // Affine.
        for ch in 0..c {
            let gm = gvec[ch];
            let bt = bvec[ch];
            out.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v * gm + bt);
        }

        let ai = a.0;
        let gi = gamma.0;
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: vec![ai, gi, beta.0],
                f: Box::new(move |vals, g, _| {
                    let x4 = vals[ai].view().into_dimensionality::<Ix4>().unwrap();
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let gamma1 = vals[gi].view().into_dimensionality::<Ix1>().unwrap();
                    let c = x4.shape()[0];
                    let mut dx = ndarray::Array4::<S>::zeros(x4.raw_dim());
                    let mut dgamma = Array1::<S>::zeros(c);
                    let mut dbeta = Array1::<S>::zeros(c);
                    for grp in 0..groups {
                        let sl = Slice::from(grp * gsize..(grp + 1) * gsize);
                        let xv = x4.slice_axis(Axis(0), sl);
                        let gv = g4.slice_axis(Axis(0), sl);
                        let mu = xv.sum() / n;
                        let var = xv
                            .iter()
                            .map(|&v| (v - mu) * (v - mu))
                            .fold(S::zero(), |a, b| a + b)
                            / n;
                        let inv = S::one() / (var + eps).sqrt();
                        // xhat and per-channel reductions.
                        let mut dxhat_sum = S::zero();
                        let mut dxhat_xhat_sum = S::zero();
                        for local_c in 0..gsize {
                            let ch = grp * gsize + local_c;
                            let gm = gamma1[ch];
                            let xc = xv.index_axis(Axis(0), local_c);
                            let gc = gv.index_axis(Axis(0), local_c);
                            for (&xval, &gval) in xc.iter().zip(gc.iter()) {
                                let xhat = (xval - mu) * inv;
                                dgamma[ch] += gval * xhat;
                                dbeta[ch] += gval;
                                let dxhat = gval * gm;
                                dxhat_sum += dxhat;
                                dxhat_xhat_sum += dxhat * xhat;
                            }
                        }
                        let m1 = dxhat_sum / n;
                        let m2 = dxhat_xhat_sum / n;
                        for local_c in 0..gsize {
                            let ch = grp * gsize + local_c;
                            let gm = gamma1[ch];
                            let xc = xv.index_axis(Axis(0), local_c);
                            let gc = gv.index_axis(Axis(0), local_c);
                            let mut dc = dx.index_axis_mut(Axis(0), ch);
                            for ((dval, &xval), &gval) in
                                dc.iter_mut().zip(xc.iter()).zip(gc.iter())
                            {
                                let xhat = (xval - mu) * inv;
                                let dxhat = gval * gm;
                                *dval = inv * (dxhat - m1 - xhat * m2);
                            }
                        }
                    }
                    vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
                }),
            }),
        )
    }

    // ---- shaping ----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let orig: Vec<usize> = self.shape(a).to_vec();
        let out = self.values[a.0]
            .clone()
            .into_shape_with_order(shape)
            .expect("reshape element count");
        self.push(
            out,
            Some(Back {
                parents: vec![a.0],
                f: Box::new(move |_, g, _| {
                    vec![g.clone().into_shape_with_order(orig.clone()).unwrap()]
                }),
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| as2(&self.values[v.0])).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat rows");
        let sizes: Vec<usize> = parts.iter().map(|v| self.shape(*v)[0]).collect();
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: parts.iter().map(|v| v.0).collect(),
                f: Box::new(move |_, g, _| {
                    let g2 = as2(g);
                    let mut outs = Vec::with_capacity(sizes.len());
                    let mut start = 0;
                    for &sz in &sizes {
                        outs.push(g2.slice(ndarray::s![start..start + sz, ..]).to_owned().into_dyn());
                        start += sz;
                    }
                    outs
                }),
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| as2(&self.values[v.0])).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat cols");
        let sizes: Vec<usize> = parts.iter().map(|v| self.shape(*v)[1]).collect();
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: parts.iter().map(|v| v.0).collect(),
                f: Box::new(move |_, g, _| {
                    let g2 = as2(g);
                    let mut outs = Vec::with_capacity(sizes.len());
                    let mut start = 0;
                    for &sz in &sizes {
                        outs.push(g2.slice(ndarray::s![.., start..start + sz]).to_owned().into_dyn());
                        start += sz;
                    }
                    outs
                }),
            }),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let total = self.shape(a)[0];
        let out = as2(&self.values[a.0])
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let cols = out.ncols();
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: vec![a.0],
                f: Box::new(move |_, g, _| {
                    let mut dx = Array2::<S>::zeros((total, cols));
                    dx.slice_mut(ndarray::s![start..start + len, ..])
                        .assign(&as2(g));
                    vec![dx.into_dyn()]
                }),
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, total) = {
            let s = self.shape(a);
            (s[0], s[1])
        };
        let out = as2(&self.values[a.0])
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: vec![a.0],
                f: Box::new(move |_, g, _| {
                    let mut dx = Array2::<S>::zeros((rows, total));
                    dx.slice_mut(ndarray::s![.., start..start + len]).assign(&as2(g));
                    vec![dx.into_dyn()]
                }),
            }),
        )
    }

    // ---- per-frame modulation ----

    /// `out[t] = x[t] * (1 + scale[frame(t)]) + shift[frame(t)]`, where token
    /// rows are frame-major with `tpf` tokens per frame.
    pub fn per_frame_affine(&mut self, x: Var, scale: Var, shift: Var, tpf: usize) -> Var {
        let xv = as2(&self.values[x.0]);
        let sc = as2(&self.values[scale.0]);
        let sh = as2(&self.values[shift.0]);
        let frames = sc.nrows();
        assert_eq!(xv.nrows(), frames * tpf, "token rows = frames * tpf");
        let mut out = xv.to_owned();
        for f in 0..frames {
            let mut chunk = out.slice_mut(ndarray::s![f * tpf..(f + 1) * tpf, ..]);
            for mut row in chunk.rows_mut() {
                ndarray::Zip::from(&mut row)
                    .and(&sc.row(f))
                    .and(&sh.row(f))
                    .for_each(|o, &s1, &s2| *o = *o * (S::one() + s1) + s2);
            }
        }
        let (xi, sci) = (x.0, scale.0);
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: vec![xi, sci, shift.0],
                f: Box::new(move |vals, g, _| {
                    let g2 = as2(g);
                    let xv = as2(&vals[xi]);
                    let sc = as2(&vals[sci]);
                    let mut dx = Array2::<S>::zeros(g2.raw_dim());
                    let mut dscale = Array2::<S>::zeros(sc.raw_dim());
                    let mut dshift = Array2::<S>::zeros(sc.raw_dim());
                    for f in 0..frames {
                        let rows = f * tpf..(f + 1) * tpf;
                        let gc = g2.slice(ndarray::s![rows.clone(), ..]);
                        let xc = xv.slice(ndarray::s![rows.clone(), ..]);
                        let mut dxc = dx.slice_mut(ndarray::s![rows, ..]);
                        for ((grow, xrow), mut drow) in gc
                            .rows()
                            .into_iter()
                            .zip(xc.rows())
                            .zip(dxc.rows_mut())
                        {
                            for j in 0..grow.len() {
                                drow[j] = grow[j] * (S::one() + sc[[f, j]]);
                                dscale[[f, j]] += grow[j] * xrow[j];
                                dshift[[f, j]] += grow[j];
                            }
                        }
                    }
                    vec![dx.into_dyn(), dscale.into_dyn(), dshift.into_dyn()]
                }),
            }),
        )
    }

    /// `out[t] = x[t] * gate[frame(t)]`.
    pub fn per_frame_gate(&mut self, x: Var, gate: Var, tpf: usize) -> Var {
        let xv = as2(&self.values[x.0]);
        let gt = as2(&self.values[gate.0]);
        let frames = gt.nrows();
        assert_eq!(xv.nrows(), frames * tpf);
        let mut out = xv.to_owned();
        for f in 0..frames {
            let mut chunk = out.slice_mut(ndarray::s![f * tpf..(f + 1) * tpf, ..]);
            for mut row in chunk.rows_mut() {
                ndarray::Zip::from(&mut row)
                    .and(&gt.row(f))
                    .for_each(|o, &gv| *o = *o * gv);
            }
        }
        let (xi, gi) = (x.0, gate.0);
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: vec![xi, gi],
                f: Box::new(move |vals, g, _| {
                    let g2 = as2(g);
                    let xv = as2(&vals[xi]);
                    let gt = as2(&vals[gi]);
                    let mut dx = Array2::<S>::zeros(g2.raw_dim());
                    let mut dgate = Array2::<S>::zeros(gt.raw_dim());
                    for f in 0..frames {
                        let rows = f * tpf..(f + 1) * tpf;
                        let gc = g2.slice(ndarray::s![rows.clone(), ..]);
                        let xc = xv.slice(ndarray::s![rows.clone(), ..]);
                        let mut dxc = dx.slice_mut(ndarray::s![rows, ..]);
                        for ((grow, xrow), mut drow) in
                            gc.rows().into_iter().zip(xc.rows()).zip(dxc.rows_mut())
                        {
                            for j in 0..grow.len() {
                                drow[j] = grow[j] * gt[[f, j]];
                                dgate[[f, j]] += grow[j] * xrow[j];
                            }
                        }
                    }
                    vec![dx.into_dyn(), dgate.into_dyn()]
                }),
            }),
        )
    }

    // ---- rotary embedding ----

    /// Rotate interleaved pairs within each head by the table's angles.
    /// `x` is `[T, heads * head_dim]`; `table.cos/sin` are `[T, head_dim/2]`.
    pub fn rope(&mut self, x: Var, table: Rc<RotationTable<S>>, heads: usize) -> Var {
        let xv = as2(&self.values[x.0]);
        let head_dim = xv.ncols() / heads;
        assert_eq!(head_dim % 2, 0);
        assert_eq!(table.cos.nrows(), xv.nrows(), "rope table rows = tokens");
        assert_eq!(table.cos.ncols(), head_dim / 2);
        let mut out = xv.to_owned();
        for h in 0..heads {
            for p in 0..head_dim / 2 {
                let c0 = h * head_dim + 2 * p;
                for t in 0..xv.nrows() {
                    let (c, s) = (table.cos[[t, p]], table.sin[[t, p]]);
                    let x0 = xv[[t, c0]];
                    let x1 = xv[[t, c0 + 1]];
                    out[[t, c0]] = c * x0 - s * x1;
                    out[[t, c0 + 1]] = s * x0 + c * x1;
                }
            }
        }
        let tb = table.clone();
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: vec![x.0],
                f: Box::new(move |_, g, _| {
                    let g2 = as2(g);
                    let mut dx = g2.to_owned();
                    for h in 0..heads {
                        for p in 0..head_dim / 2 {
                            let c0 = h * head_dim + 2 * p;
                            for t in 0..g2.nrows() {
                                let (c, s) = (tb.cos[[t, p]], tb.sin[[t, p]]);
                                let g0 = g2[[t, c0]];
                                let g1 = g2[[t, c0 + 1]];
                                dx[[t, c0]] = c * g0 + s * g1;
                                dx[[t, c0 + 1]] = -s * g0 + c * g1;
                            }
                        }
                    }
                    vec![dx.into_dyn()]
                }),
            }),
        )
    }

    // ---- convolution ----

    /// 3-d convolution over `[C_in, F, H, W]` with kernel 3, padding 1 and a
    /// per-axis stride. Weight is `[C_out, C_in, 3, 3, 3]`, bias `[C_out]`.
    /// im2col buffers are rebuilt per output frame in both passes.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Var, stride: (usize, usize, usize)) -> Var {
        let xv = self.values[x.0]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv3d input [C,F,H,W]");
        let wv = self.values[weight.0]
            .view()
            .into_dimensionality::<Ix5>()
            .expect("conv3d weight [Co,Ci,3,3,3]");
        let bv = self.values[bias.0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv3d bias");
        let (c_out, c_in) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.shape()[0], c_in);
        let (f, h, w) = (xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (st, sh, sw) = stride;
        let fo = (f + 2 - 3) / st + 1;
        let ho = (h + 2 - 3) / sh + 1;
        let wo = (w + 2 - 3) / sw + 1;
        let k = c_in * 27;

        let w2 = wv.to_shape((c_out, k)).unwrap().to_owned();
        let mut out = ndarray::Array4::<S>::zeros((c_out, fo, ho, wo));
        for of in 0..fo {
            let cols = im2col_frame(&xv, of, st, sh, sw, ho, wo);
            let prod = w2.dot(&cols); // [c_out, ho*wo]
            for co in 0..c_out {
                let mut plane = out.index_axis_mut(Axis(0), co);
                let mut fr = plane.index_axis_mut(Axis(0), of);
                for y in 0..ho {
                    for xcol in 0..wo {
                        fr[[y, xcol]] = prod[[co, y * wo + xcol]] + bv[co];
                    }
                }
            }
        }

        let (xi, wi) = (x.0, weight.0);
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: vec![xi, wi, bias.0],
                f: Box::new(move |vals, g, _| {
                    let xv = vals[xi].view().into_dimensionality::<Ix4>().unwrap();
                    let wv = vals[wi].view().into_dimensionality::<Ix5>().unwrap();
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let w2 = wv.to_shape((c_out, k)).unwrap().to_owned();
                    let mut dw = Array2::<S>::zeros((c_out, k));
                    let mut db = Array1::<S>::zeros(c_out);
                    let mut dx = ndarray::Array4::<S>::zeros(xv.raw_dim());
                    for of in 0..fo {
                        let cols = im2col_frame(&xv, of, st, sh, sw, ho, wo);
                        // Gather this frame's output grads as [c_out, ho*wo].
                        let mut gof = Array2::<S>::zeros((c_out, ho * wo));
                        for co in 0..c_out {
                            for y in 0..ho {
                                for xcol in 0..wo {
                                    let v = g4[[co, of, y, xcol]];
                                    gof[[co, y * wo + xcol]] = v;
                                    db[co] += v;
                                }
                            }
                        }
                        dw = dw + gof.dot(&cols.t());
                        let dcols = w2.t().dot(&gof); // [k, ho*wo]
                        col2im_frame(&mut dx, &dcols, of, st, sh, sw, ho, wo);
                    }
                    let dw5 = dw
                        .into_shape_with_order((c_out, c_in, 3, 3, 3))
                        .unwrap();
                    vec![dx.into_dyn(), dw5.into_dyn(), db.into_dyn()]
                }),
            }),
        )
    }

    /// `[C, F, H, W]` feature map to `[F*H*W, C]` token rows (frame-major,
    /// then row-major), matching the patch-token ordering.
    pub fn channels_to_tokens(&mut self, a: Var) -> Var {
        let x = self.values[a.0]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("channels_to_tokens input [C,F,H,W]");
        let (c, f, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let out = x
            .permuted_axes([1, 2, 3, 0])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((f * h * w, c))
            .unwrap();
        self.push(
            out.into_dyn(),
            Some(Back {
                parents: vec![a.0],
                f: Box::new(move |_, g, _| {
                    let g2 = as2(g).to_owned();
                    let g4 = g2.into_shape_with_order((f, h, w, c)).unwrap();
                    let dx = g4
                        .permuted_axes([3, 0, 1, 2])
                        .as_standard_layout()
                        .into_owned();
                    vec![dx.into_dyn()]
                }),
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum();
        let shape: Vec<usize> = self.shape(a).to_vec();
        self.push(
            ndarray::arr0(s).into_dyn(),
            Some(Back {
                parents: vec![a.0],
                f: Box::new(move |_, g, _| {
                    let gv = *g.iter().next().unwrap();
                    vec![ArrayD::from_elem(shape.clone(), gv)]
                }),
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len();
        let s = self.sum_all(a);
        self.scale(s, S::one() / S::from_f64(n as f64))
    }

    /// `sum(x * w)` for a constant weight array.
    pub fn weighted_sum(&mut self, a: Var, weights: Rc<ArrayD<S>>) -> Var {
        assert_eq!(self.shape(a), weights.shape());
        let s = (&self.values[a.0] * &*weights).sum();
        self.push(
            ndarray::arr0(s).into_dyn(),
            Some(Back {
                parents: vec![a.0],
                f: Box::new(move |_, g, _| {
                    let gv = *g.iter().next().unwrap();
                    vec![weights.mapv(|w| w * gv)]
                }),
            }),
        )
    }

    // ---- backward ----

    /// Backpropagate from a scalar node; returns gradients for every node
    /// that received one (leaves included).
    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(self.values[loss.0].len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<ArrayD<S>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.values[loss.0].raw_dim(), S::one()));
        for id in (0..=loss.0).rev() {
            let Some(back) = &self.backs[id] else {
                continue; // leaf keeps its gradient
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let contribs = (back.f)(&self.values, &g, &self.values[id]);
            debug_assert_eq!(contribs.len(), back.parents.len());
            for (pid, c) in back.parents.iter().zip(contribs) {
                match &mut grads[*pid] {
                    Some(acc) => *acc += &c,
                    slot => *slot = Some(c),
                }
            }
        }
        Grads { g: grads }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Build the im2col matrix `[C_in*27, Ho*Wo]` for one output frame.
fn im2col_frame<S: Scalar>(
    x: &ndarray::ArrayView4<'_, S>,
    of: usize,
    st: usize,
    sh: usize,
    sw: usize,
    ho: usize,
    wo: usize,
) -> Array2<S> {
    let (c_in, f, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut cols = Array2::<S>::zeros((c_in * 27, ho * wo));
    for ci in 0..c_in {
        for dt in 0..3usize {
            let sf = (of * st + dt) as isize - 1;
            if sf < 0 || sf >= f as isize {
                continue;
            }
            let plane = x.index_axis(Axis(0), ci);
            let frame = plane.index_axis(Axis(0), sf as usize);
            for dy in 0..3usize {
                for dx in 0..3usize {
                    let row = ((ci * 3 + dt) * 3 + dy) * 3 + dx;
                    let mut out_row = cols.row_mut(row);
                    for y in 0..ho {
                        let sy = (y * sh + dy) as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xcol in 0..wo {
                            let sx = (xcol * sw + dx) as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            out_row[y * wo + xcol] = frame[[sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the column gradients of one output frame back into `dx`.
fn col2im_frame<S: Scalar>(
    dx: &mut ndarray::Array4<S>,
    dcols: &Array2<S>,
    of: usize,
    st: usize,
    sh: usize,
    sw: usize,
    ho: usize,
    wo: usize,
) {
    let (c_in, f, h, w) = (
        dx.shape()[0],
        dx.shape()[1],
        dx.shape()[2],
        dx.shape()[3],
    );
    for ci in 0..c_in {
        for dt in 0..3usize {
            let sf = (of * st + dt) as isize - 1;
            if sf < 0 || sf >= f as isize {
                continue;
            }
            for dy in 0..3usize {
                for dx_k in 0..3usize {
                    let row = ((ci * 3 + dt) * 3 + dy) * 3 + dx_k;
                    let drow = dcols.row(row);
                    for y in 0..ho {
                        let sy = (y * sh + dy) as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xcol in 0..wo {
                            let sx = (xcol * sw + dx_k) as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dx[[ci, sf as usize, sy as usize, sx as usize]] +=
                                drow[y * wo + xcol];
                        }
                    }
                }
            }
        }
    }
}
