use std::rc::Rc;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use super::tensor::{broadcast_index, broadcast_shape, Tensor};
use super::Var;
use crate::error::{invalid, Result};

fn shape_err<T>(op: &str, a: &[usize], b: &[usize]) -> Result<T> {
    invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (if d == 0 { 0 } else { n / d }, d)
}

impl<'t> Var<'t> {
    fn binary(
        self,
        o: Var<'t>,
        op: &str,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64) -> (f64, f64),
    ) -> Result<Var<'t>> {
        let a = self.value();
        let b = o.value();
        let shape = match broadcast_shape(a.shape(), b.shape()) {
            Ok(s) => s,
            Err(_) => return shape_err(op, a.shape(), b.shape()),
        };
        let ia = broadcast_index(&shape, a.shape());
        let ib = broadcast_index(&shape, b.shape());
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let data = (0..n).map(|i| f(ad[ia.get(i)], bd[ib.get(i)])).collect();
        let out = Tensor::from_parts(shape, data);
        Ok(self.tape.record(
            out,
            &[self, o],
            Box::new(move |g| {
                let mut ga = Tensor::zeros(a.shape());
                let mut gb = Tensor::zeros(b.shape());
                let (ad, bd) = (a.data(), b.data());
                {
                    let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                    for (i, gi) in g.data().iter().enumerate() {
                        let (ja, jb) = (ia.get(i), ib.get(i));
                        let (da, db) = df(ad[ja], bd[jb]);
                        gad[ja] += gi * da;
                        gbd[jb] += gi * db;
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Elementwise map; `df(x, y)` gives `dy/dx` from input and output.
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.tape.record(
            (*y).clone(),
            &[self],
            Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(yc.data()))
                    .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect();
                vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
            }),
        )
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, "add", |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, "sub", |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, "mul", |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(self, o: Var<'t>) -> Result<Var<'t>> {
        self.binary(o, "div", |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(stable_sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(stable_softplus, |x, _| stable_sigmoid(x))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.len() {
            return shape_err("reshape", x.shape(), shape);
        }
        let out = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        let orig = x.shape().to_vec();
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g| vec![Some(Tensor::from_parts(orig.clone(), g.data().to_vec()))]),
        ))
    }

    /// Matrix product of two 2-d tensors.
    pub fn matmul(self, o: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), o.value());
        if a.ndim() != 2 || b.ndim() != 2 {
            return shape_err("matmul", a.shape(), b.shape());
        }
        self.batched_matmul(o)
    }

    /// `a[..., M, K] · b[..., K, N]`. Batch dimensions must be equal, or `b`
    /// may be 2-d and shared across the batch.
    pub fn batched_matmul(self, o: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), o.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("batched_matmul", sa, sb);
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared = sb.len() == 2;
        if k != k2 || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return shape_err("batched_matmul", sa, sb);
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (a.data(), b.data());
        for bi in 0..batch {
            let ao = bi * m * k;
            let bo = if shared { 0 } else { bi * k * n };
            let oo = bi * m * n;
            for i in 0..m {
                let orow = &mut out[oo + i * n..oo + (i + 1) * n];
                for p in 0..k {
                    let av = ad[ao + i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[bo + p * n..bo + (p + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let out = Tensor::from_parts(shape, out);
        Ok(self.tape.record(
            out,
            &[self, o],
            Box::new(move |g| {
                let (ad, bd, gd) = (a.data(), b.data(), g.data());
                let mut ga = vec![0.0; ad.len()];
                let mut gb = vec![0.0; bd.len()];
                for bi in 0..batch {
                    let ao = bi * m * k;
                    let bo = if shared { 0 } else { bi * k * n };
                    let go = bi * m * n;
                    for i in 0..m {
                        let grow = &gd[go + i * n..go + (i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[bo + p * n..bo + (p + 1) * n];
                            let mut s = 0.0;
                            for (gv, bv) in grow.iter().zip(brow) {
                                s += gv * bv;
                            }
                            ga[ao + i * k + p] += s;
                            let av = ad[ao + i * k + p];
                            if av != 0.0 {
                                let gbrow = &mut gb[bo + p * n..bo + (p + 1) * n];
                                for (o, gv) in gbrow.iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(a.shape().to_vec(), ga)),
                    Some(Tensor::from_parts(b.shape().to_vec(), gb)),
                ]
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 {
            return invalid(format!("transpose_last2 needs ndim >= 2, got shape {s:?}"));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = x.len() / (r * c).max(1);
        let tr = move |src: &[f64], rows: usize, cols: usize| {
            let mut out = vec![0.0; src.len()];
            for b in 0..batch {
                let o = b * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        out[o + j * rows + i] = src[o + i * cols + j];
                    }
                }
            }
            out
        };
        let mut shape = s.to_vec();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let out = Tensor::from_parts(shape, tr(x.data(), r, c));
        let orig = s.to_vec();
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g| vec![Some(Tensor::from_parts(orig.clone(), tr(g.data(), c, r)))]),
        ))
    }

    /// Per-node typed product: `out[.., n, :] = x[.., n, :] · w[class[n]]`
    /// with `x[.., N, Din]`, `w[C, Din, Dout]`.
    pub fn typed_matmul(self, w: Var<'t>, classes: Arc<Vec<usize>>) -> Result<Var<'t>> {
        let (x, wt) = (self.value(), w.value());
        let (sx, sw) = (x.shape(), wt.shape());
        if sx.len() < 2 || sw.len() != 3 {
            return shape_err("typed_matmul", sx, sw);
        }
        let (nn, din) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let (nc, din2, dout) = (sw[0], sw[1], sw[2]);
        if din != din2 || classes.len() != nn {
            return shape_err("typed_matmul", sx, sw);
        }
        if let Some(c) = classes.iter().find(|&&c| c >= nc) {
            return invalid(format!("typed_matmul: class {c} out of range for {nc} classes"));
        }
        let rows = x.len() / (nn * din).max(1);
        let mut shape = sx[..sx.len() - 1].to_vec();
        shape.push(dout);
        let mut out = vec![0.0; rows * nn * dout];
        let (xd, wd) = (x.data(), wt.data());
        for r in 0..rows {
            for node in 0..nn {
                let wo = classes[node] * din * dout;
                let xo = (r * nn + node) * din;
                let oo = (r * nn + node) * dout;
                let orow = &mut out[oo..oo + dout];
                for i in 0..din {
                    let xv = xd[xo + i];
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wd[wo + i * dout..wo + (i + 1) * dout];
                    for (o, wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let out = Tensor::from_parts(shape, out);
        Ok(self.tape.record(
            out,
            &[self, w],
            Box::new(move |g| {
                let (xd, wd, gd) = (x.data(), wt.data(), g.data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                for r in 0..rows {
                    for node in 0..nn {
                        let wo = classes[node] * din * dout;
                        let xo = (r * nn + node) * din;
                        let go = (r * nn + node) * dout;
                        let grow = &gd[go..go + dout];
                        for i in 0..din {
                            let wrow = &wd[wo + i * dout..wo + (i + 1) * dout];
                            let mut s = 0.0;
                            for (gv, wv) in grow.iter().zip(wrow) {
                                s += gv * wv;
                            }
                            gx[xo + i] += s;
                            let xv = xd[xo + i];
                            if xv != 0.0 {
                                let gwrow = &mut gw[wo + i * dout..wo + (i + 1) * dout];
                                for (o, gv) in gwrow.iter_mut().zip(grow) {
                                    *o += xv * gv;
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                    Some(Tensor::from_parts(wt.shape().to_vec(), gw)),
                ]
            }),
        ))
    }

    /// Node mixing: `out[.., i, :] = Σ_j g[i, j] · y[.., j, :]` with
    /// `self = g[N, N]` and `y[.., N, D]`.
    pub fn graph_mix(self, y: Var<'t>) -> Result<Var<'t>> {
        let (gm, yv) = (self.value(), y.value());
        let (sg, sy) = (gm.shape(), yv.shape());
        if sg.len() != 2 || sg[0] != sg[1] || sy.len() < 2 || sy[sy.len() - 2] != sg[0] {
            return shape_err("graph_mix", sg, sy);
        }
        let nn = sg[0];
        let d = sy[sy.len() - 1];
        let rows = yv.len() / (nn * d).max(1);
        let (gd, yd) = (gm.data(), yv.data());
        let mut out = vec![0.0; yv.len()];
        for r in 0..rows {
            let base = r * nn * d;
            for i in 0..nn {
                for j in 0..nn {
                    let c = gd[i * nn + j];
                    if c == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        out[base + i * d + k] += c * yd[base + j * d + k];
                    }
                }
            }
        }
        let out = Tensor::from_parts(sy.to_vec(), out);
        Ok(self.tape.record(
            out,
            &[self, y],
            Box::new(move |g| {
                let (gd, yd, od) = (gm.data(), yv.data(), g.data());
                let mut gg = vec![0.0; gd.len()];
                let mut gy = vec![0.0; yd.len()];
                for r in 0..rows {
                    let base = r * nn * d;
                    for i in 0..nn {
                        let orow = &od[base + i * d..base + (i + 1) * d];
                        for j in 0..nn {
                            let yrow = &yd[base + j * d..base + (j + 1) * d];
                            let mut s = 0.0;
                            for (a, b) in orow.iter().zip(yrow) {
                                s += a * b;
                            }
                            gg[i * nn + j] += s;
                            let c = gd[i * nn + j];
                            if c != 0.0 {
                                for k in 0..d {
                                    gy[base + j * d + k] += c * orow[k];
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(gm.shape().to_vec(), gg)),
                    Some(Tensor::from_parts(yv.shape().to_vec(), gy)),
                ]
            }),
        ))
    }

    /// Gathers rows along axis 0; repeated indices accumulate gradient.
    pub fn index_select0(self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.is_empty() {
            return invalid("index_select0 on a scalar");
        }
        if let Some(i) = idx.iter().find(|&&i| i >= s[0]) {
            return invalid(format!("index_select0: index {i} out of range for shape {s:?}"));
        }
        let inner = x.len() / s[0].max(1);
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let idx = idx.to_vec();
        let out = Tensor::from_parts(shape, data);
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; x.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..inner {
                        gx[i * inner + k] += g.data()[r * inner + k];
                    }
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
            }),
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return invalid("concat of zero tensors");
        };
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let s0 = vals[0].shape().to_vec();
        if axis >= s0.len() {
            return invalid(format!("concat axis {axis} out of range for shape {s0:?}"));
        }
        for v in &vals[1..] {
            let s = v.shape();
            if s.len() != s0.len() || s.iter().zip(&s0).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return shape_err("concat", &s0, s);
            }
        }
        let outer: usize = s0[..axis].iter().product();
        let after: usize = s0[axis + 1..].iter().product();
        let widths: Vec<usize> = vals.iter().map(|v| v.shape()[axis] * after).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = s0.clone();
        shape[axis] = vals.iter().map(|v| v.shape()[axis]).sum();
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        let out = Tensor::from_parts(shape, data);
        Ok(first.tape.record(
            out,
            parts,
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(outer * w)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gi, w) in grads.iter_mut().zip(&widths) {
                        gi.extend_from_slice(&g.data()[off..off + w]);
                        off += w;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .map(|(d, s)| Some(Tensor::from_parts(s.clone(), d)))
                    .collect()
            }),
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return invalid(format!("slice axis {axis} [{start}, {}) out of range for shape {s:?}", start + len));
        }
        let outer: usize = s[..axis].iter().product();
        let after: usize = s[axis + 1..].iter().product();
        let full = s[axis] * after;
        let (from, w) = (start * after, len * after);
        let mut data = Vec::with_capacity(outer * w);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[o * full + from..o * full + from + w]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let out = Tensor::from_parts(shape, data);
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * full];
                for o in 0..outer {
                    gx[o * full + from..o * full + from + w].copy_from_slice(&g.data()[o * w..(o + 1) * w]);
                }
                vec![Some(Tensor::from_parts(s.clone(), gx))]
            }),
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let out = Tensor::scalar(x.sum());
        let shape = x.shape().to_vec();
        self.tape.record(out, &[self], Box::new(move |g| vec![Some(Tensor::full(&shape, g.item()))]))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if axis >= s.len() {
            return invalid(format!("sum_axis {axis} out of range for shape {s:?}"));
        }
        let outer: usize = s[..axis].iter().product();
        let after: usize = s[axis + 1..].iter().product();
        let d = s[axis];
        let mut data = vec![0.0; outer * after];
        for o in 0..outer {
            for k in 0..d {
                for a in 0..after {
                    data[o * after + a] += x.data()[(o * d + k) * after + a];
                }
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let out = Tensor::from_parts(shape, data);
        Ok(self.tape.record(
            out,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * d * after];
                for o in 0..outer {
                    for k in 0..d {
                        gx[(o * d + k) * after..(o * d + k + 1) * after]
                            .copy_from_slice(&g.data()[o * after..(o + 1) * after]);
                    }
                }
                vec![Some(Tensor::from_parts(s.clone(), gx))]
            }),
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let d = *self.shape().get(axis).unwrap_or(&1);
        Ok(self.sum_axis(axis)?.scale(1.0 / d.max(1) as f64))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let (rows, d) = split_last(x.shape());
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..d {
                y[r * d + k] = (row[k] - m).exp();
                s += y[r * d + k];
            }
            for k in 0..d {
                y[r * d + k] /= s;
            }
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let yc = y.clone();
        self.tape.record(
            (*y).clone(),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; yc.len()];
                for r in 0..rows {
                    let yr = &yc.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        gx[r * d + k] = yr[k] * (gr[k] - dot);
                    }
                }
                vec![Some(Tensor::from_parts(yc.shape().to_vec(), gx))]
            }),
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let x = self.value();
        let (rows, d) = split_last(x.shape());
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let lse = lse_row(row);
            for k in 0..d {
                y[r * d + k] = row[k] - lse;
            }
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let yc = y.clone();
        self.tape.record(
            (*y).clone(),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; yc.len()];
                for r in 0..rows {
                    let yr = &yc.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let gs: f64 = gr.iter().sum();
                    for k in 0..d {
                        gx[r * d + k] = gr[k] - yr[k].exp() * gs;
                    }
                }
                vec![Some(Tensor::from_parts(yc.shape().to_vec(), gx))]
            }),
        )
    }

    /// `ln Σ exp` over the last axis, removing it.
    pub fn log_sum_exp(self) -> Var<'t> {
        let x = self.value();
        let (rows, d) = split_last(x.shape());
        let out: Vec<f64> = (0..rows).map(|r| lse_row(&x.data()[r * d..(r + 1) * d])).collect();
        let mut shape = x.shape().to_vec();
        shape.pop();
        let outc = out.clone();
        self.tape.record(
            Tensor::from_parts(shape, out),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; x.len()];
                for r in 0..rows {
                    let l = outc[r];
                    for k in 0..d {
                        let p = if l.is_finite() { (x.data()[r * d + k] - l).exp() } else { 0.0 };
                        gx[r * d + k] = g.data()[r] * p;
                    }
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
            }),
        )
    }

    /// Divides each last-axis vector by its Euclidean norm.
    pub fn normalize_last(self) -> Var<'t> {
        let x = self.value();
        let (rows, d) = split_last(x.shape());
        let norms: Vec<f64> = (0..rows)
            .map(|r| x.data()[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let y: Vec<f64> = (0..rows * d).map(|i| x.data()[i] / norms[i / d.max(1)]).collect();
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let yc = y.clone();
        self.tape.record(
            (*y).clone(),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; yc.len()];
                for r in 0..rows {
                    let yr = &yc.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        gx[r * d + k] = (gr[k] - yr[k] * dot) / norms[r];
                    }
                }
                vec![Some(Tensor::from_parts(yc.shape().to_vec(), gx))]
            }),
        )
    }

    /// Hamilton product of `[.., 4]` quaternion tensors of equal shape.
    pub fn quat_mul(self, o: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), o.value());
        if a.shape() != b.shape() || a.shape().last() != Some(&4) {
            return shape_err("quat_mul", a.shape(), b.shape());
        }
        let rows = a.len() / 4;
        let mut out = vec![0.0; a.len()];
        for r in 0..rows {
            let p = hprod(quat_at(a.data(), r), quat_at(b.data(), r));
            out[r * 4..r * 4 + 4].copy_from_slice(&p);
        }
        let out = Tensor::from_parts(a.shape().to_vec(), out);
        Ok(self.tape.record(
            out,
            &[self, o],
            Box::new(move |g| {
                let mut ga = vec![0.0; a.len()];
                let mut gb = vec![0.0; b.len()];
                for r in 0..rows {
                    let gq = quat_at(g.data(), r);
                    let qa = quat_at(a.data(), r);
                    let qb = quat_at(b.data(), r);
                    ga[r * 4..r * 4 + 4].copy_from_slice(&hprod(gq, conj(qb)));
                    gb[r * 4..r * 4 + 4].copy_from_slice(&hprod(conj(qa), gq));
                }
                vec![
                    Some(Tensor::from_parts(a.shape().to_vec(), ga)),
                    Some(Tensor::from_parts(b.shape().to_vec(), gb)),
                ]
            }),
        ))
    }

    /// Quaternion conjugate over the last axis of size 4.
    pub fn quat_conj(self) -> Result<Var<'t>> {
        let c = self.tape.constant(Tensor::from_parts(vec![4], vec![1.0, -1.0, -1.0, -1.0]));
        self.mul(c)
    }

    /// Rotation matrices `[.., 3, 3]` of unit quaternions `[.., 4]`.
    pub fn quat_to_rotmat(self) -> Result<Var<'t>> {
        let q = self.value();
        if q.shape().last() != Some(&4) {
            return invalid(format!("quat_to_rotmat needs last dim 4, got shape {:?}", q.shape()));
        }
        let rows = q.len() / 4;
        let mut out = vec![0.0; rows * 9];
        for r in 0..rows {
            let [w, x, y, z] = quat_at(q.data(), r);
            let m = [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ];
            out[r * 9..r * 9 + 9].copy_from_slice(&m);
        }
        let mut shape = q.shape().to_vec();
        shape.pop();
        shape.extend([3, 3]);
        Ok(self.tape.record(
            Tensor::from_parts(shape, out),
            &[self],
            Box::new(move |g| {
                let mut gq = vec![0.0; q.len()];
                for r in 0..rows {
                    let [w, x, y, z] = quat_at(q.data(), r);
                    let gm = &g.data()[r * 9..r * 9 + 9];
                    let (g00, g01, g02, g10, g11, g12, g20, g21, g22) =
                        (gm[0], gm[1], gm[2], gm[3], gm[4], gm[5], gm[6], gm[7], gm[8]);
                    let gw = 2.0 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21);
                    let gx = 2.0 * (y * g01 + z * g02 + y * g10 - 2.0 * x * g11 - w * g12 + z * g20 + w * g21 - 2.0 * x * g22);
                    let gy = 2.0 * (-2.0 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2.0 * y * g22);
                    let gz = 2.0 * (-2.0 * z * g00 - w * g01 + x * g02 + w * g10 - 2.0 * z * g11 + y * g12 + x * g20 + y * g21);
                    gq[r * 4..r * 4 + 4].copy_from_slice(&[gw, gx, gy, gz]);
                }
                vec![Some(Tensor::from_parts(q.shape().to_vec(), gq))]
            }),
        ))
    }

    /// Logarithm map of unit quaternions `[.., 4]` to tangent vectors
    /// `[.., 3]`, on the principal branch (negated when `w < 0`).
    pub fn quat_log(self) -> Result<Var<'t>> {
        let q = self.value();
        if q.shape().last() != Some(&4) {
            return invalid(format!("quat_log needs last dim 4, got shape {:?}", q.shape()));
        }
        let rows = q.len() / 4;
        let mut out = vec![0.0; rows * 3];
        for r in 0..rows {
            let (_, w, v) = log_parts(quat_at(q.data(), r));
            let (s, _, _) = log_scale(w, v.norm());
            let e = v * s;
            out[r * 3..r * 3 + 3].copy_from_slice(e.as_slice());
        }
        let mut shape = q.shape().to_vec();
        shape.pop();
        shape.push(3);
        Ok(self.tape.record(
            Tensor::from_parts(shape, out),
            &[self],
            Box::new(move |g| {
                let mut gq = vec![0.0; q.len()];
                for r in 0..rows {
                    let (sign, w, v) = log_parts(quat_at(q.data(), r));
                    let (s, ds_dn_over_n, ds_dw) = log_scale(w, v.norm());
                    let ge = Vector3::new(g.data()[r * 3], g.data()[r * 3 + 1], g.data()[r * 3 + 2]);
                    // e is evaluated at the flipped quaternion sign·q
                    let gv = (ge * s + v * (ds_dn_over_n * v.dot(&ge))) * sign;
                    let gw = ds_dw * v.dot(&ge) * sign;
                    gq[r * 4..r * 4 + 4].copy_from_slice(&[gw, gv.x, gv.y, gv.z]);
                }
                vec![Some(Tensor::from_parts(q.shape().to_vec(), gq))]
            }),
        ))
    }

    /// `eᵀ Σ⁻¹ e` for `self = Σ[.., 3, 3]` and `e[.., 3]`.
    pub fn mahalanobis3(self, e: Var<'t>) -> Result<Var<'t>> {
        let (c, ev) = (self.value(), e.value());
        let (sc, se) = (c.shape(), ev.shape());
        if sc.len() < 2 || sc[sc.len() - 2..] != [3, 3] || se.last() != Some(&3) || sc[..sc.len() - 2] != se[..se.len() - 1] {
            return shape_err("mahalanobis3", sc, se);
        }
        let rows = ev.len() / 3;
        let mut invs = Vec::with_capacity(rows);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let m = mat3_at(c.data(), r);
            let inv = m.try_inverse().unwrap_or_else(|| Matrix3::from_element(f64::NAN));
            let x = vec3_at(ev.data(), r);
            out[r] = x.dot(&(inv * x));
            invs.push(inv);
        }
        let mut shape = se.to_vec();
        shape.pop();
        Ok(self.tape.record(
            Tensor::from_parts(shape, out),
            &[self, e],
            Box::new(move |g| {
                let mut gc = vec![0.0; c.len()];
                let mut ge = vec![0.0; ev.len()];
                for r in 0..rows {
                    let inv = invs[r];
                    let x = vec3_at(ev.data(), r);
                    let gr = g.data()[r];
                    let a = inv * x;
                    let b = inv.transpose() * x;
                    let dx = (a + b) * gr;
                    ge[r * 3..r * 3 + 3].copy_from_slice(dx.as_slice());
                    let dm = -(b * a.transpose()) * gr;
                    for i in 0..3 {
                        for j in 0..3 {
                            gc[r * 9 + i * 3 + j] = dm[(i, j)];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(c.shape().to_vec(), gc)),
                    Some(Tensor::from_parts(ev.shape().to_vec(), ge)),
                ]
            }),
        ))
    }

    /// `ln |det Σ|` for `Σ[.., 3, 3]`.
    pub fn logdet3(self) -> Result<Var<'t>> {
        let c = self.value();
        let sc = c.shape();
        if sc.len() < 2 || sc[sc.len() - 2..] != [3, 3] {
            return invalid(format!("logdet3 needs [.., 3, 3], got shape {sc:?}"));
        }
        let rows = c.len() / 9;
        let mut out = vec![0.0; rows];
        let mut invt = Vec::with_capacity(rows);
        for r in 0..rows {
            let m = mat3_at(c.data(), r);
            out[r] = m.determinant().abs().ln();
            invt.push(m.try_inverse().unwrap_or_else(|| Matrix3::from_element(f64::NAN)).transpose());
        }
        let shape = sc[..sc.len() - 2].to_vec();
        Ok(self.tape.record(
            Tensor::from_parts(shape, out),
            &[self],
            Box::new(move |g| {
                let mut gc = vec![0.0; c.len()];
                for r in 0..rows {
                    for i in 0..3 {
                        for j in 0..3 {
                            gc[r * 9 + i * 3 + j] = g.data()[r] * invt[r][(i, j)];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(c.shape().to_vec(), gc))]
            }),
        ))
    }

    /// Lower-triangular `[.., 3, 3]` from `[.., 6]` laid out as
    /// `(l00, l11, l22, l10, l20, l21)`.
    pub fn lower_tri3(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().last() != Some(&6) {
            return invalid(format!("lower_tri3 needs last dim 6, got shape {:?}", x.shape()));
        }
        const POS: [usize; 6] = [0, 4, 8, 3, 6, 7];
        let rows = x.len() / 6;
        let mut out = vec![0.0; rows * 9];
        for r in 0..rows {
            for (k, p) in POS.iter().enumerate() {
                out[r * 9 + p] = x.data()[r * 6 + k];
            }
        }
        let mut shape = x.shape().to_vec();
        shape.pop();
        shape.extend([3, 3]);
        Ok(self.tape.record(
            Tensor::from_parts(shape, out),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; x.len()];
                for r in 0..rows {
                    for (k, p) in POS.iter().enumerate() {
                        gx[r * 6 + k] = g.data()[r * 9 + p];
                    }
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
            }),
        ))
    }
}

fn lse_row(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn quat_at(d: &[f64], r: usize) -> [f64; 4] {
    [d[r * 4], d[r * 4 + 1], d[r * 4 + 2], d[r * 4 + 3]]
}

fn vec3_at(d: &[f64], r: usize) -> Vector3<f64> {
    Vector3::new(d[r * 3], d[r * 3 + 1], d[r * 3 + 2])
}

fn mat3_at(d: &[f64], r: usize) -> Matrix3<f64> {
    Matrix3::from_row_slice(&d[r * 9..r * 9 + 9])
}

fn conj(q: [f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

fn hprod(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    crate::rotmath::hamilton(a, b)
}

/// Hemisphere sign and flipped `(w, v)`.
fn log_parts(q: [f64; 4]) -> (f64, f64, Vector3<f64>) {
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    (sign, sign * q[0], Vector3::new(sign * q[1], sign * q[2], sign * q[3]))
}

/// `s = 2 atan2(n, w) / n` with `(ds/dn)/n` and `ds/dw`.
fn log_scale(w: f64, n: f64) -> (f64, f64, f64) {
    let r2 = n * n + w * w;
    let ds_dw = -2.0 / r2;
    if n < 1e-4 {
        let x2 = n * n / (w * w);
        let s = 2.0 / w * (1.0 - x2 / 3.0 + x2 * x2 / 5.0);
        let dn = -4.0 / (3.0 * w * w * w) + 8.0 * n * n / (5.0 * w.powi(5));
        (s, dn, ds_dw)
    } else {
        let s = 2.0 * n.atan2(w) / n;
        (s, (2.0 * w / r2 - s) / (n * n), ds_dw)
    }
}
