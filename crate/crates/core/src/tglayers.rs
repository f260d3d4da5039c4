//! Typed-graph layers.
//!
//! Every node carries a semantic class; nodes of the same class share one
//! weight matrix. A learned node-to-node influence matrix `G` mixes the
//! per-node projections: `f(x) = G (W·x) + b`.
//!
//! The recurrent cell adds a temporally additive influence `G_ta`, so step
//! `t` (counted from 0) uses `G_t = G_0 + t·G_ta`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;

use crate::diffcore::{BoundParams, ParamId, ParamStore, Tensor, Var};
use crate::error::{invalid, Result};

/// Node → class assignment, with class labels remapped to `0..C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    labels: Vec<u32>,
    dense: Arc<Vec<usize>>,
    num_classes: usize,
}

impl ClassMap {
    /// Labels may be arbitrary integers; distinct labels are numbered in
    /// ascending order.
    pub fn new(labels: &[u32]) -> Result<Self> {
        if labels.is_empty() {
            return invalid("class map needs at least one node");
        }
        let mut ids = BTreeMap::new();
        for l in labels {
            ids.insert(*l, 0usize);
        }
        for (i, v) in ids.values_mut().enumerate() {
            *v = i;
        }
        let dense: Vec<usize> = labels.iter().map(|l| ids[l]).collect();
        Ok(Self { labels: labels.to_vec(), dense: Arc::new(dense), num_classes: ids.len() })
    }

    /// Every node in its own class.
    pub fn untyped(nodes: usize) -> Result<Self> {
        Self::new(&(0..nodes as u32).collect::<Vec<_>>())
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn dense(&self) -> &Arc<Vec<usize>> {
        &self.dense
    }

    pub fn class_of(&self, node: usize) -> usize {
        self.dense[node]
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn identity(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
}

/// `G (W·x) + b_class` over node features `x[.., N, Din]`.
#[derive(Clone, Debug)]
pub struct TgLinear {
    pub w: ParamId,
    pub b: ParamId,
    pub g: ParamId,
    classes: ClassMap,
    din: usize,
    dout: usize,
}

impl TgLinear {
    /// Registers `{name}.w [C, Din, Dout]`, `{name}.b [C, Dout]` and
    /// `{name}.g [N, N]`. Weights are `U(±1/√Din)`, `G` is identity, bias 0.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        classes: &ClassMap,
        din: usize,
        dout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let c = classes.num_classes();
        let bound = 1.0 / (din as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, &[c, din, dout], bound));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c, dout]));
        let g = store.add(format!("{name}.g"), identity(classes.num_nodes()));
        Self { w, b, g, classes: classes.clone(), din, dout }
    }

    pub fn din(&self) -> usize {
        self.din
    }

    pub fn dout(&self) -> usize {
        self.dout
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.typed_matmul(p.var(self.w), self.classes.dense().clone())?;
        let y = p.var(self.g).graph_mix(y)?;
        let b = p.var(self.b).index_select0(self.classes.dense())?;
        y.add(b)
    }

    /// Parameters excluding the influence matrix.
    pub fn typed_param_count(classes: usize, din: usize, dout: usize) -> usize {
        classes * (din * dout + dout)
    }

    /// All parameters including `G`.
    pub fn param_count(classes: usize, nodes: usize, din: usize, dout: usize) -> usize {
        Self::typed_param_count(classes, din, dout) + nodes * nodes
    }
}

/// Typed-graph GRU cell.
///
/// `r = σ(G W_r x + G U_r h + b_r)`, `z = σ(G W_z x + G U_z h + b_z)`,
/// `n = tanh(G W_n x + r∘(G U_n h) + b_n)`, `h' = (1−z)∘n + z∘h`.
/// Gate weights are stored concatenated as `[r | z | n]` along the output
/// axis.
#[derive(Clone, Debug)]
pub struct TgGru {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub g0: ParamId,
    pub gta: ParamId,
    classes: ClassMap,
    din: usize,
    dh: usize,
}

impl TgGru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        classes: &ClassMap,
        din: usize,
        dh: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let c = classes.num_classes();
        let n = classes.num_nodes();
        let w = store.add(format!("{name}.w"), uniform(rng, &[c, din, 3 * dh], 1.0 / (din as f64).sqrt()));
        let u = store.add(format!("{name}.u"), uniform(rng, &[c, dh, 3 * dh], 1.0 / (dh as f64).sqrt()));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c, 3 * dh]));
        let g0 = store.add(format!("{name}.g0"), identity(n));
        let gta = store.add(format!("{name}.gta"), Tensor::zeros(&[n, n]));
        Self { w, u, b, g0, gta, classes: classes.clone(), din, dh }
    }

    pub fn din(&self) -> usize {
        self.din
    }

    pub fn hidden(&self) -> usize {
        self.dh
    }

    /// Influence matrix for step `t`.
    pub fn influence<'t>(&self, p: &BoundParams<'t>, t: usize) -> Result<Var<'t>> {
        let g0 = p.var(self.g0);
        if t == 0 {
            return Ok(g0);
        }
        g0.add(p.var(self.gta).scale(t as f64))
    }

    /// One step from `x[.., N, Din]`, `h[.., N, Dh]` at step index `t`.
    pub fn step<'t>(&self, p: &BoundParams<'t>, x: Var<'t>, h: Var<'t>, t: usize) -> Result<Var<'t>> {
        let g = self.influence(p, t)?;
        self.step_with(p, x, h, g)
    }

    fn step_with<'t>(&self, p: &BoundParams<'t>, x: Var<'t>, h: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
        let cls = self.classes.dense();
        let last = x.shape().len() - 1;
        let gx = g.graph_mix(x.typed_matmul(p.var(self.w), cls.clone())?)?;
        let gh = g.graph_mix(h.typed_matmul(p.var(self.u), cls.clone())?)?;
        let b = p.var(self.b).index_select0(cls)?;
        let dh = self.dh;
        let pre_rz = gx.slice(last, 0, 2 * dh)?.add(gh.slice(last, 0, 2 * dh)?)?.add(b.slice(1, 0, 2 * dh)?)?;
        let rz = pre_rz.sigmoid();
        let r = rz.slice(last, 0, dh)?;
        let z = rz.slice(last, dh, dh)?;
        let n = gx
            .slice(last, 2 * dh, dh)?
            .add(r.mul(gh.slice(last, 2 * dh, dh)?)?)?
            .add(b.slice(1, 2 * dh, dh)?)?
            .tanh();
        z.neg().add_scalar(1.0).mul(n)?.add(z.mul(h)?)
    }

    /// Runs over `xs`, starting at step index `t0`; returns every hidden
    /// state and the final one.
    pub fn sequence<'t>(
        &self,
        p: &BoundParams<'t>,
        xs: &[Var<'t>],
        h0: Var<'t>,
        t0: usize,
    ) -> Result<(Vec<Var<'t>>, Var<'t>)> {
        if xs.is_empty() {
            return invalid("TG-GRU sequence needs at least one step");
        }
        let mut h = h0;
        let mut hs = Vec::with_capacity(xs.len());
        for (k, x) in xs.iter().enumerate() {
            h = self.step(p, *x, h, t0 + k)?;
            hs.push(h);
        }
        Ok((hs, h))
    }

    pub fn typed_param_count(classes: usize, din: usize, dh: usize) -> usize {
        classes * (din * 3 * dh + dh * 3 * dh + 3 * dh)
    }

    pub fn param_count(classes: usize, nodes: usize, din: usize, dh: usize) -> usize {
        Self::typed_param_count(classes, din, dh) + 2 * nodes * nodes
    }
}

/// Writes a matrix as comma-separated rows.
pub fn matrix_csv(m: &Tensor) -> Result<String> {
    if m.ndim() != 2 {
        return invalid(format!("matrix_csv needs a 2-d tensor, got shape {:?}", m.shape()));
    }
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut s = String::new();
    for i in 0..r {
        let row: Vec<String> = (0..c).map(|j| format!("{}", m.at(&[i, j]))).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    Ok(s)
}
