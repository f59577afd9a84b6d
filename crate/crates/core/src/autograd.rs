//! Minimal define-by-run reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters are
//! named leaves; [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients for every node that depends on a parameter or a
//! gradient-tracked leaf. [`Graph::stop_gradient`] cuts that dependency.

use std::collections::BTreeMap;

use crate::costvolume;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, NormCache};
use crate::tensor::{norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Deconv {
        x: Var,
        w: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        weights: Tensor,
    },
    Concat(Vec<Var>),
    Broadcast(Var),
    Resize(Var),
    Reshape(Var),
    Cosine {
        e: Var,
        reference_unit: Tensor,
    },
    Bce {
        z: Var,
        labels: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        coeffs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Named parameter gradients; parameters the loss does not reach get zeros.
    pub fn params(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn any_tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.tracked(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (but which is not a named parameter).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let tracked = self.any_tracked(&[x, w]) || b.is_some_and(|b| self.tracked(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, tracked))
    }

    pub fn deconv2x(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::deconv2x(self.value(x), self.value(w), self.value(b))?;
        let tracked = self.any_tracked(&[x, w, b]);
        Ok(self.push(out, Op::Deconv { x, w, b }, tracked))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let tracked = self.any_tracked(&[x, w]) || b.is_some_and(|b| self.tracked(b));
        Ok(self.push(out, Op::Linear { x, w, b }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let tracked = self.tracked(x);
        self.push(out, Op::Scale(x, s), tracked)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        let tracked = self.tracked(x);
        self.push(out, Op::Gelu(x), tracked)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, cache) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        let tracked = self.any_tracked(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, cache }, tracked))
    }

    pub fn category_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (out, weights) = kernels::category_attention(self.value(q), self.value(k), self.value(v))?;
        let tracked = self.any_tracked(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, weights }, tracked))
    }

    /// Concatenate along the trailing axis; all leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if &s[..s.len() - 1] != lead {
                return Err(Error::Dimension(format!(
                    "concat: leading dims {:?} vs {:?}",
                    lead,
                    &s[..s.len() - 1]
                )));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let tracked = self.any_tracked(parts);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Concat(parts.to_vec()), tracked))
    }

    /// Repeat an `(H, W, 1, C)` tensor `n` times along the third axis.
    pub fn broadcast_categories(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[2] != 1 {
            return Err(Error::Dimension(format!("broadcast expects (H, W, 1, C), got {s:?}")));
        }
        let c = s[3];
        let mut data = Vec::with_capacity(s[0] * s[1] * n * c);
        for row in self.value(x).data().chunks_exact(c) {
            for _ in 0..n {
                data.extend_from_slice(row);
            }
        }
        let out = Tensor::from_vec(&[s[0], s[1], n, c], data)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Broadcast(x), tracked))
    }

    /// Identity in the forward pass; blocks all gradient flow to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::Leaf, false)
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::bilinear_resize(self.value(x), out_h, out_w)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Resize(x), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Reshape(x), tracked))
    }

    /// Cosine volume `(H, W, K, M)` between `e (H, W, D)` and a fixed reference `(K, M, D)`.
    pub fn cosine_volume(&mut self, e: Var, reference: &Tensor) -> Result<Var> {
        let cv = costvolume::compute_cost_volume(self.value(e), reference)?;
        let d = reference.last_dim();
        let mut unit = reference.clone();
        for row in unit.data_mut().chunks_exact_mut(d) {
            let n = norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let tracked = self.tracked(e);
        Ok(self.push(cv.0, Op::Cosine { e, reference_unit: unit }, tracked))
    }

    /// Mean per-pixel binary cross-entropy of `z (H, W, K)` against one-hot `labels (H, W)`.
    pub fn bce_loss(&mut self, z: Var, labels: &[usize]) -> Result<Var> {
        let loss = bce_with_logits(self.value(z), labels)?;
        let tracked = self.tracked(z);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                z,
                labels: labels.to_vec(),
            },
            tracked,
        ))
    }

    /// `Σ x ⊙ coeffs`, a scalar.
    pub fn weighted_sum(&mut self, x: Var, coeffs: Tensor) -> Result<Var> {
        self.value(x).check_same_shape(&coeffs, "weighted sum")?;
        let s = crate::tensor::dot(self.value(x).data(), coeffs.data());
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, coeffs }, tracked))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), *geom, g, self.tracked(*x))?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Deconv { x, w, b } => {
                let (dx, dw, db) = kernels::deconv2x_backward(self.value(*x), self.value(*w), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, g.scale(*s));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gg)| gg * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), data)?);
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let (dx, dg, db) = kernels::layer_norm_backward(cache, self.value(*gamma), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Attention { q, k, v, weights } => {
                let (dq, dk, dv) = kernels::category_attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    weights,
                    g,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&p, &wd) in parts.iter().zip(&widths) {
                    if self.tracked(p) {
                        let mut data = Vec::with_capacity(rows * wd);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + off..r * total + off + wd]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(self.value(p).shape(), data)?);
                    }
                    off += wd;
                }
            }
            Op::Broadcast(x) => {
                let s = self.value(*x).shape().to_vec();
                let (c, n) = (s[3], g.shape()[2]);
                let mut dx = Tensor::zeros(&s);
                for (p, row) in dx.data_mut().chunks_exact_mut(c).enumerate() {
                    for k in 0..n {
                        let src = &g.data()[(p * n + k) * c..(p * n + k + 1) * c];
                        row.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Resize(x) => {
                let dx = kernels::bilinear_resize_backward(self.value(*x).shape(), g);
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = g.reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, dx);
            }
            Op::Cosine { e, reference_unit } => {
                let ev = self.value(*e);
                let d = ev.last_dim();
                let km = reference_unit.len() / d;
                let cos = &node.value;
                let mut de = Tensor::zeros(ev.shape());
                for (p, erow) in ev.data().chunks_exact(d).enumerate() {
                    let n = norm(erow);
                    let drow = &mut de.data_mut()[p * d..(p + 1) * d];
                    let mut radial = 0.0;
                    for j in 0..km {
                        let gj = g.data()[p * km + j];
                        if gj == 0.0 {
                            continue;
                        }
                        let r = &reference_unit.data()[j * d..(j + 1) * d];
                        for (dd, rv) in drow.iter_mut().zip(r) {
                            *dd += gj * rv / n;
                        }
                        radial += gj * cos.data()[p * km + j];
                    }
                    for (dd, ev) in drow.iter_mut().zip(erow) {
                        *dd -= radial * ev / (n * n);
                    }
                }
                self.accumulate(grads, *e, de);
            }
            Op::Bce { z, labels } => {
                let zv = self.value(*z);
                let k = zv.last_dim();
                let scale = g.data()[0] / zv.len() as f64;
                let data = zv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &zz)| {
                        let y = if labels[i / k] == i % k { 1.0 } else { 0.0 };
                        (kernels::sigmoid(zz) - y) * scale
                    })
                    .collect();
                self.accumulate(grads, *z, Tensor::from_vec(zv.shape(), data)?);
            }
            Op::WeightedSum { x, coeffs } => {
                self.accumulate(grads, *x, coeffs.scale(g.data()[0]));
            }
        }
        Ok(())
    }
}

/// Mean over all `H·W·K` entries of `−[y log σ(z) + (1 − y) log(1 − σ(z))]`
/// with `y` the one-hot encoding of `labels`, in the stable
/// `softplus(z) − y·z` form.
pub fn bce_with_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let k = logits.last_dim();
    if logits.len() != labels.len() * k {
        return Err(Error::Dimension(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidLabel { label: bad, classes: k });
    }
    let mut total = 0.0;
    for (p, row) in logits.data().chunks_exact(k).enumerate() {
        for (c, &z) in row.iter().enumerate() {
            let y = if labels[p] == c { 1.0 } else { 0.0 };
            total += kernels::softplus(z) - y * z;
        }
    }
    Ok(total / logits.len() as f64)
}
