//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order of the graph, so [`Tape::backward`] is a single reverse
//! sweep. Nodes are addressed by the copyable handle [`Var`].
//!
//! Broadcasting is restricted to the leading-batch form: in binary
//! elementwise ops the right operand's shape must equal the left's or be a
//! suffix of it (a rank-0 scalar is a suffix of everything).

mod kernels;
mod tensor;

pub use kernels::sigmoid;
pub use tensor::Tensor;

use kernels::{axis_split, gemm, softplus};

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch normalization, used
/// to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance over the batch axis.
    pub var: Vec<f64>,
}

pub enum BatchNormMode<'a> {
    Train,
    Inference { mean: &'a [f64], var: &'a [f64] },
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaskMul {
        x: Var,
        mask: Vec<f64>,
    },
    ProtoActivate {
        x: Var,
        mu: Var,
        slope: Var,
        intercept: Var,
        sigma: f64,
        weights: Vec<f64>,
    },
    BceWithLogits {
        scores: Var,
        targets: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    MaskedConcat {
        x: Var,
        mask: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Recording of a computation, owning every intermediate value.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is accumulated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a tracked node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let m = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % m]))
            .collect();
        Ok((Tensor::new(sa.to_vec(), data), self.tracked(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.binary("subtract", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), tr))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.binary("multiply", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), tr))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let tr = self.tracked(&[x]);
        self.push(t, Op::Scale(x, c), tr)
    }

    /// Matrix product. `a` is `[.., n, k]`; `b` is either a shared `[k, m]`
    /// or a per-channel `[c, k, m]` matching `a: [c, n, k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Shape {
            op: "matrix-multiply",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || !(sb.len() == 2 || (sb.len() == 3 && sa.len() == 3 && sa[0] == sb[0])) {
            return Err(err());
        }
        let k = sa[sa.len() - 1];
        let n = sa[sa.len() - 2];
        if sb[sb.len() - 2] != k {
            return Err(err());
        }
        let m = sb[sb.len() - 1];
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(m);
        let mut out = vec![0.0; out_shape.iter().product()];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if sb.len() == 2 {
            let rows = ad.len() / k.max(1);
            if k == 0 {
                // empty inner dimension: result is all zeros
            } else {
                gemm(rows, k, m, ad, (k, 1), bd, (m, 1), 0.0, &mut out);
            }
        } else {
            for c in 0..sa[0] {
                gemm(
                    n,
                    k,
                    m,
                    &ad[c * n * k..(c + 1) * n * k],
                    (k, 1),
                    &bd[c * k * m..(c + 1) * k * m],
                    (m, 1),
                    0.0,
                    &mut out[c * n * m..(c + 1) * n * m],
                );
            }
        }
        let tr = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out), Op::MatMul(a, b), tr))
    }

    /// `x·w + b`. Per-channel form: `x: [c, n, k]`, `w: [c, k, h]`,
    /// `b: [c, h]`. Shared form: `x: [.., k]`, `w: [k, h]`, `b: [h]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        let bias_ok = match sw.len() {
            2 => sb == [sw[1]],
            3 => sx.len() == 3 && sx[0] == sw[0] && sb == [sw[0], sw[2]],
            _ => false,
        };
        if !bias_ok || sx.is_empty() || sx[sx.len() - 1] != sw[sw.len() - 2] {
            return Err(Error::Shape {
                op: "broadcast-affine",
                lhs: sx,
                rhs: sw,
            });
        }
        let y = self.matmul(x, w)?;
        let h = sw[sw.len() - 1];
        let bias = self.value(b).data().to_vec();
        let bias_tracked = self.nodes[b.0].tracked;
        let node = &mut self.nodes[y.0];
        let per_channel = sw.len() == 3;
        let rows_per_channel = if per_channel { sx[1] } else { usize::MAX };
        for (r, row) in node.value.data_mut().chunks_mut(h).enumerate() {
            let off = if per_channel { (r / rows_per_channel) * h } else { 0 };
            for (v, bb) in row.iter_mut().zip(&bias[off..off + h]) {
                *v += bb;
            }
        }
        node.op = Op::Affine { x, w, b };
        node.tracked = node.tracked || bias_tracked;
        Ok(y)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let tr = self.tracked(&[x]);
        self.push(t, op, tr)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tr = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tr)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let tr = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), tr)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "sum-axis",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let tr = self.tracked(&[x]);
        Ok(self.push(Tensor::new(out_shape, out), Op::SumAxis { x, axis }, tr))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concatenate",
                lhs: first,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concatenate",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let tr = self.tracked(parts);
        Ok(self.push(
            Tensor::new(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tr,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        let tr = self.tracked(&[x]);
        Ok(self.push(Tensor::new(shape, out), Op::Softmax { x, axis }, tr))
    }

    fn norm_groups(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let (sx, sg) = (self.shape(x), self.shape(gamma));
        let h = *sx.last().unwrap_or(&0);
        let ok = sg == self.shape(beta)
            && !sg.is_empty()
            && sg[sg.len() - 1] == h
            && (sg.len() == 1 || (sg.len() == 2 && sx.len() == 3 && sx[0] == sg[0]));
        if !ok {
            return Err(Error::Shape {
                op,
                lhs: sx.to_vec(),
                rhs: sg.to_vec(),
            });
        }
        Ok(if sg.len() == 2 { sg[0] } else { 1 })
    }

    /// Normalizes over the last axis with affine gain/shift. `gamma`/`beta`
    /// are `[h]` (shared) or `[c, h]` for `x: [c, n, h]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let groups = self.norm_groups("layer-normalize", x, gamma, beta)?;
        let shape = self.shape(x).to_vec();
        let h = shape[shape.len() - 1];
        let src = self.value(x).data();
        let rows = src.len() / h;
        let rows_per_group = rows / groups;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = is;
            let goff = (r / rows_per_group) * h;
            for j in 0..h {
                let xh = (row[j] - mean) * is;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * g[goff + j] + b[goff + j];
            }
        }
        let tr = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            tr,
        ))
    }

    /// Normalizes `x: [c, n, h]` (or `[n, h]`) over the `n` axis for every
    /// `(c, h)` column. Training mode returns the batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let groups = self.norm_groups("batch-normalize", x, gamma, beta)?;
        let shape = self.shape(x).to_vec();
        let h = shape[shape.len() - 1];
        let channels = if shape.len() == 3 { shape[0] } else { 1 };
        let n = shape[shape.len() - 2];
        let cols = channels * h;
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let col = |c: usize, i: usize, j: usize| (c * n + i) * h + j;
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; cols];
        let mut stats = None;
        let train = matches!(mode, BatchNormMode::Train);
        match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; cols];
                let mut var = vec![0.0; cols];
                for c in 0..channels {
                    for j in 0..h {
                        let m = (0..n).map(|i| src[col(c, i, j)]).sum::<f64>() / n as f64;
                        let ss = (0..n).map(|i| (src[col(c, i, j)] - m).powi(2)).sum::<f64>();
                        mean[c * h + j] = m;
                        var[c * h + j] = if n > 1 { ss / (n - 1) as f64 } else { 0.0 };
                        inv_std[c * h + j] = 1.0 / (ss / n as f64 + NORM_EPS).sqrt();
                    }
                }
                for c in 0..channels {
                    for i in 0..n {
                        for j in 0..h {
                            let k = c * h + j;
                            xhat[col(c, i, j)] = (src[col(c, i, j)] - mean[k]) * inv_std[k];
                        }
                    }
                }
                stats = Some(BatchStats { mean, var });
            }
            BatchNormMode::Inference { mean, var } => {
                if mean.len() != cols || var.len() != cols {
                    return Err(Error::Shape {
                        op: "batch-normalize",
                        lhs: shape,
                        rhs: vec![mean.len()],
                    });
                }
                for k in 0..cols {
                    inv_std[k] = 1.0 / (var[k] + NORM_EPS).sqrt();
                }
                for c in 0..channels {
                    for i in 0..n {
                        for j in 0..h {
                            let k = c * h + j;
                            xhat[col(c, i, j)] = (src[col(c, i, j)] - mean[k]) * inv_std[k];
                        }
                    }
                }
            }
        }
        for c in 0..channels {
            let goff = if groups == 1 { 0 } else { c * h };
            for i in 0..n {
                for j in 0..h {
                    let p = col(c, i, j);
                    out[p] = xhat[p] * g[goff + j] + b[goff + j];
                }
            }
        }
        let tr = self.tracked(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            tr,
        );
        Ok((v, stats))
    }

    /// Multiplies by a fixed mask of the same shape (dropout application).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "dropout-mask-apply",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let d = self.value(x).data();
        let out = d.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        let tr = self.tracked(&[x]);
        Ok(self.push(Tensor::new(shape, out), Op::MaskMul { x, mask }, tr))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout<R: rand::Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mask_mul(x, mask)
    }

    /// Prototype-based locally linear activation. For `x: [c, n]` and
    /// per-channel prototypes `mu`, slopes and intercepts of shape `[c, t]`:
    /// `A[c,i] = Σ_j w_j (slope_j·x + intercept_j)` where `w` is the
    /// normalized Gaussian proximity of `x` to each prototype at width
    /// `sigma`, computed in log space.
    pub fn proto_activate(
        &mut self,
        x: Var,
        mu: Var,
        slope: Var,
        intercept: Var,
        sigma: f64,
    ) -> Result<Var> {
        let (sx, sm) = (self.shape(x).to_vec(), self.shape(mu).to_vec());
        if sx.len() != 2
            || sm.len() != 2
            || sm[0] != sx[0]
            || self.shape(slope) != sm.as_slice()
            || self.shape(intercept) != sm.as_slice()
        {
            return Err(Error::Shape {
                op: "prototype-activate",
                lhs: sx,
                rhs: sm,
            });
        }
        let (channels, n, t) = (sx[0], sx[1], sm[1]);
        let xd = self.value(x).data();
        let (md, ad, bd) = (
            self.value(mu).data(),
            self.value(slope).data(),
            self.value(intercept).data(),
        );
        let mut weights = vec![0.0; channels * n * t];
        let mut out = vec![0.0; channels * n];
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        for c in 0..channels {
            let (mu_c, a_c, b_c) = (
                &md[c * t..(c + 1) * t],
                &ad[c * t..(c + 1) * t],
                &bd[c * t..(c + 1) * t],
            );
            for i in 0..n {
                let xv = xd[c * n + i];
                let w = &mut weights[(c * n + i) * t..(c * n + i + 1) * t];
                proximity_into(xv, mu_c, inv2s2, w);
                out[c * n + i] = w
                    .iter()
                    .zip(a_c.iter().zip(b_c))
                    .map(|(wj, (a, b))| wj * (a * xv + b))
                    .sum();
            }
        }
        let tr = self.tracked(&[x, mu, slope, intercept]);
        Ok(self.push(
            Tensor::new(sx, out),
            Op::ProtoActivate {
                x,
                mu,
                slope,
                intercept,
                sigma,
                weights,
            },
            tr,
        ))
    }

    /// Mean binary cross-entropy of logistic scores against 0/1 targets.
    pub fn bce_with_logits(&mut self, scores: Var, targets: &[f64]) -> Result<Var> {
        let s = self.value(scores).data();
        if s.len() != targets.len() {
            return Err(Error::Shape {
                op: "bce-with-logits",
                lhs: self.shape(scores).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let loss = s
            .iter()
            .zip(targets)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            / s.len().max(1) as f64;
        let tr = self.tracked(&[scores]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                scores,
                targets: targets.to_vec(),
            },
            tr,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let tr = self.tracked(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out), Op::Transpose(x), tr))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = v.clone().reshaped(shape.to_vec());
        let tr = self.tracked(&[x]);
        Ok(self.push(t, Op::Reshape(x), tr))
    }

    /// Selects rows of `table: [s, ..]` by `index`, giving `[index.len(), ..]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.is_empty() || index.iter().any(|&i| i >= s[0]) {
            return Err(Error::Shape {
                op: "gather-rows",
                lhs: s,
                rhs: vec![index.iter().copied().max().unwrap_or(0)],
            });
        }
        let row: usize = s[1..].iter().product();
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = index.len();
        let tr = self.tracked(&[table]);
        Ok(self.push(
            Tensor::new(shape, out),
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            tr,
        ))
    }

    /// Concatenates channel embeddings `x: [c, n, h]` into `[n, c·h]`,
    /// writing zeros into every slot whose `mask` entry is false.
    pub fn masked_concat(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != mask.len() {
            return Err(Error::Shape {
                op: "masked-concat",
                lhs: s,
                rhs: vec![mask.len()],
            });
        }
        let (c, n, h) = (s[0], s[1], s[2]);
        let d = self.value(x).data();
        let mut out = vec![0.0; n * c * h];
        for ch in (0..c).filter(|&ch| mask[ch]) {
            for i in 0..n {
                out[i * c * h + ch * h..i * c * h + (ch + 1) * h]
                    .copy_from_slice(&d[(ch * n + i) * h..(ch * n + i + 1) * h]);
            }
        }
        let tr = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, c * h], out),
            Op::MaskedConcat {
                x,
                mask: mask.to_vec(),
            },
            tr,
        ))
    }

    /// Accumulates `∂root/∂v` into every tracked ancestor `v` of the scalar
    /// `root`. Repeated calls add to existing gradients until [`zero_grad`].
    ///
    /// [`zero_grad`]: Tape::zero_grad
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if !rs.is_empty() {
            return Err(Error::NonScalarRoot(rs.to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].tracked {
                continue;
            }
            self.propagate(idx, &g, &mut adj);
            match &mut self.grads[idx] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].tracked;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |ga| ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| {
                    let m = gb.len();
                    gd.iter().enumerate().for_each(|(i, y)| gb[i % m] += sign * y)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let m = bv.len();
                acc(*a, &mut |ga| {
                    ga.iter_mut().enumerate().for_each(|(i, x)| *x += gd[i] * bv[i % m])
                });
                acc(*b, &mut |gb| {
                    gd.iter().enumerate().for_each(|(i, y)| gb[i % m] += y * av[i])
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(gd).for_each(|(a, y)| *a += c * y)),
            Op::MatMul(a, b) | Op::Affine { x: a, w: b, .. } => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (ad, bd) = (val(*a), val(*b));
                let k = sa[sa.len() - 1];
                let m = sb[sb.len() - 1];
                if sb.len() == 2 {
                    let rows = ad.len() / k.max(1);
                    // dA = G·Bᵀ ; dB = Aᵀ·G
                    acc(*a, &mut |ga| gemm(rows, m, k, gd, (m, 1), bd, (1, m), 1.0, ga));
                    acc(*b, &mut |gb| gemm(k, rows, m, ad, (1, k), gd, (m, 1), 1.0, gb));
                } else {
                    let n = sa[1];
                    for c in 0..sa[0] {
                        let gc = &gd[c * n * m..(c + 1) * n * m];
                        let bc = &bd[c * k * m..(c + 1) * k * m];
                        let ac = &ad[c * n * k..(c + 1) * n * k];
                        acc(*a, &mut |ga| {
                            gemm(n, m, k, gc, (m, 1), bc, (1, m), 1.0, &mut ga[c * n * k..(c + 1) * n * k])
                        });
                        acc(*b, &mut |gb| {
                            gemm(k, n, m, ac, (1, k), gc, (m, 1), 1.0, &mut gb[c * k * m..(c + 1) * k * m])
                        });
                    }
                }
                if let Op::Affine { b: bias, .. } = &node.op {
                    let per_channel = sb.len() == 3;
                    let rows_per_channel = if per_channel { sa[1] } else { usize::MAX };
                    acc(*bias, &mut |gb| {
                        for (r, row) in gd.chunks(m).enumerate() {
                            let off = if per_channel { (r / rows_per_channel) * m } else { 0 };
                            gb[off..off + m].iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    gx.iter_mut()
                        .zip(gd.iter().zip(xv))
                        .for_each(|(a, (y, v))| if *v > 0.0 { *a += y })
                });
            }
            Op::Exp(x) => {
                let out = node.value.data();
                acc(*x, &mut |gx| gx.iter_mut().zip(gd.iter().zip(out)).for_each(|(a, (y, e))| *a += y * e));
            }
            Op::Square(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(gd.iter().zip(xv)).for_each(|(a, (y, v))| *a += 2.0 * v * y)
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += gd[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len().max(1) as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += gd[0] / n));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] += gd[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            gp[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, y)| *a += y);
                        }
                    });
                    offset += len;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| gd[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] += y[idx(l)] * (gd[idx(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gsh = self.nodes[gamma.0].value.shape();
                let h = gsh[gsh.len() - 1];
                let groups = if gsh.len() == 2 { gsh[0] } else { 1 };
                let rows = xhat.len() / h;
                let rpg = rows / groups;
                let gv = val(*gamma);
                if wants(*x) {
                    acc(*x, &mut |gx| {
                        let mut dxh = vec![0.0; h];
                        for r in 0..rows {
                            let goff = (r / rpg) * h;
                            for j in 0..h {
                                dxh[j] = gd[r * h + j] * gv[goff + j];
                            }
                            let s1: f64 = dxh.iter().sum();
                            let s2: f64 = (0..h).map(|j| dxh[j] * xhat[r * h + j]).sum();
                            let hf = h as f64;
                            for j in 0..h {
                                gx[r * h + j] +=
                                    inv_std[r] / hf * (hf * dxh[j] - s1 - xhat[r * h + j] * s2);
                            }
                        }
                    });
                }
                acc(*gamma, &mut |gg| {
                    for r in 0..rows {
                        let goff = (r / rpg) * h;
                        for j in 0..h {
                            gg[goff + j] += gd[r * h + j] * xhat[r * h + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..rows {
                        let goff = (r / rpg) * h;
                        for j in 0..h {
                            gb[goff + j] += gd[r * h + j];
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = node.value.shape();
                let h = shape[shape.len() - 1];
                let n = shape[shape.len() - 2];
                let channels = if shape.len() == 3 { shape[0] } else { 1 };
                let gsh = self.nodes[gamma.0].value.shape();
                let shared = gsh.len() == 1;
                let gv = val(*gamma);
                let col = |c: usize, i: usize, j: usize| (c * n + i) * h + j;
                let goff = |c: usize| if shared { 0 } else { c * h };
                acc(*x, &mut |gx| {
                    for c in 0..channels {
                        for j in 0..h {
                            let gj = gv[goff(c) + j];
                            let is = inv_std[c * h + j];
                            if *train {
                                let nf = n as f64;
                                let (mut s1, mut s2) = (0.0, 0.0);
                                for i in 0..n {
                                    let d = gd[col(c, i, j)] * gj;
                                    s1 += d;
                                    s2 += d * xhat[col(c, i, j)];
                                }
                                for i in 0..n {
                                    let p = col(c, i, j);
                                    gx[p] += is / nf * (nf * gd[p] * gj - s1 - xhat[p] * s2);
                                }
                            } else {
                                for i in 0..n {
                                    let p = col(c, i, j);
                                    gx[p] += gd[p] * gj * is;
                                }
                            }
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for c in 0..channels {
                        for i in 0..n {
                            for j in 0..h {
                                gg[goff(c) + j] += gd[col(c, i, j)] * xhat[col(c, i, j)];
                            }
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for c in 0..channels {
                        for i in 0..n {
                            for j in 0..h {
                                gb[goff(c) + j] += gd[col(c, i, j)];
                            }
                        }
                    }
                });
            }
            Op::MaskMul { x, mask } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(gd.iter().zip(mask)).for_each(|(a, (y, m))| *a += y * m))
            }
            Op::ProtoActivate {
                x,
                mu,
                slope,
                intercept,
                sigma,
                weights,
            } => {
                let sm = self.nodes[mu.0].value.shape();
                let (channels, t) = (sm[0], sm[1]);
                let n = self.nodes[x.0].value.shape()[1];
                let (xd, md, ad, bd) = (val(*x), val(*mu), val(*slope), val(*intercept));
                let out = node.value.data();
                let inv_s2 = 1.0 / (sigma * sigma);
                let mut dx = if wants(*x) { vec![0.0; channels * n] } else { Vec::new() };
                let mut dmu = vec![0.0; channels * t];
                let mut da = vec![0.0; channels * t];
                let mut db = vec![0.0; channels * t];
                for c in 0..channels {
                    for i in 0..n {
                        let p = c * n + i;
                        let (xv, a_out, g) = (xd[p], out[p], gd[p]);
                        if g == 0.0 {
                            continue;
                        }
                        let w = &weights[p * t..(p + 1) * t];
                        let mut gx = 0.0;
                        for (j, &wj) in w.iter().enumerate() {
                            let q = c * t + j;
                            let piece = ad[q] * xv + bd[q];
                            // ∂A/∂logit_j = w_j (piece_j − A); ∂logit_j/∂μ_j = (x−μ_j)/σ²
                            let dl = wj * (piece - a_out);
                            let diff = (xv - md[q]) * inv_s2;
                            da[q] += g * wj * xv;
                            db[q] += g * wj;
                            dmu[q] += g * dl * diff;
                            gx += wj * ad[q] - dl * diff;
                        }
                        if !dx.is_empty() {
                            dx[p] += g * gx;
                        }
                    }
                }
                let add = |dst: &mut [f64], src: &[f64]| dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                if !dx.is_empty() {
                    acc(*x, &mut |gx| add(gx, &dx));
                }
                acc(*mu, &mut |g| add(g, &dmu));
                acc(*slope, &mut |g| add(g, &da));
                acc(*intercept, &mut |g| add(g, &db));
            }
            Op::BceWithLogits { scores, targets } => {
                let s = val(*scores);
                let nf = s.len().max(1) as f64;
                acc(*scores, &mut |gs| {
                    for i in 0..s.len() {
                        gs[i] += gd[0] * (sigmoid(s[i]) - targets[i]) / nf;
                    }
                });
            }
            Op::Transpose(x) => {
                let s = self.nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| gx.iter_mut().zip(gd).for_each(|(a, y)| *a += y)),
            Op::GatherRows { table, index } => {
                let row = node.value.len() / index.len().max(1);
                acc(*table, &mut |gt| {
                    for (k, &i) in index.iter().enumerate() {
                        gt[i * row..(i + 1) * row]
                            .iter_mut()
                            .zip(&gd[k * row..(k + 1) * row])
                            .for_each(|(a, y)| *a += y);
                    }
                });
            }
            Op::MaskedConcat { x, mask } => {
                let s = self.nodes[x.0].value.shape();
                let (c, n, h) = (s[0], s[1], s[2]);
                acc(*x, &mut |gx| {
                    for ch in (0..c).filter(|&ch| mask[ch]) {
                        for i in 0..n {
                            gx[(ch * n + i) * h..(ch * n + i + 1) * h]
                                .iter_mut()
                                .zip(&gd[i * c * h + ch * h..i * c * h + (ch + 1) * h])
                                .for_each(|(a, y)| *a += y);
                        }
                    }
                });
            }
        }
    }
}

/// Normalized Gaussian proximity weights of `x` to each prototype, with
/// `inv2s2 = 1/(2σ²)`. Max-subtraction in log space keeps the weights
/// defined for arbitrarily small widths; exact ties share mass equally.
pub(crate) fn proximity_into(x: f64, mu: &[f64], inv2s2: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (o, m) in out.iter_mut().zip(mu) {
        let d = x - m;
        *o = -d * d * inv2s2;
        max = max.max(*o);
    }
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}
