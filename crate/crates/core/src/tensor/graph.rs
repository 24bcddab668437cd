use std::borrow::Cow;

use rand::{Rng, RngCore};

use super::kernels::{self, gemm};
use super::{split_at_axis, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, batched: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { input: Var, scale: T },
    Reshape { input: Var },
    Transpose { input: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Softmax { input: Var },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout { input: Var, keep: Vec<T> },
    SumAxis { input: Var, axis: usize },
    MaskedMean { input: Var, weights: Vec<T> },
    Sigmoid { input: Var },
    Gelu { input: Var },
    Bce { input: Var, labels: Vec<T> },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    retain: bool,
    op: Op<T>,
}

/// A tape of operations recorded in topological order.
///
/// Parameters can be borrowed into the tape with [`Graph::param`], so the
/// tape must be dropped before those parameters are updated. Gradients are
/// accumulated on leaves and on nodes marked with [`Graph::track`]; all
/// other intermediate gradients are transient.
pub struct Graph<'p, T: Scalar = f32> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a borrowed tensor as a leaf without copying it.
    pub fn param(&mut self, value: &'p Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    fn push_leaf(&mut self, value: Cow<'p, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            retain: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            grad: None,
            requires_grad,
            retain: false,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf or tracked node.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Starts gradient tracking at `v` and keeps its gradient after
    /// backward, like a hook on an intermediate activation. Must be called
    /// before any op consumes `v`.
    pub fn track(&mut self, v: Var) {
        let node = &mut self.nodes[v.0];
        node.requires_grad = true;
        node.retain = true;
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (out_shape, batched) = match (sa.len(), sb.len()) {
            (ra, 2) if ra >= 2 && sa[ra - 1] == sb[0] => {
                let mut s = sa[..ra - 1].to_vec();
                s.push(sb[1]);
                (s, false)
            }
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (vec![sa[0], sa[1], sb[2]], true),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(out_shape);
        if batched {
            let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            for i in 0..batch {
                gemm(
                    &av.data()[i * m * k..(i + 1) * m * k],
                    &bv.data()[i * k * n..(i + 1) * k * n],
                    &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                    false,
                );
            }
        } else {
            let (k, n) = (sb[0], sb[1]);
            let rows = av.len() / k;
            gemm(av.data(), bv.data(), out.data_mut(), rows, k, n, false, false);
        }
        Ok(self.push(out, Op::MatMul { a, b, batched }, &[a, b]))
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a` when
    /// its shape is a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_suffix("add", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % n])
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_suffix("mul", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv.data()[i % n])
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: T, shift: T) -> Var {
        let out = self.value(input).map(|x| scale * x + shift);
        self.push(out, Op::Affine { input, scale }, &[input])
    }

    pub fn scale(&mut self, input: Var, scale: T) -> Var {
        self.affine(input, scale, T::zero())
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { input }, &[input]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let rank = v.rank();
        if rank < 2 {
            return Err(Error::shape("transpose", v.shape(), &[]));
        }
        let (r, c) = (v.shape()[rank - 2], v.shape()[rank - 1]);
        let mut shape = v.shape().to_vec();
        shape.swap(rank - 2, rank - 1);
        let data = v
            .data()
            .chunks(r * c)
            .flat_map(|m| kernels::transpose(m, r, c))
            .collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Transpose { input }, &[input]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(input);
        if axis >= v.rank() || start + len > v.shape()[axis] {
            return Err(Error::shape("narrow", v.shape(), &[axis, start, len]));
        }
        let (outer, extent, inner) = split_at_axis(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Narrow { input, axis, start }, &[input]))
    }

    /// Rows of a `[vocab, dim]` table, one per id: output `[ids.len(), dim]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("gather", t.shape(), &[ids.len()]));
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, size: vocab });
            }
            data.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        let out = Tensor::new([ids.len(), dim], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let width = *v.shape().last().ok_or_else(|| Error::shape("softmax", v.shape(), &[]))?;
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(width) {
            softmax_row(row, None);
        }
        Ok(self.push(out, Op::Softmax { input }, &[input]))
    }

    /// Softmax over the last axis with masked-out keys forced to zero.
    ///
    /// `key_mask` holds one flag per (group, key); every row of `input`
    /// belongs to a group in leading-axis order, so for attention scores
    /// `[batch, queries, keys]` the mask is `[batch, keys]`.
    pub fn masked_softmax(&mut self, input: Var, key_mask: &[bool]) -> Result<Var> {
        let v = self.value(input);
        let width = *v.shape().last().ok_or_else(|| Error::shape("softmax", v.shape(), &[]))?;
        let rows = v.len() / width.max(1);
        let groups = key_mask.len() / width.max(1);
        if key_mask.len() != groups * width || groups == 0 || !rows.is_multiple_of(groups) {
            return Err(Error::shape("masked_softmax", v.shape(), &[key_mask.len()]));
        }
        let rows_per_group = rows / groups;
        let mut out = v.clone();
        for (r, row) in out.data_mut().chunks_mut(width).enumerate() {
            let g = r / rows_per_group;
            softmax_row(row, Some(&key_mask[g * width..(g + 1) * width]));
        }
        Ok(self.push(out, Op::Softmax { input }, &[input]))
    }

    /// Layer normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let v = self.value(input);
        let width = *v.shape().last().ok_or_else(|| Error::shape("layer_norm", v.shape(), &[]))?;
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(Error::shape("layer_norm", v.shape(), self.shape(gain)));
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let n = T::from_usize(width).unwrap();
        let mut normalized = Vec::with_capacity(v.len());
        let mut inv_std = Vec::with_capacity(v.len() / width);
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(width) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &x) in row.iter().enumerate() {
                let h = (x - mean) * inv;
                normalized.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[input, gain, bias],
        ))
    }

    /// Inverted dropout. Returns `input` unchanged when not training or when
    /// `rate` is zero.
    pub fn dropout(
        &mut self,
        input: Var,
        rate: f64,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let scale = T::lit(1.0 / (1.0 - rate));
        let v = self.value(input);
        let keep: Vec<T> = (0..v.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let data = v.data().iter().zip(&keep).map(|(&x, &k)| x * k).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { input, keep }, &[input]))
    }

    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let v = self.value(input);
        if axis >= v.rank() {
            return Err(Error::shape("sum_axis", v.shape(), &[axis]));
        }
        let (outer, extent, inner) = split_at_axis(v.shape(), axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let src = &v.data()[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SumAxis { input, axis }, &[input]))
    }

    pub fn mean_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let extent = *self
            .shape(input)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", self.shape(input), &[axis]))?;
        let summed = self.sum_axis(input, axis)?;
        Ok(self.scale(summed, T::one() / T::from_usize(extent).unwrap()))
    }

    /// Mean of `[batch, len, dim]` over the positions where `mask` is set.
    pub fn masked_mean(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let v = self.value(input);
        if v.rank() != 3 || mask.len() != v.shape()[0] * v.shape()[1] {
            return Err(Error::shape("masked_mean", v.shape(), &[mask.len()]));
        }
        let (batch, len, dim) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut weights = vec![T::zero(); batch * len];
        for b in 0..batch {
            let row = &mask[b * len..(b + 1) * len];
            let count = row.iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::invalid(format!("example {b} has no unmasked positions")));
            }
            let w = T::one() / T::from_usize(count).unwrap();
            for (l, &m) in row.iter().enumerate() {
                if m {
                    weights[b * len + l] = w;
                }
            }
        }
        let mut data = vec![T::zero(); batch * dim];
        for b in 0..batch {
            for l in 0..len {
                let w = weights[b * len + l];
                if w == T::zero() {
                    continue;
                }
                let src = &v.data()[(b * len + l) * dim..(b * len + l + 1) * dim];
                for (d, &s) in data[b * dim..(b + 1) * dim].iter_mut().zip(src) {
                    *d = *d + w * s;
                }
            }
        }
        let out = Tensor::new([batch, dim], data)?;
        Ok(self.push(out, Op::MaskedMean { input, weights }, &[input]))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid { input }, &[input])
    }

    pub fn gelu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(kernels::gelu);
        self.push(out, Op::Gelu { input }, &[input])
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, input: Var, labels: &[T]) -> Result<Var> {
        let v = self.value(input);
        if v.len() != labels.len() || labels.is_empty() {
            return Err(Error::shape("bce", v.shape(), &[labels.len()]));
        }
        let n = T::from_usize(labels.len()).unwrap();
        let total: T = v
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = clamp_probability(p);
                y * p.ln() + (T::one() - y) * (T::one() - p).ln()
            })
            .sum();
        let out = Tensor::scalar(-total / n);
        Ok(self.push(
            out,
            Op::Bce {
                input,
                labels: labels.to_vec(),
            },
            &[input],
        ))
    }

    /// Backpropagates from a single-element node, accumulating into the
    /// gradients of leaves and tracked nodes.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        pending[root.0] = Some(Tensor::full(root_value.shape().to_vec(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(grad) = pending[i].take() else {
                continue;
            };
            for (input, contribution) in self.local_grads(i, &grad) {
                match &mut pending[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            let node = &mut self.nodes[i];
            if node.retain {
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of node `i` to each of its inputs that
    /// requires a gradient.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batched } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if *batched {
                    let (batch, m, k, n) =
                        (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                    if self.needs(*a) {
                        let mut da = Tensor::zeros(av.shape().to_vec());
                        for t in 0..batch {
                            gemm(
                                &g.data()[t * m * n..(t + 1) * m * n],
                                &bv.data()[t * k * n..(t + 1) * k * n],
                                &mut da.data_mut()[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                                false,
                                true,
                            );
                        }
                        out.push((*a, da));
                    }
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(bv.shape().to_vec());
                        for t in 0..batch {
                            gemm(
                                &av.data()[t * m * k..(t + 1) * m * k],
                                &g.data()[t * m * n..(t + 1) * m * n],
                                &mut db.data_mut()[t * k * n..(t + 1) * k * n],
                                k,
                                m,
                                n,
                                true,
                                false,
                            );
                        }
                        out.push((*b, db));
                    }
                } else {
                    let (k, n) = (bv.shape()[0], bv.shape()[1]);
                    let rows = av.len() / k;
                    if self.needs(*a) {
                        let mut da = Tensor::zeros(av.shape().to_vec());
                        gemm(g.data(), bv.data(), da.data_mut(), rows, n, k, false, true);
                        out.push((*a, da));
                    }
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(bv.shape().to_vec());
                        gemm(av.data(), g.data(), db.data_mut(), k, rows, n, true, false);
                        out.push((*b, db));
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, reduce_to_suffix(g.data(), self.value(*b).shape())));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = bv.len();
                if self.needs(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &x)| x * bv.data()[j % n])
                        .collect();
                    out.push((*a, Tensor::new(av.shape().to_vec(), data).unwrap()));
                }
                if self.needs(*b) {
                    let prod: Vec<T> = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    out.push((*b, reduce_to_suffix(&prod, bv.shape())));
                }
            }
            Op::Affine { input, scale } => {
                if self.needs(*input) {
                    out.push((*input, g.map(|x| x * *scale)));
                }
            }
            Op::Reshape { input } => {
                if self.needs(*input) {
                    let shape = self.value(*input).shape().to_vec();
                    out.push((*input, g.clone().reshape(shape).unwrap()));
                }
            }
            Op::Transpose { input } => {
                if self.needs(*input) {
                    let shape = self.value(*input).shape().to_vec();
                    let rank = shape.len();
                    let (r, c) = (shape[rank - 2], shape[rank - 1]);
                    // g is [.., c, r]
                    let data = g
                        .data()
                        .chunks(r * c)
                        .flat_map(|m| kernels::transpose(m, c, r))
                        .collect();
                    out.push((*input, Tensor::new(shape, data).unwrap()));
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_at_axis(g.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let shape = self.value(*v).shape().to_vec();
                    let extent = shape[*axis];
                    if self.needs(*v) {
                        let mut data = Vec::with_capacity(outer * extent * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + extent * inner]);
                        }
                        out.push((*v, Tensor::new(shape, data).unwrap()));
                    }
                    offset += extent;
                }
            }
            Op::Narrow { input, axis, start } => {
                if self.needs(*input) {
                    let shape = self.value(*input).shape().to_vec();
                    let (outer, extent, inner) = split_at_axis(&shape, *axis);
                    let len = g.shape()[*axis];
                    let mut d = Tensor::zeros(shape);
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * len * inner;
                        d.data_mut()[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    out.push((*input, d));
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let shape = self.value(*table).shape().to_vec();
                    let dim = shape[1];
                    let mut d = Tensor::zeros(shape);
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut d.data_mut()[id * dim..(id + 1) * dim];
                        for (x, &y) in dst.iter_mut().zip(&g.data()[row * dim..(row + 1) * dim]) {
                            *x = *x + y;
                        }
                    }
                    out.push((*table, d));
                }
            }
            Op::Softmax { input } => {
                if self.needs(*input) {
                    let y = &node.value;
                    let width = *y.shape().last().unwrap();
                    let mut data = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(width).zip(g.data().chunks(width)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        data.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                    }
                    out.push((*input, Tensor::new(y.shape().to_vec(), data).unwrap()));
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let width = *g.shape().last().unwrap();
                let gv = self.value(*gain).data();
                if self.needs(*input) {
                    let n = T::from_usize(width).unwrap();
                    let mut data = Vec::with_capacity(g.len());
                    for (r, (gr, hr)) in g
                        .data()
                        .chunks(width)
                        .zip(normalized.chunks(width))
                        .enumerate()
                    {
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        let scale = inv_std[r] / n;
                        data.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(&d, &h)| scale * (n * d - sum_dh - h * sum_dh_h)),
                        );
                    }
                    out.push((*input, Tensor::new(g.shape().to_vec(), data).unwrap()));
                }
                if self.needs(*gain) {
                    let mut d = vec![T::zero(); width];
                    for (gr, hr) in g.data().chunks(width).zip(normalized.chunks(width)) {
                        for j in 0..width {
                            d[j] = d[j] + gr[j] * hr[j];
                        }
                    }
                    out.push((*gain, Tensor::new([width], d).unwrap()));
                }
                if self.needs(*bias) {
                    out.push((*bias, reduce_to_suffix(g.data(), &[width])));
                }
            }
            Op::Dropout { input, keep } => {
                if self.needs(*input) {
                    let data = g.data().iter().zip(keep).map(|(&a, &k)| a * k).collect();
                    out.push((*input, Tensor::new(g.shape().to_vec(), data).unwrap()));
                }
            }
            Op::SumAxis { input, axis } => {
                if self.needs(*input) {
                    let shape = self.value(*input).shape().to_vec();
                    let (outer, extent, inner) = split_at_axis(&shape, *axis);
                    let mut d = Tensor::zeros(shape);
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for a in 0..extent {
                            let base = (o * extent + a) * inner;
                            d.data_mut()[base..base + inner].copy_from_slice(src);
                        }
                    }
                    out.push((*input, d));
                }
            }
            Op::MaskedMean { input, weights } => {
                if self.needs(*input) {
                    let shape = self.value(*input).shape().to_vec();
                    let (len, dim) = (shape[1], shape[2]);
                    let mut d = Tensor::zeros(shape);
                    for (p, &w) in weights.iter().enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let b = p / len;
                        let src = &g.data()[b * dim..(b + 1) * dim];
                        for (x, &y) in d.data_mut()[p * dim..(p + 1) * dim].iter_mut().zip(src) {
                            *x = w * y;
                        }
                    }
                    out.push((*input, d));
                }
            }
            Op::Sigmoid { input } => {
                if self.needs(*input) {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&a, &s)| a * s * (T::one() - s))
                        .collect();
                    out.push((*input, Tensor::new(y.shape().to_vec(), data).unwrap()));
                }
            }
            Op::Gelu { input } => {
                if self.needs(*input) {
                    let x = self.value(*input);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&a, &v)| a * kernels::gelu_grad(v))
                        .collect();
                    out.push((*input, Tensor::new(x.shape().to_vec(), data).unwrap()));
                }
            }
            Op::Bce { input, labels } => {
                if self.needs(*input) {
                    let p = self.value(*input);
                    let n = T::from_usize(labels.len()).unwrap();
                    let upstream = g.data()[0];
                    let data = p
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&p, &y)| {
                            let p = clamp_probability(p);
                            upstream * (p - y) / (p * (T::one() - p)) / n
                        })
                        .collect();
                    out.push((*input, Tensor::new(p.shape().to_vec(), data).unwrap()));
                }
            }
        }
        out
    }
}

pub(crate) fn clamp_probability<T: Scalar>(p: T) -> T {
    let lo = T::lit(1e-7);
    let hi = T::one() - lo;
    p.max(lo).min(hi)
}

fn check_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(Error::shape(op, a, b))
    }
}

/// Sums a gradient laid out like the broadcast output down to `shape`.
fn reduce_to_suffix<T: Scalar>(g: &[T], shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut d = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        for (x, &y) in d.iter_mut().zip(chunk) {
            *x = *x + y;
        }
    }
    Tensor::new(shape.to_vec(), d).unwrap()
}

fn softmax_row<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| keep(j))
        .map(|(_, &x)| x)
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut total = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        *x = if keep(j) { (*x - max).exp() } else { T::zero() };
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}
