use std::f64::consts::PI;
use std::rc::Rc;

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{self, conv2d_backward_input, conv2d_backward_weight, ConvSpec, Float, SparseLinear, Tensor};

/// Reduction applied over the orientation sub-axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

const BN_EPS: f64 = 1e-5;

/// `(B, C, inner)` view of a tensor whose channel axis is 1.
fn channel_view(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("expected [B, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Validate a channel-to-block map; returns the block count.
fn check_blocks(blocks: &[usize], c: usize, gamma: &[usize], beta: &[usize]) -> Result<usize> {
    let nb = blocks.iter().max().map_or(0, |m| m + 1);
    if blocks.len() != c || gamma != [nb] || beta != [nb] {
        return Err(Error::shape(format!(
            "batch norm: {} block entries for {c} channels, params {gamma:?}/{beta:?}",
            blocks.len()
        )));
    }
    Ok(nb)
}

/// Sum `values` in ascending order so that any permutation of the same
/// multiset produces the same bits.
fn sorted_sum<T: Float>(values: &mut [T]) -> T {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    values.iter().copied().fold(T::zero(), |a, v| a + v)
}

impl<'g, T: Float> Var<'g, T> {
    fn binary(
        self,
        other: Var<'g, T>,
        op: &str,
        f: impl Fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
        back: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let out = f(&a, &b)?;
        self.graph
            .op(op, out, &[self, other], move |g, needs| back(g, &a, &b, needs))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |a, b| a.add(b), |g, _, _, _| {
            Ok(vec![Some(g.clone()), Some(g.clone())])
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |a, b| a.sub(b), |g, _, _, needs| {
            Ok(vec![
                Some(g.clone()),
                if needs[1] { Some(g.map(|v| -v)) } else { None },
            ])
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |a, b| a.mul(b), |g, a, b, needs| {
            Ok(vec![
                if needs[0] { Some(g.mul(b)?) } else { None },
                if needs[1] { Some(g.mul(a)?) } else { None },
            ])
        })
    }

    pub fn scale(self, c: f64) -> Result<Var<'g, T>> {
        let c = T::from_f64(c);
        let out = self.value().scale(c)?;
        self.graph
            .op("scale", out, &[self], move |g, _| Ok(vec![Some(g.scale(c)?)]))
    }

    fn unary_elementwise(
        self,
        op: &str,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = x.map(f);
        self.graph.op(op, out, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| gv * df(xv))
                .collect();
            Ok(vec![Some(Tensor::new(g.shape().to_vec(), data)?)])
        })
    }

    pub fn silu(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let sig: Vec<T> = x.data().iter().map(|&v| tensor::sigmoid(v)).collect();
        let out: Vec<T> = x.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect();
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.graph.op("silu", out, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(&sig)
                .map(|((&gv, &xv), &s)| gv * s * (T::one() + xv * (T::one() - s)))
                .collect();
            Ok(vec![Some(Tensor::new(g.shape().to_vec(), data)?)])
        })
    }

    pub fn relu(self) -> Result<Var<'g, T>> {
        self.unary_elementwise(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// `clamp(x + 3, 0, 6) / 6`.
    pub fn hard_sigmoid(self) -> Result<Var<'g, T>> {
        let three = T::from_f64(3.0);
        let six = T::from_f64(6.0);
        self.unary_elementwise(
            "hard_sigmoid",
            move |x| ((x + three).max(T::zero())).min(six) / six,
            move |x| {
                if x > -three && x < three {
                    T::one() / six
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sum(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph.op("sum", out, &[self], move |g, _| {
            Ok(vec![Some(Tensor::full(&shape, g.data()[0]))])
        })
    }

    pub fn mean(self) -> Result<Var<'g, T>> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let old = self.shape();
        let out = self.value().reshape(shape)?;
        self.graph.op("reshape", out, &[self], move |g, _| {
            Ok(vec![Some(g.reshape(&old)?)])
        })
    }

    /// Convolution with a kernel that is itself a graph value.
    pub fn conv2d(self, kernel: Var<'g, T>, spec: ConvSpec) -> Result<Var<'g, T>> {
        self.conv2d_grouped(kernel, spec, 1)
    }

    pub fn conv2d_grouped(
        self,
        kernel: Var<'g, T>,
        spec: ConvSpec,
        groups: usize,
    ) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), kernel.value());
        let out = tensor::conv2d_grouped(&x, &w, spec, groups)?;
        self.graph.op("conv2d", out, &[self, kernel], move |g, needs| {
            Ok(vec![
                if needs[0] {
                    Some(conv2d_backward_input(g, x.shape(), &w, spec, groups)?)
                } else {
                    None
                },
                if needs[1] {
                    Some(conv2d_backward_weight(g, &x, w.shape(), spec, groups)?)
                } else {
                    None
                },
            ])
        })
    }

    /// Apply a fixed sparse linear map (kernel rotation/expansion).
    pub fn sparse_linear(self, map: Rc<SparseLinear>) -> Result<Var<'g, T>> {
        let out = map.apply(&self.value())?;
        self.graph.op("sparse_linear", out, &[self], move |g, _| {
            Ok(vec![Some(map.apply_transpose(g)?)])
        })
    }

    /// Add `bias[c]` to every element of channel `c` (axis 1).
    pub fn add_channel_bias(self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let b = bias.value();
        let (batch, c, inner) = channel_view(x.shape())?;
        if b.shape() != [c] {
            return Err(Error::shape(format!(
                "channel bias {:?} for {c} channels",
                b.shape()
            )));
        }
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(inner).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        self.graph.op("add_channel_bias", out, &[self, bias], move |g, needs| {
            let gb = if needs[1] {
                let mut acc = vec![T::zero(); c];
                for (i, chunk) in g.data().chunks_exact(inner).enumerate() {
                    acc[i % c] += chunk.iter().copied().sum::<T>();
                }
                let _ = batch;
                Some(Tensor::new(vec![c], acc)?)
            } else {
                None
            };
            Ok(vec![Some(g.clone()), gb])
        })
    }

    /// Multiply channel `c` of sample `b` by `s[b, c]`.
    pub fn scale_channels(self, s: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let sv = s.value();
        let (batch, c, inner) = channel_view(x.shape())?;
        if sv.shape() != [batch, c] {
            return Err(Error::shape(format!(
                "channel scale {:?} for input {:?}",
                sv.shape(),
                x.shape()
            )));
        }
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(inner).enumerate() {
            let f = sv.data()[i];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        self.graph.op("scale_channels", out, &[self, s], move |g, needs| {
            let gx = if needs[0] {
                let mut gx = g.clone();
                for (i, chunk) in gx.data_mut().chunks_exact_mut(inner).enumerate() {
                    let f = sv.data()[i];
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                Some(gx)
            } else {
                None
            };
            let gs = if needs[1] {
                let data = g
                    .data()
                    .chunks_exact(inner)
                    .zip(x.data().chunks_exact(inner))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>())
                    .collect();
                Some(Tensor::new(vec![batch, c], data)?)
            } else {
                None
            };
            Ok(vec![gx, gs])
        })
    }

    /// Repeat every element of the last axis `n` times consecutively:
    /// `[s1, s2] -> [s1 x n, s2 x n]`.
    pub fn repeat_blocks(self, n: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().ok_or_else(|| Error::shape("repeat of scalar"))? *= n;
        let data = x
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, n))
            .collect();
        let in_shape = x.shape().to_vec();
        let out = Tensor::new(shape, data)?;
        self.graph.op("repeat_blocks", out, &[self], move |g, _| {
            let data = g.data().chunks_exact(n).map(|c| c.iter().copied().sum()).collect();
            Ok(vec![Some(Tensor::new(in_shape.clone(), data)?)])
        })
    }

    /// Spatial mean of each channel: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (_, _, h, w) = x.dims4()?;
        let in_shape = x.shape().to_vec();
        let out = x.global_avg_pool()?;
        let inv = T::from_f64(1.0 / (h * w) as f64);
        self.graph.op("global_avg_pool", out, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v * inv, h * w))
                .collect();
            Ok(vec![Some(Tensor::new(in_shape.clone(), data)?)])
        })
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "matmul", |a, b| a.matmul(b), |g, a, b, needs| {
            Ok(vec![
                if needs[0] { Some(g.matmul(&b.transpose2d()?)?) } else { None },
                if needs[1] { Some(a.transpose2d()?.matmul(g)?) } else { None },
            ])
        })
    }

    pub fn transpose(self) -> Result<Var<'g, T>> {
        let out = self.value().transpose2d()?;
        self.graph
            .op("transpose", out, &[self], |g, _| Ok(vec![Some(g.transpose2d()?)]))
    }

    /// `[B, n] + bias[n]`.
    pub fn add_row_bias(self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let b = bias.value();
        let (rows, n) = match x.shape() {
            [r, n] => (*r, *n),
            s => return Err(Error::shape(format!("row bias on shape {s:?}"))),
        };
        if b.shape() != [n] {
            return Err(Error::shape(format!("row bias {:?} for width {n}", b.shape())));
        }
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
        }
        self.graph.op("add_row_bias", out, &[self, bias], move |g, needs| {
            let gb = if needs[1] {
                let mut acc = vec![T::zero(); n];
                for row in g.data().chunks_exact(n) {
                    acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                let _ = rows;
                Some(Tensor::new(vec![n], acc)?)
            } else {
                None
            };
            Ok(vec![Some(g.clone()), gb])
        })
    }

    /// Batch normalization with batch statistics. `blocks[c]` names the
    /// statistics block of channel `c`; statistics pool every channel of a
    /// block over batch and spatial positions, and `gamma`/`beta` hold one
    /// entry per block. Returns the output with the per-block batch mean and
    /// biased variance.
    pub fn batch_norm_train(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        blocks: Rc<Vec<usize>>,
    ) -> Result<(Var<'g, T>, Tensor<T>, Tensor<T>)> {
        let x = self.value();
        let (batch, c, inner) = channel_view(x.shape())?;
        let nb = check_blocks(&blocks, c, gamma.value().shape(), beta.value().shape())?;
        let (gv, bv) = (gamma.value(), beta.value());
        let mut counts = vec![0usize; nb];
        blocks.iter().for_each(|&b| counts[b] += batch * inner);
        let block_of = {
            let blocks = blocks.clone();
            move |chunk_idx: usize| blocks[chunk_idx % c]
        };
        let blocks = nb;
        let mut mean = vec![0.0f64; blocks];
        for (i, chunk) in x.data().chunks_exact(inner).enumerate() {
            mean[block_of(i)] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        mean.iter_mut().zip(&counts).for_each(|(m, &n)| *m /= n as f64);
        let mut var = vec![0.0f64; blocks];
        for (i, chunk) in x.data().chunks_exact(inner).enumerate() {
            let m = mean[block_of(i)];
            var[block_of(i)] += chunk.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        }
        var.iter_mut().zip(&counts).for_each(|(v, &n)| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = (*x).clone();
        for (i, chunk) in xhat.data_mut().chunks_exact_mut(inner).enumerate() {
            let f = block_of(i);
            let (m, s) = (T::from_f64(mean[f]), T::from_f64(inv_std[f]));
            chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
        }
        let mut out = xhat.clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(inner).enumerate() {
            let f = block_of(i);
            let (ga, be) = (gv.data()[f], bv.data()[f]);
            chunk.iter_mut().for_each(|v| *v = *v * ga + be);
        }
        let mean_t = Tensor::new(vec![blocks], mean.iter().map(|&v| T::from_f64(v)).collect())?;
        let var_t = Tensor::new(vec![blocks], var.iter().map(|&v| T::from_f64(v)).collect())?;
        let var_out = self.graph.op("batch_norm", out, &[self, gamma, beta], move |g, needs| {
            let mut sum_g = vec![0.0f64; blocks];
            let mut sum_gx = vec![0.0f64; blocks];
            for (i, (gc, xc)) in g.data().chunks_exact(inner).zip(xhat.data().chunks_exact(inner)).enumerate() {
                let f = block_of(i);
                for (&a, &b) in gc.iter().zip(xc) {
                    sum_g[f] += a.as_f64();
                    sum_gx[f] += a.as_f64() * b.as_f64();
                }
            }
            let gx = if needs[0] {
                let mut gx = g.clone();
                for (i, (gc, xc)) in gx.data_mut().chunks_exact_mut(inner).zip(xhat.data().chunks_exact(inner)).enumerate() {
                    let f = block_of(i);
                    let scale = gv.data()[f].as_f64() * inv_std[f];
                    let n = counts[f] as f64;
                    let (mg, mgx) = (sum_g[f] / n, sum_gx[f] / n);
                    for (gv_, &xh) in gc.iter_mut().zip(xc) {
                        *gv_ = T::from_f64(scale * (gv_.as_f64() - mg - xh.as_f64() * mgx));
                    }
                }
                Some(gx)
            } else {
                None
            };
            let to_t = |v: &[f64]| Tensor::new(vec![blocks], v.iter().map(|&x| T::from_f64(x)).collect());
            Ok(vec![
                gx,
                if needs[1] { Some(to_t(&sum_gx)?) } else { None },
                if needs[2] { Some(to_t(&sum_g)?) } else { None },
            ])
        })?;
        Ok((var_out, mean_t, var_t))
    }

    /// Batch normalization with fixed (running) statistics; `blocks` as in
    /// [`Var::batch_norm_train`].
    pub fn batch_norm_eval(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        blocks: Rc<Vec<usize>>,
        mean: &Tensor<T>,
        var: &Tensor<T>,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let (_, c, inner) = channel_view(x.shape())?;
        let nb = check_blocks(&blocks, c, gamma.value().shape(), beta.value().shape())?;
        if mean.shape() != [nb] || var.shape() != [nb] {
            return Err(Error::shape("batch norm statistics shape mismatch"));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let blocks_n = nb;
        let inv_std: Vec<T> = var
            .data()
            .iter()
            .map(|v| T::from_f64(1.0 / (v.as_f64() + BN_EPS).sqrt()))
            .collect();
        let mean = mean.clone();
        let block_of = move |i: usize| blocks[i % c];
        let blocks = blocks_n;
        let mut xhat = (*x).clone();
        for (i, chunk) in xhat.data_mut().chunks_exact_mut(inner).enumerate() {
            let f = block_of(i);
            let (m, s) = (mean.data()[f], inv_std[f]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
        }
        let mut out = xhat.clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(inner).enumerate() {
            let f = block_of(i);
            let (ga, be) = (gv.data()[f], bv.data()[f]);
            chunk.iter_mut().for_each(|v| *v = *v * ga + be);
        }
        self.graph.op("batch_norm_eval", out, &[self, gamma, beta], move |g, needs| {
            let mut sum_g = vec![T::zero(); blocks];
            let mut sum_gx = vec![T::zero(); blocks];
            for (i, (gc, xc)) in g.data().chunks_exact(inner).zip(xhat.data().chunks_exact(inner)).enumerate() {
                let f = block_of(i);
                for (&a, &b) in gc.iter().zip(xc) {
                    sum_g[f] += a;
                    sum_gx[f] += a * b;
                }
            }
            let gx = if needs[0] {
                let mut gx = g.clone();
                for (i, chunk) in gx.data_mut().chunks_exact_mut(inner).enumerate() {
                    let f = block_of(i);
                    let s = gv.data()[f] * inv_std[f];
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                Some(gx)
            } else {
                None
            };
            Ok(vec![
                gx,
                if needs[1] { Some(Tensor::new(vec![blocks], sum_gx)?) } else { None },
                if needs[2] { Some(Tensor::new(vec![blocks], sum_g)?) } else { None },
            ])
        })
    }

    /// Reduce over the orientation sub-axis of a regular-representation
    /// tensor `[B, F*N, ...] -> [B, F, ...]` (channel `c = f*N + o`). The mean
    /// sums in sorted order, so it is bitwise invariant to cyclic shifts of
    /// the orientation axis.
    pub fn orientation_pool(self, n: usize, kind: PoolKind) -> Result<Var<'g, T>> {
        let x = self.value();
        let (batch, c, inner) = channel_view(x.shape())?;
        if n == 0 || c % n != 0 {
            return Err(Error::shape(format!("{c} channels not divisible by N={n}")));
        }
        let fields = c / n;
        let mut out_shape = x.shape().to_vec();
        out_shape[1] = fields;
        let mut out = Vec::with_capacity(batch * fields * inner);
        let mut argmax = Vec::new();
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut buf = vec![T::zero(); n];
        let xd = x.data();
        for b in 0..batch {
            for f in 0..fields {
                for pos in 0..inner {
                    for (o, slot) in buf.iter_mut().enumerate() {
                        *slot = xd[((b * c) + f * n + o) * inner + pos];
                    }
                    match kind {
                        PoolKind::Mean => out.push(sorted_sum(&mut buf) * inv_n),
                        PoolKind::Max => {
                            let (best, val) = buf
                                .iter()
                                .enumerate()
                                .fold((0, buf[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
                            out.push(val);
                            argmax.push(best);
                        }
                    }
                }
            }
        }
        let in_shape = x.shape().to_vec();
        let out = Tensor::new(out_shape, out)?;
        self.graph.op("orientation_pool", out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            let gd = gx.data_mut();
            for (idx, &gv) in g.data().iter().enumerate() {
                let pos = idx % inner;
                let f = (idx / inner) % fields;
                let b = idx / (inner * fields);
                match kind {
                    PoolKind::Mean => {
                        for o in 0..n {
                            gd[((b * c) + f * n + o) * inner + pos] = gv * inv_n;
                        }
                    }
                    PoolKind::Max => {
                        gd[((b * c) + f * n + argmax[idx]) * inner + pos] = gv;
                    }
                }
            }
            Ok(vec![Some(gx)])
        })
    }

    /// Output channel `c` is input channel `perm[c]`.
    pub fn permute_channels(self, perm: Rc<Vec<usize>>) -> Result<Var<'g, T>> {
        let x = self.value();
        let (batch, c, inner) = channel_view(x.shape())?;
        if perm.len() != c {
            return Err(Error::shape(format!("permutation of {} for {c} channels", perm.len())));
        }
        let mut out = Vec::with_capacity(x.numel());
        for b in 0..batch {
            for &src in perm.iter() {
                out.extend_from_slice(&x.data()[(b * c + src) * inner..][..inner]);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.graph.op("permute_channels", out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(g.shape());
            let gd = gx.data_mut();
            for b in 0..batch {
                for (dst, &src) in perm.iter().enumerate() {
                    gd[(b * c + src) * inner..][..inner]
                        .copy_from_slice(&g.data()[(b * c + dst) * inner..][..inner]);
                }
            }
            Ok(vec![Some(gx)])
        })
    }

    /// Channels `[start, end)` along axis 1.
    pub fn select_channels(self, start: usize, end: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (batch, c, inner) = channel_view(x.shape())?;
        if start >= end || end > c {
            return Err(Error::shape(format!("channel range [{start}, {end}) of {c}")));
        }
        let width = end - start;
        let mut out = Vec::with_capacity(batch * width * inner);
        for b in 0..batch {
            out.extend_from_slice(&x.data()[(b * c + start) * inner..(b * c + end) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[1] = width;
        let in_shape = x.shape().to_vec();
        let out = Tensor::new(shape, out)?;
        self.graph.op("select_channels", out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            for b in 0..batch {
                gx.data_mut()[(b * c + start) * inner..(b * c + end) * inner]
                    .copy_from_slice(&g.data()[b * width * inner..(b + 1) * width * inner]);
            }
            Ok(vec![Some(gx)])
        })
    }

    /// Mean cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let (batch, k) = match x.shape() {
            [b, k] => (*b, *k),
            s => return Err(Error::shape(format!("cross entropy on shape {s:?}"))),
        };
        if labels.len() != batch || labels.iter().any(|&l| l >= k) {
            return Err(Error::invalid("labels do not match logits"));
        }
        let mut probs = vec![0.0f64; batch * k];
        let mut loss = 0.0;
        for (b, row) in x.data().chunks_exact(k).enumerate() {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
            for (j, v) in row.iter().enumerate() {
                probs[b * k + j] = (v.as_f64() - m).exp() / z;
            }
            loss += m + z.ln() - row[labels[b]].as_f64();
        }
        let labels = labels.to_vec();
        let out = Tensor::scalar(T::from_f64(loss / batch as f64));
        self.graph.op("cross_entropy", out, &[self], move |g, _| {
            let scale = g.data()[0].as_f64() / batch as f64;
            let mut grad = probs.clone();
            for (b, &l) in labels.iter().enumerate() {
                grad[b * k + l] -= 1.0;
            }
            let data = grad.iter().map(|&v| T::from_f64(v * scale)).collect();
            Ok(vec![Some(Tensor::new(vec![batch, k], data)?)])
        })
    }

    /// Mean of `1 - cos(m_b (theta_b - target_b))` over a `[B]` angle vector
    /// (radians). `orders[b]` is the rotational symmetry order of sample `b`;
    /// order 1 is the plain cosine angular loss.
    pub fn angular_loss(self, targets: &[f64], orders: &[u32]) -> Result<Var<'g, T>> {
        let x = self.value();
        let batch = x.numel();
        if targets.len() != batch || orders.len() != batch {
            return Err(Error::invalid("angular targets do not match predictions"));
        }
        let diffs: Vec<f64> = x
            .data()
            .iter()
            .zip(targets)
            .zip(orders)
            .map(|((p, t), &m)| m as f64 * (p.as_f64() - t))
            .collect();
        let loss = diffs.iter().map(|d| 1.0 - d.cos()).sum::<f64>() / batch as f64;
        let orders = orders.to_vec();
        let shape = x.shape().to_vec();
        self.graph.op("angular_loss", Tensor::scalar(T::from_f64(loss)), &[self], move |g, _| {
            let scale = g.data()[0].as_f64() / batch as f64;
            let data = diffs
                .iter()
                .zip(&orders)
                .map(|(d, &m)| T::from_f64(scale * m as f64 * d.sin()))
                .collect();
            Ok(vec![Some(Tensor::new(shape.clone(), data)?)])
        })
    }

    /// Circular soft-argmax of `[B, K]` orientation responses; see
    /// [`AngleReadout`].
    pub fn angle_readout(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (batch, k) = match x.shape() {
            [b, k] => (*b, *k),
            s => return Err(Error::shape(format!("angle readout on shape {s:?}"))),
        };
        let readout = AngleReadout::new(k);
        let mut angles = Vec::with_capacity(batch);
        let mut cache = Vec::with_capacity(batch);
        for row in x.data().chunks_exact(k) {
            let r: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let (theta, p, cx, cy) = readout.eval(&r);
            angles.push(T::from_f64(theta));
            cache.push((p, cx, cy));
        }
        let out = Tensor::new(vec![batch], angles)?;
        self.graph.op("angle_readout", out, &[self], move |g, _| {
            let mut data = Vec::with_capacity(batch * k);
            for (b, (p, cx, cy)) in cache.iter().enumerate() {
                let r2 = cx * cx + cy * cy;
                let gb = g.data()[b].as_f64();
                for j in 0..k {
                    let d = if r2 > 0.0 {
                        p[j] * (cx * readout.sin[j] - cy * readout.cos[j]) / r2
                    } else {
                        0.0
                    };
                    data.push(T::from_f64(gb * d));
                }
            }
            Ok(vec![Some(Tensor::new(vec![batch, k], data)?)])
        })
    }
}

/// Soft-argmax over `K` orientation bins placed at angles `2*pi*o/K`
/// (clockwise in image coordinates): `theta = atan2(sum p_o sin phi_o,
/// sum p_o cos phi_o)` with `p = softmax(r)` at temperature 1. Cyclically
/// shifting `r` by `s` bins shifts `theta` by `2*pi*s/K`.
#[derive(Clone, Debug)]
pub struct AngleReadout {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl AngleReadout {
    pub fn new(bins: usize) -> Self {
        let phi = |o: usize| 2.0 * PI * o as f64 / bins as f64;
        AngleReadout {
            cos: (0..bins).map(|o| phi(o).cos()).collect(),
            sin: (0..bins).map(|o| phi(o).sin()).collect(),
        }
    }

    /// `(theta, softmax, cx, cy)`; theta in `(-pi, pi]`.
    pub fn eval(&self, responses: &[f64]) -> (f64, Vec<f64>, f64, f64) {
        let m = responses.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let e: Vec<f64> = responses.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / z).collect();
        let cx: f64 = p.iter().zip(&self.cos).map(|(a, b)| a * b).sum();
        let cy: f64 = p.iter().zip(&self.sin).map(|(a, b)| a * b).sum();
        (cy.atan2(cx), p, cx, cy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::rng::Rng;

    #[test]
    fn hard_sigmoid_values() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![4], vec![-4.0, 0.0, 3.0, 10.0]).unwrap());
        assert_eq!(x.hard_sigmoid().unwrap().value().data(), &[0.0, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn repeat_blocks_layout() {
        let g = Graph::<f32>::new();
        let s = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let r = s.repeat_blocks(3).unwrap().value();
        assert_eq!(r.shape(), &[1, 6]);
        assert_eq!(r.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn orientation_mean_is_bitwise_shift_invariant() {
        let mut rng = Rng::new(11);
        let g = Graph::<f32>::inference();
        let x = Tensor::<f32>::randn(&[2, 24, 3, 3], &mut rng);
        let base = g.constant(x.clone()).orientation_pool(8, PoolKind::Mean).unwrap().value();
        for s in 1..8 {
            let rolled = x.reshape(&[2, 3, 8, 9]).unwrap().roll(s, 2).unwrap().reshape(&[2, 24, 3, 3]).unwrap();
            let pooled = g.constant(rolled).orientation_pool(8, PoolKind::Mean).unwrap().value();
            assert_eq!(pooled.data(), base.data());
        }
    }

    #[test]
    fn batch_norm_of_constant_is_shift() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 4, 3, 3], 5.0));
        let gamma = g.leaf(Tensor::full(&[2], 1.7));
        let beta = g.leaf(Tensor::new(vec![2], vec![0.25, -1.0]).unwrap());
        let (y, mean, var) = x.batch_norm_train(gamma, beta, Rc::new(vec![0, 0, 1, 1])).unwrap();
        assert_eq!(mean.data(), &[5.0, 5.0]);
        assert_eq!(var.data(), &[0.0, 0.0]);
        let y = y.value();
        for (i, chunk) in y.data().chunks_exact(9).enumerate() {
            let expect = if (i % 4) < 2 { 0.25 } else { -1.0 };
            assert!(chunk.iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn angle_readout_shifts_with_roll() {
        let mut rng = Rng::new(4);
        let r: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let ro = AngleReadout::new(8);
        let (t0, ..) = ro.eval(&r);
        let mut rolled = r.clone();
        rolled.rotate_right(2);
        let (t1, ..) = ro.eval(&rolled);
        let d = (t1 - t0).rem_euclid(2.0 * PI);
        assert!((d - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 4]));
        let l = x.cross_entropy(&[0, 3]).unwrap();
        assert!((l.value().data()[0] - 4.0f64.ln()).abs() < 1e-12);
    }
}
