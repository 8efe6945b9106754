//! Differentiable operations on [`Var`].

use super::tape::{BackwardFn, Var};
use super::{gemm_acc, numel, Scalar, Tensor, KL_EPS};
use crate::error::{Error, Result};

fn same_tape<F>(a: &Var<'_, F>, b: &Var<'_, F>) {
    assert!(
        std::ptr::eq(a.tape, b.tape),
        "vars recorded on different tapes"
    );
}

fn check_nan<F: Scalar>(op: &'static str, data: &[F]) -> Result<()> {
    if data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric {
            op,
            msg: "NaN input".into(),
        });
    }
    Ok(())
}

fn softmax_rows<F: Scalar>(data: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); data.len()];
    for (row, dst) in data.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        let inv = F::one() / total;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    out
}

/// Softmax along the last axis, stabilised by subtracting the row maximum.
pub fn softmax<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    check_nan("softmax", x.data())?;
    let n = *x.shape().last().unwrap_or(&1);
    Ok(Tensor::from_parts(x.shape().to_vec(), softmax_rows(x.data(), n.max(1))))
}

fn kl_rows<F: Scalar>(p: &[F], q: &[F], n: usize) -> Vec<F> {
    let eps = F::of(KL_EPS);
    p.chunks_exact(n)
        .zip(q.chunks_exact(n))
        .map(|(pr, qr)| {
            pr.iter()
                .zip(qr)
                .filter(|(&pi, _)| pi > F::zero())
                .map(|(&pi, &qi)| pi * (pi / qi.max(eps)).ln())
                .sum()
        })
        .collect()
}

fn check_probabilities<F: Scalar>(op: &'static str, data: &[F]) -> Result<()> {
    check_nan(op, data)?;
    if data.iter().any(|&v| v < F::zero()) {
        return Err(Error::Domain {
            op,
            msg: "negative probability".into(),
        });
    }
    Ok(())
}

/// KL(p ‖ q) for every slice along the last axis. `q` is floored at
/// [`KL_EPS`]; terms with `p == 0` contribute zero.
pub fn kl_divergence<F: Scalar>(p: &Tensor<F>, q: &Tensor<F>) -> Result<Tensor<F>> {
    if p.shape() != q.shape() || p.rank() == 0 {
        return Err(Error::shape("kl_divergence", p.shape(), q.shape()));
    }
    check_probabilities("kl_divergence", p.data())?;
    check_probabilities("kl_divergence", q.data())?;
    let n = p.shape()[p.rank() - 1];
    let shape = p.shape()[..p.rank() - 1].to_vec();
    Ok(Tensor::from_parts(shape, kl_rows(p.data(), q.data(), n)))
}

/// `tanh` through a single `exp`; saturates cleanly for large `|x|`.
fn tanh_exp<F: Scalar>(x: F) -> F {
    let e = (x + x).exp();
    F::one() - F::of(2.0) / (e + F::one())
}

const GELU_A: f64 = 0.044715;

fn gelu_inner<F: Scalar>(x: F) -> F {
    F::of((2.0 / std::f64::consts::PI).sqrt()) * (x + F::of(GELU_A) * x * x * x)
}

fn gelu_value<F: Scalar>(x: F) -> F {
    F::of(0.5) * x * (F::one() + tanh_exp(gelu_inner(x)))
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let half = F::of(0.5);
    let t = tanh_exp(gelu_inner(x));
    half * (F::one() + t)
        + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0 * GELU_A) * x * x)
}

fn permute_data<F: Scalar>(data: &[F], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<F>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    // Trailing axes left in place are copied as contiguous blocks.
    let mut keep = rank;
    while keep > 0 && perm[keep - 1] == keep - 1 {
        keep -= 1;
    }
    let block: usize = shape[keep..].iter().product();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out_shape, out);
    }
    let mut idx = vec![0usize; keep];
    for _ in 0..total / block {
        let src: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.extend_from_slice(&data[src..src + block]);
        for d in (0..keep).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl<'t, F: Scalar> Var<'t, F> {
    fn unary(
        self,
        value: Tensor<F>,
        make: impl FnOnce(usize) -> BackwardFn<F>,
    ) -> Var<'t, F> {
        let id = self.id;
        self.tape.push_op(value, &[id], || make(id))
    }

    fn binary(
        self,
        other: Var<'t, F>,
        value: Tensor<F>,
        make: impl FnOnce(usize, usize) -> BackwardFn<F>,
    ) -> Var<'t, F> {
        same_tape(&self, &other);
        let (a, b) = (self.id, other.id);
        self.tape.push_op(value, &[a, b], || make(a, b))
    }

    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let value = self.value().add(&other.value())?;
        Ok(self.binary(other, value, |a, b| {
            Box::new(move |g, s| {
                s.acc(a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                s.acc(b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            })
        }))
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let value = self.value().sub(&other.value())?;
        Ok(self.binary(other, value, |a, b| {
            Box::new(move |g, s| {
                s.acc(a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                s.acc(b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            })
        }))
    }

    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let (x, y) = (self.value(), other.value());
        let value = x.mul(&y)?;
        Ok(self.binary(other, value, |a, b| {
            Box::new(move |g, s| {
                s.acc(a, |ga| {
                    for ((d, &gi), &yi) in ga.iter_mut().zip(g).zip(y.data()) {
                        *d += gi * yi;
                    }
                });
                s.acc(b, |gb| {
                    for ((d, &gi), &xi) in gb.iter_mut().zip(g).zip(x.data()) {
                        *d += gi * xi;
                    }
                });
            })
        }))
    }

    pub fn square(self) -> Var<'t, F> {
        let x = self.value();
        let value = x.map(|v| v * v);
        self.unary(value, |a| {
            Box::new(move |g, s| {
                s.acc(a, |ga| {
                    for ((d, &gi), &xi) in ga.iter_mut().zip(g).zip(x.data()) {
                        *d += F::of(2.0) * gi * xi;
                    }
                });
            })
        })
    }

    pub fn scale(self, k: F) -> Var<'t, F> {
        let value = self.value().scale(k);
        self.unary(value, |a| {
            Box::new(move |g, s| {
                s.acc(a, |ga| ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * k));
            })
        })
    }

    pub fn add_scalar(self, k: F) -> Var<'t, F> {
        let value = self.value().map(|v| v + k);
        self.unary(value, |a| {
            Box::new(move |g, s| {
                s.acc(a, |ga| ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi));
            })
        })
    }

    fn trailing_len(&self, other: &Var<'t, F>, op: &'static str) -> Result<usize> {
        let (xs, bs) = (self.shape(), other.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != bs[..] {
            return Err(Error::shape(op, &xs, &bs));
        }
        Ok(numel(&bs))
    }

    /// `self + bias`, where `bias` matches the trailing dimensions of `self`.
    pub fn add_bias(self, bias: Var<'t, F>) -> Result<Var<'t, F>> {
        let n = self.trailing_len(&bias, "add_bias")?;
        let (x, b) = (self.value(), bias.value());
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b.data()).for_each(|(o, &bi)| *o += bi);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.binary(bias, value, |a, bid| {
            Box::new(move |g, s| {
                s.acc(a, |ga| ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi));
                s.acc(bid, |gb| {
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(d, &gi)| *d += gi);
                    }
                });
            })
        }))
    }

    /// `self * weight`, where `weight` matches the trailing dimensions.
    pub fn mul_bias(self, weight: Var<'t, F>) -> Result<Var<'t, F>> {
        let n = self.trailing_len(&weight, "mul_bias")?;
        let (x, w) = (self.value(), weight.value());
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(w.data()).for_each(|(o, &wi)| *o *= wi);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.binary(weight, value, |a, wid| {
            Box::new(move |g, s| {
                s.acc(a, |ga| {
                    for (grow, drow) in g.chunks_exact(n).zip(ga.chunks_exact_mut(n)) {
                        for ((d, &gi), &wi) in drow.iter_mut().zip(grow).zip(w.data()) {
                            *d += gi * wi;
                        }
                    }
                });
                s.acc(wid, |gw| {
                    for (grow, xrow) in g.chunks_exact(n).zip(x.data().chunks_exact(n)) {
                        for ((d, &gi), &xi) in gw.iter_mut().zip(grow).zip(xrow) {
                            *d += gi * xi;
                        }
                    }
                });
            })
        }))
    }

    /// Row-wise product with a matrix: `self[.., k] · w[k, n] -> [.., n]`.
    pub fn matmul(self, w: Var<'t, F>) -> Result<Var<'t, F>> {
        let (xs, ws) = (self.shape(), w.shape());
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::shape("matmul", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = numel(&xs) / k.max(1);
        let (x, wt) = (self.value(), w.value());
        let mut out = vec![F::zero(); m * n];
        gemm_acc(m, k, n, x.data(), false, wt.data(), false, &mut out);
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_parts(shape, out);
        Ok(self.binary(w, value, |a, b| {
            Box::new(move |g, s| {
                s.acc(a, |ga| gemm_acc(m, n, k, g, false, wt.data(), true, ga));
                s.acc(b, |gb| gemm_acc(k, m, n, x.data(), true, g, false, gb));
            })
        }))
    }

    /// Batched product over the leading axis: `op(a)[N, m, k] · op(b)[N, k, n]`.
    pub fn bmm(self, other: Var<'t, F>, trans_a: bool, trans_b: bool) -> Result<Var<'t, F>> {
        let (as_, bs) = (self.shape(), other.shape());
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(Error::shape("bmm", &as_, &bs));
        }
        let batch = as_[0];
        let (m, k) = if trans_a { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
        let (kb, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if k != kb {
            return Err(Error::shape("bmm", &as_, &bs));
        }
        let (a, b) = (self.value(), other.value());
        let mut out = vec![F::zero(); batch * m * n];
        for i in 0..batch {
            gemm_acc(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                trans_a,
                &b.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::from_parts(vec![batch, m, n], out);
        Ok(self.binary(other, value, |aid, bid| {
            Box::new(move |g, s| {
                s.acc(aid, |ga| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &b.data()[i * k * n..(i + 1) * k * n];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if trans_a {
                            // a is stored k×m: d a = op(b) · gᵀ
                            gemm_acc(k, n, m, bi, trans_b, gi, true, dst);
                        } else {
                            gemm_acc(m, n, k, gi, false, bi, !trans_b, dst);
                        }
                    }
                });
                s.acc(bid, |gb| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &a.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // b is stored n×k: d b = gᵀ · op(a)
                            gemm_acc(n, m, k, gi, true, ai, trans_a, dst);
                        } else {
                            gemm_acc(k, m, n, ai, !trans_a, gi, false, dst);
                        }
                    }
                });
            })
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let value = self.value().reshape(shape)?;
        Ok(self.unary(value, |a| {
            Box::new(move |g, s| {
                s.acc(a, |ga| ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi));
            })
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, F>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("permute", &shape, perm));
        }
        let x = self.value();
        let (out_shape, out) = permute_data(x.data(), &shape, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let grad_shape = out_shape.clone();
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.unary(value, |a| {
            Box::new(move |g, s| {
                let (_, back) = permute_data(g, &grad_shape, &inverse);
                s.acc(a, |ga| ga.iter_mut().zip(&back).for_each(|(d, &gi)| *d += gi));
            })
        }))
    }

    pub fn transpose(self) -> Result<Var<'t, F>> {
        if self.shape().len() != 2 {
            return Err(Error::shape("transpose", &self.shape(), &[]));
        }
        self.permute(&[1, 0])
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        let x = self.value();
        let value = x.narrow(axis, start, len)?;
        let shape = x.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        Ok(self.unary(value, |a| {
            Box::new(move |g, s| {
                s.acc(a, |ga| {
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let base = o * dim * inner + start * inner;
                        ga[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &gi)| *d += gi);
                    }
                });
            })
        }))
    }

    /// Repeats a size-1 axis `n` times.
    pub fn repeat_axis(self, axis: usize, n: usize) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] != 1 {
            return Err(Error::shape("repeat_axis", &shape, &[axis, n]));
        }
        let x = self.value();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let row = &x.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(row);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = n;
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.unary(value, |a| {
            Box::new(move |g, s| {
                s.acc(a, |ga| {
                    for o in 0..outer {
                        let dst = &mut ga[o * inner..(o + 1) * inner];
                        for r in 0..n {
                            let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &gi)| *d += gi);
                        }
                    }
                });
            })
        }))
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::config("concat of zero tensors"))?;
        let values: Vec<Tensor<F>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<F>> = values.iter().collect();
        let value = super::concat(&refs, axis)?;
        let outer: usize = value.shape()[..axis].iter().product();
        let inner: usize = value.shape()[axis + 1..].iter().product();
        let total = value.shape()[axis];
        let dims: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let ids: Vec<usize> = parts
            .iter()
            .map(|p| {
                same_tape(&first, p);
                p.id
            })
            .collect();
        let parent_ids = ids.clone();
        Ok(first.tape.push_op(value, &parent_ids, move || {
            Box::new(move |g, s| {
                let mut offset = 0;
                for (&id, &dim) in ids.iter().zip(&dims) {
                    if s.wants(id) {
                        s.acc(id, |gp| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner
                                    ..(o * total + offset + dim) * inner];
                                gp[o * dim * inner..(o + 1) * dim * inner]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, &gi)| *d += gi);
                            }
                        });
                    }
                    offset += dim;
                }
            })
        }))
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Result<Var<'t, F>> {
        let y = softmax(&self.value())?;
        let n = *y.shape().last().unwrap_or(&1);
        let yv = y.clone();
        Ok(self.unary(y, |a| {
            Box::new(move |g, s| {
                s.acc(a, |ga| {
                    for ((grow, yrow), drow) in g
                        .chunks_exact(n)
                        .zip(yv.data().chunks_exact(n))
                        .zip(ga.chunks_exact_mut(n))
                    {
                        let dot: F = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum();
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            })
        }))
    }

    /// RMS normalisation over the last axis followed by a learned gain.
    pub fn rms_norm(self, gain: Var<'t, F>, eps: F) -> Result<Var<'t, F>> {
        let n = self.trailing_len(&gain, "rms_norm")?;
        let (x, w) = (self.value(), gain.value());
        let rows = x.len() / n.max(1);
        let mut inv_rms = Vec::with_capacity(rows);
        let mut xhat = vec![F::zero(); x.len()];
        let mut out = vec![F::zero(); x.len()];
        let nf = F::of(n as f64);
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let ms = row.iter().map(|&v| v * v).sum::<F>() / nf;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..n {
                let h = row[j] * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * w.data()[j];
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.binary(gain, value, |a, gid| {
            Box::new(move |g, s| {
                s.acc(a, |ga| {
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let dot: F = (0..n).map(|j| grow[j] * w.data()[j] * hrow[j]).sum::<F>() / nf;
                        for j in 0..n {
                            ga[r * n + j] += (grow[j] * w.data()[j] - hrow[j] * dot) * inv_rms[r];
                        }
                    }
                });
                s.acc(gid, |gw| {
                    for r in 0..rows {
                        for j in 0..n {
                            gw[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
            })
        }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, F> {
        let x = self.value();
        let value = x.map(gelu_value);
        self.unary(value, |a| {
            let dys: Vec<F> = x.data().iter().map(|&v| gelu_grad(v)).collect();
            Box::new(move |g, s| {
                s.acc(a, |ga| {
                    for ((d, &gi), &dy) in ga.iter_mut().zip(g).zip(&dys) {
                        *d += gi * dy;
                    }
                });
            })
        })
    }

    pub fn sum(self) -> Var<'t, F> {
        let value = Tensor::scalar(self.value().sum());
        self.unary(value, |a| {
            Box::new(move |g, s| {
                let gi = g[0];
                s.acc(a, |ga| ga.iter_mut().for_each(|d| *d += gi));
            })
        })
    }

    pub fn mean(self) -> Var<'t, F> {
        let x = self.value();
        let inv = F::one() / F::of(x.len().max(1) as f64);
        self.sum().scale(inv)
    }

    /// Row-wise KL(self ‖ q) over the last axis; see [`kl_divergence`].
    pub fn kl_div(self, q: Var<'t, F>) -> Result<Var<'t, F>> {
        let (p, qv) = (self.value(), q.value());
        let value = kl_divergence(&p, &qv)?;
        let n = *p.shape().last().unwrap();
        let eps = F::of(KL_EPS);
        Ok(self.binary(q, value, |a, b| {
            Box::new(move |g, s| {
                s.acc(a, |gp| {
                    for (r, &gr) in g.iter().enumerate() {
                        for j in r * n..(r + 1) * n {
                            let pi = p.data()[j];
                            if pi > F::zero() {
                                gp[j] += gr * ((pi / qv.data()[j].max(eps)).ln() + F::one());
                            }
                        }
                    }
                });
                s.acc(b, |gq| {
                    for (r, &gr) in g.iter().enumerate() {
                        for j in r * n..(r + 1) * n {
                            let qi = qv.data()[j];
                            if qi > eps {
                                gq[j] -= gr * p.data()[j] / qi;
                            }
                        }
                    }
                });
            })
        }))
    }

    /// Gathers rows of a `[n, d]` table.
    pub fn embedding(self, indices: &[usize]) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape("embedding", &shape, &[]));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "embedding row",
                index: bad,
                len: rows,
            });
        }
        let table = self.value();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_parts(vec![indices.len(), d], out);
        let indices = indices.to_vec();
        Ok(self.unary(value, |a| {
            Box::new(move |g, s| {
                s.acc(a, |ga| {
                    for (r, &i) in indices.iter().enumerate() {
                        ga[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(dst, &gi)| *dst += gi);
                    }
                });
            })
        }))
    }

    /// Mean squared error against `target`, averaged over all entries.
    pub fn mse(self, target: Var<'t, F>) -> Result<Var<'t, F>> {
        Ok(self.sub(target)?.square().mean())
    }
}
