use super::kernels::{self, gelu, sigmoid};
use super::{split_axis, Op, Tensor};
use crate::error::{contract, Error, Result};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

impl Tensor {
    fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        contract!(
            self.shape() == other.shape(),
            "{what}: shape {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data().iter().map(|&v| f(v)).collect()
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        contract!(axis < self.rank(), "axis {axis} out of range for shape {:?}", self.shape());
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.zip_with(other, |a, b| a + b);
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.zip_with(other, |a, b| a - b);
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self.zip_with(other, |a, b| a * b);
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Mul(self.clone(), other.clone())))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "div")?;
        let data = self.zip_with(other, |a, b| a / b);
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Div(self.clone(), other.clone())))
    }

    /// Adds a rank-1 `row` along the last axis of every leading index.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let last = *self.shape().last().unwrap_or(&0);
        contract!(
            row.rank() == 1 && row.numel() == last,
            "add_row: row {:?} does not match last axis of {:?}",
            row.shape(),
            self.shape()
        );
        let r = row.data();
        let data = self
            .data()
            .chunks(last.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::AddRow(self.clone(), row.clone())))
    }

    /// `self * scale + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Tensor {
        let data = self.map(|v| v * scale + shift);
        Tensor::from_op(self.shape().to_vec(), data, Op::Affine(self.clone(), scale))
    }

    pub fn scale(&self, scale: f64) -> Tensor {
        self.affine(scale, 0.0)
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(f64::exp), Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(f64::ln), Op::Log(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(sigmoid), Op::Sigmoid(self.clone()))
    }

    /// GELU, tanh approximation with cubic coefficient 0.044715.
    pub fn gelu(&self) -> Tensor {
        Tensor::from_op(self.shape().to_vec(), self.map(gelu), Op::Gelu(self.clone()))
    }

    /// Matrix product over the last two axes.
    ///
    /// `self` is `[.., m, k]`. `rhs` is either a shared `[k, n]` matrix or a
    /// batch `[.., k, n]` with the same leading extents as `self`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        contract!(self.rank() >= 2, "matmul lhs must be at least rank 2, got {:?}", self.shape());
        let r = self.rank();
        let (m, k) = (self.shape()[r - 2], self.shape()[r - 1]);
        let lead = &self.shape()[..r - 2];
        let batch: usize = lead.iter().product();
        let shared = rhs.rank() == 2;
        contract!(
            shared || (rhs.rank() == r && &rhs.shape()[..r - 2] == lead),
            "matmul: rhs {:?} incompatible with lhs {:?}",
            rhs.shape(),
            self.shape()
        );
        let rr = rhs.rank();
        let (k2, n) = (rhs.shape()[rr - 2], rhs.shape()[rr - 1]);
        contract!(k == k2, "matmul inner extents differ: {:?} · {:?}", self.shape(), rhs.shape());
        let mut out = vec![0.0; batch * m * n];
        if shared {
            kernels::matmul_acc(self.data(), rhs.data(), &mut out, batch * m, k, n);
        } else {
            for bi in 0..batch {
                kernels::matmul_acc(
                    &self.data()[bi * m * k..(bi + 1) * m * k],
                    &rhs.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        Ok(Tensor::from_op(shape, out, Op::Matmul { a: self.clone(), b: rhs.clone() }))
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        contract!(
            sorted == (0..self.rank()).collect::<Vec<_>>(),
            "permute: {perm:?} is not a permutation of rank {}",
            self.rank()
        );
        let (shape, data) = kernels::permute(self.data(), self.shape(), perm);
        Ok(Tensor::from_op(shape, data, Op::Permute(self.clone(), perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        contract!(self.rank() >= 2, "transpose needs rank >= 2, got {:?}", self.shape());
        let r = self.rank();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        contract!(n == self.numel(), "reshape {:?} -> {shape:?}", self.shape());
        Ok(Tensor::from_op(shape.to_vec(), self.data().to_vec(), Op::Reshape(self.clone())))
    }

    /// Inserts a unit axis at `axis`.
    pub fn unsqueeze(&self, axis: usize) -> Result<Tensor> {
        contract!(axis <= self.rank(), "unsqueeze axis {axis} for {:?}", self.shape());
        let mut shape = self.shape().to_vec();
        shape.insert(axis, 1);
        self.reshape(&shape)
    }

    /// Range `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        contract!(
            start + len <= self.shape()[axis],
            "slice [{start}, {}) exceeds axis {axis} of {:?}",
            start + len,
            self.shape()
        );
        let (outer, extent, inner) = split_axis(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(&self.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(shape, data, Op::Slice { src: self.clone(), axis, start }))
    }

    /// Index `i` along `axis`, dropping that axis.
    pub fn select(&self, axis: usize, i: usize) -> Result<Tensor> {
        let s = self.slice(axis, i, 1)?;
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        s.reshape(&shape)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        contract!(!parts.is_empty(), "concat of zero tensors");
        let first = &parts[0];
        first.check_axis(axis)?;
        for p in parts {
            contract!(
                p.rank() == first.rank()
                    && p.shape()[..axis] == first.shape()[..axis]
                    && p.shape()[axis + 1..] == first.shape()[axis + 1..],
                "concat along {axis}: {:?} vs {:?}",
                p.shape(),
                first.shape()
            );
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let ext = p.shape()[axis];
                data.extend_from_slice(&p.data()[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(shape, data, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Sums out `axis`.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, extent, inner) = split_axis(self.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &self.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(shape, data, Op::SumAxis { src: self.clone(), axis }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Repeats a unit axis `size` times.
    pub fn expand(&self, axis: usize, size: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        contract!(self.shape()[axis] == 1, "expand axis {axis} of {:?} is not 1", self.shape());
        let (outer, _, inner) = split_axis(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * size * inner);
        for o in 0..outer {
            let chunk = &self.data()[o * inner..(o + 1) * inner];
            for _ in 0..size {
                data.extend_from_slice(chunk);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = size;
        Ok(Tensor::from_op(shape, data, Op::Expand { src: self.clone(), axis }))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let data = softmax_along(self.data(), self.shape(), axis, false);
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Softmax { src: self.clone(), axis }))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let data = softmax_along(self.data(), self.shape(), axis, true);
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::LogSoftmax { src: self.clone(), axis }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        contract!(
            gain.shape() == [d] && bias.shape() == [d],
            "layer_norm: gain {:?} / bias {:?} vs width {d}",
            gain.shape(),
            bias.shape()
        );
        let rows = self.numel() / d.max(1);
        let mut out = Vec::with_capacity(self.numel());
        let mut xhat = Vec::with_capacity(self.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in self.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(xh * gain.data()[j] + bias.data()[j]);
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LayerNorm { x: self.clone(), gain: gain.clone(), bias: bias.clone(), xhat, rstd },
        ))
    }

    /// Rows of `table` (`[vocab, d]`) at `ids`, giving `[ids.len(), d]`.
    pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        contract!(table.rank() == 2, "gather_rows table must be rank 2, got {:?}", table.shape());
        let (vocab, d) = (table.shape()[0], table.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Input(format!("token id {id} outside vocabulary of {vocab}")));
            }
            data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            data,
            Op::Gather { table: table.clone(), ids: ids.to_vec() },
        ))
    }

    /// Carries the values of `hard` forward while routing gradient to `soft`.
    pub fn straight_through(soft: &Tensor, hard: &[f64]) -> Result<Tensor> {
        contract!(
            soft.numel() == hard.len(),
            "straight_through: {} hard values for soft {:?}",
            hard.len(),
            soft.shape()
        );
        Ok(Tensor::from_op(soft.shape().to_vec(), hard.to_vec(), Op::StraightThrough(soft.clone())))
    }

    /// `gate · out + (1 − gate) · h` for a one-element `gate`.
    ///
    /// A gate of exactly 1 or 0 forwards `out` or `h` bit for bit.
    pub fn gate_residual(h: &Tensor, out: &Tensor, gate: &Tensor) -> Result<Tensor> {
        h.same_shape(out, "gate_residual")?;
        let g = gate.item()?;
        let data = if g == 1.0 {
            out.data().to_vec()
        } else if g == 0.0 {
            h.data().to_vec()
        } else {
            h.zip_with(out, |hv, ov| g * ov + (1.0 - g) * hv)
        };
        Ok(Tensor::from_op(
            h.shape().to_vec(),
            data,
            Op::GateResidual { h: h.clone(), out: out.clone(), gate: gate.clone() },
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        let d = self.sub(target)?;
        Ok(d.mul(&d)?.mean_all())
    }
}

pub(crate) fn softmax_along(data: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, extent, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |e: usize| (o * extent + e) * inner + i;
            let max = (0..extent).map(|e| data[at(e)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..extent).map(|e| (data[at(e)] - max).exp()).sum();
            if log {
                let lse = sum.ln();
                for e in 0..extent {
                    out[at(e)] = data[at(e)] - max - lse;
                }
            } else {
                for e in 0..extent {
                    out[at(e)] = (data[at(e)] - max).exp() / sum;
                }
            }
        }
    }
    out
}
