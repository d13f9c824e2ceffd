use super::kernels::{self, gelu_grad};
use super::{split_axis, Node, Op, Tensor};

type Grad = Option<Vec<f64>>;

fn want(t: &Tensor) -> bool {
    t.requires_grad()
}

/// Gradient contributions for each parent of `op`, in `Op::parents` order.
pub(super) fn backward(op: &Op, out: &Node, g: &[f64]) -> Vec<Grad> {
    match op {
        Op::Add(a, b) => vec![want(a).then(|| g.to_vec()), want(b).then(|| g.to_vec())],
        Op::Sub(a, b) => vec![
            want(a).then(|| g.to_vec()),
            want(b).then(|| g.iter().map(|v| -v).collect()),
        ],
        Op::Mul(a, b) => vec![
            want(a).then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect()),
            want(b).then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect()),
        ],
        Op::Div(a, b) => vec![
            want(a).then(|| g.iter().zip(b.data()).map(|(g, b)| g / b).collect()),
            want(b).then(|| {
                g.iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect()
            }),
        ],
        Op::AddRow(a, row) => {
            let ga = want(a).then(|| g.to_vec());
            let grow = want(row).then(|| {
                let d = row.numel();
                let mut acc = vec![0.0; d];
                for chunk in g.chunks(d) {
                    acc.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                }
                acc
            });
            vec![ga, grow]
        }
        Op::Affine(a, scale) => vec![want(a).then(|| g.iter().map(|v| v * scale).collect())],
        Op::Exp(a) => vec![want(a).then(|| g.iter().zip(&out.data).map(|(g, y)| g * y).collect())],
        Op::Log(a) => vec![want(a).then(|| g.iter().zip(a.data()).map(|(g, x)| g / x).collect())],
        Op::Sigmoid(a) => vec![want(a).then(|| {
            g.iter().zip(&out.data).map(|(g, y)| g * y * (1.0 - y)).collect()
        })],
        Op::Gelu(a) => vec![want(a).then(|| {
            g.iter().zip(a.data()).map(|(g, &x)| g * gelu_grad(x)).collect()
        })],
        Op::Matmul { a, b } => matmul_backward(a, b, g),
        Op::Permute(a, perm) => vec![want(a).then(|| {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            kernels::permute(g, &out.shape, &inverse).1
        })],
        Op::Reshape(a) => vec![want(a).then(|| g.to_vec())],
        Op::Slice { src, axis, start } => vec![want(src).then(|| {
            let (outer, extent, inner) = split_axis(src.shape(), *axis);
            let len = out.shape[*axis];
            let mut d = vec![0.0; src.numel()];
            for o in 0..outer {
                let dst = o * extent * inner + start * inner;
                d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            d
        })],
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(&out.shape, *axis);
            let mut offset = 0;
            let mut grads = Vec::with_capacity(parts.len());
            for p in parts {
                let ext = p.shape()[*axis];
                grads.push(want(p).then(|| {
                    let mut d = Vec::with_capacity(p.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    d
                }));
                offset += ext;
            }
            grads
        }
        Op::SumAxis { src, axis } => vec![want(src).then(|| {
            let (outer, extent, inner) = split_axis(src.shape(), *axis);
            let mut d = Vec::with_capacity(src.numel());
            for o in 0..outer {
                for _ in 0..extent {
                    d.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            d
        })],
        Op::SumAll(a) => vec![want(a).then(|| vec![g[0]; a.numel()])],
        Op::Expand { src, axis } => vec![want(src).then(|| {
            let (outer, size, inner) = split_axis(&out.shape, *axis);
            let mut d = vec![0.0; src.numel()];
            for o in 0..outer {
                for s in 0..size {
                    let chunk = &g[(o * size + s) * inner..(o * size + s + 1) * inner];
                    d[o * inner..(o + 1) * inner].iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                }
            }
            d
        })],
        Op::Softmax { src, axis } => vec![want(src).then(|| {
            let (outer, extent, inner) = split_axis(src.shape(), *axis);
            let y = &out.data;
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |e: usize| (o * extent + e) * inner + i;
                    let dot: f64 = (0..extent).map(|e| g[at(e)] * y[at(e)]).sum();
                    for e in 0..extent {
                        d[at(e)] = y[at(e)] * (g[at(e)] - dot);
                    }
                }
            }
            d
        })],
        Op::LogSoftmax { src, axis } => vec![want(src).then(|| {
            let (outer, extent, inner) = split_axis(src.shape(), *axis);
            let y = &out.data;
            let mut d = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |e: usize| (o * extent + e) * inner + i;
                    let total: f64 = (0..extent).map(|e| g[at(e)]).sum();
                    for e in 0..extent {
                        d[at(e)] = g[at(e)] - y[at(e)].exp() * total;
                    }
                }
            }
            d
        })],
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = gain.numel();
            let gx = want(x).then(|| {
                let mut dx = vec![0.0; x.numel()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let gr = &g[row.clone()];
                    let xr = &xhat[row.clone()];
                    let dxhat: Vec<f64> = gr.iter().zip(gain.data()).map(|(g, w)| g * w).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for (j, out) in dx[row].iter_mut().enumerate() {
                        *out = rs * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
                dx
            });
            let ggain = want(gain).then(|| {
                let mut acc = vec![0.0; d];
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        acc[j] += gr[j] * xr[j];
                    }
                }
                acc
            });
            let gbias = want(bias).then(|| {
                let mut acc = vec![0.0; d];
                for gr in g.chunks(d) {
                    acc.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                }
                acc
            });
            vec![gx, ggain, gbias]
        }
        Op::Gather { table, ids } => vec![want(table).then(|| {
            let d = table.shape()[1];
            let mut acc = vec![0.0; table.numel()];
            for (row, &id) in ids.iter().enumerate() {
                acc[id * d..(id + 1) * d]
                    .iter_mut()
                    .zip(&g[row * d..(row + 1) * d])
                    .for_each(|(a, v)| *a += v);
            }
            acc
        })],
        Op::StraightThrough(soft) => vec![want(soft).then(|| g.to_vec())],
        Op::GateResidual { h, out: block, gate } => {
            let gv = gate.data()[0];
            let gh = (want(h) && gv != 1.0).then(|| g.iter().map(|v| (1.0 - gv) * v).collect());
            let gout = (want(block) && gv != 0.0).then(|| {
                if gv == 1.0 {
                    g.to_vec()
                } else {
                    g.iter().map(|v| gv * v).collect()
                }
            });
            let ggate = want(gate).then(|| {
                let s: f64 = g
                    .iter()
                    .zip(block.data().iter().zip(h.data()))
                    .map(|(g, (o, h))| g * (o - h))
                    .sum();
                vec![s]
            });
            vec![gh, gout, ggate]
        }
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f64]) -> Vec<Grad> {
    let r = a.rank();
    let (m, k) = (a.shape()[r - 2], a.shape()[r - 1]);
    let n = b.shape()[b.rank() - 1];
    let batch: usize = a.shape()[..r - 2].iter().product();
    let shared = b.rank() == 2;
    let ga = want(a).then(|| {
        let mut da = vec![0.0; a.numel()];
        if shared {
            kernels::matmul_grad_lhs(g, b.data(), &mut da, batch * m, k, n);
        } else {
            for bi in 0..batch {
                kernels::matmul_grad_lhs(
                    &g[bi * m * n..(bi + 1) * m * n],
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    &mut da[bi * m * k..(bi + 1) * m * k],
                    m,
                    k,
                    n,
                );
            }
        }
        da
    });
    let gb = want(b).then(|| {
        let mut db = vec![0.0; b.numel()];
        if shared {
            kernels::matmul_grad_rhs(a.data(), g, &mut db, batch * m, k, n);
        } else {
            for bi in 0..batch {
                kernels::matmul_grad_rhs(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &g[bi * m * n..(bi + 1) * m * n],
                    &mut db[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
        }
        db
    });
    vec![ga, gb]
}
