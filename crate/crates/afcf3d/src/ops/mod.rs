//! Differentiable tensor operations. Every op validates shapes, computes the
//! forward value, records an estimated FLOP cost and registers a backward
//! closure on the [`Graph`].

mod conv;
mod norm;

pub use conv::{conv3d, naive_conv3d, ConvSpec};
pub use norm::batchnorm;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Shape5, Tensor5};

/// Elementwise nonlinearity kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
}

/// Spatial pooling kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

pub fn pointwise<E: Element>(g: &mut Graph<E>, x: NodeId, kind: Pointwise) -> Result<NodeId> {
    let xv = g.value(x).clone();
    let out = match kind {
        Pointwise::Relu => xv.map(|v| if v > E::zero() { v } else { E::zero() }),
        Pointwise::Sigmoid => xv.map(sigmoid_scalar),
    };
    g.add_flops(out.numel() as u64 * 4);
    let outc = out.clone();
    g.push(
        out,
        vec![x],
        Box::new(move |gout| {
            let d: Vec<E> = match kind {
                Pointwise::Relu => xv
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&v, &go)| if v > E::zero() { go } else { E::zero() })
                    .collect(),
                Pointwise::Sigmoid => outc
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&y, &go)| go * y * (E::one() - y))
                    .collect(),
            };
            vec![Some(Tensor5::new(xv.shape, d))]
        }),
    )
}

fn sigmoid_scalar<E: Element>(v: E) -> E {
    // Split on sign for numerical stability.
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Mul,
}

/// Elementwise addition. `b` must either match `a`'s shape or be a
/// `(n,c,t,1,1)` tensor broadcast over the spatial axes.
pub fn add<E: Element>(g: &mut Graph<E>, a: NodeId, b: NodeId) -> Result<NodeId> {
    binary(g, a, b, BinKind::Add)
}

/// Elementwise multiplication with the same broadcast rule as [`add`].
pub fn mul<E: Element>(g: &mut Graph<E>, a: NodeId, b: NodeId) -> Result<NodeId> {
    binary(g, a, b, BinKind::Mul)
}

fn binary<E: Element>(g: &mut Graph<E>, a: NodeId, b: NodeId, kind: BinKind) -> Result<NodeId> {
    let av = g.value(a).clone();
    let bv = g.value(b).clone();
    let sa = av.shape;
    let sb = bv.shape;
    let broadcast = sb.h == 1 && sb.w == 1 && (sa.h != 1 || sa.w != 1);
    if !(sa == sb || (broadcast && sb.n == sa.n && sb.c == sa.c && sb.t == sa.t)) {
        return Err(Error::config(format!(
            "binary op shapes {sa:?} and {sb:?} are not equal or (h,w)-broadcastable"
        )));
    }
    let hw = sa.h * sa.w;
    let mut out = vec![E::zero(); sa.numel()];
    if sa == sb {
        for ((o, &x), &y) in out.iter_mut().zip(av.data()).zip(bv.data()) {
            *o = match kind {
                BinKind::Add => x + y,
                BinKind::Mul => x * y,
            };
        }
    } else {
        for (plane, (o, x)) in out.chunks_mut(hw).zip(av.data().chunks(hw)).enumerate() {
            let y = bv.data()[plane];
            for (oo, &xx) in o.iter_mut().zip(x) {
                *oo = match kind {
                    BinKind::Add => xx + y,
                    BinKind::Mul => xx * y,
                };
            }
        }
    }
    g.add_flops(sa.numel() as u64);
    g.push(
        Tensor5::new(sa, out),
        vec![a, b],
        Box::new(move |gout| {
            let ga: Vec<E> = match kind {
                BinKind::Add => gout.data().to_vec(),
                BinKind::Mul => {
                    if sa == sb {
                        gout.data()
                            .iter()
                            .zip(bv.data())
                            .map(|(&go, &y)| go * y)
                            .collect()
                    } else {
                        gout.data()
                            .chunks(hw)
                            .enumerate()
                            .flat_map(|(plane, go)| {
                                let y = bv.data()[plane];
                                go.iter().map(move |&v| v * y)
                            })
                            .collect()
                    }
                }
            };
            let gb: Vec<E> = if sa == sb {
                match kind {
                    BinKind::Add => gout.data().to_vec(),
                    BinKind::Mul => gout
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&go, &x)| go * x)
                        .collect(),
                }
            } else {
                // Sum the gradient over the broadcast (h,w) axes.
                gout.data()
                    .chunks(hw)
                    .enumerate()
                    .map(|(plane, go)| match kind {
                        BinKind::Add => go.iter().copied().sum(),
                        BinKind::Mul => go
                            .iter()
                            .zip(&av.data()[plane * hw..plane * hw + hw])
                            .map(|(&g1, &x)| g1 * x)
                            .sum(),
                    })
                    .collect()
            };
            vec![Some(Tensor5::new(sa, ga)), Some(Tensor5::new(sb, gb))]
        }),
    )
}

/// Concatenate along the time axis. All inputs must share `(n, c, h, w)`.
pub fn concat_time<E: Element>(g: &mut Graph<E>, xs: &[NodeId]) -> Result<NodeId> {
    concat_axis(g, xs, Axis::Time)
}

/// Concatenate along the channel axis. All inputs must share `(n, t, h, w)`.
pub fn concat_channel<E: Element>(g: &mut Graph<E>, xs: &[NodeId]) -> Result<NodeId> {
    concat_axis(g, xs, Axis::Channel)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    Channel,
    Time,
}

fn concat_axis<E: Element>(g: &mut Graph<E>, xs: &[NodeId], axis: Axis) -> Result<NodeId> {
    if xs.is_empty() {
        return Err(Error::config("concat of zero tensors"));
    }
    let parts: Vec<Tensor5<E>> = xs.iter().map(|&id| g.value(id).clone()).collect();
    let s0 = parts[0].shape;
    for p in &parts[1..] {
        let s = p.shape;
        let compatible = match axis {
            Axis::Time => s.n == s0.n && s.c == s0.c && s.h == s0.h && s.w == s0.w,
            Axis::Channel => s.n == s0.n && s.t == s0.t && s.h == s0.h && s.w == s0.w,
        };
        if !compatible {
            return Err(Error::config(format!(
                "concat mismatch: {s0:?} vs {s:?}"
            )));
        }
    }
    let total: usize = parts
        .iter()
        .map(|p| match axis {
            Axis::Time => p.shape.t,
            Axis::Channel => p.shape.c,
        })
        .sum();
    let out_shape = match axis {
        Axis::Time => Shape5 { t: total, ..s0 },
        Axis::Channel => Shape5 { c: total, ..s0 },
    };
    // Per (n[,c]) the copied block is contiguous in row-major order.
    let mut out = vec![E::zero(); out_shape.numel()];
    let outer = match axis {
        Axis::Time => s0.n * s0.c,
        Axis::Channel => s0.n,
    };
    let inner = match axis {
        Axis::Time => s0.h * s0.w,
        Axis::Channel => s0.t * s0.h * s0.w,
    };
    let out_block = total * inner;
    for o in 0..outer {
        let mut off = o * out_block;
        for p in &parts {
            let ext = match axis {
                Axis::Time => p.shape.t,
                Axis::Channel => p.shape.c,
            };
            let len = ext * inner;
            out[off..off + len].copy_from_slice(&p.data()[o * len..(o + 1) * len]);
            off += len;
        }
    }
    let shapes: Vec<Shape5> = parts.iter().map(|p| p.shape).collect();
    g.push(
        Tensor5::new(out_shape, out),
        xs.to_vec(),
        Box::new(move |gout| {
            let mut grads: Vec<Vec<E>> = shapes.iter().map(|s| vec![E::zero(); s.numel()]).collect();
            for o in 0..outer {
                let mut off = o * out_block;
                for (gi, s) in shapes.iter().enumerate() {
                    let ext = match axis {
                        Axis::Time => s.t,
                        Axis::Channel => s.c,
                    };
                    let len = ext * inner;
                    grads[gi][o * len..(o + 1) * len]
                        .copy_from_slice(&gout.data()[off..off + len]);
                    off += len;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(d, &s)| Some(Tensor5::new(s, d)))
                .collect()
        }),
    )
}

/// Slice `len` frames starting at `t0` along the time axis.
pub fn slice_time<E: Element>(g: &mut Graph<E>, x: NodeId, t0: usize, len: usize) -> Result<NodeId> {
    let xv = g.value(x).clone();
    let s = xv.shape;
    if t0 + len > s.t || len == 0 {
        return Err(Error::config(format!(
            "time slice [{t0}, {t0}+{len}) out of range for t={}",
            s.t
        )));
    }
    let out_shape = Shape5 { t: len, ..s };
    let inner = s.h * s.w;
    let mut out = vec![E::zero(); out_shape.numel()];
    for o in 0..s.n * s.c {
        let src = (o * s.t + t0) * inner;
        let dst = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&xv.data()[src..src + len * inner]);
    }
    g.push(
        Tensor5::new(out_shape, out),
        vec![x],
        Box::new(move |gout| {
            let mut gx = vec![E::zero(); s.numel()];
            for o in 0..s.n * s.c {
                let dst = (o * s.t + t0) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&gout.data()[src..src + len * inner]);
            }
            vec![Some(Tensor5::new(s, gx))]
        }),
    )
}

/// Fold the time axis into channels: `(n,c,t,h,w)` -> `(n,c*t,1,h,w)`.
/// Pure reshape under row-major layout.
pub fn fold_time<E: Element>(g: &mut Graph<E>, x: NodeId) -> Result<NodeId> {
    let s = g.value(x).shape;
    reshape(g, x, Shape5::new(s.n, s.c * s.t, 1, s.h, s.w))
}

/// Inverse of [`fold_time`]: `(n,c*t,1,h,w)` -> `(n,c,t,h,w)`.
pub fn unfold_time<E: Element>(g: &mut Graph<E>, x: NodeId, c: usize, t: usize) -> Result<NodeId> {
    let s = g.value(x).shape;
    if s.c != c * t || s.t != 1 {
        return Err(Error::config(format!(
            "unfold_time: cannot split {:?} into c={c}, t={t}",
            s
        )));
    }
    reshape(g, x, Shape5::new(s.n, c, t, s.h, s.w))
}

fn reshape<E: Element>(g: &mut Graph<E>, x: NodeId, shape: Shape5) -> Result<NodeId> {
    let xv = g.value(x).clone();
    let old = xv.shape;
    let out = xv.reshaped(shape)?;
    g.push(
        out,
        vec![x],
        Box::new(move |gout| vec![Some(gout.reshaped(old).expect("reshape grad"))]),
    )
}

/// Spatial pooling over `(h, w)`; the time axis is untouched. Max pooling
/// breaks ties toward the first index in scan order; padding (used by the
/// encoder stem) never wins a max window.
pub fn pool_spatial<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    kind: PoolKind,
    k: usize,
    s: usize,
    pad: usize,
) -> Result<NodeId> {
    let xv = g.value(x).clone();
    let sh = xv.shape;
    if sh.h + 2 * pad < k || sh.w + 2 * pad < k {
        return Err(Error::config(format!(
            "pool window {k} exceeds padded extent of {sh:?}"
        )));
    }
    let oh = (sh.h + 2 * pad - k) / s + 1;
    let ow = (sh.w + 2 * pad - k) / s + 1;
    let out_shape = Shape5 { h: oh, w: ow, ..sh };
    let planes = sh.n * sh.c * sh.t;
    let mut out = vec![E::zero(); out_shape.numel()];
    let mut argmax: Vec<u32> = if kind == PoolKind::Max {
        vec![0; out_shape.numel()]
    } else {
        Vec::new()
    };
    let inv_kk = E::from_real(1.0 / (k * k) as f64);
    for p in 0..planes {
        let xp = &xv.data()[p * sh.h * sh.w..(p + 1) * sh.h * sh.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let oidx = (p * oh + oy) * ow + ox;
                let y0 = oy as isize * s as isize - pad as isize;
                let x0 = ox as isize * s as isize - pad as isize;
                match kind {
                    PoolKind::Max => {
                        let mut best = E::neg_infinity();
                        let mut best_i = 0usize;
                        for dy in 0..k as isize {
                            let yy = y0 + dy;
                            if yy < 0 || yy >= sh.h as isize {
                                continue;
                            }
                            for dx in 0..k as isize {
                                let xx = x0 + dx;
                                if xx < 0 || xx >= sh.w as isize {
                                    continue;
                                }
                                let i = yy as usize * sh.w + xx as usize;
                                if xp[i] > best {
                                    best = xp[i];
                                    best_i = i;
                                }
                            }
                        }
                        out[oidx] = best;
                        argmax[oidx] = best_i as u32;
                    }
                    PoolKind::Avg => {
                        let mut acc = E::zero();
                        for dy in 0..k as isize {
                            let yy = y0 + dy;
                            if yy < 0 || yy >= sh.h as isize {
                                continue;
                            }
                            for dx in 0..k as isize {
                                let xx = x0 + dx;
                                if xx < 0 || xx >= sh.w as isize {
                                    continue;
                                }
                                acc += xp[yy as usize * sh.w + xx as usize];
                            }
                        }
                        out[oidx] = acc * inv_kk;
                    }
                }
            }
        }
    }
    g.add_flops(out_shape.numel() as u64 * (k * k) as u64);
    g.push(
        Tensor5::new(out_shape, out),
        vec![x],
        Box::new(move |gout| {
            let mut gx = vec![E::zero(); sh.numel()];
            match kind {
                PoolKind::Max => {
                    for p in 0..planes {
                        let base = p * sh.h * sh.w;
                        for oi in 0..oh * ow {
                            let oidx = p * oh * ow + oi;
                            gx[base + argmax[oidx] as usize] += gout.data()[oidx];
                        }
                    }
                }
                PoolKind::Avg => {
                    for p in 0..planes {
                        let gxp = &mut gx[p * sh.h * sh.w..(p + 1) * sh.h * sh.w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = gout.data()[(p * oh + oy) * ow + ox] * inv_kk;
                                let y0 = oy as isize * s as isize - pad as isize;
                                let x0 = ox as isize * s as isize - pad as isize;
                                for dy in 0..k as isize {
                                    let yy = y0 + dy;
                                    if yy < 0 || yy >= sh.h as isize {
                                        continue;
                                    }
                                    for dx in 0..k as isize {
                                        let xx = x0 + dx;
                                        if xx < 0 || xx >= sh.w as isize {
                                            continue;
                                        }
                                        gxp[yy as usize * sh.w + xx as usize] += go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor5::new(sh, gx))]
        }),
    )
}

/// Linear interpolation taps along one axis for an exact x2 bilinear
/// up-sampling, `align_corners = false`.
fn bilinear2x_taps(n_in: usize) -> Vec<(usize, usize, f64)> {
    // Output index o samples input coordinate (o + 0.5) / 2 - 0.5.
    (0..2 * n_in)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let f = src.floor();
            let i0 = f.max(0.0) as usize;
            let i1 = ((f + 1.0).max(0.0) as usize).min(n_in - 1);
            let w1 = (src - f).clamp(0.0, 1.0);
            (i0.min(n_in - 1), i1, w1)
        })
        .collect()
}

/// Spatial x2 bilinear up-sampling (`align_corners = false`); time and
/// channels untouched.
pub fn upsample2x<E: Element>(g: &mut Graph<E>, x: NodeId) -> Result<NodeId> {
    let xv = g.value(x).clone();
    let sh = xv.shape;
    let (oh, ow) = (sh.h * 2, sh.w * 2);
    let out_shape = Shape5 { h: oh, w: ow, ..sh };
    let ty = bilinear2x_taps(sh.h);
    let tx = bilinear2x_taps(sh.w);
    let planes = sh.n * sh.c * sh.t;
    let mut out = vec![E::zero(); out_shape.numel()];
    for p in 0..planes {
        let xp = &xv.data()[p * sh.h * sh.w..(p + 1) * sh.h * sh.w];
        let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let w00 = E::from_real((1.0 - wy) * (1.0 - wx));
                let w01 = E::from_real((1.0 - wy) * wx);
                let w10 = E::from_real(wy * (1.0 - wx));
                let w11 = E::from_real(wy * wx);
                op[oy * ow + ox] = xp[y0 * sh.w + x0] * w00
                    + xp[y0 * sh.w + x1] * w01
                    + xp[y1 * sh.w + x0] * w10
                    + xp[y1 * sh.w + x1] * w11;
            }
        }
    }
    g.add_flops(out_shape.numel() as u64 * 8);
    let (tyb, txb) = (ty, tx);
    g.push(
        Tensor5::new(out_shape, out),
        vec![x],
        Box::new(move |gout| {
            let mut gx = vec![E::zero(); sh.numel()];
            for p in 0..planes {
                let gp = &gout.data()[p * oh * ow..(p + 1) * oh * ow];
                let gxp = &mut gx[p * sh.h * sh.w..(p + 1) * sh.h * sh.w];
                for (oy, &(y0, y1, wy)) in tyb.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in txb.iter().enumerate() {
                        let go = gp[oy * ow + ox];
                        gxp[y0 * sh.w + x0] += go * E::from_real((1.0 - wy) * (1.0 - wx));
                        gxp[y0 * sh.w + x1] += go * E::from_real((1.0 - wy) * wx);
                        gxp[y1 * sh.w + x0] += go * E::from_real(wy * (1.0 - wx));
                        gxp[y1 * sh.w + x1] += go * E::from_real(wy * wx);
                    }
                }
            }
            vec![Some(Tensor5::new(sh, gx))]
        }),
    )
}

/// Mean over `(h, w)` per `(n, c, t)`, producing a `(n,c,t,1,1)` tensor.
pub fn global_avg_pool_hw<E: Element>(g: &mut Graph<E>, x: NodeId) -> Result<NodeId> {
    let xv = g.value(x).clone();
    let sh = xv.shape;
    let hw = sh.h * sh.w;
    let inv = E::from_real(1.0 / hw as f64);
    let out: Vec<E> = xv
        .data()
        .chunks(hw)
        .map(|c| {
            // f64 accumulation keeps single-precision means accurate.
            E::from_real(c.iter().map(|v| v.to_f64x()).sum::<f64>() / hw as f64)
        })
        .collect();
    let out_shape = Shape5 { h: 1, w: 1, ..sh };
    g.add_flops(sh.numel() as u64);
    g.push(
        Tensor5::new(out_shape, out),
        vec![x],
        Box::new(move |gout| {
            let mut gx = vec![E::zero(); sh.numel()];
            for (plane, go) in gout.data().iter().enumerate() {
                let v = *go * inv;
                for slot in &mut gx[plane * hw..(plane + 1) * hw] {
                    *slot = v;
                }
            }
            vec![Some(Tensor5::new(sh, gx))]
        }),
    )
}

/// Scalar projection `sum(x * r)` against a fixed tensor `r`. Test harness
/// utility for turning arbitrary outputs into a scalar loss.
pub fn dot_const<E: Element>(g: &mut Graph<E>, x: NodeId, r: Tensor5<E>) -> Result<NodeId> {
    let xv = g.value(x).clone();
    if xv.shape != r.shape {
        return Err(Error::config(format!(
            "dot_const shapes {:?} vs {:?}",
            xv.shape, r.shape
        )));
    }
    let v: f64 = xv
        .data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| (a * b).to_f64x())
        .sum();
    g.push(
        Tensor5::scalar(E::from_real(v)),
        vec![x],
        Box::new(move |gout| {
            let go = gout.item();
            vec![Some(r.map(|v| v * go))]
        }),
    )
}
