//! 3-D convolution (cross-correlation, zero padding) with analytic gradients
//! w.r.t. input, weight and bias. Forward and backward are im2col + GEMM; a
//! naive seven-loop reference lives here as the verification oracle.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Shape5, Tensor5};

/// Convolution hyper-parameters. Kernel/stride/padding are `(t, h, w)`
/// triples; padding is zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
    pub bias: bool,
}

impl ConvSpec {
    pub fn kernel_1x1(out_channels: usize, bias: bool) -> Self {
        ConvSpec {
            out_channels,
            kernel: (1, 1, 1),
            stride: (1, 1, 1),
            padding: (0, 0, 0),
            bias,
        }
    }

    fn extent(i: usize, k: usize, s: usize, p: usize) -> Result<usize> {
        if i + 2 * p < k {
            return Err(Error::config(format!(
                "kernel {k} exceeds padded input extent {i}+2*{p}"
            )));
        }
        let o = (i + 2 * p - k) / s + 1;
        if o == 0 {
            return Err(Error::config("non-positive convolution output extent"));
        }
        Ok(o)
    }

    pub fn output_shape(&self, x: Shape5) -> Result<Shape5> {
        Ok(Shape5 {
            n: x.n,
            c: self.out_channels,
            t: Self::extent(x.t, self.kernel.0, self.stride.0, self.padding.0)?,
            h: Self::extent(x.h, self.kernel.1, self.stride.1, self.padding.1)?,
            w: Self::extent(x.w, self.kernel.2, self.stride.2, self.padding.2)?,
        })
    }
}

/// Zero-padded cross-correlation. `weight` has shape `(O, C, kt, kh, kw)`
/// (stored as a [`Tensor5`]); `bias`, when present, has shape `(1, O, 1, 1, 1)`.
pub fn conv3d<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    weight: NodeId,
    bias: Option<NodeId>,
    spec: ConvSpec,
) -> Result<NodeId> {
    let xv = g.value(x).clone();
    let wv = g.value(weight).clone();
    let ws = wv.shape;
    if ws.n != spec.out_channels
        || ws.c != xv.shape.c
        || (ws.t, ws.h, ws.w) != spec.kernel
    {
        return Err(Error::config(format!(
            "conv3d weight shape {:?} inconsistent with input {:?} and spec {:?}",
            ws, xv.shape, spec
        )));
    }
    if spec.bias != bias.is_some() {
        return Err(Error::config("conv3d bias flag does not match bias argument"));
    }
    let bv = bias.map(|b| g.value(b).clone());
    if let Some(b) = &bv {
        if b.shape != Shape5::new(1, spec.out_channels, 1, 1, 1) {
            return Err(Error::config(format!("conv3d bias shape {:?}", b.shape)));
        }
    }

    let out_shape = spec.output_shape(xv.shape)?;
    let xs = xv.shape;
    let o = spec.out_channels;
    let k_rows = xs.c * spec.kernel.0 * spec.kernel.1 * spec.kernel.2;
    let m_cols = out_shape.t * out_shape.h * out_shape.w;

    // A 1x1x1 stride-1 kernel needs no patch matrix: each batch slice of the
    // input already is the (C x t*h*w) operand.
    let direct = spec.kernel == (1, 1, 1) && spec.stride == (1, 1, 1) && spec.padding == (0, 0, 0);

    let mut out = vec![E::zero(); out_shape.numel()];
    let mut col = vec![E::zero(); if direct { 0 } else { k_rows * m_cols }];
    for n in 0..xs.n {
        let rhs: &[E] = if direct {
            &xv.data()[n * k_rows * m_cols..(n + 1) * k_rows * m_cols]
        } else {
            im2col(&xv, n, spec, out_shape, &mut col);
            &col
        };
        let dst = &mut out[n * o * m_cols..(n + 1) * o * m_cols];
        E::gemm(o, k_rows, m_cols, E::one(), wv.data(), rhs, E::zero(), dst);
        if let Some(b) = &bv {
            for (oc, chunk) in dst.chunks_mut(m_cols).enumerate() {
                let bb = b.data()[oc];
                for v in chunk {
                    *v += bb;
                }
            }
        }
    }
    g.add_flops(2 * (xs.n * o * k_rows * m_cols) as u64);

    let mut parents = vec![x, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    let has_bias = bias.is_some();
    g.push(
        Tensor5::new(out_shape, out),
        parents,
        Box::new(move |gout| {
            let mut gw = vec![E::zero(); ws.numel()];
            let mut gx = vec![E::zero(); xs.numel()];
            let mut col = vec![E::zero(); if direct { 0 } else { k_rows * m_cols }];
            let mut col_grad = vec![E::zero(); if direct { 0 } else { k_rows * m_cols }];
            for n in 0..xs.n {
                let go_n = &gout.data()[n * o * m_cols..(n + 1) * o * m_cols];
                if direct {
                    let x_n = &xv.data()[n * k_rows * m_cols..(n + 1) * k_rows * m_cols];
                    gemm_nt(o, m_cols, k_rows, go_n, x_n, &mut gw);
                    let gx_n = &mut gx[n * k_rows * m_cols..(n + 1) * k_rows * m_cols];
                    gemm_tn(k_rows, o, m_cols, wv.data(), go_n, gx_n);
                    continue;
                }
                // dW += dY_n * col_n^T  (accumulated in fixed batch order)
                im2col(&xv, n, spec, out_shape, &mut col);
                gemm_nt(o, m_cols, k_rows, go_n, &col, &mut gw);
                // dcol = W^T * dY_n, scattered back through the patch map
                gemm_tn(k_rows, o, m_cols, wv.data(), go_n, &mut col_grad);
                col2im(&mut gx, n, xs, spec, out_shape, &col_grad);
            }
            let gb = if has_bias {
                let mut gb = vec![E::zero(); o];
                for n in 0..xs.n {
                    let go_n = &gout.data()[n * o * m_cols..(n + 1) * o * m_cols];
                    for (oc, chunk) in go_n.chunks(m_cols).enumerate() {
                        gb[oc] += chunk.iter().copied().sum::<E>();
                    }
                }
                Some(Tensor5::new(Shape5::new(1, o, 1, 1, 1), gb))
            } else {
                None
            };
            let mut grads = vec![
                Some(Tensor5::new(xs, gx)),
                Some(Tensor5::new(ws, gw)),
            ];
            if has_bias {
                grads.push(gb);
            }
            grads
        }),
    )
}

/// C(m x n) += A(m x k) * B^T where B is (n x k), all row-major.
fn gemm_nt<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    unsafe_gemm(m, k, n, a, k as isize, 1, b, 1, k as isize, c)
}

/// C(m x n) += A^T * B where A is (k x m), B is (k x n), all row-major.
fn gemm_tn<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    unsafe_gemm(m, k, n, a, 1, m as isize, b, n as isize, 1, c)
}

#[allow(clippy::too_many_arguments)]
fn unsafe_gemm<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    rsa: isize,
    csa: isize,
    b: &[E],
    rsb: isize,
    csb: isize,
    c: &mut [E],
) {
    E::gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, c);
}

/// Gather one batch item into the `(C*kt*kh*kw) x (ot*oh*ow)` patch matrix.
fn im2col<E: Element>(x: &Tensor5<E>, n: usize, spec: ConvSpec, out: Shape5, col: &mut [E]) {
    let xs = x.shape;
    let (kt, kh, kw) = spec.kernel;
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;
    let m = out.t * out.h * out.w;
    let xd = x.data();
    let mut row = 0usize;
    for c in 0..xs.c {
        for dt in 0..kt {
            for dy in 0..kh {
                for dx in 0..kw {
                    let dst_row = &mut col[row * m..(row + 1) * m];
                    row += 1;
                    let mut mi = 0usize;
                    for ot in 0..out.t {
                        let ti = (ot * st + dt) as isize - pt as isize;
                        for oyy in 0..out.h {
                            let yi = (oyy * sh + dy) as isize - ph as isize;
                            let dst = &mut dst_row[mi..mi + out.w];
                            mi += out.w;
                            if ti < 0 || ti >= xs.t as isize || yi < 0 || yi >= xs.h as isize {
                                dst.fill(E::zero());
                                continue;
                            }
                            let base = xs.index(n, c, ti as usize, yi as usize, 0);
                            if sw == 1 {
                                // Contiguous span with clipped edges.
                                let x_start = dx as isize - pw as isize;
                                for (oxx, d) in dst.iter_mut().enumerate() {
                                    let xi = x_start + oxx as isize;
                                    *d = if xi < 0 || xi >= xs.w as isize {
                                        E::zero()
                                    } else {
                                        xd[base + xi as usize]
                                    };
                                }
                            } else {
                                for (oxx, d) in dst.iter_mut().enumerate() {
                                    let xi = (oxx * sw + dx) as isize - pw as isize;
                                    *d = if xi < 0 || xi >= xs.w as isize {
                                        E::zero()
                                    } else {
                                        xd[base + xi as usize]
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient of one batch item back to `gx`.
fn col2im<E: Element>(
    gx: &mut [E],
    n: usize,
    xs: Shape5,
    spec: ConvSpec,
    out: Shape5,
    col: &[E],
) {
    let (kt, kh, kw) = spec.kernel;
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;
    let m = out.t * out.h * out.w;
    let mut row = 0usize;
    for c in 0..xs.c {
        for dt in 0..kt {
            for dy in 0..kh {
                for dx in 0..kw {
                    let src_row = &col[row * m..(row + 1) * m];
                    row += 1;
                    let mut mi = 0usize;
                    for ot in 0..out.t {
                        let ti = (ot * st + dt) as isize - pt as isize;
                        for oyy in 0..out.h {
                            let yi = (oyy * sh + dy) as isize - ph as isize;
                            let src = &src_row[mi..mi + out.w];
                            mi += out.w;
                            if ti < 0 || ti >= xs.t as isize || yi < 0 || yi >= xs.h as isize {
                                continue;
                            }
                            let base = xs.index(n, c, ti as usize, yi as usize, 0);
                            for (oxx, &v) in src.iter().enumerate() {
                                let xi = (oxx * sw + dx) as isize - pw as isize;
                                if xi >= 0 && xi < xs.w as isize {
                                    gx[base + xi as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Seven-nested-loop reference convolution. Independent of the GEMM path;
/// used as the oracle in tests.
pub fn naive_conv3d<E: Element>(
    x: &Tensor5<E>,
    weight: &Tensor5<E>,
    bias: Option<&[E]>,
    spec: ConvSpec,
) -> Result<Tensor5<E>> {
    let out_shape = spec.output_shape(x.shape)?;
    let xs = x.shape;
    let mut out = vec![E::zero(); out_shape.numel()];
    for n in 0..out_shape.n {
        for oc in 0..out_shape.c {
            for ot in 0..out_shape.t {
                for oy in 0..out_shape.h {
                    for ox in 0..out_shape.w {
                        let mut acc = match bias {
                            Some(b) => b[oc],
                            None => E::zero(),
                        };
                        for ic in 0..xs.c {
                            for dt in 0..spec.kernel.0 {
                                for dy in 0..spec.kernel.1 {
                                    for dx in 0..spec.kernel.2 {
                                        let ti = (ot * spec.stride.0 + dt) as isize
                                            - spec.padding.0 as isize;
                                        let yi = (oy * spec.stride.1 + dy) as isize
                                            - spec.padding.1 as isize;
                                        let xi = (ox * spec.stride.2 + dx) as isize
                                            - spec.padding.2 as isize;
                                        if ti < 0
                                            || ti >= xs.t as isize
                                            || yi < 0
                                            || yi >= xs.h as isize
                                            || xi < 0
                                            || xi >= xs.w as isize
                                        {
                                            continue;
                                        }
                                        acc += x.at(n, ic, ti as usize, yi as usize, xi as usize)
                                            * weight.at(oc, ic, dt, dy, dx);
                                    }
                                }
                            }
                        }
                        out[out_shape.index(n, oc, ot, oy, ox)] = acc;
                    }
                }
            }
        }
    }
    Ok(Tensor5::new(out_shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape5, rng: &mut ChaCha8Rng) -> Tensor5<f64> {
        Tensor5::new(shape, (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn temporal_kernel_hand_case() {
        // x = frames [1, 2], one kt=3 filter (3, 5, 7), pt=1 -> [19, 13]
        let x = Tensor5::new(Shape5::new(1, 1, 2, 1, 1), vec![1.0f64, 2.0]);
        let w = Tensor5::new(Shape5::new(1, 1, 3, 1, 1), vec![3.0, 5.0, 7.0]);
        let spec = ConvSpec {
            out_channels: 1,
            kernel: (3, 1, 1),
            stride: (1, 1, 1),
            padding: (1, 0, 0),
            bias: false,
        };
        let mut g = Graph::new(false);
        let xid = g.leaf(x, false);
        let wid = g.leaf(w, false);
        let y = conv3d(&mut g, xid, wid, None, spec).unwrap();
        assert_eq!(g.value(y).data(), &[19.0, 13.0]);
    }

    #[test]
    fn identity_filter_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(Shape5::new(2, 3, 2, 4, 5), &mut rng);
        let mut w = vec![0.0f64; 9];
        // 3x3 identity embedding: w[o][c] = delta(o, c)
        for o in 0..3 {
            w[o * 3 + o] = 1.0;
        }
        let wt = Tensor5::new(Shape5::new(3, 3, 1, 1, 1), w);
        let mut g = Graph::new(false);
        let xid = g.leaf(x.clone(), false);
        let wid = g.leaf(wt, false);
        let y = conv3d(&mut g, xid, wid, None, ConvSpec::kernel_1x1(3, false)).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn matches_naive_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..10 {
            let c = rng.gen_range(1..4);
            let o = rng.gen_range(1..4);
            let kt = [1, 2, 3, 4][case % 4];
            let (kh, kw) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let spec = ConvSpec {
                out_channels: o,
                kernel: (kt, kh, kw),
                stride: (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3)),
                padding: (rng.gen_range(0..2), rng.gen_range(0..2), rng.gen_range(0..2)),
                bias: true,
            };
            let xs = Shape5::new(2, c, rng.gen_range(kt..kt + 3), rng.gen_range(kh..kh + 5), rng.gen_range(kw..kw + 5));
            let x = rand_tensor(xs, &mut rng);
            let w = rand_tensor(Shape5::new(o, c, kt, kh, kw), &mut rng);
            let b = rand_tensor(Shape5::new(1, o, 1, 1, 1), &mut rng);
            let expected = naive_conv3d(&x, &w, Some(b.data()), spec).unwrap();
            let mut g = Graph::new(false);
            let xid = g.leaf(x, false);
            let wid = g.leaf(w, false);
            let bid = g.leaf(b, false);
            let y = conv3d(&mut g, xid, wid, Some(bid), spec).unwrap();
            for (a, e) in g.value(y).data().iter().zip(expected.data()) {
                assert!((a - e).abs() < 1e-9, "case {case}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn rejects_mismatched_channels() {
        let mut g = Graph::<f64>::new(false);
        let x = g.leaf(Tensor5::zeros(Shape5::new(1, 3, 2, 4, 4)), false);
        let w = g.leaf(Tensor5::zeros(Shape5::new(2, 4, 1, 1, 1)), false);
        assert!(conv3d(&mut g, x, w, None, ConvSpec::kernel_1x1(2, false)).is_err());
    }

    #[test]
    fn rejects_nonpositive_output_extent() {
        let spec = ConvSpec {
            out_channels: 1,
            kernel: (3, 3, 3),
            stride: (1, 1, 1),
            padding: (0, 0, 0),
            bias: false,
        };
        assert!(spec.output_shape(Shape5::new(1, 1, 2, 8, 8)).is_err());
    }

    #[test]
    #[ignore = "throughput probe, run explicitly"]
    fn gemm_throughput_probe() {
        use std::time::Instant;
        // Shapes representative of the heaviest training layer at tile 64.
        let (m, k, n) = (64, 576, 2048);
        let a = vec![1.0f32; m * k];
        let b = vec![1.0f32; k * n];
        let mut c = vec![0.0f32; m * n];
        let t0 = Instant::now();
        let reps = 200;
        for _ in 0..reps {
            f32::gemm(m, k, n, 1.0, &a, &b, 0.0, &mut c);
        }
        let secs = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * (m * k * n * reps) as f64) / secs / 1e9;
        eprintln!("sgemm {m}x{k}x{n}: {gflops:.1} GFLOP/s");
    }
}
