//! Per-channel normalization with statistics over `(n, t, h, w)`.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Shape5, Tensor5};

/// Train mode: standardize with batch statistics, return updated running
/// stats for the caller to store. Eval mode (`graph.training == false`):
/// standardize with the provided running stats, return `None`.
///
/// Variance is the biased estimate in both the normalization and the running
/// update; `eps` guards the zero-variance case.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<E: Element>(
    g: &mut Graph<E>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    running_mean: &[E],
    running_var: &[E],
    momentum: f64,
    eps: f64,
) -> Result<(NodeId, Option<(Vec<E>, Vec<E>)>)> {
    let xv = g.value(x).clone();
    let gv = g.value(gamma).clone();
    let bv = g.value(beta).clone();
    let s = xv.shape;
    let c = s.c;
    let affine_shape = Shape5::new(1, c, 1, 1, 1);
    if gv.shape != affine_shape || bv.shape != affine_shape {
        return Err(Error::config(format!(
            "normalize gamma/beta must have shape {affine_shape:?}, got {:?}/{:?}",
            gv.shape, bv.shape
        )));
    }
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::config("running stats length must equal channel count"));
    }

    let reduce_n = s.n * s.t * s.h * s.w;
    let plane = s.t * s.h * s.w;
    let training = g.training;

    // Per-channel mean/variance, f64 accumulation.
    let (mean, var): (Vec<E>, Vec<E>) = if training {
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for n in 0..s.n {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                let chunk = &xv.data()[base..base + plane];
                mean[ch] += chunk.iter().map(|v| v.to_f64x()).sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= reduce_n as f64;
        }
        for n in 0..s.n {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                let m = mean[ch];
                var[ch] += xv.data()[base..base + plane]
                    .iter()
                    .map(|v| {
                        let d = v.to_f64x() - m;
                        d * d
                    })
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= reduce_n as f64;
        }
        (
            mean.iter().map(|&m| E::from_real(m)).collect(),
            var.iter().map(|&v| E::from_real(v)).collect(),
        )
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };

    let inv_std: Vec<E> = var
        .iter()
        .map(|&v| E::from_real(1.0 / (v.to_f64x() + eps).sqrt()))
        .collect();

    let mut out = vec![E::zero(); s.numel()];
    for n in 0..s.n {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            let (m, is) = (mean[ch], inv_std[ch]);
            let (ga, be) = (gv.data()[ch], bv.data()[ch]);
            for (o, &v) in out[base..base + plane].iter_mut().zip(&xv.data()[base..base + plane]) {
                *o = (v - m) * is * ga + be;
            }
        }
    }
    g.add_flops(s.numel() as u64 * 8);

    let updated = if training {
        let mom = momentum;
        let rm: Vec<E> = running_mean
            .iter()
            .zip(&mean)
            .map(|(&r, &b)| E::from_real(r.to_f64x() * (1.0 - mom) + b.to_f64x() * mom))
            .collect();
        let rv: Vec<E> = running_var
            .iter()
            .zip(&var)
            .map(|(&r, &b)| E::from_real(r.to_f64x() * (1.0 - mom) + b.to_f64x() * mom))
            .collect();
        Some((rm, rv))
    } else {
        None
    };

    let id = g.push(
        Tensor5::new(s, out),
        vec![x, gamma, beta],
        Box::new(move |gout| {
            let go = gout.data();
            let mut dgamma = vec![E::zero(); c];
            let mut dbeta = vec![E::zero(); c];
            // Channel sums of dy and dy * xhat, f64 accumulation.
            let mut sum_dy = vec![0.0f64; c];
            let mut sum_dy_xhat = vec![0.0f64; c];
            for n in 0..s.n {
                for ch in 0..c {
                    let base = (n * c + ch) * plane;
                    let (m, is) = (mean[ch].to_f64x(), inv_std[ch].to_f64x());
                    for i in base..base + plane {
                        let dy = go[i].to_f64x();
                        let xhat = (xv.data()[i].to_f64x() - m) * is;
                        sum_dy[ch] += dy;
                        sum_dy_xhat[ch] += dy * xhat;
                    }
                }
            }
            for ch in 0..c {
                dbeta[ch] = E::from_real(sum_dy[ch]);
                dgamma[ch] = E::from_real(sum_dy_xhat[ch]);
            }
            let mut dx = vec![E::zero(); s.numel()];
            let inv_n = 1.0 / reduce_n as f64;
            for n in 0..s.n {
                for ch in 0..c {
                    let base = (n * c + ch) * plane;
                    let (m, is) = (mean[ch].to_f64x(), inv_std[ch].to_f64x());
                    let ga = gv.data()[ch].to_f64x();
                    let (mdy, mdyx) = (sum_dy[ch] * inv_n, sum_dy_xhat[ch] * inv_n);
                    for i in base..base + plane {
                        let dy = go[i].to_f64x();
                        let xhat = (xv.data()[i].to_f64x() - m) * is;
                        let v = if training {
                            ga * is * (dy - mdy - xhat * mdyx)
                        } else {
                            ga * is * dy
                        };
                        dx[i] = E::from_real(v);
                    }
                }
            }
            vec![
                Some(Tensor5::new(s, dx)),
                Some(Tensor5::new(affine_shape, dgamma)),
                Some(Tensor5::new(affine_shape, dbeta)),
            ]
        }),
    )?;
    Ok((id, updated))
}
