//! Central finite-difference verification of analytic gradients.
//!
//! Runs in double precision. The step per coordinate is
//! `h = 1e-5 * max(1, |x|)`, balancing truncation against round-off.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor5;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst sampled coordinate.
    pub worst: (usize, usize),
    pub checks: usize,
}

impl GradCheckReport {
    pub fn require(&self, tol: f64) -> Result<()> {
        if self.max_rel_err <= tol {
            Ok(())
        } else {
            Err(Error::numerical(format!(
                "gradient check failed: relative error {:.3e} > {tol:.1e} at input {} coordinate {}",
                self.max_rel_err, self.worst.0, self.worst.1
            )))
        }
    }
}

/// Compare the analytic gradient of a scalar-valued graph construction
/// against central finite differences at randomly sampled coordinates of
/// every input. `build` receives leaf ids aligned with `inputs` and returns
/// the scalar loss node.
pub fn grad_check<F>(
    inputs: &[Tensor5<f64>],
    build: F,
    samples_per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor5<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new(true);
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::config("grad_check requires a scalar loss"));
        }
        Ok((g, ids, loss))
    };

    let (g, ids, loss) = eval(inputs)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Option<Tensor5<f64>>> = ids
        .iter()
        .map(|&id| grads.get(id).cloned())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checks: 0,
    };

    for (ii, input) in inputs.iter().enumerate() {
        let ga = analytic[ii].as_ref().ok_or_else(|| {
            Error::numerical(format!("no gradient reached input {ii}"))
        })?;
        let n = input.numel();
        for _ in 0..samples_per_input.min(n) {
            let coord = rng.gen_range(0..n);
            let x0 = input.data()[coord];
            let h = FD_STEP * x0.abs().max(1.0);

            let mut plus = inputs.to_vec();
            plus[ii] = input.with_value_at(coord, x0 + h);
            let (gp, _, lp) = eval(&plus)?;
            let fp = gp.value(lp).item();

            let mut minus = inputs.to_vec();
            minus[ii] = input.with_value_at(coord, x0 - h);
            let (gm, _, lm) = eval(&minus)?;
            let fm = gm.value(lm).item();

            let fd = (fp - fm) / (2.0 * h);
            let a = ga.data()[coord];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            report.checks += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ii, coord);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::tensor::Shape5;

    fn random_tensor(shape: Shape5, rng: &mut ChaCha8Rng) -> Tensor5<f64> {
        let data: Vec<f64> = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor5::new(shape, data)
    }

    #[test]
    fn detects_wrong_gradient() {
        // A deliberately broken op: forward x^2, backward claims d/dx = x.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(Shape5::new(1, 1, 1, 2, 2), &mut rng);
        let report = grad_check(
            &[x],
            |g, ids| {
                let xv = g.value(ids[0]).clone();
                let sq = g
                    .push(
                        xv.map(|v| v * v),
                        vec![ids[0]],
                        Box::new(move |gout| {
                            vec![Some(Tensor5::new(
                                xv.shape,
                                xv.data()
                                    .iter()
                                    .zip(gout.data())
                                    .map(|(&x, &go)| x * go) // missing factor 2
                                    .collect(),
                            ))]
                        }),
                    )
                    .unwrap();
                let ones = Tensor5::full(g.value(sq).shape, 1.0);
                ops::dot_const(g, sq, ones)
            },
            4,
            1,
        )
        .unwrap();
        assert!(report.require(1e-5).is_err());
    }

    #[test]
    fn passes_correct_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_tensor(Shape5::new(1, 2, 1, 3, 3), &mut rng);
        let r = random_tensor(Shape5::new(1, 2, 1, 3, 3), &mut rng);
        let report = grad_check(
            &[x],
            |g, ids| {
                let y = ops::pointwise(g, ids[0], ops::Pointwise::Sigmoid)?;
                ops::dot_const(g, y, r.clone())
            },
            8,
            2,
        )
        .unwrap();
        report.require(1e-5).unwrap();
    }
}
