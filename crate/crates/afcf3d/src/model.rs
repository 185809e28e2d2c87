//! Whole-network assembly: encoder, adjacent-level cross-fusion, full-scale
//! decoder and prediction head behind one configuration struct.

use crate::afcf;
use crate::decoder::{self, DecodeTrace};
use crate::encoder::{self, Mode};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Fwd, ParamInit};
use crate::optim::{ParamBindings, ParamStore};
use crate::tensor::{Element, Shape5, Tensor5};

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub mode: Mode,
    pub image_channels: usize,
    pub widths: [usize; 5],
    pub reduce: usize,
    pub se_ratio: usize,
}

impl ModelConfig {
    /// The full-size network.
    pub fn full(mode: Mode) -> Self {
        ModelConfig {
            mode,
            image_channels: 3,
            widths: encoder::WIDTHS,
            reduce: afcf::REDUCE,
            se_ratio: afcf::SE_RATIO,
        }
    }

    /// Thin configuration (four channels everywhere) for double-precision
    /// end-to-end gradient verification.
    pub fn micro(mode: Mode) -> Self {
        ModelConfig {
            mode,
            image_channels: 3,
            widths: [4; 5],
            reduce: 4,
            se_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.reduce == 0 || self.se_ratio == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("stage widths must be positive"));
        }
        Ok(())
    }
}

/// Build and seed every parameter of the network. A fixed seed yields a
/// bitwise-identical store.
pub fn init_params<E: Element>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<E>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut pi = ParamInit::new(&mut store, seed);
    encoder::init_encoder(&mut pi, cfg.mode, cfg.image_channels, &cfg.widths);
    afcf::init_afcf(&mut pi, cfg.mode.frames(), &cfg.widths, cfg.reduce, cfg.se_ratio);
    decoder::init_decoder(&mut pi, cfg.mode, cfg.reduce);
    Ok(store)
}

/// All intermediate stage nodes of one forward pass.
pub struct ForwardTrace {
    pub stages: [NodeId; 5],
    pub fused: [NodeId; 5],
    pub decode: DecodeTrace,
    /// Change probability map `(n, 1, 1, H, W)` with values in `(0, 1)`.
    pub prob: NodeId,
}

/// Forward pass over one image pair. `a` and `b` are single-frame tensors
/// `(n, image_channels, 1, H, W)`; the mode decides whether they stack on the
/// time axis or on channels.
pub fn forward_traced<E: Element>(
    f: &mut Fwd<E>,
    cfg: &ModelConfig,
    a: NodeId,
    b: NodeId,
) -> Result<ForwardTrace> {
    let sa = f.g.value(a).shape;
    let sb = f.g.value(b).shape;
    if sa != sb {
        return Err(Error::config(format!("image pair shapes differ: {sa:?} vs {sb:?}")));
    }
    if sa.c != cfg.image_channels || sa.t != 1 {
        return Err(Error::config(format!(
            "expected (n,{},1,H,W) images, got {sa:?}",
            cfg.image_channels
        )));
    }
    let x = match cfg.mode {
        Mode::ThreeD => crate::ops::concat_time(f.g, &[a, b])?,
        Mode::TwoD => crate::ops::concat_channel(f.g, &[a, b])?,
    };
    let stages = encoder::encode(f, x, cfg.mode, &cfg.widths)?;
    let fused = afcf::cross_fuse(f, &stages, cfg.reduce, cfg.se_ratio)?;
    let decode = decoder::decode(f, &fused, cfg.mode, cfg.reduce)?;
    let prob = decoder::predict_head(f, decode.refined[0], cfg.mode)?;
    Ok(ForwardTrace {
        stages,
        fused,
        decode,
        prob,
    })
}

pub fn forward<E: Element>(
    f: &mut Fwd<E>,
    cfg: &ModelConfig,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    Ok(forward_traced(f, cfg, a, b)?.prob)
}

/// Exact trainable scalar count of a configuration.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(init_params::<f32>(cfg, 0)?.trainable_count())
}

#[derive(Clone, Copy, Debug)]
pub struct ComplexityReport {
    pub params: usize,
    /// Estimated FLOPs of one single-sample forward pass (one
    /// multiply-accumulate counted as 2).
    pub flops: u64,
}

/// Parameter count plus a FLOP estimate from an instrumented forward pass at
/// the given input extent.
pub fn complexity(cfg: &ModelConfig, h: usize, w: usize) -> Result<ComplexityReport> {
    let mut store = init_params::<f32>(cfg, 0)?;
    let params = store.trainable_count();
    let mut g = Graph::<f32>::new(false);
    let mut bind = ParamBindings::new();
    let shape = Shape5::new(1, cfg.image_channels, 1, h, w);
    let a = g.constant(Tensor5::full(shape, 0.25));
    let b = g.constant(Tensor5::full(shape, 0.75));
    let mut f = Fwd::new(&mut g, &mut store, &mut bind);
    forward(&mut f, cfg, a, b)?;
    Ok(ComplexityReport {
        params,
        flops: g.flops(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::ops;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    fn random_image<EE: Element>(cfg: &ModelConfig, hw: usize, seed: u64) -> Tensor5<EE> {
        let shape = Shape5::new(1, cfg.image_channels, 1, hw, hw);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel())
            .map(|_| EE::from_real(rng.gen_range(0.0..1.0)))
            .collect();
        Tensor5::new(shape, data)
    }

    #[test]
    fn full_parameter_count_is_locked() {
        // Hand-summed from the layer inventory:
        //   encoder 15,374,528 + cross-fusion 174,548
        //   + refinement blocks 271,104 + head 65.
        let n = count_params(&ModelConfig::full(Mode::ThreeD)).unwrap();
        assert_eq!(n, 15_820_245);
        let target = 17_540_000.0f64;
        assert!((n as f64 - target).abs() / target <= 0.10);
    }

    #[test]
    fn forward_probability_map_shape() {
        let cfg = ModelConfig::micro(Mode::ThreeD);
        let mut store = init_params::<f32>(&cfg, 3).unwrap();
        let mut g = Graph::new(false);
        let mut bind = ParamBindings::new();
        let a = g.constant(random_image(&cfg, 32, 1));
        let b = g.constant(random_image(&cfg, 32, 2));
        let mut f = Fwd::new(&mut g, &mut store, &mut bind);
        let tr = forward_traced(&mut f, &cfg, a, b).unwrap();
        let pv = g.value(tr.prob);
        assert_eq!(pv.shape, Shape5::new(1, 1, 1, 32, 32));
        assert!(pv.data().iter().all(|&v| v > 0.0 && v < 1.0));
        for s in tr.decode.stacked {
            assert_eq!(g.value(s).shape.t, 10);
        }
    }

    #[test]
    fn gradient_reaches_every_parameter_group() {
        // At micro widths the deepest stage is a handful of values per frame,
        // so some seeds zero a whole frame behind a ReLU and starve one
        // temporal tap of gradient; seed 9 keeps every group reachable.
        let cfg = ModelConfig::micro(Mode::ThreeD);
        let mut store = init_params::<f64>(&cfg, 9).unwrap();
        let mut g = Graph::new(true);
        let mut bind = ParamBindings::new();
        let a = g.constant(random_image(&cfg, 32, 11));
        let b = g.constant(random_image(&cfg, 32, 12));
        let probe = random_image::<f64>(&ModelConfig { image_channels: 1, ..cfg }, 32, 13);
        let prob = {
            let mut f = Fwd::new(&mut g, &mut store, &mut bind);
            forward(&mut f, &cfg, a, b).unwrap()
        };
        let loss = ops::dot_const(&mut g, prob, probe).unwrap();
        let grads = g.backward(loss).unwrap();
        store.zero_grads();
        store.accumulate(&grads, &bind).unwrap();
        for (name, e) in store.iter() {
            if !e.trainable {
                continue;
            }
            assert!(
                e.grad.iter().any(|&v| v != 0.0),
                "no gradient reached {name}"
            );
        }
    }

    #[test]
    fn micro_model_end_to_end_gradient() {
        let cfg = ModelConfig::micro(Mode::ThreeD);
        let store = RefCell::new(init_params::<f64>(&cfg, 7).unwrap());
        let a = random_image::<f64>(&cfg, 32, 21);
        let b = random_image::<f64>(&cfg, 32, 22);
        let probe = random_image::<f64>(&ModelConfig { image_channels: 1, ..cfg }, 32, 23);
        let report = grad_check(
            &[a, b],
            |g, ids| {
                let mut store = store.borrow_mut();
                let mut bind = ParamBindings::new();
                let mut f = Fwd::new(g, &mut store, &mut bind);
                let prob = forward(&mut f, &cfg, ids[0], ids[1])?;
                ops::dot_const(g, prob, probe.clone())
            },
            3,
            31,
        )
        .unwrap();
        report.require(1e-4).unwrap();
    }

    #[test]
    fn conv_flops_scale_with_area() {
        let cfg = ModelConfig::micro(Mode::ThreeD);
        let big = complexity(&cfg, 64, 64).unwrap();
        let small = complexity(&cfg, 32, 32).unwrap();
        assert_eq!(big.params, small.params);
        let ratio = big.flops as f64 / small.flops as f64;
        assert!((3.5..4.5).contains(&ratio), "flop ratio {ratio}");
    }
}
