//! Full-scale skip-connection decoder.
//!
//! Each decoded level gathers all five source maps: shallower cross-fused
//! levels are max-pooled down, the level itself passes through, deeper maps
//! (already-decoded levels, plus the deepest cross-fused level) are
//! up-sampled. The aligned sources are concatenated along the time axis and
//! refined by a three-convolution block that also collapses the stacked
//! frames back to the native two.

use crate::encoder::Mode;
use crate::error::Result;
use crate::graph::NodeId;
use crate::layers::{Fwd, ParamInit};
use crate::ops::{self, ConvSpec, PoolKind};
use crate::tensor::Element;

const LEVELS: usize = 5;

/// Register the per-level refinement blocks and the prediction head.
pub fn init_decoder<E: Element>(pi: &mut ParamInit<E>, mode: Mode, reduce: usize) {
    for i in 0..LEVELS - 1 {
        let p = format!("dec.l{i}.fr");
        match mode {
            Mode::ThreeD => {
                pi.conv(&format!("{p}.c1"), reduce, reduce, (3, 3, 3), false);
                pi.norm(&format!("{p}.bn1"), reduce);
                pi.conv(&format!("{p}.c2"), reduce, reduce, (4, 3, 3), false);
                pi.norm(&format!("{p}.bn2"), reduce);
                pi.conv(&format!("{p}.c3"), reduce, reduce, (3, 1, 1), false);
                pi.norm(&format!("{p}.bn3"), reduce);
            }
            Mode::TwoD => {
                pi.conv(&format!("{p}.c1"), LEVELS * reduce, reduce, (1, 3, 3), false);
                pi.norm(&format!("{p}.bn1"), reduce);
                pi.conv(&format!("{p}.c2"), reduce, reduce, (1, 3, 3), false);
                pi.norm(&format!("{p}.bn2"), reduce);
                pi.conv(&format!("{p}.c3"), reduce, reduce, (1, 1, 1), false);
                pi.norm(&format!("{p}.bn3"), reduce);
            }
        }
    }
    let head_kt = match mode {
        Mode::ThreeD => 2,
        Mode::TwoD => 1,
    };
    pi.conv("dec.head.conv", reduce, 1, (head_kt, 1, 1), true);
}

/// Refinement over the stacked sources. In the volumetric mode the temporal
/// kernels walk the ten stacked frames down to two: 3x3x3 (t 10 -> 10),
/// 4x3x3 stride 2 (t -> 4), 3x1x1 (t -> 2). The flat mode carries the stack
/// on channels instead and uses purely spatial kernels.
fn fr_block<E: Element>(
    f: &mut Fwd<E>,
    prefix: &str,
    x: NodeId,
    mode: Mode,
    reduce: usize,
) -> Result<NodeId> {
    let specs: [ConvSpec; 3] = match mode {
        Mode::ThreeD => [
            ConvSpec {
                out_channels: reduce,
                kernel: (3, 3, 3),
                stride: (1, 1, 1),
                padding: (1, 1, 1),
                bias: false,
            },
            ConvSpec {
                out_channels: reduce,
                kernel: (4, 3, 3),
                stride: (2, 1, 1),
                padding: (0, 1, 1),
                bias: false,
            },
            ConvSpec {
                out_channels: reduce,
                kernel: (3, 1, 1),
                stride: (1, 1, 1),
                padding: (0, 0, 0),
                bias: false,
            },
        ],
        Mode::TwoD => [
            ConvSpec {
                out_channels: reduce,
                kernel: (1, 3, 3),
                stride: (1, 1, 1),
                padding: (0, 1, 1),
                bias: false,
            },
            ConvSpec {
                out_channels: reduce,
                kernel: (1, 3, 3),
                stride: (1, 1, 1),
                padding: (0, 1, 1),
                bias: false,
            },
            ConvSpec::kernel_1x1(reduce, false),
        ],
    };
    let mut y = x;
    for (k, spec) in specs.iter().enumerate() {
        y = f.conv(&format!("{prefix}.c{}", k + 1), y, *spec)?;
        y = f.norm(&format!("{prefix}.bn{}", k + 1), y)?;
        y = f.relu(y)?;
    }
    Ok(y)
}

/// Intermediate and final nodes of one decoder pass, indexed by level.
/// `stacked[i]` is the concatenation of all five resampled sources feeding
/// level `i`; `refined[i]` is the output of its refinement block.
pub struct DecodeTrace {
    pub stacked: [NodeId; 4],
    pub refined: [NodeId; 4],
}

/// Decode the cross-fused levels (shallowest first) into four refined maps.
/// Level `i` is produced after levels deeper than it, so its up-sampled
/// sources are already refined.
pub fn decode<E: Element>(
    f: &mut Fwd<E>,
    fused: &[NodeId; 5],
    mode: Mode,
    reduce: usize,
) -> Result<DecodeTrace> {
    let mut stacked_ids = [0usize; 4];
    let mut dec = [0usize; 4];
    for i in (0..LEVELS - 1).rev() {
        let mut sources = Vec::with_capacity(LEVELS);
        for j in 0..LEVELS {
            let mut s = if j <= i || j == LEVELS - 1 {
                fused[j]
            } else {
                dec[j]
            };
            if j < i {
                for _ in 0..i - j {
                    s = ops::pool_spatial(f.g, s, PoolKind::Max, 2, 2, 0)?;
                }
            }
            for _ in 0..j.saturating_sub(i) {
                s = ops::upsample2x(f.g, s)?;
            }
            sources.push(s);
        }
        let stacked = match mode {
            Mode::ThreeD => ops::concat_time(f.g, &sources)?,
            Mode::TwoD => ops::concat_channel(f.g, &sources)?,
        };
        stacked_ids[i] = stacked;
        dec[i] = fr_block(f, &format!("dec.l{i}.fr"), stacked, mode, reduce)?;
    }
    Ok(DecodeTrace {
        stacked: stacked_ids,
        refined: dec,
    })
}

/// Change-probability map from the shallowest decoded level: collapse the
/// remaining frames, restore full resolution, squash to `(0, 1)`.
pub fn predict_head<E: Element>(f: &mut Fwd<E>, x: NodeId, mode: Mode) -> Result<NodeId> {
    let head_kt = match mode {
        Mode::ThreeD => 2,
        Mode::TwoD => 1,
    };
    let spec = ConvSpec {
        out_channels: 1,
        kernel: (head_kt, 1, 1),
        stride: (1, 1, 1),
        padding: (0, 0, 0),
        bias: true,
    };
    let y = f.conv("dec.head.conv", x, spec)?;
    let y = ops::upsample2x(f.g, y)?;
    f.sigmoid(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::graph::Graph;
    use crate::optim::{ParamBindings, ParamStore};
    use crate::tensor::{Shape5, Tensor5};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    fn random_tensor<EE: crate::tensor::Element>(shape: Shape5, seed: u64) -> Tensor5<EE> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel())
            .map(|_| EE::from_real(rng.gen_range(-1.0..1.0)))
            .collect();
        Tensor5::new(shape, data)
    }

    fn fused_shapes(reduce: usize, t: usize, h0: usize) -> [Shape5; 5] {
        [
            Shape5::new(1, reduce, t, h0, h0),
            Shape5::new(1, reduce, t, h0 / 2, h0 / 2),
            Shape5::new(1, reduce, t, h0 / 4, h0 / 4),
            Shape5::new(1, reduce, t, h0 / 8, h0 / 8),
            Shape5::new(1, reduce, t, h0 / 16, h0 / 16),
        ]
    }

    #[test]
    fn decoded_levels_and_head_shapes() {
        let reduce = 8;
        let mut store = ParamStore::<f32>::new();
        let mut pi = ParamInit::new(&mut store, 2);
        init_decoder(&mut pi, Mode::ThreeD, reduce);
        let mut g = Graph::new(false);
        let mut bind = ParamBindings::new();
        let shapes = fused_shapes(reduce, 2, 32);
        let fused = shapes.map(|s| g.constant(random_tensor::<f32>(s, s.h as u64)));
        let mut f = Fwd::new(&mut g, &mut store, &mut bind);
        let trace = decode(&mut f, &fused, Mode::ThreeD, reduce).unwrap();
        for (d, s) in trace.refined.iter().zip(shapes) {
            assert_eq!(f.g.value(*d).shape, s, "refined map keeps level geometry");
        }
        for st in trace.stacked {
            assert_eq!(f.g.value(st).shape.t, 10, "five stacked two-frame sources");
        }
        let prob = predict_head(&mut f, trace.refined[0], Mode::ThreeD).unwrap();
        assert_eq!(g.value(prob).shape, Shape5::new(1, 1, 1, 64, 64));
        let pv = g.value(prob);
        assert!(pv.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn flat_mode_stacks_on_channels() {
        let reduce = 8;
        let mut store = ParamStore::<f32>::new();
        let mut pi = ParamInit::new(&mut store, 2);
        init_decoder(&mut pi, Mode::TwoD, reduce);
        let mut g = Graph::new(false);
        let mut bind = ParamBindings::new();
        let shapes = fused_shapes(reduce, 1, 32);
        let fused = shapes.map(|s| g.constant(random_tensor::<f32>(s, s.h as u64)));
        let mut f = Fwd::new(&mut g, &mut store, &mut bind);
        let trace = decode(&mut f, &fused, Mode::TwoD, reduce).unwrap();
        for (d, s) in trace.refined.iter().zip(shapes) {
            assert_eq!(f.g.value(*d).shape, s);
        }
        for st in trace.stacked {
            assert_eq!(f.g.value(st).shape.c, 5 * reduce);
        }
        let prob = predict_head(&mut f, trace.refined[0], Mode::TwoD).unwrap();
        assert_eq!(g.value(prob).shape, Shape5::new(1, 1, 1, 64, 64));
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let reduce = 3;
        let mut store = ParamStore::<f64>::new();
        let mut pi = ParamInit::new(&mut store, 23);
        init_decoder(&mut pi, Mode::ThreeD, reduce);
        let store = RefCell::new(store);
        let shapes = fused_shapes(reduce, 2, 16);
        let inputs: Vec<Tensor5<f64>> = shapes
            .iter()
            .map(|&s| random_tensor(s, 300 + s.numel() as u64))
            .collect();
        let probe = random_tensor::<f64>(Shape5::new(1, 1, 1, 32, 32), 77);
        let report = grad_check(
            &inputs,
            |g, ids| {
                let mut bind = ParamBindings::new();
                let mut store = store.borrow_mut();
                let mut f = Fwd::new(g, &mut store, &mut bind);
                let fused = [ids[0], ids[1], ids[2], ids[3], ids[4]];
                let trace = decode(&mut f, &fused, Mode::ThreeD, reduce)?;
                let prob = predict_head(&mut f, trace.refined[0], Mode::ThreeD)?;
                ops::dot_const(g, prob, probe.clone())
            },
            3,
            13,
        )
        .unwrap();
        report.require(1e-5).unwrap();
    }
}
