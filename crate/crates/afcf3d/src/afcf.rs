//! Adjacent-level feature cross-fusion.
//!
//! Every encoder stage is first reduced to a common channel width, then each
//! level exchanges information with its immediate neighbors: the shallower
//! map is max-pooled down, the deeper map is bilinearly up-sampled, the
//! aligned branches are summed, mixed by a normalized 3x3x3 convolution,
//! gated by a time-folded squeeze-and-excitation block and added back to the
//! level's own reduced features.

use crate::error::Result;
use crate::graph::NodeId;
use crate::layers::{Fwd, ParamInit};
use crate::ops::{self, ConvSpec, PoolKind};
use crate::tensor::Element;

/// Default common channel width after reduction.
pub const REDUCE: usize = 32;
/// Default squeeze ratio of the excitation bottleneck.
pub const SE_RATIO: usize = 16;

fn se_bottleneck(ct: usize, ratio: usize) -> usize {
    (ct / ratio).max(1)
}

/// Register reduction, mixing and gating parameters for all five levels.
pub fn init_afcf<E: Element>(
    pi: &mut ParamInit<E>,
    frames: usize,
    widths: &[usize; 5],
    reduce: usize,
    se_ratio: usize,
) {
    let ct = reduce * frames;
    for (i, &w) in widths.iter().enumerate() {
        pi.conv(&format!("afcf.r{i}.conv"), w, reduce, (1, 1, 1), false);
        pi.norm(&format!("afcf.r{i}.bn"), reduce);
        pi.conv(&format!("afcf.l{i}.conv"), reduce, reduce, (3, 3, 3), false);
        pi.norm(&format!("afcf.l{i}.bn"), reduce);
        pi.conv(&format!("afcf.l{i}.se.down"), ct, se_bottleneck(ct, se_ratio), (1, 1, 1), true);
        // Start the narrow squeeze stage slightly positive: with very few
        // units a zero-centered start can leave the whole bottleneck dead.
        for v in &mut pi
            .store
            .get_mut(&format!("afcf.l{i}.se.down.b"))
            .expect("registered above")
            .value
        {
            *v = E::from_real(0.1);
        }
        pi.conv(&format!("afcf.l{i}.se.up"), se_bottleneck(ct, se_ratio), ct, (1, 1, 1), true);
    }
}

/// Squeeze-and-excitation over the folded `(channel x time)` axis: global
/// average over space, two 1x1 mixes with a bottleneck, sigmoid gate applied
/// multiplicatively, then the time axis is restored.
pub fn se_gate<E: Element>(
    f: &mut Fwd<E>,
    prefix: &str,
    x: NodeId,
    se_ratio: usize,
) -> Result<NodeId> {
    let s = f.g.value(x).shape;
    let (c, t) = (s.c, s.t);
    let folded = ops::fold_time(f.g, x)?;
    let ct = c * t;
    let squeezed = ops::global_avg_pool_hw(f.g, folded)?;
    let mid = se_bottleneck(ct, se_ratio);
    let d = f.conv(&format!("{prefix}.down"), squeezed, ConvSpec::kernel_1x1(mid, true))?;
    let d = f.relu(d)?;
    let u = f.conv(&format!("{prefix}.up"), d, ConvSpec::kernel_1x1(ct, true))?;
    let gate = f.sigmoid(u)?;
    let gated = ops::mul(f.g, folded, gate)?;
    ops::unfold_time(f.g, gated, c, t)
}

/// Fuse all five reduced levels with their neighbors. Input and output are
/// ordered shallowest first; every output keeps its level's spatial extent
/// with `reduce` channels.
pub fn cross_fuse<E: Element>(
    f: &mut Fwd<E>,
    stages: &[NodeId; 5],
    reduce: usize,
    se_ratio: usize,
) -> Result<[NodeId; 5]> {
    let mut reduced = [0usize; 5];
    for (i, &s) in stages.iter().enumerate() {
        let r = f.conv(&format!("afcf.r{i}.conv"), s, ConvSpec::kernel_1x1(reduce, false))?;
        let r = f.norm(&format!("afcf.r{i}.bn"), r)?;
        reduced[i] = f.relu(r)?;
    }
    let mut fused = [0usize; 5];
    for i in 0..5 {
        let mut acc = reduced[i];
        if i > 0 {
            let down = ops::pool_spatial(f.g, reduced[i - 1], PoolKind::Max, 2, 2, 0)?;
            acc = ops::add(f.g, acc, down)?;
        }
        if i < 4 {
            let up = ops::upsample2x(f.g, reduced[i + 1])?;
            acc = ops::add(f.g, acc, up)?;
        }
        let spec = ConvSpec {
            out_channels: reduce,
            kernel: (3, 3, 3),
            stride: (1, 1, 1),
            padding: (1, 1, 1),
            bias: false,
        };
        let mixed = f.conv(&format!("afcf.l{i}.conv"), acc, spec)?;
        // Normalizing the fusion branch keeps its scale bounded relative to
        // the residual shortcut; an unnormalized branch destabilizes training.
        let mixed = f.norm(&format!("afcf.l{i}.bn"), mixed)?;
        let gated = se_gate(f, &format!("afcf.l{i}.se"), mixed, se_ratio)?;
        fused[i] = ops::add(f.g, gated, reduced[i])?;
    }
    Ok(fused)
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

    fn stage_shapes(widths: &[usize; 5], t: usize, h0: usize) -> [Shape5; 5] {
        [
            Shape5::new(1, widths[0], t, h0, h0),
            Shape5::new(1, widths[1], t, h0 / 2, h0 / 2),
            Shape5::new(1, widths[2], t, h0 / 4, h0 / 4),
            Shape5::new(1, widths[3], t, h0 / 8, h0 / 8),
            Shape5::new(1, widths[4], t, h0 / 16, h0 / 16),
        ]
    }

    #[test]
    fn outputs_keep_level_geometry() {
        let widths = [6, 6, 12, 24, 48];
        let mut store = ParamStore::<f32>::new();
        let mut pi = ParamInit::new(&mut store, 3);
        init_afcf(&mut pi, 2, &widths, 8, 4);
        let mut g = Graph::new(false);
        let mut bind = ParamBindings::new();
        let shapes = stage_shapes(&widths, 2, 32);
        let stages =
            shapes.map(|s| g.constant(random_tensor::<f32>(s, s.numel() as u64)));
        let mut f = Fwd::new(&mut g, &mut store, &mut bind);
        let fused = cross_fuse(&mut f, &stages, 8, 4).unwrap();
        for (out, s) in fused.iter().zip(shapes) {
            assert_eq!(g.value(*out).shape, Shape5 { c: 8, ..s });
        }
    }

    /// The multiplicative sigmoid gate can only shrink magnitudes.
    #[test]
    fn excitation_gate_contracts() {
        let mut store = ParamStore::<f64>::new();
        let mut pi = ParamInit::new(&mut store, 5);
        pi.conv("se.down", 8, 2, (1, 1, 1), true);
        pi.conv("se.up", 2, 8, (1, 1, 1), true);
        let x = random_tensor::<f64>(Shape5::new(2, 4, 2, 5, 5), 9);
        let mut g = Graph::new(false);
        let mut bind = ParamBindings::new();
        let xid = g.constant(x.clone());
        let mut f = Fwd::new(&mut g, &mut store, &mut bind);
        let y = se_gate(&mut f, "se", xid, 4).unwrap();
        let yv = g.value(y);
        assert_eq!(yv.shape, x.shape);
        for (a, b) in yv.data().iter().zip(x.data()) {
            assert!(a.abs() <= b.abs() + 1e-12);
            assert!(a * b >= 0.0, "gate must preserve sign");
        }
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let widths = [3, 3, 4, 4, 5];
        let mut store = ParamStore::<f64>::new();
        let mut pi = ParamInit::new(&mut store, 17);
        init_afcf(&mut pi, 2, &widths, 4, 4);
        let store = RefCell::new(store);
        let shapes = stage_shapes(&widths, 2, 16);
        let inputs: Vec<Tensor5<f64>> = shapes
            .iter()
            .map(|&s| random_tensor(s, 100 + s.numel() as u64))
            .collect();
        let probes: Vec<Tensor5<f64>> = shapes
            .iter()
            .map(|&s| random_tensor(Shape5 { c: 4, ..s }, 50 + s.h as u64))
            .collect();
        let report = grad_check(
            &inputs,
            |g, ids| {
                let mut bind = ParamBindings::new();
                let mut store = store.borrow_mut();
                let mut f = Fwd::new(g, &mut store, &mut bind);
                let stages = [ids[0], ids[1], ids[2], ids[3], ids[4]];
                let fused = cross_fuse(&mut f, &stages, 4, 4)?;
                // Project every level so each input influences the loss.
                let mut loss = ops::dot_const(g, fused[0], probes[0].clone())?;
                for (out, probe) in fused.iter().zip(&probes).skip(1) {
                    let term = ops::dot_const(g, *out, probe.clone())?;
                    loss = ops::add(g, loss, term)?;
                }
                Ok(loss)
            },
            4,
            42,
        )
        .unwrap();
        report.require(1e-6).unwrap();
    }
}
