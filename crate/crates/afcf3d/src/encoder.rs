//! Five-stage residual encoder over paired acquisitions.
//!
//! Each 3-D convolution is factorized into a spatial `1x3x3` kernel followed
//! by a temporal channel mix ([`Fwd::temporal_fuse`]), so the two time frames
//! exchange information at every block while the spatial weights stay shared
//! across frames. Stage outputs keep both frames; spatial resolution halves
//! per stage starting at the stem.

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::layers::{Fwd, ParamInit};
use crate::ops::{self, ConvSpec, PoolKind};
use crate::tensor::Element;

/// Operating mode of the whole network.
///
/// * [`Mode::ThreeD`]: frames stacked on the time axis, temporal kernels fuse
///   them inside the encoder (the full model).
/// * [`Mode::TwoD`]: frames concatenated on channels before the stem; every
///   temporal kernel collapses to a per-frame channel mix (ablation baseline).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    ThreeD,
    TwoD,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::ThreeD => "3d",
            Mode::TwoD => "2d",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "3d" => Ok(Mode::ThreeD),
            "2d" => Ok(Mode::TwoD),
            other => Err(Error::config(format!("unknown mode '{other}' (expected 3d or 2d)"))),
        }
    }

    /// Time extent of every feature map in this mode.
    pub fn frames(&self) -> usize {
        match self {
            Mode::ThreeD => 2,
            Mode::TwoD => 1,
        }
    }
}

/// Default per-stage channel widths, stem first.
pub const WIDTHS: [usize; 5] = [64, 64, 128, 256, 512];
const BLOCKS_PER_STAGE: usize = 2;

fn stem_in_channels(mode: Mode, image_channels: usize) -> usize {
    match mode {
        Mode::ThreeD => image_channels,
        Mode::TwoD => 2 * image_channels,
    }
}

fn init_temporal<E: Element>(pi: &mut ParamInit<E>, mode: Mode, name: &str, c: usize) {
    match mode {
        Mode::ThreeD => pi.temporal_fuse(name, c),
        Mode::TwoD => pi.temporal_shared(name, c),
    }
}

fn temporal<E: Element>(f: &mut Fwd<E>, mode: Mode, name: &str, x: NodeId) -> Result<NodeId> {
    match mode {
        Mode::ThreeD => f.temporal_fuse(name, x),
        Mode::TwoD => f.temporal_shared(name, x),
    }
}

/// Register all encoder parameters.
pub fn init_encoder<E: Element>(
    pi: &mut ParamInit<E>,
    mode: Mode,
    image_channels: usize,
    widths: &[usize; 5],
) {
    pi.conv(
        "enc.stem.sconv",
        stem_in_channels(mode, image_channels),
        widths[0],
        (1, 7, 7),
        false,
    );
    pi.norm("enc.stem.bn1", widths[0]);
    init_temporal(pi, mode, "enc.stem.tf", widths[0]);
    pi.norm("enc.stem.bn2", widths[0]);
    for stage in 1..=4 {
        let cout = widths[stage];
        let mut cin = widths[stage - 1];
        for b in 0..BLOCKS_PER_STAGE {
            let stride = if stage > 1 && b == 0 { 2 } else { 1 };
            let p = format!("enc.s{stage}.b{b}");
            pi.conv(&format!("{p}.u0.sconv"), cin, cout, (1, 3, 3), false);
            pi.norm(&format!("{p}.u0.bn1"), cout);
            init_temporal(pi, mode, &format!("{p}.u0.tf"), cout);
            pi.norm(&format!("{p}.u0.bn2"), cout);
            pi.conv(&format!("{p}.u1.sconv"), cout, cout, (1, 3, 3), false);
            pi.norm(&format!("{p}.u1.bn1"), cout);
            init_temporal(pi, mode, &format!("{p}.u1.tf"), cout);
            pi.norm(&format!("{p}.u1.bn2"), cout);
            if cin != cout || stride != 1 {
                pi.conv(&format!("{p}.proj.conv"), cin, cout, (1, 1, 1), false);
                pi.norm(&format!("{p}.proj.bn"), cout);
            }
            cin = cout;
        }
    }
}

fn unit<E: Element>(
    f: &mut Fwd<E>,
    mode: Mode,
    prefix: &str,
    x: NodeId,
    cout: usize,
    stride: usize,
) -> Result<NodeId> {
    let spec = ConvSpec {
        out_channels: cout,
        kernel: (1, 3, 3),
        stride: (1, stride, stride),
        padding: (0, 1, 1),
        bias: false,
    };
    let y = f.conv(&format!("{prefix}.sconv"), x, spec)?;
    let y = f.norm(&format!("{prefix}.bn1"), y)?;
    let y = f.relu(y)?;
    let y = temporal(f, mode, &format!("{prefix}.tf"), y)?;
    f.norm(&format!("{prefix}.bn2"), y)
}

fn block<E: Element>(
    f: &mut Fwd<E>,
    mode: Mode,
    prefix: &str,
    x: NodeId,
    cin: usize,
    cout: usize,
    stride: usize,
) -> Result<NodeId> {
    let y = unit(f, mode, &format!("{prefix}.u0"), x, cout, stride)?;
    let y = f.relu(y)?;
    let y = unit(f, mode, &format!("{prefix}.u1"), y, cout, 1)?;
    let shortcut = if cin != cout || stride != 1 {
        let spec = ConvSpec {
            out_channels: cout,
            kernel: (1, 1, 1),
            stride: (1, stride, stride),
            padding: (0, 0, 0),
            bias: false,
        };
        let s = f.conv(&format!("{prefix}.proj.conv"), x, spec)?;
        f.norm(&format!("{prefix}.proj.bn"), s)?
    } else {
        x
    };
    let y = ops::add(f.g, y, shortcut)?;
    f.relu(y)
}

/// Run the encoder on the stacked input and return the five stage outputs,
/// shallowest first. For an `H x W` input the spatial extents are
/// `H/2 .. H/32`; the channel widths follow `widths`.
pub fn encode<E: Element>(
    f: &mut Fwd<E>,
    x: NodeId,
    mode: Mode,
    widths: &[usize; 5],
) -> Result<[NodeId; 5]> {
    let s = f.g.value(x).shape;
    if s.t != mode.frames() {
        return Err(Error::config(format!(
            "encoder expects t={} in {} mode, got {:?}",
            mode.frames(),
            mode.as_str(),
            s
        )));
    }
    if s.h % 32 != 0 || s.w % 32 != 0 || s.h < 32 || s.w < 32 {
        return Err(Error::config(format!(
            "input height and width must be positive multiples of 32, got {s:?}"
        )));
    }
    let spec = ConvSpec {
        out_channels: widths[0],
        kernel: (1, 7, 7),
        stride: (1, 2, 2),
        padding: (0, 3, 3),
        bias: false,
    };
    let y = f.conv("enc.stem.sconv", x, spec)?;
    let y = f.norm("enc.stem.bn1", y)?;
    let y = f.relu(y)?;
    let y = temporal(f, mode, "enc.stem.tf", y)?;
    let y = f.norm("enc.stem.bn2", y)?;
    let f0 = f.relu(y)?;

    let mut cur = ops::pool_spatial(f.g, f0, PoolKind::Max, 3, 2, 1)?;
    let mut outs = [f0; 5];
    for stage in 1..=4 {
        let cout = widths[stage];
        let mut cin = widths[stage - 1];
        for b in 0..BLOCKS_PER_STAGE {
            let stride = if stage > 1 && b == 0 { 2 } else { 1 };
            cur = block(
                f,
                mode,
                &format!("enc.s{stage}.b{b}"),
                cur,
                cin,
                cout,
                stride,
            )?;
            cin = cout;
        }
        outs[stage] = cur;
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::optim::{ParamBindings, ParamStore};
    use crate::tensor::{Shape5, Tensor5};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape5, seed: u64) -> Tensor5<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor5::new(shape, data)
    }

    /// The three split kernels plus cross-add must match one assembled
    /// kt=3, pt=1 temporal convolution exactly (up to f64 round-off).
    #[test]
    fn split_temporal_matches_assembled_kernel() {
        let c = 4;
        let mut store = ParamStore::<f64>::new();
        let mut pi = ParamInit::new(&mut store, 7);
        pi.temporal_fuse("tf", c);

        let x = random_tensor(Shape5::new(2, c, 2, 3, 3), 11);
        let mut g = Graph::new(false);
        let mut bind = ParamBindings::new();
        let xid = g.constant(x.clone());
        let mut f = Fwd::new(&mut g, &mut store, &mut bind);
        let split = f.temporal_fuse("tf", xid).unwrap();
        let split_val = g.value(split).clone();

        // Assembled kernel (O, C, 3, 1, 1): temporal taps [w1, w2, w3].
        let mut wdata = vec![0.0f64; c * c * 3];
        let ks = Shape5::new(c, c, 3, 1, 1);
        for (ti, name) in ["tf.w1", "tf.w2", "tf.w3"].iter().enumerate() {
            let wt = store.tensor(name).unwrap();
            for o in 0..c {
                for ci in 0..c {
                    wdata[ks.index(o, ci, ti, 0, 0)] = wt.at(o, ci, 0, 0, 0);
                }
            }
        }
        let mut g2 = Graph::new(false);
        let xid2 = g2.constant(x);
        let wid = g2.constant(Tensor5::new(ks, wdata));
        let spec = ConvSpec {
            out_channels: c,
            kernel: (3, 1, 1),
            stride: (1, 1, 1),
            padding: (1, 0, 0),
            bias: false,
        };
        let full = ops::conv3d(&mut g2, xid2, wid, None, spec).unwrap();
        let full_val = g2.value(full);

        assert_eq!(split_val.shape, full_val.shape);
        for (a, b) in split_val.data().iter().zip(full_val.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn stage_shapes_at_full_width() {
        let mut store = ParamStore::<f32>::new();
        let mut pi = ParamInit::new(&mut store, 1);
        init_encoder(&mut pi, Mode::ThreeD, 3, &WIDTHS);
        let mut g = Graph::new(false);
        let mut bind = ParamBindings::new();
        let x = g.constant(Tensor5::full(Shape5::new(1, 3, 2, 64, 64), 0.5));
        let mut f = Fwd::new(&mut g, &mut store, &mut bind);
        let outs = encode(&mut f, x, Mode::ThreeD, &WIDTHS).unwrap();
        let expect = [
            Shape5::new(1, 64, 2, 32, 32),
            Shape5::new(1, 64, 2, 16, 16),
            Shape5::new(1, 128, 2, 8, 8),
            Shape5::new(1, 256, 2, 4, 4),
            Shape5::new(1, 512, 2, 2, 2),
        ];
        for (o, e) in outs.iter().zip(expect) {
            assert_eq!(g.value(*o).shape, e);
        }
    }

    #[test]
    fn flat_mode_keeps_single_frame() {
        let widths = [8, 8, 8, 8, 8];
        let mut store = ParamStore::<f32>::new();
        let mut pi = ParamInit::new(&mut store, 1);
        init_encoder(&mut pi, Mode::TwoD, 3, &widths);
        let mut g = Graph::new(false);
        let mut bind = ParamBindings::new();
        let x = g.constant(Tensor5::full(Shape5::new(1, 6, 1, 32, 32), 0.1));
        let mut f = Fwd::new(&mut g, &mut store, &mut bind);
        let outs = encode(&mut f, x, Mode::TwoD, &widths).unwrap();
        for (o, h) in outs.iter().zip([16, 8, 4, 2, 1]) {
            let s = g.value(*o).shape;
            assert_eq!(s.t, 1);
            assert_eq!((s.h, s.w), (h, h));
        }
    }

    #[test]
    fn rejects_bad_input_extent() {
        let widths = [8, 8, 8, 8, 8];
        let mut store = ParamStore::<f32>::new();
        let mut pi = ParamInit::new(&mut store, 1);
        init_encoder(&mut pi, Mode::ThreeD, 3, &widths);
        let mut g = Graph::new(false);
        let mut bind = ParamBindings::new();
        let x = g.constant(Tensor5::full(Shape5::new(1, 3, 2, 48, 64), 0.0));
        let mut f = Fwd::new(&mut g, &mut store, &mut bind);
        assert!(encode(&mut f, x, Mode::ThreeD, &widths).is_err());
    }
}
