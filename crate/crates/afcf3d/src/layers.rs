//! Parameter registration and forward-pass plumbing shared by the encoder,
//! fusion and decoder modules.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::ops::{self, ConvSpec, Pointwise};
use crate::optim::{ParamBindings, ParamStore};
use crate::tensor::{Element, Shape5};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const BN_EPS: f64 = 1e-8;
pub const BN_MOMENTUM: f64 = 0.1;

/// Registers parameters with He fan-in initialization from a seeded RNG.
/// Registration order is fixed by construction order, so a given seed yields
/// a bitwise-reproducible store.
pub struct ParamInit<'a, E: Element> {
    pub store: &'a mut ParamStore<E>,
    pub rng: ChaCha8Rng,
}

impl<'a, E: Element> ParamInit<'a, E> {
    pub fn new(store: &'a mut ParamStore<E>, seed: u64) -> Self {
        ParamInit {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<E> {
        (0..n)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                E::from_real(z * std)
            })
            .collect()
    }

    /// Convolution weight `(O, C, kt, kh, kw)` + optional zero bias.
    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize, usize),
        bias: bool,
    ) {
        let (kt, kh, kw) = kernel;
        let fan_in = cin * kt * kh * kw;
        let std = (2.0 / fan_in as f64).sqrt();
        let shape = Shape5::new(cout, cin, kt, kh, kw);
        let w = self.normal(shape.numel(), std);
        self.store.insert(&format!("{name}.w"), shape, w, true);
        if bias {
            let bshape = Shape5::new(1, cout, 1, 1, 1);
            self.store
                .insert(&format!("{name}.b"), bshape, vec![E::zero(); cout], true);
        }
    }

    /// Normalization affine pair plus running statistics buffers.
    pub fn norm(&mut self, name: &str, c: usize) {
        let shape = Shape5::new(1, c, 1, 1, 1);
        self.store
            .insert(&format!("{name}.gamma"), shape, vec![E::one(); c], true);
        self.store
            .insert(&format!("{name}.beta"), shape, vec![E::zero(); c], true);
        self.store.insert(
            &format!("{name}.running_mean"),
            shape,
            vec![E::zero(); c],
            false,
        );
        self.store.insert(
            &format!("{name}.running_var"),
            shape,
            vec![E::one(); c],
            false,
        );
    }

    /// Split temporal weights of the factorized time convolution: shared
    /// `w2` at He scale; the cross-frame taps `w1`/`w3` start at `-w2/2`
    /// plus small noise, so each fused frame begins as `own - other/2`.
    /// This keeps both the frame-mean and the frame-difference subspaces
    /// represented from the first step, which markedly shortens the early
    /// plateau when the target depends on inter-frame differences.
    /// Bias-free: a normalization layer always follows, which would absorb
    /// (and zero the gradient of) any additive term.
    pub fn temporal_fuse(&mut self, name: &str, c: usize) {
        let shape = Shape5::new(c, c, 1, 1, 1);
        let std = (2.0 / c as f64).sqrt();
        let w2 = self.normal(shape.numel(), std);
        let mut w1 = self.normal(shape.numel(), std * 0.1);
        let mut w3 = self.normal(shape.numel(), std * 0.1);
        for i in 0..shape.numel() {
            let half = w2[i] * E::from_real(0.5);
            w1[i] = w1[i] - half;
            w3[i] = w3[i] - half;
        }
        self.store.insert(&format!("{name}.w1"), shape, w1, true);
        self.store.insert(&format!("{name}.w2"), shape, w2, true);
        self.store.insert(&format!("{name}.w3"), shape, w3, true);
    }

    /// Single shared kernel for the 2-D ablation (no cross-frame weights).
    pub fn temporal_shared(&mut self, name: &str, c: usize) {
        let shape = Shape5::new(c, c, 1, 1, 1);
        let std = (2.0 / c as f64).sqrt();
        let w2 = self.normal(shape.numel(), std);
        self.store.insert(&format!("{name}.w2"), shape, w2, true);
    }
}

/// One forward pass: graph under construction, parameter store (mutable for
/// running-statistic updates) and the name/node bindings used afterwards to
/// route gradients back.
pub struct Fwd<'a, E: Element> {
    pub g: &'a mut Graph<E>,
    pub store: &'a mut ParamStore<E>,
    pub bind: &'a mut ParamBindings,
}

impl<'a, E: Element> Fwd<'a, E> {
    pub fn new(
        g: &'a mut Graph<E>,
        store: &'a mut ParamStore<E>,
        bind: &'a mut ParamBindings,
    ) -> Self {
        Fwd { g, store, bind }
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        self.store.leaf(self.g, self.bind, name)
    }

    pub fn conv(&mut self, name: &str, x: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let w = self.param(&format!("{name}.w"))?;
        let b = if spec.bias {
            Some(self.param(&format!("{name}.b"))?)
        } else {
            None
        };
        ops::conv3d(self.g, x, w, b, spec)
    }

    pub fn norm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let rm = self.store.get(&format!("{name}.running_mean"))?.value.clone();
        let rv = self.store.get(&format!("{name}.running_var"))?.value.clone();
        let (id, updated) =
            ops::batchnorm(self.g, x, gamma, beta, &rm, &rv, BN_MOMENTUM, BN_EPS)?;
        if let Some((new_m, new_v)) = updated {
            self.store.get_mut(&format!("{name}.running_mean"))?.value = new_m;
            self.store.get_mut(&format!("{name}.running_var"))?.value = new_v;
        }
        Ok(id)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        ops::pointwise(self.g, x, Pointwise::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        ops::pointwise(self.g, x, Pointwise::Sigmoid)
    }

    /// Time-factorized convolution of the fusion blocks. With two frames the
    /// kt=3, pt=1 temporal kernel reduces to three 1x1 channel mixes with
    /// cross-added boundary outputs:
    ///   out frame 1 = w2 * f1 + w3 * f2,  out frame 2 = w1 * f1 + w2 * f2.
    pub fn temporal_fuse(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let c = self.g.value(x).shape.c;
        if self.g.value(x).shape.t != 2 {
            return Err(crate::error::Error::config(format!(
                "temporal_fuse requires t=2, got {:?}",
                self.g.value(x).shape
            )));
        }
        let f1 = ops::slice_time(self.g, x, 0, 1)?;
        let f2 = ops::slice_time(self.g, x, 1, 1)?;
        let w1 = self.param(&format!("{name}.w1"))?;
        let w2 = self.param(&format!("{name}.w2"))?;
        let w3 = self.param(&format!("{name}.w3"))?;
        let no_bias = ConvSpec::kernel_1x1(c, false);
        let o1a = ops::conv3d(self.g, f1, w2, None, no_bias)?;
        let o1b = ops::conv3d(self.g, f2, w3, None, no_bias)?;
        let out1 = ops::add(self.g, o1a, o1b)?;
        let o2a = ops::conv3d(self.g, f1, w1, None, no_bias)?;
        let o2b = ops::conv3d(self.g, f2, w2, None, no_bias)?;
        let out2 = ops::add(self.g, o2a, o2b)?;
        ops::concat_time(self.g, &[out1, out2])
    }

    /// Degenerate form for the 2-D ablation: only the shared kernel remains.
    pub fn temporal_shared(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let c = self.g.value(x).shape.c;
        let w2 = self.param(&format!("{name}.w2"))?;
        ops::conv3d(self.g, x, w2, None, ConvSpec::kernel_1x1(c, false))
    }
}
