//! Learnable 1x1 affine maps shared by the extractor and the generator trunk.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Bound, ParamId, ParamStore, Tensor};

/// A per-position affine map `[S, D_in, N] -> [S, D_out, N]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Affine {
    /// Fan-in scaled uniform init in `±scale/sqrt(d_in)`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = scale / (d_in as f64).sqrt();
        let w = (0..d_in * d_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b = (0..d_out).map(|_| rng.random_range(-bound..bound)).collect();
        Affine {
            weight: store.add(format!("{name}.weight"), &[d_out, d_in], w),
            bias: store.add(format!("{name}.bias"), &[d_out], b),
            d_in,
            d_out,
        }
    }

    pub fn apply<'t>(&self, p: &Bound<'t>, x: Tensor<'t>) -> Result<Tensor<'t>> {
        x.conv1x1(p.get(self.weight), Some(p.get(self.bias)))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).fill(0.0);
        store.get_mut(self.bias).fill(0.0);
    }
}
