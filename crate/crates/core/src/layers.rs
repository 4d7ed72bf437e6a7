//! Parameterised building blocks shared by the encoder and the heads.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autodiff::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::Result;

/// Affine map `x · W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(fan_in)`, bias zero.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w: Vec<T> = (0..fan_in * fan_out).map(|_| T::of(dist.sample(rng))).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new(&[fan_in, fan_out], w).expect("shape matches"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let ones = Tensor::new(&[dim], vec![T::one(); dim]).expect("shape matches");
        Self {
            gamma: store.add(format!("{name}.gamma"), ones),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        tape.layer_norm(x, g, b)
    }
}

/// Adds a `[rows, cols]` table drawn from `N(0, std²)`.
pub fn normal_table<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> ParamId {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data: Vec<T> = (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect();
    store.add(name, Tensor::new(&[rows, cols], data).expect("shape matches"))
}
