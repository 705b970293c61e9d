//! Building blocks recorded on a [`Tape`].

use sha2::{Digest, Sha256};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{ParamStore, Result, Tape, Tensor, Var};

/// Per-parameter RNG derived from the model seed and the parameter name, so a parameter
/// shared between variants starts from identical values.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    ChaCha8Rng::from_seed(d.into())
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Glorot uniform over the first two axes of a 2-D weight.
    Xavier,
    Normal(f64),
    Const(f64),
}

pub(crate) fn init_tensor(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Const(c) => vec![c; n],
        Init::Xavier => {
            let (fan_in, fan_out) = (shape[0] as f64, shape[shape.len() - 1] as f64);
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            let mut rng = param_rng(seed, name);
            (0..n).map(|_| rng.random_range(-limit..limit)).collect()
        }
        Init::Normal(std) => {
            let mut rng = param_rng(seed, name);
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Parameter store plus lookups by name.
pub(crate) struct Scope<'a> {
    pub store: &'a ParamStore,
}

impl Scope<'_> {
    pub fn p(&self, tape: &mut Tape, name: &str) -> Var {
        let id = self.store.id(name).unwrap_or_else(|| panic!("model parameter {name} missing"));
        tape.param(self.store, id)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.id(name).is_some()
    }

    /// `x · W + b` over the last axis; the bias is optional.
    pub fn linear(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(tape, &format!("{prefix}.w"));
        let y = tape.matmul(x, w)?;
        let b = format!("{prefix}.b");
        if self.has(&b) {
            let b = self.p(tape, &b);
            tape.add(y, b)
        } else {
            Ok(y)
        }
    }

    /// Linear layers with ReLU between them; `relu_last` also rectifies the output.
    pub fn mlp(&self, tape: &mut Tape, mut x: Var, prefix: &str, layers: usize, relu_last: bool) -> Result<Var> {
        for i in 0..layers {
            x = self.linear(tape, x, &format!("{prefix}.{i}"))?;
            if i + 1 < layers || relu_last {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn layer_norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(tape, &format!("{prefix}.g"));
        let b = self.p(tape, &format!("{prefix}.b"));
        tape.layer_norm(x, g, b, 1e-5)
    }

    /// Multi-head scaled dot-product attention of queries `xq` [B, Nq, D] over `xkv` [B, Nk, D].
    /// `gates`, when given, weights each key inside the softmax normalization.
    pub fn attention(
        &self,
        tape: &mut Tape,
        xq: Var,
        xkv: Var,
        prefix: &str,
        heads: usize,
        gates: Option<Var>,
    ) -> Result<Var> {
        let sq = tape.value(xq).shape().to_vec();
        let sk = tape.value(xkv).shape().to_vec();
        let (b, nq, d) = (sq[0], sq[1], sq[2]);
        let nk = sk[1];
        let dh = d / heads;
        let q = self.linear(tape, xq, &format!("{prefix}.q"))?;
        let k = self.linear(tape, xkv, &format!("{prefix}.k"))?;
        let v = self.linear(tape, xkv, &format!("{prefix}.v"))?;
        let split = |tape: &mut Tape, t: Var, n: usize| -> Result<Var> {
            let r = tape.reshape(t, &[b, n, heads, dh])?;
            tape.swap_axes(r, 1, 2)
        };
        let q = split(tape, q, nq)?;
        let k = split(tape, k, nk)?;
        let v = split(tape, v, nk)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let att = match gates {
            Some(g) => tape.gated_softmax(scores, g)?,
            None => tape.softmax(scores)?,
        };
        let out = tape.matmul(att, v)?;
        let out = tape.swap_axes(out, 1, 2)?;
        tape.reshape(out, &[b, nq, d])
    }
}
