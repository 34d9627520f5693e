//! Parameter storage and the small layer vocabulary the model is built from.
//!
//! All learnable tensors live in one flat [`ParamStore`], addressed by
//! [`ParamId`]; layer structs only hold ids. During a forward pass a
//! [`Fwd`] context lazily lifts each parameter onto the tape exactly once,
//! so gradients can be collected back by id after `backward`.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|t| t.data.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }
}

/// Forward-pass context: tape + parameters + training-time randomness.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub training: bool,
    pub rng: &'a mut Rng,
    lifted: Vec<Option<Var>>,
}

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, training: bool, rng: &'a mut Rng) -> Self {
        let lifted = vec![None; store.len()];
        Fwd {
            tape,
            store,
            training,
            rng,
            lifted,
        }
    }

    /// Lift a parameter onto the tape (cached; each parameter appears once).
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.lifted[id] {
            return v;
        }
        let v = self.tape.param(self.store.value(id).clone());
        self.lifted[id] = Some(v);
        v
    }

    /// Tape positions of every lifted parameter, indexed by `ParamId`.
    pub fn into_lifted(self) -> Vec<Option<Var>> {
        self.lifted
    }
}

/// Collect per-parameter gradients after `tape.backward`, indexed like the store.
pub fn collect_grads(tape: &Tape, lifted: &[Option<Var>]) -> Vec<Option<Vec<f64>>> {
    lifted
        .iter()
        .map(|slot| slot.and_then(|v| tape.grad(v).map(|g| g.to_vec())))
        .collect()
}

/// Fully connected layer y = x W + b.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform Kaiming-style init, zero bias.
    pub fn init(store: &mut ParamStore, rng: &mut Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let w = store.push(
            format!("{name}.w"),
            Tensor::rand_uniform(&[in_dim, out_dim], -bound, bound, rng),
        );
        let b = store.push(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn no_bias(store: &mut ParamStore, rng: &mut Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let w = store.push(
            format!("{name}.w"),
            Tensor::rand_uniform(&[in_dim, out_dim], -bound, bound, rng),
        );
        Linear {
            w,
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn apply(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let w = f.p(self.w);
        let bias = self.b.map(|b| f.p(b));
        f.tape.matmul_bias(x, w, bias)
    }
}

/// Learnable layer-norm scale/shift over the last axis.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl Norm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.push(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.push(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Norm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn apply(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let g = f.p(self.gamma);
        let b = f.p(self.beta);
        f.tape.layer_norm(x, g, b, self.eps)
    }
}

/// Transformer feed-forward. With `glu` the projection is doubled and gated:
/// `h = a * gelu(gate)`, otherwise plain `gelu(x W1)`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub w_in: Linear,
    pub w_out: Linear,
    pub hidden: usize,
    pub glu: bool,
    pub dropout: f64,
}

impl FeedForward {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        glu: bool,
        dropout: f64,
    ) -> Self {
        let in_width = if glu { 2 * hidden } else { hidden };
        FeedForward {
            w_in: Linear::init(store, rng, &format!("{name}.in"), dim, in_width),
            w_out: Linear::init(store, rng, &format!("{name}.out"), hidden, dim),
            hidden,
            glu,
            dropout,
        }
    }

    pub fn apply(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let h = self.w_in.apply(f, x)?;
        let act = if self.glu {
            let rank = f.tape.shape(h).len();
            let a = f.tape.narrow(h, rank - 1, 0, self.hidden)?;
            let gate = f.tape.narrow(h, rank - 1, self.hidden, self.hidden)?;
            let gate = f.tape.gelu(gate)?;
            f.tape.mul(a, gate)?
        } else {
            f.tape.gelu(h)?
        };
        let training = f.training;
        let act = f.tape.dropout(act, self.dropout, training, f.rng)?;
        self.w_out.apply(f, act)
    }
}

/// Two-layer MLP used to embed raw inputs into the hidden dimension.
#[derive(Debug, Clone, Copy)]
pub struct EmbedMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EmbedMlp {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, name: &str, in_dim: usize, dim: usize) -> Self {
        EmbedMlp {
            fc1: Linear::init(store, rng, &format!("{name}.fc1"), in_dim, dim),
            fc2: Linear::init(store, rng, &format!("{name}.fc2"), dim, dim),
        }
    }

    pub fn apply(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let h = self.fc1.apply(f, x)?;
        let h = f.tape.gelu(h)?;
        self.fc2.apply(f, h)
    }
}


#[cfg(test)]
mod embed_tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::SeedTree;

    #[test]
    fn square_embed_mlp_is_injective_on_random_weights() {
        // rank probe: random square weights are full-rank almost surely, so
        // distinct inputs must map to distinct embeddings
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(60).rng();
        let mlp = EmbedMlp::init(&mut store, &mut rng, "probe", 4, 4);
        let mut inputs = Vec::new();
        for _ in 0..24 {
            inputs.push(Tensor::randn(&[1, 4], 1.0, &mut rng));
        }
        let mut outputs: Vec<Vec<f64>> = Vec::new();
        for x in &inputs {
            let mut tape = Tape::new();
            let mut frng = SeedTree::new(0).rng();
            let mut f = Fwd::new(&mut tape, &store, false, &mut frng);
            let v = f.tape.constant(x.clone());
            let y = mlp.apply(&mut f, v).unwrap();
            outputs.push(f.tape.data(y).to_vec());
        }
        for i in 0..outputs.len() {
            for j in i + 1..outputs.len() {
                let dist: f64 = outputs[i]
                    .iter()
                    .zip(&outputs[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(dist > 1e-12, "embeddings {i} and {j} collide");
            }
        }
    }
}
