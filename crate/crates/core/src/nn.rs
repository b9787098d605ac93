//! Dense layers and two-layer MLPs over the last axis.

use rand::Rng;

use crate::autodiff::{Array, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Gelu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Silu => tape.silu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// `y = x W + b` with `W` of shape `[fan_in, fan_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add_dense(format!("{name}.w"), fan_in, fan_out, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Array::zeros(&[fan_out])));
        Linear { w, b, fan_in, fan_out }
    }

    /// Zero-initialized weight, no bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Array::zeros(&[fan_in, fan_out]));
        Linear { w, b: None, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => y,
        }
    }
}

/// `Linear -> activation -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        Mlp {
            l1: Linear::new(store, &format!("{name}.0"), fan_in, hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.1"), hidden, fan_out, true, rng),
            act,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.l1.forward(tape, store, x);
        let h = self.act.apply(tape, h);
        self.l2.forward(tape, store, h)
    }
}

/// Row-wise embedding table `[rows, dim]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let data = (0..rows * dim).map(|_| StandardNormal.sample(rng)).collect();
        let table = store.add(format!("{name}.table"), Array::new(vec![rows, dim], data));
        Embedding { table, rows, dim }
    }

    pub fn lookup(&self, tape: &mut Tape, store: &ParamStore, index: &[usize]) -> Var {
        let t = tape.param(store, self.table);
        tape.gather_rows(t, index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_shapes_and_zero_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "a", 3, 5, true, &mut rng);
        let z = Linear::zeros(&mut store, "z", 3, 4);
        let mut tape = Tape::new();
        let x = tape.constant(Array::ones(&[2, 7, 3]));
        let y = l.forward(&mut tape, &store, x);
        assert_eq!(tape.shape(y), &[2, 7, 5]);
        let y0 = z.forward(&mut tape, &store, x);
        assert!(tape.value(y0).data().iter().all(|&v| v == 0.0));
    }
}
