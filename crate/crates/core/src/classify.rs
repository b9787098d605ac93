//! Graph-identity classification with the conditioning GNN: a probe of how many
//! message-passing layers are needed to tell molecules apart.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adamw_step, Array, ParamStore, Tape, Var};
use crate::conditioning::{ConditioningGnn, GraphInputs};
use crate::error::{Error, Result};
use crate::molgraph::{node_feature_dim, Atom, AtomVocab, Bond, BondType, Hybridization, MolecularGraph, NUM_BOND_FEATURES};
use crate::nn::Linear;
use crate::train::OptimizerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub layers: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub seed: u64,
    pub vocab: AtomVocab,
    /// Stop once every graph is classified correctly and the loss is below this.
    pub target_loss: f64,
}

impl ClassifierConfig {
    pub fn new(layers: usize) -> Self {
        ClassifierConfig { layers, hidden: 32, epochs: 5000, seed: 0, vocab: AtomVocab::Qm9, target_loss: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub layers: usize,
    pub accuracy: f64,
    pub final_loss: f64,
    pub epochs_run: usize,
    pub predictions: Vec<usize>,
}

struct Classifier {
    gnn: ConditioningGnn,
    head: Linear,
}

impl Classifier {
    /// Logits `[1, classes]` from the sum-pooled node tokens.
    fn logits(&self, tape: &mut Tape, store: &ParamStore, g: &GraphInputs) -> Var {
        let (v, _) = self.gnn.forward(tape, store, g);
        let pooled = tape.sum_axis(v, 0);
        self.head.forward(tape, store, pooled)
    }
}

/// `logsumexp(z) - z_label`, shifted by the (constant) maximum logit.
fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Var {
    let z = tape.value(logits).clone();
    let m = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(logits, -m);
    let e = tape.exp(shifted);
    let s = tape.sum(e);
    let lse = tape.ln(s);
    let picked = tape.slice(shifted, 1, label, label + 1);
    let scalar_shape = tape.shape(lse).to_vec();
    let picked = tape.reshape(picked, &scalar_shape);
    tape.sub(lse, picked)
}

fn argmax(a: &Array) -> usize {
    let mut best = 0;
    for (k, &v) in a.data().iter().enumerate() {
        if v > a.data()[best] {
            best = k;
        }
    }
    best
}

/// Trains a GNN with sum pooling and a linear head to recover each graph's index.
pub fn train_classifier(graphs: &[MolecularGraph], cfg: &ClassifierConfig) -> Result<ClassifyReport> {
    if graphs.is_empty() {
        return Err(Error::InvalidInput("classification needs at least one graph".into()));
    }
    let inputs: Vec<GraphInputs> = graphs.iter().map(|g| GraphInputs::new(g, cfg.vocab, 32)).collect::<Result<_>>()?;
    let classes = graphs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let gnn = ConditioningGnn::new(
        &mut store,
        "gnn",
        node_feature_dim(cfg.vocab),
        NUM_BOND_FEATURES,
        cfg.hidden,
        cfg.layers,
        &mut rng,
    );
    let head = Linear::new(&mut store, "head", cfg.hidden, classes, true, &mut rng);
    let net = Classifier { gnn, head };
    let adam = OptimizerConfig { lr_max: 1e-3, ..OptimizerConfig::default() }.adamw(cfg.epochs as u64);
    let mut opt = crate::autodiff::OptimizerState::new(&store);

    let evaluate = |store: &ParamStore| -> (Vec<usize>, f64) {
        let mut preds = Vec::with_capacity(classes);
        let mut loss = 0.0;
        for (label, g) in inputs.iter().enumerate() {
            let mut t = Tape::new();
            let z = net.logits(&mut t, store, g);
            preds.push(argmax(t.value(z)));
            let l = cross_entropy(&mut t, z, label);
            loss += t.value(l).item();
        }
        (preds, loss / classes as f64)
    };

    let mut epochs_run = 0;
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let mut total: Option<Var> = None;
        for (label, g) in inputs.iter().enumerate() {
            let z = net.logits(&mut tape, &store, g);
            let l = cross_entropy(&mut tape, z, label);
            total = Some(match total {
                Some(acc) => tape.add(acc, l),
                None => l,
            });
        }
        let loss = tape.scale(total.unwrap(), 1.0 / classes as f64);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("classifier loss at epoch {epochs_run}")));
        }
        tape.backward(loss)?;
        adamw_step(&mut store, &tape.param_grads(), &mut opt, &adam)?;
        epochs_run += 1;
        if value < cfg.target_loss {
            let (preds, _) = evaluate(&store);
            if preds.iter().enumerate().all(|(k, &p)| k == p) {
                break;
            }
        }
    }
    let (predictions, final_loss) = evaluate(&store);
    let correct = predictions.iter().enumerate().filter(|(k, p)| k == *p).count();
    Ok(ClassifyReport {
        layers: cfg.layers,
        accuracy: correct as f64 / classes as f64,
        final_loss,
        epochs_run,
        predictions,
    })
}

/// Nonan-`position`-ol (`C9H20O`) with explicit hydrogens; the hydroxyl sits on carbon `position`.
pub fn nonanol(position: usize) -> Result<MolecularGraph> {
    if !(1..=9).contains(&position) {
        return Err(Error::InvalidInput(format!("hydroxyl position must be in 1..=9, got {position}")));
    }
    let mut atoms: Vec<Atom> = Vec::new();
    let mut bonds = Vec::new();
    let single = |i, j| Bond { i, j, kind: BondType::Single };
    for k in 0..9 {
        atoms.push(Atom::element(6));
        if k > 0 {
            bonds.push(single(k - 1, k));
        }
    }
    let o = atoms.len();
    atoms.push(Atom::element(8));
    bonds.push(single(position - 1, o));
    let mut heavy_degree = vec![0usize; atoms.len()];
    for b in &bonds {
        heavy_degree[b.i] += 1;
        heavy_degree[b.j] += 1;
    }
    let valence = |z: u32| if z == 6 { 4 } else { 2 };
    for k in 0..o + 1 {
        for _ in heavy_degree[k]..valence(atoms[k].z) {
            let h = atoms.len();
            atoms.push(Atom::element(1));
            bonds.push(single(k, h));
        }
    }
    let mut degree = vec![0u32; atoms.len()];
    for b in &bonds {
        degree[b.i] += 1;
        degree[b.j] += 1;
    }
    for (a, d) in atoms.iter_mut().zip(degree) {
        a.degree = d;
        a.hybridization = if a.z == 1 { Hybridization::Other } else { Hybridization::Sp3 };
    }
    MolecularGraph::new(atoms, bonds, vec![])
}

/// The three-molecule toy set: 1-, 2- and 3-nonanol.
pub fn nonanol_toy_set() -> Result<Vec<MolecularGraph>> {
    (1..=3).map(nonanol).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonanol_composition() {
        for p in 1..=3 {
            let g = nonanol(p).unwrap();
            assert_eq!(g.num_atoms(), 30);
            assert_eq!(g.num_heavy_atoms(), 10);
            assert_eq!(g.bonds.len(), 29);
            assert_eq!(g.atoms.iter().filter(|a| a.z == 1).count(), 20);
        }
        assert!(nonanol(0).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut t = Tape::new();
        let z = t.constant(Array::new(vec![1, 3], vec![0.5, 0.5, 0.5]));
        let l = cross_entropy(&mut t, z, 1);
        assert!((t.value(l).item() - 3f64.ln()).abs() < 1e-15);
    }
}
