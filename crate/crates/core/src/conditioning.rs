//! Conditioning tokens: time embedding, message-passing atom tokens, pair tokens
//! and the zero-initialized modulation generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::molgraph::{featurize, geodesic_distances, AtomVocab, FeatureMatrices, GeodesicMatrix, MolecularGraph};
use crate::nn::{Activation, Embedding, Linear, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    Geodesic,
    Bond,
    None,
}

/// Graph-derived, coordinate-free inputs precomputed once per molecule.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    pub n: usize,
    pub features: FeatureMatrices,
    pub hops: GeodesicMatrix,
    /// Directed edges `(src, dst, bond)`.
    pub edges: Vec<(usize, usize, usize)>,
    pub atom_types: Vec<usize>,
}

impl GraphInputs {
    pub fn new(g: &MolecularGraph, vocab: AtomVocab, max_hops: usize) -> Result<Self> {
        Ok(GraphInputs {
            n: g.num_atoms(),
            features: featurize(g, vocab)?,
            hops: geodesic_distances(g, max_hops)?,
            edges: g.directed_edges(),
            atom_types: vocab.indices(g)?,
        })
    }

    fn src(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.0).collect()
    }

    fn dst(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.1).collect()
    }
}

/// Two-layer SiLU MLP on the raw time scalar.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub mlp: Mlp,
}

impl TimeEmbedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, h: usize, rng: &mut R) -> Self {
        TimeEmbedding { mlp: Mlp::new(store, name, 1, h, h, Activation::Silu, rng) }
    }

    /// Returns a `[1, H]` token.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tau: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidInput(format!("time must lie in [0, 1], got {tau}")));
        }
        let t = tape.constant(Array::new(vec![1, 1], vec![tau]));
        Ok(self.mlp.forward(tape, store, t))
    }
}

/// Message-passing network over directed bond edges with residual updates.
#[derive(Clone, Debug)]
pub struct ConditioningGnn {
    pub node_embed: Mlp,
    pub edge_embed: Mlp,
    /// `(f_e, f_v)` per layer.
    pub layers: Vec<(Mlp, Mlp)>,
}

impl ConditioningGnn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        node_dim: usize,
        edge_dim: usize,
        h: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let node_embed = Mlp::new(store, &format!("{name}.node_embed"), node_dim, h, h, Activation::Silu, rng);
        let edge_embed = Mlp::new(store, &format!("{name}.edge_embed"), edge_dim, h, h, Activation::Silu, rng);
        let layers = (0..layers)
            .map(|t| {
                (
                    Mlp::new(store, &format!("{name}.layer{t}.edge"), 3 * h, h, h, Activation::Silu, rng),
                    Mlp::new(store, &format!("{name}.layer{t}.node"), 2 * h, h, h, Activation::Silu, rng),
                )
            })
            .collect();
        ConditioningGnn { node_embed, edge_embed, layers }
    }

    /// Returns node tokens `[N, H]` and directed edge tokens `[2E, H]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, g: &GraphInputs) -> (Var, Var) {
        let (src, dst) = (g.src(), g.dst());
        let bond_index: Vec<usize> = g.edges.iter().map(|e| e.2).collect();
        let nf = tape.constant(g.features.node.clone());
        let ef = tape.constant(g.features.edge.clone());
        let ef = tape.gather_rows(ef, &bond_index);
        let mut v = self.node_embed.forward(tape, store, nf);
        let mut e = self.edge_embed.forward(tape, store, ef);
        for (f_e, f_v) in &self.layers {
            let vd = tape.gather_rows(v, &dst);
            let vs = tape.gather_rows(v, &src);
            let inp = tape.concat(&[e, vd, vs], 1);
            let de = f_e.forward(tape, store, inp);
            e = tape.add(e, de);
            let agg = tape.scatter_add_rows(e, &dst, g.n);
            let inp = tape.concat(&[v, agg], 1);
            let dv = f_v.forward(tape, store, inp);
            v = tape.add(v, dv);
        }
        (v, e)
    }
}

/// Pair-token generator for the configured mode.
#[derive(Clone, Debug)]
pub enum PairConditioner {
    Geodesic { table: Embedding, mlp: Mlp },
    Bond { mlp: Mlp, fallback: ParamId },
    None,
}

impl PairConditioner {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, mode: PairMode, h: usize, max_hops: usize, rng: &mut R) -> Self {
        match mode {
            PairMode::Geodesic => PairConditioner::Geodesic {
                table: Embedding::new(store, &format!("{name}.hops"), max_hops + 1, h, rng),
                mlp: Mlp::new(store, &format!("{name}.hop_mlp"), h, h, h, Activation::Silu, rng),
            },
            PairMode::Bond => {
                use rand_distr::{Distribution, StandardNormal};
                let c: Vec<f64> = (0..h).map(|_| StandardNormal.sample(rng)).collect();
                PairConditioner::Bond {
                    mlp: Mlp::new(store, &format!("{name}.bond_mlp"), h, h, h, Activation::Silu, rng),
                    fallback: store.add(format!("{name}.fallback"), Array::from_vec(c)),
                }
            }
            PairMode::None => PairConditioner::None,
        }
    }

    pub fn mode(&self) -> PairMode {
        match self {
            PairConditioner::Geodesic { .. } => PairMode::Geodesic,
            PairConditioner::Bond { .. } => PairMode::Bond,
            PairConditioner::None => PairMode::None,
        }
    }

    /// Pair tokens `[N, N, H]`; entry `(i, j)` in bond mode is the token of the
    /// edge running from `j` into `i`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, g: &GraphInputs, edge_tokens: Var, h: usize) -> Var {
        let n = g.n;
        match self {
            PairConditioner::Geodesic { table, mlp } => {
                let t = tape.param(store, table.table);
                let rows = mlp.forward(tape, store, t);
                let flat = tape.gather_rows(rows, g.hops.as_slice());
                tape.reshape(flat, &[n, n, h])
            }
            PairConditioner::Bond { mlp, fallback } => {
                let tok = mlp.forward(tape, store, edge_tokens);
                let pos: Vec<usize> = g.edges.iter().map(|&(s, d, _)| d * n + s).collect();
                let placed = tape.scatter_add_rows(tok, &pos, n * n);
                let mut free = vec![1.0; n * n];
                for &p in &pos {
                    free[p] = 0.0;
                }
                let free = tape.constant(Array::new(vec![n * n, 1], free));
                let c = tape.param(store, *fallback);
                let rest = tape.mul(free, c);
                let all = tape.add(placed, rest);
                tape.reshape(all, &[n, n, h])
            }
            PairConditioner::None => tape.constant(Array::zeros(&[n, n, h])),
        }
    }
}

/// Time, atom and pair tokens for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ConditioningBundle {
    /// `[1, H]`
    pub c_time: Var,
    /// `[N, H]`
    pub c_atom: Var,
    /// `[N, N, H]`
    pub c_pair: Var,
    pub pair_mode: PairMode,
}

/// Zero-initialized `W` applied to `SiLU(c)`, split along the last axis into chunks.
#[derive(Clone, Debug)]
pub struct Modulation {
    pub linear: Linear,
    pub chunks: Vec<usize>,
}

impl Modulation {
    pub fn new(store: &mut ParamStore, name: &str, h: usize, chunks: Vec<usize>) -> Self {
        let total = chunks.iter().sum();
        Modulation { linear: Linear::zeros(store, name, h, total), chunks }
    }

    /// `silu_c` is `SiLU(c_time + c_atom)` with shape `[N, H]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, silu_c: Var) -> Vec<Var> {
        let out = self.linear.forward(tape, store, silu_c);
        let mut start = 0;
        self.chunks
            .iter()
            .map(|&w| {
                let s = tape.slice(out, 1, start, start + w);
                start += w;
                s
            })
            .collect()
    }
}

/// `SiLU(c_time + c_atom)`, shared by every modulation layer.
pub fn modulation_input(tape: &mut Tape, bundle: &ConditioningBundle) -> Var {
    let c = tape.add(bundle.c_atom, bundle.c_time);
    tape.silu(c)
}

/// The six flat-block modulation arrays `(alpha1, beta1, gamma1, alpha2, beta2, gamma2)`.
pub fn adaln_params(tape: &mut Tape, store: &ParamStore, w: &Modulation, bundle: &ConditioningBundle) -> Vec<Var> {
    let s = modulation_input(tape, bundle);
    w.forward(tape, store, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{Atom, Bond, BondType};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triangle_plus_one() -> MolecularGraph {
        let atoms = vec![Atom::element(6), Atom::element(6), Atom::element(8), Atom::element(1)];
        let bonds = vec![
            Bond { i: 0, j: 1, kind: BondType::Single },
            Bond { i: 1, j: 2, kind: BondType::Double },
            Bond { i: 2, j: 0, kind: BondType::Single },
            Bond { i: 0, j: 3, kind: BondType::Single },
        ];
        MolecularGraph::new(atoms, bonds, vec![]).unwrap()
    }

    #[test]
    fn time_embedding_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let te = TimeEmbedding::new(&mut store, "t", 8, &mut rng);
        let mut tape = Tape::new();
        let a = te.forward(&mut tape, &store, 0.3).unwrap();
        let b = te.forward(&mut tape, &store, 0.3).unwrap();
        assert_eq!(tape.shape(a), &[1, 8]);
        assert_eq!(tape.value(a), tape.value(b));
        assert!(te.forward(&mut tape, &store, 1.5).is_err());
    }

    #[test]
    fn bond_mode_edgeless_is_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let g = MolecularGraph::new(vec![Atom::element(6), Atom::element(8)], vec![], vec![]).unwrap();
        let gi = GraphInputs::new(&g, AtomVocab::Qm9, 32).unwrap();
        let gnn = ConditioningGnn::new(&mut store, "gnn", 63, 4, 6, 2, &mut rng);
        let pc = PairConditioner::new(&mut store, "pair", PairMode::Bond, 6, 32, &mut rng);
        let mut tape = Tape::new();
        let (v, e) = gnn.forward(&mut tape, &store, &gi);
        assert!(tape.value(v).all_finite());
        assert_eq!(tape.shape(e), &[0, 6]);
        let p = pc.forward(&mut tape, &store, &gi, e, 6);
        let PairConditioner::Bond { fallback, .. } = &pc else { unreachable!() };
        let c = store.get(*fallback).data().to_vec();
        for k in 0..4 {
            assert_eq!(&tape.value(p).data()[k * 6..(k + 1) * 6], &c[..]);
        }
    }

    #[test]
    fn geodesic_pairs_symmetric_and_none_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let g = triangle_plus_one();
        let gi = GraphInputs::new(&g, AtomVocab::Qm9, 32).unwrap();
        let geo = PairConditioner::new(&mut store, "geo", PairMode::Geodesic, 5, 32, &mut rng);
        let mut tape = Tape::new();
        let dummy = tape.constant(Array::zeros(&[8, 5]));
        let p = geo.forward(&mut tape, &store, &gi, dummy, 5);
        let v = tape.value(p);
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..5 {
                    assert_eq!(v.get(&[i, j, c]), v.get(&[j, i, c]));
                }
            }
        }
        let z = PairConditioner::None.forward(&mut tape, &store, &gi, dummy, 5);
        assert!(tape.value(z).data().iter().all(|&x| x == 0.0));
        assert_eq!(tape.shape(z), &[4, 4, 5]);
    }

    #[test]
    fn modulation_is_zero_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let m = Modulation::new(&mut store, "ada", 4, vec![4; 6]);
        let mut tape = Tape::new();
        let ct = tape.constant(Array::from_rows(&[vec![0.3, -1.0, 2.0, 0.5]]));
        let ca = tape.constant(Array::new(vec![3, 4], (0..12).map(|k| k as f64 * 0.1 - rng.random::<f64>()).collect()));
        let cp = tape.constant(Array::zeros(&[3, 3, 4]));
        let bundle = ConditioningBundle { c_time: ct, c_atom: ca, c_pair: cp, pair_mode: PairMode::None };
        let parts = adaln_params(&mut tape, &store, &m, &bundle);
        assert_eq!(parts.len(), 6);
        for p in parts {
            assert_eq!(tape.shape(p), &[3, 4]);
            assert!(tape.value(p).data().iter().all(|&x| x == 0.0));
        }
    }
}
