//! The conformer network: positional embeddings, modified-similarity attention
//! (flat and SO(3)), modulated transformer blocks, readouts and the full forward map.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, CouplingTable, ParamStore, Tape, Var};
use crate::conditioning::{
    modulation_input, ConditioningBundle, ConditioningGnn, GraphInputs, Modulation, PairConditioner, PairMode,
    TimeEmbedding,
};
use crate::equivariant::{
    cg_table, degree_rows, equiv_layer_norm, expand_per_degree, gated_nonlinearity, num_rows, spherical_harmonics,
    DegreeLinear, RadialBasis, RadialFilter, MAX_DEGREE,
};
use crate::error::{Error, Result};
use crate::geometry::centroid;
use crate::molgraph::{node_feature_dim, AtomVocab, MolecularGraph, DEFAULT_MAX_HOPS, NUM_BOND_FEATURES};
use crate::nn::{Activation, Embedding, Linear, Mlp};

pub const LN_EPS: f64 = 1e-6;
pub const CENTERING_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ape,
    Rpe,
    Pe3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub heads: usize,
    pub d_head: usize,
    pub mgn_layers: usize,
    /// Maximal degree of the equivariant features; only read by the PE3 variant.
    #[serde(default = "default_degree")]
    pub degree: usize,
    pub pair_mode: PairMode,
    #[serde(default = "default_true")]
    pub node_conditioning: bool,
    pub vocab: AtomVocab,
    #[serde(default = "default_max_hops")]
    pub max_hops: usize,
    #[serde(default = "default_radial_num")]
    pub radial_num: usize,
    #[serde(default = "default_radial_max")]
    pub radial_max: f64,
}

fn default_degree() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_max_hops() -> usize {
    DEFAULT_MAX_HOPS
}
fn default_radial_num() -> usize {
    32
}
fn default_radial_max() -> f64 {
    10.0
}

impl ModelConfig {
    fn preset(variant: Variant, layers: usize, heads: usize, mgn_layers: usize) -> Self {
        ModelConfig {
            variant,
            layers,
            heads,
            d_head: 32,
            mgn_layers,
            degree: 1,
            pair_mode: PairMode::Geodesic,
            node_conditioning: true,
            vocab: AtomVocab::Qm9,
            max_hops: DEFAULT_MAX_HOPS,
            radial_num: 32,
            radial_max: 10.0,
        }
    }

    pub fn ape_s() -> Self {
        Self::preset(Variant::Ape, 2, 4, 1)
    }
    pub fn ape_b() -> Self {
        Self::preset(Variant::Ape, 6, 8, 2)
    }
    pub fn rpe_b() -> Self {
        Self::preset(Variant::Rpe, 6, 8, 2)
    }
    pub fn pe3_b() -> Self {
        Self::preset(Variant::Pe3, 6, 6, 2)
    }
    pub fn ape_l() -> Self {
        Self::preset(Variant::Ape, 8, 12, 3)
    }
    pub fn rpe_l() -> Self {
        Self::preset(Variant::Rpe, 8, 12, 3)
    }
    pub fn pe3_l() -> Self {
        Self::preset(Variant::Pe3, 8, 10, 3)
    }

    /// Named presets: `ape-s`, `ape-b`, `rpe-b`, `pe3-b`, `ape-l`, `rpe-l`, `pe3-l`.
    pub fn by_name(name: &str) -> Option<Self> {
        Some(match name.to_ascii_lowercase().as_str() {
            "ape-s" => Self::ape_s(),
            "ape-b" => Self::ape_b(),
            "rpe-b" => Self::rpe_b(),
            "pe3-b" => Self::pe3_b(),
            "ape-l" => Self::ape_l(),
            "rpe-l" => Self::rpe_l(),
            "pe3-l" => Self::pe3_l(),
            _ => return None,
        })
    }

    /// A small configuration for tests and quick experiments.
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig { d_head: 4, ..Self::preset(variant, 2, 2, 1) }
    }

    pub fn hidden(&self) -> usize {
        self.heads * self.d_head
    }

    pub fn radial_basis(&self) -> RadialBasis {
        RadialBasis { num: self.radial_num, r_max: self.radial_max }
    }

    /// Degree used by the token layout: `degree` for PE3, otherwise 0.
    pub fn token_degree(&self) -> usize {
        if self.variant == Variant::Pe3 {
            self.degree
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_head == 0 {
            return Err(Error::Config("heads and d_head must be positive".into()));
        }
        if self.max_hops == 0 {
            return Err(Error::Config("max_hops must be at least 1".into()));
        }
        if self.variant == Variant::Pe3 && self.degree > MAX_DEGREE {
            return Err(Error::UnsupportedDegree(self.degree, MAX_DEGREE));
        }
        self.radial_basis().validate()
    }
}

// ----- positional data -------------------------------------------------------------------------

/// `[N, N, 3]` displacements `r_i - r_j`.
pub fn pair_displacements(x: &Array) -> Array {
    let n = x.shape()[0];
    let d = x.data();
    let mut out = Vec::with_capacity(n * n * 3);
    for i in 0..n {
        for j in 0..n {
            for k in 0..3 {
                out.push(d[i * 3 + k] - d[j * 3 + k]);
            }
        }
    }
    Array::new(vec![n, n, 3], out)
}

/// Radial basis values and spherical harmonics for every ordered pair.
#[derive(Clone, Debug)]
pub struct PairGeometry {
    /// `[N, N, num_basis]`
    pub rbf: Array,
    /// `[N, N, (L+1)^2, 1]`; the self pair uses `Y_0 = 1` and zero higher degrees.
    pub harmonics: Array,
}

impl PairGeometry {
    pub fn new(x: &Array, basis: &RadialBasis, l: usize) -> Result<Self> {
        let n = x.shape()[0];
        let disp = pair_displacements(x);
        let rows = num_rows(l);
        let mut rbf = Vec::with_capacity(n * n * basis.num);
        let mut ys = Vec::with_capacity(n * n * rows);
        for i in 0..n {
            for j in 0..n {
                let o = (i * n + j) * 3;
                let v = [disp.data()[o], disp.data()[o + 1], disp.data()[o + 2]];
                let r = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                if i == j {
                    rbf.extend(basis.expand(0.0));
                    ys.push(1.0);
                    ys.extend(std::iter::repeat_n(0.0, rows - 1));
                    continue;
                }
                if r < 1e-12 {
                    return Err(Error::InvalidInput(format!("atoms {i} and {j} coincide")));
                }
                rbf.extend(basis.expand(r));
                ys.extend(spherical_harmonics([v[0] / r, v[1] / r, v[2] / r], l)?);
            }
        }
        Ok(PairGeometry {
            rbf: Array::new(vec![n, n, basis.num], rbf),
            harmonics: Array::new(vec![n, n, rows, 1], ys),
        })
    }
}

/// Absolute positional embedding `MLP(r_i)`, `[N, H]`.
pub fn ape(tape: &mut Tape, store: &ParamStore, mlp: &Mlp, x: &Array) -> Var {
    let xv = tape.constant(x.clone());
    mlp.forward(tape, store, xv)
}

/// Relative positional embedding `MLP(r_i - r_j)`, `[N, N, H]`.
pub fn rpe(tape: &mut Tape, store: &ParamStore, mlp: &Mlp, x: &Array) -> Var {
    let d = tape.constant(pair_displacements(x));
    mlp.forward(tape, store, d)
}

/// Equivariant positional embedding `phi_l(r_ij) * Y_l(r_hat_ij)`, `[N, N, (L+1)^2, H]`.
pub fn pe3(tape: &mut Tape, store: &ParamStore, filter: &RadialFilter, geo: &PairGeometry) -> Var {
    let rbf = tape.constant(geo.rbf.clone());
    let phi = filter.forward(tape, store, rbf);
    let y = tape.constant(geo.harmonics.clone());
    tape.mul(phi, y)
}

// ----- attention -------------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct FlatAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl FlatAttention {
    fn new(store: &mut ParamStore, name: &str, h: usize, rng: &mut ChaCha8Rng) -> Self {
        FlatAttention {
            wq: Linear::new(store, &format!("{name}.q"), h, h, false, rng),
            wk: Linear::new(store, &format!("{name}.k"), h, h, false, rng),
            wv: Linear::new(store, &format!("{name}.v"), h, h, false, rng),
            wo: Linear::new(store, &format!("{name}.o"), h, h, true, rng),
        }
    }
}

/// Returns the attention output `[N, H]` and the normalized weights `[N, N, heads, 1]`.
pub fn attention_standard(
    tape: &mut Tape,
    store: &ParamStore,
    att: &FlatAttention,
    h: Var,
    u: Var,
    heads: usize,
) -> (Var, Var) {
    let shape = tape.shape(h).to_vec();
    let (n, hid) = (shape[0], shape[1]);
    let dh = hid / heads;
    let q = att.wq.forward(tape, store, h);
    let k = att.wk.forward(tape, store, h);
    let v = att.wv.forward(tape, store, h);
    let q = tape.reshape(q, &[n, 1, heads, dh]);
    let k = tape.reshape(k, &[1, n, heads, dh]);
    let v = tape.reshape(v, &[1, n, heads, dh]);
    let u = tape.reshape(u, &[n, n, heads, dh]);
    let ku = tape.mul(k, u);
    let qku = tape.mul(q, ku);
    let logits = tape.sum_axis(qku, 3);
    let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
    let w = tape.softmax(logits, 1);
    let vu = tape.mul(v, u);
    let wvu = tape.mul(w, vu);
    let out = tape.sum_axis(wvu, 1);
    let out = tape.reshape(out, &[n, hid]);
    (att.wo.forward(tape, store, out), w)
}

#[derive(Clone, Debug)]
pub struct EquivAttention {
    pub wq: DegreeLinear,
    pub wk: DegreeLinear,
    pub wv: DegreeLinear,
    pub wo: DegreeLinear,
}

impl EquivAttention {
    fn new(store: &mut ParamStore, name: &str, l: usize, h: usize, rng: &mut ChaCha8Rng) -> Self {
        EquivAttention {
            wq: DegreeLinear::new(store, &format!("{name}.q"), l, h, h, rng),
            wk: DegreeLinear::new(store, &format!("{name}.k"), l, h, h, rng),
            wv: DegreeLinear::new(store, &format!("{name}.v"), l, h, h, rng),
            wo: DegreeLinear::new(store, &format!("{name}.o"), l, h, h, rng),
        }
    }
}

/// SO(3) attention over tokens `[N, R, H]` with invariant scalers `u` and
/// equivariant pair features `u_hat`, both `[N, N, R, H]`.
///
/// Returns the output `[N, R, H]` and the weights `[N, N, 1, heads, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_so3(
    tape: &mut Tape,
    store: &ParamStore,
    att: &EquivAttention,
    h: Var,
    u: Var,
    u_hat: Var,
    heads: usize,
    table: &Arc<CouplingTable>,
) -> (Var, Var) {
    let shape = tape.shape(h).to_vec();
    let (n, r, hid) = (shape[0], shape[1], shape[2]);
    let dh = hid / heads;
    let q = att.wq.forward(tape, store, h);
    let k = att.wk.forward(tape, store, h);
    let v = att.wv.forward(tape, store, h);
    let q = tape.reshape(q, &[n, 1, r, heads, dh]);
    let k = tape.reshape(k, &[1, n, r, heads, dh]);
    let u5 = tape.reshape(u, &[n, n, r, heads, dh]);
    let ku = tape.mul(k, u5);
    let qku = tape.mul(q, ku);
    let per_row = tape.sum_axis(qku, 4);
    let logits = tape.sum_axis(per_row, 2);
    let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
    let w = tape.softmax(logits, 1);
    let v = tape.reshape(v, &[1, n, r, hid]);
    let v = tape.broadcast_to(v, &[n, n, r, hid]);
    let msg = tape.coupling(u_hat, v, Arc::clone(table));
    let msg = tape.reshape(msg, &[n, n, r, heads, dh]);
    let wm = tape.mul(w, msg);
    let out = tape.sum_axis(wm, 1);
    let out = tape.reshape(out, &[n, r, hid]);
    (att.wo.forward(tape, store, out), w)
}

// ----- modulation ------------------------------------------------------------------------------

/// `LN(h) (1 + alpha) + beta`.
pub fn adaln(tape: &mut Tape, h: Var, alpha: Var, beta: Var) -> Var {
    let n = tape.layer_norm(h, LN_EPS);
    let a = tape.add_scalar(alpha, 1.0);
    let y = tape.mul(n, a);
    tape.add(y, beta)
}

/// Equivariant AdaLN on `[N, R, H]`; `alpha` is `[N, L+1, H]`, `beta` is `[N, H]`
/// and only shifts the degree-0 row.
pub fn equiv_adaln(tape: &mut Tape, h: Var, alpha: Var, beta: Var, l: usize) -> Var {
    let n = tape.shape(h)[0];
    let hid = tape.shape(h)[2];
    let normed = equiv_layer_norm(tape, h, l);
    let a = expand_per_degree(tape, alpha, l);
    let a = tape.add_scalar(a, 1.0);
    let y = tape.mul(normed, a);
    let b = tape.reshape(beta, &[n, 1, hid]);
    let y0 = tape.slice(y, 1, 0, 1);
    let y0 = tape.add(y0, b);
    if l == 0 {
        return y0;
    }
    let rest = tape.slice(y, 1, 1, num_rows(l));
    tape.concat(&[y0, rest], 1)
}

/// `h * gamma`, with `gamma` `[N, L+1, H]` repeated over each degree's rows.
pub fn equiv_adascale(tape: &mut Tape, h: Var, gamma: Var, l: usize) -> Var {
    let g = expand_per_degree(tape, gamma, l);
    tape.mul(h, g)
}

// ----- blocks ----------------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct FlatBlock {
    pub modulation: Modulation,
    pub attention: FlatAttention,
    pub mlp: Mlp,
}

impl FlatBlock {
    fn new(store: &mut ParamStore, name: &str, h: usize, rng: &mut ChaCha8Rng) -> Self {
        FlatBlock {
            modulation: Modulation::new(store, &format!("{name}.ada"), h, vec![h; 6]),
            attention: FlatAttention::new(store, &format!("{name}.att"), h, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), h, 4 * h, h, Activation::Gelu, rng),
        }
    }

    /// `silu_c` is the shared modulation input `[N, H]`; `u` the pair injection `[N, N, H]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, silu_c: Var, u: Var, heads: usize) -> Var {
        let m = self.modulation.forward(tape, store, silu_c);
        let (a1, b1, g1, a2, b2, g2) = (m[0], m[1], m[2], m[3], m[4], m[5]);
        let x = adaln(tape, h, a1, b1);
        let (att, _) = attention_standard(tape, store, &self.attention, x, u, heads);
        let att = tape.mul(att, g1);
        let h = tape.add(h, att);
        let x = adaln(tape, h, a2, b2);
        let y = self.mlp.forward(tape, store, x);
        let y = tape.mul(y, g2);
        tape.add(h, y)
    }
}

#[derive(Clone, Debug)]
pub struct EquivBlock {
    pub modulation: Modulation,
    pub attention: EquivAttention,
    pub mlp_in: DegreeLinear,
    pub mlp_out: DegreeLinear,
    pub degree: usize,
}

impl EquivBlock {
    fn new(store: &mut ParamStore, name: &str, l: usize, h: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = l + 1;
        EquivBlock {
            modulation: Modulation::new(store, &format!("{name}.ada"), h, vec![k * h, h, k * h, k * h, h, k * h]),
            attention: EquivAttention::new(store, &format!("{name}.att"), l, h, rng),
            mlp_in: DegreeLinear::new(store, &format!("{name}.mlp.0"), l, h, 4 * h, rng),
            mlp_out: DegreeLinear::new(store, &format!("{name}.mlp.1"), l, 4 * h, h, rng),
            degree: l,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        silu_c: Var,
        u: Var,
        u_hat: Var,
        heads: usize,
        table: &Arc<CouplingTable>,
    ) -> Var {
        let l = self.degree;
        let n = tape.shape(h)[0];
        let hid = tape.shape(h)[2];
        let m = self.modulation.forward(tape, store, silu_c);
        let per_degree = |tape: &mut Tape, v: Var| tape.reshape(v, &[n, l + 1, hid]);
        let (a1, g1, a2, g2) =
            (per_degree(tape, m[0]), per_degree(tape, m[2]), per_degree(tape, m[3]), per_degree(tape, m[5]));
        let (b1, b2) = (m[1], m[4]);
        let x = equiv_adaln(tape, h, a1, b1, l);
        let (att, _) = attention_so3(tape, store, &self.attention, x, u, u_hat, heads, table);
        let att = equiv_adascale(tape, att, g1, l);
        let h = tape.add(h, att);
        let x = equiv_adaln(tape, h, a2, b2, l);
        let y = self.mlp_in.forward(tape, store, x);
        let y = gated_nonlinearity(tape, y, l);
        let y = self.mlp_out.forward(tape, store, y);
        let y = equiv_adascale(tape, y, g2, l);
        tape.add(h, y)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Flat(FlatBlock),
    Equiv(EquivBlock),
}

// ----- readouts --------------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum Readout {
    Flat { modulation: Modulation, w: Linear },
    Equiv { modulation: Modulation, w: Linear, degree: usize },
}

/// Subtracts the per-axis mean over atoms.
pub fn center_var(tape: &mut Tape, y: Var) -> Var {
    let m = tape.mean_axis(y, 0);
    tape.sub(y, m)
}

impl Readout {
    /// Uncentered per-atom vectors `[N, 3]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, silu_c: Var) -> Var {
        match self {
            Readout::Flat { modulation, w } => {
                let m = modulation.forward(tape, store, silu_c);
                let x = adaln(tape, h, m[0], m[1]);
                w.forward(tape, store, x)
            }
            Readout::Equiv { modulation, w, degree } => {
                let l = *degree;
                let n = tape.shape(h)[0];
                let hid = tape.shape(h)[2];
                let m = modulation.forward(tape, store, silu_c);
                let alpha = tape.reshape(m[0], &[n, l + 1, hid]);
                let x = equiv_adaln(tape, h, alpha, m[1], l);
                let r = degree_rows(1);
                let v = tape.slice(x, 1, r.start, r.end);
                let y = w.forward(tape, store, v);
                tape.reshape(y, &[n, 3])
            }
        }
    }
}

// ----- the model -------------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Network {
    pub atom_embed: Embedding,
    pub time: TimeEmbedding,
    pub gnn: ConditioningGnn,
    pub pair: PairConditioner,
    pub ape: Option<Mlp>,
    pub rpe: Option<Mlp>,
    /// Radial filters for the positional embedding and for the similarity scalers.
    pub radial: Option<(RadialFilter, RadialFilter)>,
    pub blocks: Vec<Block>,
    pub readout: Readout,
}

/// Model parameters together with the architecture that reads them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub net: Network,
    pub coupling: Arc<CouplingTable>,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub bundle: ConditioningBundle,
    pub tokens: Var,
    /// Centered prediction `[N, 3]`.
    pub output: Var,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden();
        let l = config.token_degree();
        let atom_embed = Embedding::new(&mut store, "atom_embed", config.vocab.len(), h, &mut rng);
        let time = TimeEmbedding::new(&mut store, "time", h, &mut rng);
        let gnn = ConditioningGnn::new(
            &mut store,
            "gnn",
            node_feature_dim(config.vocab),
            NUM_BOND_FEATURES,
            h,
            config.mgn_layers,
            &mut rng,
        );
        let pair = PairConditioner::new(&mut store, "pair", config.pair_mode, h, config.max_hops, &mut rng);
        let (mut ape_mlp, mut rpe_mlp, mut radial) = (None, None, None);
        match config.variant {
            Variant::Ape => ape_mlp = Some(Mlp::new(&mut store, "ape", 3, h, h, Activation::Silu, &mut rng)),
            Variant::Rpe => rpe_mlp = Some(Mlp::new(&mut store, "rpe", 3, h, h, Activation::Silu, &mut rng)),
            Variant::Pe3 => {
                let basis = config.radial_basis();
                radial = Some((
                    RadialFilter::new(&mut store, "pe3.radial", basis, l, h, &mut rng),
                    RadialFilter::new(&mut store, "pe3.sim_radial", basis, l, h, &mut rng),
                ));
            }
        }
        let blocks = (0..config.layers)
            .map(|t| {
                let name = format!("block{t}");
                match config.variant {
                    Variant::Pe3 => Block::Equiv(EquivBlock::new(&mut store, &name, l, h, &mut rng)),
                    _ => Block::Flat(FlatBlock::new(&mut store, &name, h, &mut rng)),
                }
            })
            .collect();
        let readout = match config.variant {
            Variant::Pe3 => Readout::Equiv {
                modulation: Modulation::new(&mut store, "readout.ada", h, vec![(l + 1) * h, h]),
                w: Linear::new(&mut store, "readout.w", h, 1, false, &mut rng),
                degree: l,
            },
            _ => Readout::Flat {
                modulation: Modulation::new(&mut store, "readout.ada", h, vec![h, h]),
                w: Linear::new(&mut store, "readout.w", h, 3, false, &mut rng),
            },
        };
        let coupling = Arc::new(cg_table(l)?);
        Ok(Model {
            config,
            params: store,
            net: Network { atom_embed, time, gnn, pair, ape: ape_mlp, rpe: rpe_mlp, radial, blocks, readout },
            coupling,
        })
    }

    /// Replaces the coupling table used by the equivariant attention.
    pub fn set_coupling_table(&mut self, table: CouplingTable) {
        self.coupling = Arc::new(table);
    }

    pub fn prepare(&self, g: &MolecularGraph) -> Result<GraphInputs> {
        GraphInputs::new(g, self.config.vocab, self.config.max_hops)
    }

    /// Time, atom and pair tokens; independent of coordinates.
    pub fn conditioning(&self, tape: &mut Tape, g: &GraphInputs, tau: f64) -> Result<ConditioningBundle> {
        let store = &self.params;
        let h = self.config.hidden();
        let c_time = self.net.time.forward(tape, store, tau)?;
        let (v, e) = self.net.gnn.forward(tape, store, g);
        let c_atom = if self.config.node_conditioning { v } else { tape.constant(Array::zeros(&[g.n, h])) };
        let c_pair = self.net.pair.forward(tape, store, g, e, h);
        Ok(ConditioningBundle { c_time, c_atom, c_pair, pair_mode: self.net.pair.mode() })
    }

    /// Initial tokens: `[N, H]` for flat variants, `[N, (L+1)^2, H]` for PE3.
    pub fn initial_tokens(&self, tape: &mut Tape, g: &GraphInputs, x: &Array) -> Var {
        let store = &self.params;
        let e = self.net.atom_embed.lookup(tape, store, &g.atom_types);
        match self.config.variant {
            Variant::Ape => {
                let p = ape(tape, store, self.net.ape.as_ref().unwrap(), x);
                tape.add(e, p)
            }
            Variant::Rpe => e,
            Variant::Pe3 => {
                let h = self.config.hidden();
                let l = self.config.token_degree();
                let e = tape.reshape(e, &[g.n, 1, h]);
                if l == 0 {
                    return e;
                }
                let z = tape.constant(Array::zeros(&[g.n, num_rows(l) - 1, h]));
                tape.concat(&[e, z], 1)
            }
        }
    }

    /// Pair injections for the current positions: `(u, Some(u_hat))` for PE3, `(u, None)` otherwise.
    pub fn pair_injection(&self, tape: &mut Tape, bundle: &ConditioningBundle, x: &Array) -> Result<(Var, Option<Var>)> {
        let store = &self.params;
        let n = x.shape()[0];
        let h = self.config.hidden();
        let none = bundle.pair_mode == PairMode::None;
        match self.config.variant {
            Variant::Ape => {
                let u = if none { tape.constant(Array::ones(&[n, n, h])) } else { bundle.c_pair };
                Ok((u, None))
            }
            Variant::Rpe => {
                let p = rpe(tape, store, self.net.rpe.as_ref().unwrap(), x);
                let u = if none { p } else { tape.add(bundle.c_pair, p) };
                Ok((u, None))
            }
            Variant::Pe3 => {
                let l = self.config.token_degree();
                let (pe_filter, sim_filter) = self.net.radial.as_ref().unwrap();
                let geo = PairGeometry::new(x, &pe_filter.basis, l)?;
                let p = pe3(tape, store, pe_filter, &geo);
                let rbf = tape.constant(geo.rbf.clone());
                let phi = sim_filter.forward(tape, store, rbf);
                if none {
                    return Ok((phi, Some(p)));
                }
                let c = tape.reshape(bundle.c_pair, &[n, n, 1, h]);
                let u = tape.mul(phi, c);
                let u_hat = tape.mul(p, c);
                Ok((u, Some(u_hat)))
            }
        }
    }

    /// Full forward pass: `x` must be centered, `tau` in `[0, 1]`.
    pub fn forward_trace(&self, tape: &mut Tape, x: &Array, tau: f64, g: &GraphInputs) -> Result<ForwardTrace> {
        if x.shape() != [g.n, 3] {
            return Err(Error::ShapeMismatch { expected: vec![g.n, 3], found: x.shape().to_vec() });
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("model input".into()));
        }
        let pts: Vec<[f64; 3]> = x.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let c = centroid(&pts);
        if c.iter().any(|v| v.abs() > CENTERING_TOLERANCE) {
            return Err(Error::InvalidInput(format!("model input is not centered (center of mass {c:?})")));
        }
        let store = &self.params;
        let bundle = self.conditioning(tape, g, tau)?;
        let silu_c = modulation_input(tape, &bundle);
        let (u, u_hat) = self.pair_injection(tape, &bundle, x)?;
        let mut h = self.initial_tokens(tape, g, x);
        let heads = self.config.heads;
        for block in &self.net.blocks {
            h = match block {
                Block::Flat(b) => b.forward(tape, store, h, silu_c, u, heads),
                Block::Equiv(b) => b.forward(tape, store, h, silu_c, u, u_hat.unwrap(), heads, &self.coupling),
            };
        }
        let y = self.net.readout.forward(tape, store, h, silu_c);
        let output = center_var(tape, y);
        Ok(ForwardTrace { bundle, tokens: h, output })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Array, tau: f64, g: &GraphInputs) -> Result<Var> {
        Ok(self.forward_trace(tape, x, tau, g)?.output)
    }

    /// Prediction of the clean sample without recording gradients for later use.
    pub fn predict(&self, x: &Array, tau: f64, g: &GraphInputs) -> Result<Array> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, x, tau, g)?;
        Ok(tape.value(y).clone())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}
