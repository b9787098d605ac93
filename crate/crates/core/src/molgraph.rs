//! Pre-featurized molecular graphs: JSON ingestion, one-hot featurization and
//! graph geodesic (hop) distances.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::geometry::Conformer;

pub const DEFAULT_MAX_HOPS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondType {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondType {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChiralTag {
    TetrahedralCw,
    TetrahedralCcw,
    Unspecified,
    Other,
}

impl ChiralTag {
    fn parse(s: &str) -> (Self, bool) {
        let u = s.trim().to_ascii_uppercase();
        let u = u.strip_prefix("CHI_").unwrap_or(&u);
        match u {
            "TETRAHEDRAL_CW" => (ChiralTag::TetrahedralCw, true),
            "TETRAHEDRAL_CCW" => (ChiralTag::TetrahedralCcw, true),
            "UNSPECIFIED" | "" => (ChiralTag::Unspecified, true),
            "OTHER" => (ChiralTag::Other, true),
            _ => (ChiralTag::Other, false),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ChiralTag::TetrahedralCw => "CHI_TETRAHEDRAL_CW",
            ChiralTag::TetrahedralCcw => "CHI_TETRAHEDRAL_CCW",
            ChiralTag::Unspecified => "CHI_UNSPECIFIED",
            ChiralTag::Other => "CHI_OTHER",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hybridization {
    Sp,
    Sp2,
    Sp3,
    Sp3d,
    Sp3d2,
    Other,
}

impl Hybridization {
    fn parse(s: &str) -> (Self, bool) {
        match s.trim().to_ascii_uppercase().as_str() {
            "SP" => (Hybridization::Sp, true),
            "SP2" => (Hybridization::Sp2, true),
            "SP3" => (Hybridization::Sp3, true),
            "SP3D" => (Hybridization::Sp3d, true),
            "SP3D2" => (Hybridization::Sp3d2, true),
            "OTHER" | "UNSPECIFIED" | "S" | "" => (Hybridization::Other, true),
            _ => (Hybridization::Other, false),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Hybridization::Sp => "SP",
            Hybridization::Sp2 => "SP2",
            Hybridization::Sp3 => "SP3",
            Hybridization::Sp3d => "SP3D",
            Hybridization::Sp3d2 => "SP3D2",
            Hybridization::Other => "OTHER",
        }
    }
}

/// One atom with normalized categorical features.
#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub z: u32,
    pub chirality: ChiralTag,
    pub num_h: u32,
    pub radical: u32,
    pub aromatic: bool,
    pub degree: u32,
    pub hybridization: Hybridization,
    pub implicit_valence: u32,
    pub formal_charge: i32,
    pub ring_sizes: Vec<u32>,
    pub num_rings: u32,
}

impl Atom {
    /// An atom with only its element set and every other feature at its neutral default.
    pub fn element(z: u32) -> Self {
        Atom {
            z,
            chirality: ChiralTag::Unspecified,
            num_h: 0,
            radical: 0,
            aromatic: false,
            degree: 0,
            hybridization: Hybridization::Other,
            implicit_valence: 0,
            formal_charge: 0,
            ring_sizes: Vec::new(),
            num_rings: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    #[serde(rename = "type")]
    pub kind: BondType,
}

/// A tetrahedral stereocenter: four neighbors and the expected orientation sign.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChiralCenter {
    pub center: usize,
    pub neighbors: [usize; 4],
    pub parity: i8,
}

/// Validated molecular graph. Bonds are stored once and expanded to both
/// directions on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct MolecularGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub chiral_centers: Vec<ChiralCenter>,
}

/// A graph together with any conformers stored alongside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    pub graph: MolecularGraph,
    pub conformers: Vec<Conformer>,
}

// ----- JSON document --------------------------------------------------------------------------

fn default_chirality() -> String {
    "CHI_UNSPECIFIED".into()
}

fn default_hybridization() -> String {
    "OTHER".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtomDoc {
    pub z: u32,
    #[serde(default = "default_chirality")]
    pub chirality: String,
    #[serde(default)]
    pub num_h: u32,
    #[serde(default)]
    pub radical: u32,
    #[serde(default)]
    pub aromatic: bool,
    #[serde(default)]
    pub degree: u32,
    #[serde(default = "default_hybridization")]
    pub hybridization: String,
    #[serde(default)]
    pub implicit_valence: u32,
    #[serde(default)]
    pub formal_charge: i32,
    #[serde(default)]
    pub ring_sizes: Vec<u32>,
    #[serde(default)]
    pub num_rings: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MolDocument {
    pub atoms: Vec<AtomDoc>,
    #[serde(default)]
    pub bonds: Vec<Bond>,
    #[serde(default)]
    pub chiral_centers: Vec<ChiralCenter>,
    #[serde(default)]
    pub conformers: Vec<Vec<[f64; 3]>>,
}

/// Parses and validates a molecule document.
pub fn parse_molecule(text: &str) -> Result<Molecule> {
    let doc: MolDocument =
        serde_json::from_str(text).map_err(|e| Error::InvalidGraph(format!("malformed document: {e}")))?;
    Molecule::from_document(doc)
}

/// Parses a molecule document and returns only its graph.
pub fn load_graph(text: &str) -> Result<MolecularGraph> {
    parse_molecule(text).map(|m| m.graph)
}

impl Molecule {
    pub fn from_document(doc: MolDocument) -> Result<Self> {
        let atoms = doc
            .atoms
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let (chirality, ok) = ChiralTag::parse(&a.chirality);
                if !ok {
                    log::warn!("atom {k}: unknown chirality tag {:?} mapped to OTHER", a.chirality);
                }
                let (hybridization, ok) = Hybridization::parse(&a.hybridization);
                if !ok {
                    log::warn!("atom {k}: unknown hybridization {:?} mapped to OTHER", a.hybridization);
                }
                Atom {
                    z: a.z,
                    chirality,
                    num_h: a.num_h,
                    radical: a.radical,
                    aromatic: a.aromatic,
                    degree: a.degree,
                    hybridization,
                    implicit_valence: a.implicit_valence,
                    formal_charge: a.formal_charge,
                    ring_sizes: a.ring_sizes.clone(),
                    num_rings: a.num_rings,
                }
            })
            .collect();
        let graph = MolecularGraph::new(atoms, doc.bonds, doc.chiral_centers)?;
        let n = graph.num_atoms();
        let conformers = doc
            .conformers
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                if c.len() != n {
                    return Err(Error::InvalidGraph(format!("conformer {k} has {} atoms, graph has {n}", c.len())));
                }
                Conformer::from_points(&c)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Molecule { graph, conformers })
    }

    pub fn to_document(&self) -> MolDocument {
        let atoms = self
            .graph
            .atoms
            .iter()
            .map(|a| AtomDoc {
                z: a.z,
                chirality: a.chirality.as_str().into(),
                num_h: a.num_h,
                radical: a.radical,
                aromatic: a.aromatic,
                degree: a.degree,
                hybridization: a.hybridization.as_str().into(),
                implicit_valence: a.implicit_valence,
                formal_charge: a.formal_charge,
                ring_sizes: a.ring_sizes.clone(),
                num_rings: a.num_rings,
            })
            .collect();
        MolDocument {
            atoms,
            bonds: self.graph.bonds.clone(),
            chiral_centers: self.graph.chiral_centers.clone(),
            conformers: self.conformers.iter().map(Conformer::to_points).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }
}

impl MolecularGraph {
    pub fn new(atoms: Vec<Atom>, bonds: Vec<Bond>, chiral_centers: Vec<ChiralCenter>) -> Result<Self> {
        let n = atoms.len();
        if n == 0 {
            return Err(Error::InvalidGraph("graph has no atoms".into()));
        }
        for b in &bonds {
            if b.i >= n || b.j >= n {
                return Err(Error::InvalidGraph(format!("bond ({}, {}) out of range for {n} atoms", b.i, b.j)));
            }
            if b.i == b.j {
                return Err(Error::InvalidGraph(format!("self-bond on atom {}", b.i)));
            }
        }
        for c in &chiral_centers {
            if c.center >= n || c.neighbors.iter().any(|&k| k >= n) {
                return Err(Error::InvalidGraph(format!("chirality center {} references atoms out of range", c.center)));
            }
            if c.parity != 1 && c.parity != -1 {
                return Err(Error::InvalidGraph(format!("chirality parity must be +1 or -1, got {}", c.parity)));
            }
        }
        Ok(MolecularGraph { atoms, bonds, chiral_centers })
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_heavy_atoms(&self) -> usize {
        self.atoms.iter().filter(|a| a.z > 1).count()
    }

    /// Each stored bond as two directed edges `(src, dst, bond index)`: first `i -> j`, then `j -> i`.
    pub fn directed_edges(&self) -> Vec<(usize, usize, usize)> {
        let mut e = Vec::with_capacity(2 * self.bonds.len());
        for (k, b) in self.bonds.iter().enumerate() {
            e.push((b.i, b.j, k));
            e.push((b.j, b.i, k));
        }
        e
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_atoms()];
        for b in &self.bonds {
            adj[b.i].push(b.j);
            adj[b.j].push(b.i);
        }
        adj
    }

    pub fn has_bond(&self, i: usize, j: usize) -> bool {
        self.bonds.iter().any(|b| (b.i == i && b.j == j) || (b.i == j && b.j == i))
    }

    /// Number of connected components of the bond graph.
    pub fn num_components(&self) -> usize {
        let adj = self.adjacency();
        let mut seen = vec![false; self.num_atoms()];
        let mut count = 0;
        for s in 0..self.num_atoms() {
            if seen[s] {
                continue;
            }
            count += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(u) = stack.pop() {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        count
    }

    /// Relabels atoms so that new atom `k` is old atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> MolecularGraph {
        let n = self.num_atoms();
        assert_eq!(perm.len(), n);
        let mut inv = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        MolecularGraph {
            atoms: perm.iter().map(|&p| self.atoms[p].clone()).collect(),
            bonds: self.bonds.iter().map(|b| Bond { i: inv[b.i], j: inv[b.j], kind: b.kind }).collect(),
            chiral_centers: self
                .chiral_centers
                .iter()
                .map(|c| ChiralCenter {
                    center: inv[c.center],
                    neighbors: c.neighbors.map(|k| inv[k]),
                    parity: c.parity,
                })
                .collect(),
        }
    }
}

// ----- featurization --------------------------------------------------------------------------

/// Atom-type vocabulary; part of the model configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AtomVocab {
    Qm9,
    Drugs,
}

const QM9_ELEMENTS: &[u32] = &[1, 6, 7, 8, 9];
const DRUGS_ELEMENTS: &[u32] = &[
    1, 3, 5, 6, 7, 8, 9, 11, 12, 13, 14, 15, 16, 17, 19, 20, 23, 24, 25, 29, 30, 31, 32, 33, 34, 35, 47, 49, 51,
    53, 64, 78, 79, 80, 83,
];

impl AtomVocab {
    pub fn elements(self) -> &'static [u32] {
        match self {
            AtomVocab::Qm9 => QM9_ELEMENTS,
            AtomVocab::Drugs => DRUGS_ELEMENTS,
        }
    }

    pub fn len(self) -> usize {
        self.elements().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn index_of(self, z: u32) -> Option<usize> {
        self.elements().iter().position(|&e| e == z)
    }

    /// Embedding-table indices for every atom of `g`.
    pub fn indices(self, g: &MolecularGraph) -> Result<Vec<usize>> {
        g.atoms
            .iter()
            .enumerate()
            .map(|(k, a)| {
                self.index_of(a.z).ok_or_else(|| {
                    Error::InvalidGraph(format!("atom {k}: element Z={} is not in the {self:?} vocabulary", a.z))
                })
            })
            .collect()
    }
}

/// Option counts of each node feature block, in encoding order.
///
/// Order: chirality, H count, radical electrons, atom type, aromaticity, degree,
/// hybridization, implicit valence, formal charge, ring-size membership, ring count.
pub fn node_block_sizes(vocab: AtomVocab) -> [usize; 11] {
    [4, 5, 5, vocab.len(), 2, 6, 6, 6, 12, 7, 5]
}

/// Index of the ring-size block, the only multi-hot block.
pub const RING_SIZE_BLOCK: usize = 9;

pub const NUM_BOND_FEATURES: usize = 4;

pub fn node_feature_dim(vocab: AtomVocab) -> usize {
    node_block_sizes(vocab).iter().sum()
}

/// One-hot node and edge features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrices {
    /// `[N, F_v]`
    pub node: Array,
    /// `[E, 4]`, one row per stored bond.
    pub edge: Array,
}

fn capped(v: u32, max_known: u32, label: &str, atom: usize) -> usize {
    if v > max_known {
        log::warn!("atom {atom}: {label} {v} exceeds the encoded range and is clamped to {max_known}");
        max_known as usize
    } else {
        v as usize
    }
}

pub fn featurize(g: &MolecularGraph, vocab: AtomVocab) -> Result<FeatureMatrices> {
    let sizes = node_block_sizes(vocab);
    let f = node_feature_dim(vocab);
    let n = g.num_atoms();
    let type_idx = vocab.indices(g)?;
    let mut node = vec![0.0; n * f];
    for (k, a) in g.atoms.iter().enumerate() {
        let row = &mut node[k * f..(k + 1) * f];
        let mut base = 0;
        let hot = |block: usize, idx: usize, row: &mut [f64], base: &mut usize| {
            debug_assert!(idx < sizes[block]);
            row[*base + idx] = 1.0;
            if block != RING_SIZE_BLOCK {
                *base += sizes[block];
            }
        };
        hot(0, a.chirality as usize, row, &mut base);
        hot(1, capped(a.num_h, 4, "hydrogen count", k), row, &mut base);
        hot(2, capped(a.radical, 4, "radical electron count", k), row, &mut base);
        hot(3, type_idx[k], row, &mut base);
        hot(4, if a.aromatic { 0 } else { 1 }, row, &mut base);
        hot(5, (a.degree as usize).min(5), row, &mut base);
        hot(6, a.hybridization as usize, row, &mut base);
        hot(7, (a.implicit_valence as usize).min(5), row, &mut base);
        let charge = if (-5..=5).contains(&a.formal_charge) { (a.formal_charge + 5) as usize } else { 11 };
        hot(8, charge, row, &mut base);
        for &s in &a.ring_sizes {
            let idx = if (3..=8).contains(&s) { (s - 3) as usize } else { 6 };
            hot(RING_SIZE_BLOCK, idx, row, &mut base);
        }
        base += sizes[RING_SIZE_BLOCK];
        hot(10, (a.num_rings as usize).min(4), row, &mut base);
        debug_assert_eq!(base, f);
    }
    let mut edge = vec![0.0; g.bonds.len() * NUM_BOND_FEATURES];
    for (k, b) in g.bonds.iter().enumerate() {
        edge[k * NUM_BOND_FEATURES + b.kind.index()] = 1.0;
    }
    Ok(FeatureMatrices {
        node: Array::new(vec![n, f], node),
        edge: Array::new(vec![g.bonds.len(), NUM_BOND_FEATURES], edge),
    })
}

// ----- geodesics ------------------------------------------------------------------------------

/// All-pairs hop counts clamped to `max_hops`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeodesicMatrix {
    n: usize,
    hops: Vec<usize>,
    max_hops: usize,
}

impl GeodesicMatrix {
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.hops[i * self.n + j]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn max_hops(&self) -> usize {
        self.max_hops
    }

    /// Row-major flattened hop counts.
    pub fn as_slice(&self) -> &[usize] {
        &self.hops
    }
}

pub fn geodesic_distances(g: &MolecularGraph, max_hops: usize) -> Result<GeodesicMatrix> {
    if max_hops < 1 {
        return Err(Error::InvalidInput("max_hops must be at least 1".into()));
    }
    let n = g.num_atoms();
    let adj = g.adjacency();
    let mut hops = vec![max_hops; n * n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        let mut dist = vec![usize::MAX; n];
        dist[s] = 0;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        for t in 0..n {
            hops[s * n + t] = dist[t].min(max_hops);
        }
    }
    Ok(GeodesicMatrix { n, hops, max_hops })
}
