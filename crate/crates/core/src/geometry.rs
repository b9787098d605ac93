//! Euclidean utilities on point clouds: centering, Haar rotations, Kabsch
//! alignment, RMSD, oriented volumes and chirality correction.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{canonical_sum, Array};
use crate::error::{Error, Result};
use crate::molgraph::{ChiralCenter, MolecularGraph};

pub type Rotation = Matrix3<f64>;

/// An `N x 3` coordinate set in angstrom.
#[derive(Clone, Debug, PartialEq)]
pub struct Conformer {
    coords: Vec<[f64; 3]>,
}

impl Conformer {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidInput("conformer needs at least one atom".into()));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conformer coordinates".into()));
        }
        Ok(Conformer { coords })
    }

    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        Conformer::new(points.to_vec())
    }

    /// From an `[N, 3]` array.
    pub fn from_array(a: &Array) -> Result<Self> {
        if a.ndim() != 2 || a.shape()[1] != 3 {
            return Err(Error::ShapeMismatch { expected: vec![a.shape().first().copied().unwrap_or(0), 3], found: a.shape().to_vec() });
        }
        Conformer::new(a.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn to_array(&self) -> Array {
        Array::new(vec![self.len(), 3], self.coords.iter().flatten().copied().collect())
    }

    pub fn to_points(&self) -> Vec<[f64; 3]> {
        self.coords.clone()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.coords[i])
    }

    /// Per-axis mean, summed order-independently.
    pub fn centroid(&self) -> [f64; 3] {
        centroid(&self.coords)
    }

    pub fn rotated(&self, r: &Rotation) -> Conformer {
        Conformer { coords: self.coords.iter().map(|p| (r * Vector3::from(*p)).into()).collect() }
    }

    pub fn translated(&self, t: [f64; 3]) -> Conformer {
        Conformer { coords: self.coords.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect() }
    }

    /// Atom `k` of the result is atom `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Conformer {
        Conformer { coords: perm.iter().map(|&p| self.coords[p]).collect() }
    }

    pub fn reflected_z(&self) -> Conformer {
        Conformer { coords: self.coords.iter().map(|p| [p[0], p[1], -p[2]]).collect() }
    }
}

pub fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let n = points.len() as f64;
    let mut out = [0.0; 3];
    let mut lane = Vec::with_capacity(points.len());
    for (a, o) in out.iter_mut().enumerate() {
        lane.clear();
        lane.extend(points.iter().map(|p| p[a]));
        *o = canonical_sum(&mut lane) / n;
    }
    out
}

pub fn center(x: &Conformer) -> Conformer {
    let c = x.centroid();
    x.translated([-c[0], -c[1], -c[2]])
}

/// Centers an `[N, 3]` array in place.
pub fn center_array(a: &mut Array) {
    let pts: Vec<[f64; 3]> = a.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let c = centroid(&pts);
    for row in a.data_mut().chunks_mut(3) {
        for k in 0..3 {
            row[k] -= c[k];
        }
    }
}

/// Haar-uniform rotation from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
            return uq.to_rotation_matrix().into_inner();
        }
    }
}

/// Rotation by `angle` radians about `axis`.
pub fn axis_angle(axis: [f64; 3], angle: f64) -> Rotation {
    let ax = nalgebra::Unit::new_normalize(Vector3::from(axis));
    nalgebra::Rotation3::from_axis_angle(&ax, angle).into_inner()
}

/// Optimal proper rotation `R` minimizing `||R A - B||` for centered row sets.
fn kabsch_rotation(a: &[[f64; 3]], b: &[[f64; 3]]) -> Rotation {
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        h += Vector3::from(*q) * Vector3::from(*p).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * vt).determinant().signum();
    let d = if d == 0.0 { 1.0 } else { d };
    // singular values come sorted descending, so the last column is the smallest
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    u * s * vt
}

/// Centers both clouds and rotates `a` onto `b`.
///
/// Returns the rotation and the centered, rotated copy of `a`.
pub fn kabsch_align(a: &Conformer, b: &Conformer) -> Result<(Rotation, Conformer)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: vec![b.len(), 3], found: vec![a.len(), 3] });
    }
    let (ca, cb) = (center(a), center(b));
    let r = kabsch_rotation(&ca.coords, &cb.coords);
    Ok((r, ca.rotated(&r)))
}

fn raw_rmsd(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum();
    (s / a.len() as f64).sqrt()
}

/// Root-mean-square per-atom distance, optionally after Kabsch alignment.
pub fn rmsd(a: &Conformer, b: &Conformer, align: bool) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: vec![b.len(), 3], found: vec![a.len(), 3] });
    }
    if !align {
        return Ok(raw_rmsd(&a.coords, &b.coords));
    }
    let (_, aligned) = kabsch_align(a, b)?;
    Ok(raw_rmsd(&aligned.coords, &center(b).coords))
}

/// Signed volume `(1/6) (p1 - p4) . ((p2 - p4) x (p3 - p4))`.
pub fn oriented_volume(p1: [f64; 3], p2: [f64; 3], p3: [f64; 3], p4: [f64; 3]) -> f64 {
    let v = |p: [f64; 3]| Vector3::from(p) - Vector3::from(p4);
    v(p1).dot(&v(p2).cross(&v(p3))) / 6.0
}

fn center_volume(x: &Conformer, c: &ChiralCenter) -> Result<f64> {
    let n = x.len();
    if let Some(&bad) = c.neighbors.iter().find(|&&k| k >= n) {
        return Err(Error::InvalidInput(format!("chirality neighbor {bad} out of range for {n} atoms")));
    }
    let p = |k: usize| x.coords[c.neighbors[k]];
    Ok(oriented_volume(p(0), p(1), p(2), p(3)))
}

/// Number of centers whose oriented-volume sign disagrees with their parity.
pub fn chirality_disagreements(x: &Conformer, centers: &[ChiralCenter]) -> Result<usize> {
    let mut bad = 0;
    for c in centers {
        let v = center_volume(x, c)?;
        if v * f64::from(c.parity) < 0.0 {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Reflects through the xy-plane when most centers disagree with their parity.
pub fn chirality_correct(x: &Conformer, centers: &[ChiralCenter]) -> Result<Conformer> {
    let bad = chirality_disagreements(x, centers)?;
    if 2 * bad > centers.len() {
        Ok(x.reflected_z())
    } else {
        Ok(x.clone())
    }
}

// ----- symmetry-aware RMSD --------------------------------------------------------------------

pub const MAX_SYMMETRY_HEAVY_ATOMS: usize = 12;
pub const MAX_AUTOMORPHISMS: usize = 10_000;

fn atom_key(g: &MolecularGraph, i: usize) -> (u32, bool, i32, usize) {
    let a = &g.atoms[i];
    let deg = g.bonds.iter().filter(|b| b.i == i || b.j == i).count();
    (a.z, a.aromatic, a.formal_charge, deg)
}

/// Graph automorphisms as permutations `p` with `p[i]` the image of atom `i`.
///
/// Atoms are matched on element, aromaticity, charge, degree and bond types.
/// Enumeration stops after `cap` results; the identity is always first.
pub fn automorphisms(g: &MolecularGraph, cap: usize) -> Vec<Vec<usize>> {
    let n = g.num_atoms();
    let keys: Vec<_> = (0..n).map(|i| atom_key(g, i)).collect();
    let mut bond_kind = vec![None; n * n];
    for b in &g.bonds {
        bond_kind[b.i * n + b.j] = Some(b.kind);
        bond_kind[b.j * n + b.i] = Some(b.kind);
    }
    let mut out = Vec::new();
    let mut map = vec![usize::MAX; n];
    let mut used = vec![false; n];
    fn search(
        i: usize,
        n: usize,
        keys: &[(u32, bool, i32, usize)],
        bond_kind: &[Option<crate::molgraph::BondType>],
        map: &mut Vec<usize>,
        used: &mut Vec<bool>,
        out: &mut Vec<Vec<usize>>,
        cap: usize,
    ) {
        if out.len() >= cap {
            return;
        }
        if i == n {
            out.push(map.clone());
            return;
        }
        // try the identity image first so the identity is enumerated first
        let order = std::iter::once(i).chain((0..n).filter(|&c| c != i));
        for c in order {
            if used[c] || keys[c] != keys[i] {
                continue;
            }
            let ok = (0..i).all(|k| bond_kind[i * n + k] == bond_kind[c * n + map[k]]);
            if !ok {
                continue;
            }
            map[i] = c;
            used[c] = true;
            search(i + 1, n, keys, bond_kind, map, used, out, cap);
            used[c] = false;
            map[i] = usize::MAX;
        }
    }
    search(0, n, &keys, &bond_kind, &mut map, &mut used, &mut out, cap);
    out
}

/// Aligned RMSD minimized over graph automorphisms when the molecule has at most
/// [`MAX_SYMMETRY_HEAVY_ATOMS`] heavy atoms; plain aligned RMSD otherwise.
pub fn symmetric_rmsd(g: &MolecularGraph, a: &Conformer, b: &Conformer) -> Result<f64> {
    let autos = symmetry_permutations(g);
    min_rmsd_over(&autos, a, b)
}

/// Permutations used by [`symmetric_rmsd`] for `g`.
pub fn symmetry_permutations(g: &MolecularGraph) -> Vec<Vec<usize>> {
    if g.num_heavy_atoms() <= MAX_SYMMETRY_HEAVY_ATOMS {
        automorphisms(g, MAX_AUTOMORPHISMS)
    } else {
        vec![(0..g.num_atoms()).collect()]
    }
}

pub fn min_rmsd_over(perms: &[Vec<usize>], a: &Conformer, b: &Conformer) -> Result<f64> {
    let mut best = rmsd(a, b, true)?;
    for p in perms {
        best = best.min(rmsd(&a.permuted(p), b, true)?);
    }
    Ok(best)
}
