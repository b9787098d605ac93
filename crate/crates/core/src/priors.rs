//! Base distributions for the flow: centered isotropic Gaussian and the harmonic
//! (graph-Laplacian-coupled) Gaussian.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center, Conformer};
use crate::molgraph::MolecularGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Gaussian,
    Harmonic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub scale: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec { kind: PriorKind::Harmonic, scale: 1.0 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale > 0.0 && self.scale.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("prior scale must be positive, got {}", self.scale)))
        }
    }
}

/// I.i.d. `N(0, scale^2)` coordinates, then centered.
pub fn sample_gaussian_prior<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Result<Conformer> {
    if n == 0 {
        return Err(Error::InvalidInput("prior needs at least one atom".into()));
    }
    let pts = (0..n)
        .map(|_| std::array::from_fn(|_| scale * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Ok(center(&Conformer::new(pts)?))
}

/// `L = D - A` over the unweighted bond graph.
pub fn graph_laplacian(g: &MolecularGraph) -> DMatrix<f64> {
    let n = g.num_atoms();
    let mut l = DMatrix::zeros(n, n);
    for b in &g.bonds {
        l[(b.i, b.j)] -= 1.0;
        l[(b.j, b.i)] -= 1.0;
        l[(b.i, b.i)] += 1.0;
        l[(b.j, b.j)] += 1.0;
    }
    l
}

/// Eigendecomposition of a graph Laplacian with the translation mode removed.
#[derive(Clone, Debug)]
pub struct HarmonicPrior {
    n: usize,
    /// `(lambda_k, v_k)` for the nonzero modes, ascending in `lambda`.
    modes: Vec<(f64, Vec<f64>)>,
}

impl HarmonicPrior {
    pub fn new(g: &MolecularGraph) -> Result<Self> {
        let n = g.num_atoms();
        let comps = g.num_components();
        if comps > 1 {
            return Err(Error::InvalidGraph(format!(
                "harmonic prior needs a connected bond graph, found {comps} components; sample each component separately"
            )));
        }
        let eig = graph_laplacian(g).symmetric_eigen();
        let mut modes: Vec<(f64, Vec<f64>)> = eig
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(k, &lam)| (lam, eig.eigenvectors.column(k).iter().copied().collect()))
            .collect();
        modes.sort_by(|a, b| a.0.total_cmp(&b.0));
        // drop the single zero mode (the constant vector)
        modes.remove(0);
        Ok(HarmonicPrior { n, modes })
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.0).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Result<Conformer> {
        let mut pts = vec![[0.0; 3]; self.n];
        for axis in 0..3 {
            for (lam, v) in &self.modes {
                let c = scale / lam.sqrt() * rng.sample::<f64, _>(StandardNormal);
                for (p, vi) in pts.iter_mut().zip(v) {
                    p[axis] += c * vi;
                }
            }
        }
        // the modes are orthogonal to the constant vector; centering removes round-off
        Ok(center(&Conformer::new(pts)?))
    }
}

pub fn sample_harmonic_prior<R: Rng + ?Sized>(g: &MolecularGraph, scale: f64, rng: &mut R) -> Result<Conformer> {
    HarmonicPrior::new(g)?.sample(scale, rng)
}

/// Sampler for a fixed graph with the eigendecomposition cached.
#[derive(Clone, Debug)]
pub enum PriorSampler {
    Gaussian { n: usize, scale: f64 },
    Harmonic { prior: HarmonicPrior, scale: f64 },
}

impl PriorSampler {
    pub fn new(spec: &PriorSpec, g: &MolecularGraph) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            PriorKind::Gaussian => PriorSampler::Gaussian { n: g.num_atoms(), scale: spec.scale },
            PriorKind::Harmonic if g.num_atoms() == 1 => PriorSampler::Gaussian { n: 1, scale: spec.scale },
            PriorKind::Harmonic => PriorSampler::Harmonic { prior: HarmonicPrior::new(g)?, scale: spec.scale },
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Conformer> {
        match self {
            PriorSampler::Gaussian { n, scale } => sample_gaussian_prior(*n, *scale, rng),
            PriorSampler::Harmonic { prior, scale } => prior.sample(*scale, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{Atom, Bond, BondType};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path(n: usize) -> MolecularGraph {
        let atoms = (0..n).map(|_| Atom::element(6)).collect();
        let bonds = (0..n - 1).map(|i| Bond { i, j: i + 1, kind: BondType::Single }).collect();
        MolecularGraph::new(atoms, bonds, vec![]).unwrap()
    }

    #[test]
    fn laplacian_single_bond() {
        let l = graph_laplacian(&path(2));
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let l3 = graph_laplacian(&path(5));
        for r in 0..5 {
            assert_eq!(l3.row(r).sum(), 0.0);
        }
    }

    #[test]
    fn path3_eigenvalues() {
        let ev = HarmonicPrior::new(&path(3)).unwrap().eigenvalues();
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_atom_gaussian_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = sample_gaussian_prior(1, 2.0, &mut rng).unwrap();
        assert_eq!(x.points(), &[[0.0; 3]]);
    }

    #[test]
    fn seeded_resample_is_identical() {
        let g = path(4);
        let a = sample_harmonic_prior(&g, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_harmonic_prior(&g, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let c = sample_gaussian_prior(4, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let d = sample_gaussian_prior(4, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn disconnected_graph_rejected() {
        let g = MolecularGraph::new(vec![Atom::element(6), Atom::element(6)], vec![], vec![]).unwrap();
        let err = HarmonicPrior::new(&g).unwrap_err();
        assert!(err.to_string().contains("component"));
    }
}
