//! SO(3) machinery on degree-indexed features `[..., (L+1)^2, H]`.
//!
//! The degree-1 basis is Cartesian `(x, y, z)`, so the Wigner-D block of degree 1
//! is the rotation matrix itself.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::autodiff::{Array, CouplingTable, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Rotation;
use crate::nn::Linear;

pub const MAX_DEGREE: usize = 1;

pub fn num_rows(l: usize) -> usize {
    (l + 1) * (l + 1)
}

/// Row range of degree `ell` on the degree axis.
pub fn degree_rows(ell: usize) -> std::ops::Range<usize> {
    ell * ell..(ell + 1) * (ell + 1)
}

fn check_degree(l: usize) -> Result<()> {
    if l > MAX_DEGREE {
        Err(Error::UnsupportedDegree(l, MAX_DEGREE))
    } else {
        Ok(())
    }
}

/// Spherical harmonics of a unit vector up to degree `l`: `[1, x, y, z]` at `l = 1`.
pub fn spherical_harmonics(r_hat: [f64; 3], l: usize) -> Result<Vec<f64>> {
    check_degree(l)?;
    let norm = r_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidInput(format!("spherical harmonics need a unit vector, got norm {norm}")));
    }
    let mut y = vec![1.0];
    if l >= 1 {
        y.extend_from_slice(&r_hat);
    }
    Ok(y)
}

/// Block-diagonal `(L+1)^2 x (L+1)^2` representation matrix of `r`.
pub fn wigner_d(r: &Rotation, l: usize) -> Result<DMatrix<f64>> {
    check_degree(l)?;
    let n = num_rows(l);
    let mut d = DMatrix::zeros(n, n);
    d[(0, 0)] = 1.0;
    if l >= 1 {
        for a in 0..3 {
            for b in 0..3 {
                d[(1 + a, 1 + b)] = r[(a, b)];
            }
        }
    }
    Ok(d)
}

/// Applies `D(R)` along the degree axis of an array shaped `[..., (L+1)^2, H]`.
pub fn rotate_degree_axis(x: &Array, r: &Rotation, l: usize) -> Result<Array> {
    let d = wigner_d(r, l)?;
    let shape = x.shape();
    let rows = num_rows(l);
    if shape.len() < 2 || shape[shape.len() - 2] != rows {
        return Err(Error::ShapeMismatch { expected: vec![rows, 0], found: shape.to_vec() });
    }
    let h = shape[shape.len() - 1];
    let lead = x.len() / (rows * h);
    let src = x.data();
    let mut out = vec![0.0; x.len()];
    for t in 0..lead {
        let base = t * rows * h;
        for i in 0..rows {
            for j in 0..rows {
                let c = d[(i, j)];
                if c == 0.0 {
                    continue;
                }
                for k in 0..h {
                    out[base + i * h + k] += c * src[base + j * h + k];
                }
            }
        }
    }
    Ok(Array::new(shape.to_vec(), out))
}

/// Coupling table for the channel-wise Clebsch-Gordan product up to degree `l`.
///
/// Paths at `l = 1`: `0x0->0`, `1x1->0` (dot, `1/sqrt 3`), `0x1->1`, `1x0->1`,
/// `1x1->1` (cross, `1/sqrt 2`).
pub fn cg_table(l: usize) -> Result<CouplingTable> {
    check_degree(l)?;
    let n = num_rows(l);
    let mut entries = vec![(0, 0, 0, 1.0)];
    if l >= 1 {
        let dot = 1.0 / 3f64.sqrt();
        let cross = 1.0 / 2f64.sqrt();
        for k in 1..4 {
            entries.push((k, k, 0, dot));
            entries.push((0, k, k, 1.0));
            entries.push((k, 0, k, 1.0));
        }
        // (a x b)_c = eps_abc a_a b_b
        for (a, b, c) in [(1, 2, 3), (2, 3, 1), (3, 1, 2)] {
            entries.push((a, b, c, cross));
            entries.push((b, a, c, -cross));
        }
    }
    Ok(CouplingTable { rows_in: n, rows_out: n, entries })
}

/// A coupling table with one coefficient perturbed; equivariance must then fail.
pub fn perturbed_cg_table(l: usize, delta: f64) -> Result<CouplingTable> {
    let mut t = cg_table(l)?;
    if let Some(e) = t.entries.iter_mut().find(|e| e.0 == 1 && e.1 == 2) {
        e.3 += delta;
    } else {
        t.entries[0].3 += delta;
    }
    Ok(t)
}

pub fn cg_contraction(tape: &mut Tape, a: Var, b: Var, table: &Arc<CouplingTable>) -> Var {
    tape.coupling(a, b, Arc::clone(table))
}

/// Gaussian radial basis with centers uniform on `[0, r_max]` and width equal to the spacing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialBasis {
    pub num: usize,
    pub r_max: f64,
}

impl Default for RadialBasis {
    fn default() -> Self {
        RadialBasis { num: 32, r_max: 10.0 }
    }
}

impl RadialBasis {
    pub fn validate(&self) -> Result<()> {
        if self.num >= 1 && self.r_max > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("radial basis needs num >= 1 and r_max > 0".into()))
        }
    }

    fn width(&self) -> f64 {
        if self.num > 1 {
            self.r_max / (self.num - 1) as f64
        } else {
            self.r_max
        }
    }

    pub fn expand(&self, r: f64) -> Vec<f64> {
        let w = self.width();
        (0..self.num)
            .map(|k| {
                let mu = k as f64 * w;
                let t = (r - mu) / w;
                (-0.5 * t * t).exp()
            })
            .collect()
    }
}

/// Per-degree radial filters `phi_l(r)` repeated over each degree's rows.
#[derive(Clone, Debug)]
pub struct RadialFilter {
    pub basis: RadialBasis,
    pub linear: Linear,
    pub l: usize,
    pub h: usize,
}

impl RadialFilter {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, basis: RadialBasis, l: usize, h: usize, rng: &mut R) -> Self {
        let linear = Linear::new(store, name, basis.num, (l + 1) * h, true, rng);
        RadialFilter { basis, linear, l, h }
    }

    /// `rbf` is `[..., num]` basis values; output `[..., (L+1)^2, H]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, rbf: Var) -> Var {
        let phi = self.linear.forward(tape, store, rbf);
        let mut lead = tape.shape(phi).to_vec();
        lead.pop();
        let mut shape = lead.clone();
        shape.extend([self.l + 1, self.h]);
        let phi = tape.reshape(phi, &shape);
        expand_per_degree(tape, phi, self.l)
    }
}

/// Repeats `[..., L+1, H]` per-degree rows to `[..., (L+1)^2, H]`.
pub fn expand_per_degree(tape: &mut Tape, x: Var, l: usize) -> Var {
    let shape = tape.shape(x).to_vec();
    let ax = shape.len() - 2;
    assert_eq!(shape[ax], l + 1);
    let parts: Vec<Var> = (0..=l)
        .map(|ell| {
            let s = tape.slice(x, ax, ell, ell + 1);
            let mut target = shape.clone();
            target[ax] = 2 * ell + 1;
            tape.broadcast_to(s, &target)
        })
        .collect();
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, ax)
    }
}

pub const EQUIV_LN_EPS: f64 = 1e-6;

/// Degree 0: layer norm over channels. Degree > 0: division by the root mean
/// square over channels of the per-channel vector norms.
pub fn equiv_layer_norm(tape: &mut Tape, h: Var, l: usize) -> Var {
    let shape = tape.shape(h).to_vec();
    let ax = shape.len() - 2;
    let h0 = tape.slice(h, ax, 0, 1);
    let n0 = tape.layer_norm(h0, EQUIV_LN_EPS);
    let mut parts = vec![n0];
    for ell in 1..=l {
        let r = degree_rows(ell);
        let hl = tape.slice(h, ax, r.start, r.end);
        let sq = tape.square(hl);
        let norms = tape.sum_axis(sq, ax);
        let ms = tape.mean_axis(norms, ax + 1);
        let ms = tape.add_scalar(ms, EQUIV_LN_EPS);
        let denom = tape.sqrt(ms);
        parts.push(tape.div(hl, denom));
    }
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, ax)
    }
}

/// Degree 0 through GELU; degree > 0 scaled channel-wise by GELU of the degree-0 channels.
pub fn gated_nonlinearity(tape: &mut Tape, h: Var, l: usize) -> Var {
    let shape = tape.shape(h).to_vec();
    let ax = shape.len() - 2;
    let h0 = tape.slice(h, ax, 0, 1);
    let g = tape.gelu(h0);
    if l == 0 {
        return g;
    }
    let r = degree_rows(1).start..num_rows(l);
    let hl = tape.slice(h, ax, r.start, r.end);
    let gated = tape.mul(hl, g);
    tape.concat(&[g, gated], ax)
}

/// Independent `H_in -> H_out` maps per degree; only degree 0 carries a bias.
#[derive(Clone, Debug)]
pub struct DegreeLinear {
    pub layers: Vec<Linear>,
}

impl DegreeLinear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, l: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let layers = (0..=l)
            .map(|ell| Linear::new(store, &format!("{name}.l{ell}"), fan_in, fan_out, ell == 0, rng))
            .collect();
        DegreeLinear { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Var {
        let shape = tape.shape(h).to_vec();
        let ax = shape.len() - 2;
        let parts: Vec<Var> = self
            .layers
            .iter()
            .enumerate()
            .map(|(ell, lin)| {
                let r = degree_rows(ell);
                let s = tape.slice(h, ax, r.start, r.end);
                lin.forward(tape, store, s)
            })
            .collect();
        if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts, ax)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_rotation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect())
    }

    #[test]
    fn harmonics_convention() {
        assert_eq!(spherical_harmonics([0.0, 0.0, 1.0], 1).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
        assert!(spherical_harmonics([0.0, 0.0, 2.0], 1).is_err());
        assert!(matches!(spherical_harmonics([1.0, 0.0, 0.0], 2), Err(Error::UnsupportedDegree(2, 1))));
    }

    #[test]
    fn wigner_homomorphism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let id = wigner_d(&Rotation::identity(), 1).unwrap();
        assert_eq!(id, DMatrix::identity(4, 4));
        for _ in 0..20 {
            let (a, b) = (random_rotation(&mut rng), random_rotation(&mut rng));
            let lhs = wigner_d(&(a * b), 1).unwrap();
            let rhs = wigner_d(&a, 1).unwrap() * wigner_d(&b, 1).unwrap();
            assert!((lhs - rhs).abs().max() < 1e-10);
            let d = wigner_d(&a, 1).unwrap();
            assert!((d.transpose() * &d - DMatrix::identity(4, 4)).abs().max() < 1e-12);
        }
    }

    #[test]
    fn scalar_times_vector_path() {
        let table = Arc::new(cg_table(1).unwrap());
        let mut tape = Tape::new();
        let a = tape.constant(Array::new(vec![4, 1], vec![2.0, 0.0, 0.0, 0.0]));
        let b = tape.constant(Array::new(vec![4, 1], vec![0.0, 1.0, -1.0, 3.0]));
        let c = cg_contraction(&mut tape, a, b, &table);
        assert_eq!(tape.value(c).data(), &[0.0, 2.0, -2.0, 6.0]);
        // orthogonal unit vectors: dot path vanishes
        let x = tape.constant(Array::new(vec![4, 1], vec![0.0, 1.0, 0.0, 0.0]));
        let y = tape.constant(Array::new(vec![4, 1], vec![0.0, 0.0, 1.0, 0.0]));
        let xy = cg_contraction(&mut tape, x, y, &table);
        assert_eq!(tape.value(xy).data()[0], 0.0);
        assert!((tape.value(xy).data()[3] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cg_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table = Arc::new(cg_table(1).unwrap());
        for _ in 0..20 {
            let r = random_rotation(&mut rng);
            let (a, b) = (randn(&[3, 4, 5], &mut rng), randn(&[3, 4, 5], &mut rng));
            let mut tape = Tape::new();
            let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let c = cg_contraction(&mut tape, va, vb, &table);
            let expected = rotate_degree_axis(tape.value(c), &r, 1).unwrap();
            let ra = tape.constant(rotate_degree_axis(&a, &r, 1).unwrap());
            let rb = tape.constant(rotate_degree_axis(&b, &r, 1).unwrap());
            let rc = cg_contraction(&mut tape, ra, rb, &table);
            assert!(tape.value(rc).max_abs_diff(&expected) < 1e-10);
        }
    }

    #[test]
    fn radial_filter_rows_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let f = RadialFilter::new(&mut store, "rf", RadialBasis::default(), 1, 6, &mut rng);
        let mut tape = Tape::new();
        let rbf: Vec<f64> = [0.0, 10.0, 2.5].iter().flat_map(|&r| RadialBasis::default().expand(r)).collect();
        let rbf = tape.constant(Array::new(vec![3, 32], rbf));
        let phi = f.forward(&mut tape, &store, rbf);
        let v = tape.value(phi);
        assert_eq!(v.shape(), &[3, 4, 6]);
        assert!(v.all_finite());
        for p in 0..3 {
            for c in 0..6 {
                assert_eq!(v.get(&[p, 1, c]), v.get(&[p, 2, c]));
                assert_eq!(v.get(&[p, 1, c]), v.get(&[p, 3, c]));
            }
        }
    }

    #[test]
    fn layer_norm_and_gate_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = randn(&[2, 4, 8], &mut rng);
        for n in 0..2 {
            for r in 1..4 {
                for c in 0..8 {
                    x.set(&[n, r, c], 0.0);
                }
            }
        }
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = equiv_layer_norm(&mut tape, v, 1);
        let out = tape.value(y).clone();
        assert!(out.all_finite());
        for n in 0..2 {
            let row: Vec<f64> = (0..8).map(|c| out.get(&[n, 0, c])).collect();
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
            assert!((1..4).all(|r| (0..8).all(|c| out.get(&[n, r, c]) == 0.0)));
        }
        let z = tape.constant(Array::new(vec![1, 4, 2], vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = gated_nonlinearity(&mut tape, z, 1);
        assert!(tape.value(g).data().iter().all(|&v| v == 0.0));
        let s = tape.constant(Array::new(vec![1, 1, 2], vec![0.5, -1.0]));
        let gs = gated_nonlinearity(&mut tape, s, 0);
        assert_eq!(tape.value(gs).data(), &[crate::autodiff::gelu(0.5), crate::autodiff::gelu(-1.0)]);
    }
}
