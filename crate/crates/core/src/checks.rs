//! Executable property suites: symmetry, gradients, initialization, sampler, metrics,
//! chirality and prior statistics. Each suite reports its worst observed violation.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{grad_check_store_with_floor, roundoff_floor, Array, ParamStore, Tape};
use crate::conditioning::{modulation_input, PairMode};
use crate::equivariant::{
    cg_contraction, cg_table, equiv_layer_norm, gated_nonlinearity, num_rows, perturbed_cg_table, rotate_degree_axis,
    RadialFilter,
};
use crate::error::Result;
use crate::flow::{euler_from, loss_for_draw, FnDenoiser, LossDraw, ModelDenoiser};
use crate::geometry::{
    center_array, centroid, chirality_correct, chirality_disagreements, oriented_volume, random_rotation,
    rmsd, Conformer, Rotation,
};
use crate::metrics::{amr_cov, coverage_curve, rmsd_matrix, CoverageScores, RmsdMatrix};
use crate::model::{attention_so3, pair_displacements, pe3, rpe, Block, Model, ModelConfig, PairGeometry, Variant};
use crate::molgraph::{geodesic_distances, Atom, Bond, BondType, ChiralCenter, MolecularGraph};
use crate::priors::{HarmonicPrior, PriorSampler, PriorSpec};

/// One measured property.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub violation: f64,
    pub tolerance: f64,
    /// `violation < tolerance` instead of `<=`.
    pub strict: bool,
    pub cases: usize,
}

impl Check {
    fn new(name: impl Into<String>, violation: f64, tolerance: f64, cases: usize) -> Self {
        Check { name: name.into(), violation, tolerance, strict: false, cases }
    }

    fn strict(mut self) -> Self {
        self.strict = true;
        self
    }

    pub fn passed(&self) -> bool {
        if self.violation.is_nan() {
            return false;
        }
        if self.strict {
            self.violation < self.tolerance
        } else {
            self.violation <= self.tolerance
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn max_violation(&self) -> f64 {
        self.checks.iter().map(|c| c.violation).fold(0.0, f64::max)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        writeln!(f, "[{status}] {} (max violation {:.3e})", self.name, self.max_violation())?;
        for c in &self.checks {
            let mark = if c.passed() { "ok  " } else { "FAIL" };
            let op = if c.strict { "<" } else { "<=" };
            writeln!(f, "    {mark} {:<44} {:.3e} {op} {:.3e}  ({} cases)", c.name, c.violation, c.tolerance, c.cases)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    /// Adds this amount to one Clebsch-Gordan coefficient (negative control).
    pub cg_perturbation: Option<f64>,
    pub rotations: usize,
    pub graphs: usize,
    pub tetrahedra: usize,
    pub prior_samples: usize,
    pub metric_cases: usize,
}

impl CheckOptions {
    pub fn new(seed: u64) -> Self {
        CheckOptions {
            seed,
            cg_perturbation: None,
            rotations: 100,
            graphs: 50,
            tetrahedra: 1000,
            prior_samples: 10_000,
            metric_cases: 200,
        }
    }
}

pub const EQUIVARIANCE_TOL: f64 = 1e-8;
pub const ATTENTION_INVARIANCE_TOL: f64 = 1e-10;
pub const RIGID_MOTION_TOL: f64 = 1e-9;
pub const FLOAT_TRANSLATION_TOL: f64 = 1e-12;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const GRADIENT_EPS: f64 = 1e-3;
pub const SAMPLER_TARGET_TOL: f64 = 1e-12;
pub const SAMPLER_CENTER_TOL: f64 = 1e-10;

// ----- shared helpers --------------------------------------------------------------------------

fn gaussian_array<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Centered random coordinates `[n, 3]` with every pair at least `min_dist` apart.
pub fn random_coords<R: Rng + ?Sized>(rng: &mut R, n: usize, spread: f64) -> Array {
    loop {
        let mut a = gaussian_array(rng, &[n, 3], spread);
        center_array(&mut a);
        let d = pair_displacements(&a);
        let ok = (0..n).all(|i| {
            (0..n).all(|j| {
                i == j || {
                    let o = (i * n + j) * 3;
                    d.data()[o..o + 3].iter().map(|v| v * v).sum::<f64>() > 0.25 * spread * spread
                }
            })
        });
        if ok {
            return a;
        }
    }
}

/// A connected graph on `n` atoms: a random tree plus a few extra bonds.
pub fn random_graph<R: Rng + ?Sized>(rng: &mut R, n: usize) -> MolecularGraph {
    const ELEMENTS: [u32; 5] = [1, 6, 7, 8, 9];
    const KINDS: [BondType; 4] = [BondType::Single, BondType::Double, BondType::Triple, BondType::Aromatic];
    let mut bonds: Vec<Bond> = Vec::new();
    let has = |i: usize, j: usize, bonds: &Vec<Bond>| bonds.iter().any(|b| (b.i, b.j) == (i, j) || (b.j, b.i) == (i, j));
    for k in 1..n {
        let p = rng.random_range(0..k);
        bonds.push(Bond { i: p, j: k, kind: KINDS[rng.random_range(0..4)] });
    }
    let extra = if n > 3 { rng.random_range(0..=n / 3) } else { 0 };
    for _ in 0..extra {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        if i != j && !has(i, j, &bonds) {
            bonds.push(Bond { i, j, kind: KINDS[rng.random_range(0..4)] });
        }
    }
    let mut degree = vec![0u32; n];
    for b in &bonds {
        degree[b.i] += 1;
        degree[b.j] += 1;
    }
    let atoms = (0..n)
        .map(|k| {
            let mut a = Atom::element(ELEMENTS[rng.random_range(0..ELEMENTS.len())]);
            a.degree = degree[k];
            a.num_h = rng.random_range(0..3);
            a.aromatic = rng.random_bool(0.2);
            a
        })
        .collect();
    MolecularGraph::new(atoms, bonds, vec![]).expect("generated graph is valid")
}

/// Adds Gaussian noise to every parameter so that no branch is trivially zero.
pub fn perturb_params<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn rotate_rows(a: &Array, r: &Rotation) -> Array {
    Conformer::from_array(a).expect("[n, 3] array").rotated(r).to_array()
}

fn tiny_model(variant: Variant, pair_mode: PairMode, seed: u64, rng: &mut ChaCha8Rng) -> Result<Model> {
    let mut config = ModelConfig::tiny(variant);
    config.pair_mode = pair_mode;
    let mut model = Model::new(config, seed)?;
    perturb_params(&mut model.params, rng, 0.3);
    Ok(model)
}

fn path_graph(n: usize) -> MolecularGraph {
    let atoms = (0..n).map(|_| Atom::element(6)).collect();
    let bonds = (1..n).map(|k| Bond { i: k - 1, j: k, kind: BondType::Single }).collect();
    MolecularGraph::new(atoms, bonds, vec![]).expect("path graph is valid")
}

// ----- suites ----------------------------------------------------------------------------------

/// `O(R x) = D(R) O(x)` for every equivariant building block and the full PE3 model.
pub fn equivariance_suite(opts: &CheckOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let l = 1;
    let rows = num_rows(l);
    let table = std::sync::Arc::new(match opts.cg_perturbation {
        Some(d) => perturbed_cg_table(l, d)?,
        None => cg_table(l)?,
    });
    let n = 5;
    let h = 4;
    let graph = random_graph(&mut rng, n);
    let mut model = tiny_model(Variant::Pe3, PairMode::Geodesic, opts.seed, &mut rng)?;
    model.set_coupling_table((*table).clone());
    let hid = model.config.hidden();
    let inputs = model.prepare(&graph)?;

    let mut store = ParamStore::new();
    let filter = RadialFilter::new(&mut store, "filter", model.config.radial_basis(), l, h, &mut rng);
    let eq = match &model.net.blocks[0] {
        Block::Equiv(b) => b.clone(),
        Block::Flat(_) => unreachable!("PE3 model has equivariant blocks"),
    };

    let mut worst = HashMap::<&'static str, f64>::new();
    let mut note = |k: &'static str, v: f64| {
        let e = worst.entry(k).or_insert(0.0);
        *e = e.max(if v.is_nan() { f64::INFINITY } else { v });
    };

    let x = random_coords(&mut rng, n, 1.5);
    let pe_of = |x: &Array| -> Result<Array> {
        let geo = PairGeometry::new(x, &filter.basis, l)?;
        let mut t = Tape::new();
        let p = pe3(&mut t, &store, &filter, &geo);
        Ok(t.value(p).clone())
    };
    let pe_x = pe_of(&x)?;
    let a = gaussian_array(&mut rng, &[6, rows, h], 1.0);
    let b = gaussian_array(&mut rng, &[6, rows, h], 1.0);
    let cg = |a: &Array, b: &Array| {
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let o = cg_contraction(&mut t, av, bv, &table);
        t.value(o).clone()
    };
    let cg_ab = cg(&a, &b);
    let unary = |a: &Array, f: fn(&mut Tape, crate::autodiff::Var, usize) -> crate::autodiff::Var| {
        let mut t = Tape::new();
        let v = t.constant(a.clone());
        let o = f(&mut t, v, l);
        t.value(o).clone()
    };
    let tokens = gaussian_array(&mut rng, &[n, rows, hid], 1.0);
    let silu = gaussian_array(&mut rng, &[n, hid], 1.0);
    let ln_a = unary(&tokens, equiv_layer_norm);
    let gate_a = unary(&tokens, gated_nonlinearity);

    let attend = |x: &Array, tokens: &Array| -> Result<(Array, Array)> {
        let mut t = Tape::new();
        let bundle = model.conditioning(&mut t, &inputs, 0.3)?;
        let (u, u_hat) = model.pair_injection(&mut t, &bundle, x)?;
        let hv = t.constant(tokens.clone());
        let (o, w) = attention_so3(&mut t, &model.params, &eq.attention, hv, u, u_hat.unwrap(), model.config.heads, &table);
        Ok((t.value(o).clone(), t.value(w).clone()))
    };
    let (att_x, _) = attend(&x, &tokens)?;
    let readout = |tokens: &Array| {
        let mut t = Tape::new();
        let hv = t.constant(tokens.clone());
        let s = t.constant(silu.clone());
        let o = model.net.readout.forward(&mut t, &model.params, hv, s);
        t.value(o).clone()
    };
    let ro = readout(&tokens);
    let full = model.predict(&x, 0.4, &inputs)?;

    for _ in 0..opts.rotations {
        let r = random_rotation(&mut rng);
        let xr = rotate_rows(&x, &r);
        let rot = |a: &Array| rotate_degree_axis(a, &r, l);

        note("pe3", pe_of(&xr)?.max_abs_diff(&rot(&pe_x)?));
        note("cg_contraction", cg(&rot(&a)?, &rot(&b)?).max_abs_diff(&rot(&cg_ab)?));
        let tr = rot(&tokens)?;
        note("equiv_layer_norm", unary(&tr, equiv_layer_norm).max_abs_diff(&rot(&ln_a)?));
        note("gated_nonlinearity", unary(&tr, gated_nonlinearity).max_abs_diff(&rot(&gate_a)?));
        note("attention_so3", attend(&xr, &tr)?.0.max_abs_diff(&rot(&att_x)?));
        note("equivariant readout", readout(&tr).max_abs_diff(&rotate_rows(&ro, &r)));
        note("PE3 model forward", model.predict(&xr, 0.4, &inputs)?.max_abs_diff(&rotate_rows(&full, &r)));
    }
    let order = [
        "pe3",
        "cg_contraction",
        "equiv_layer_norm",
        "gated_nonlinearity",
        "attention_so3",
        "equivariant readout",
        "PE3 model forward",
    ];
    let checks = order.iter().map(|k| Check::new(*k, worst[k], EQUIVARIANCE_TOL, opts.rotations).strict()).collect();
    Ok(SuiteReport { name: "equivariance", checks })
}

/// Translation and rotation invariances of positional paths, attention weights and metrics.
pub fn invariance_suite(opts: &CheckOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x1);
    let n = 6;
    let rpe_model = tiny_model(Variant::Rpe, PairMode::Geodesic, opts.seed, &mut rng)?;
    let mlp = rpe_model.net.rpe.as_ref().unwrap();
    let rpe_of = |x: &Array| {
        let mut t = Tape::new();
        let p = rpe(&mut t, &rpe_model.params, mlp, x);
        t.value(p).clone()
    };
    let cases = opts.rotations;
    let (mut dyadic, mut float) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let grid = |rng: &mut ChaCha8Rng| rng.random_range(-256i32..=256) as f64 / 32.0;
        let x = Array::new(vec![n, 3], (0..3 * n).map(|_| grid(&mut rng)).collect());
        let t = [grid(&mut rng), grid(&mut rng), grid(&mut rng)];
        let xt = Conformer::from_array(&x)?.translated(t).to_array();
        dyadic = dyadic.max(pair_displacements(&xt).max_abs_diff(&pair_displacements(&x)));
        dyadic = dyadic.max(rpe_of(&xt).max_abs_diff(&rpe_of(&x)));
        let x = gaussian_array(&mut rng, &[n, 3], 2.0);
        let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let xt = Conformer::from_array(&x)?.translated(t).to_array();
        float = float.max(rpe_of(&xt).max_abs_diff(&rpe_of(&x)));
    }

    let graph = random_graph(&mut rng, n);
    let model = tiny_model(Variant::Pe3, PairMode::Geodesic, opts.seed, &mut rng)?;
    let inputs = model.prepare(&graph)?;
    let eq = match &model.net.blocks[0] {
        Block::Equiv(b) => b.clone(),
        Block::Flat(_) => unreachable!(),
    };
    let hid = model.config.hidden();
    let tokens = gaussian_array(&mut rng, &[n, num_rows(1), hid], 1.0);
    let weights = |x: &Array, tokens: &Array| -> Result<Array> {
        let mut t = Tape::new();
        let bundle = model.conditioning(&mut t, &inputs, 0.5)?;
        let (u, u_hat) = model.pair_injection(&mut t, &bundle, x)?;
        let hv = t.constant(tokens.clone());
        let (_, w) =
            attention_so3(&mut t, &model.params, &eq.attention, hv, u, u_hat.unwrap(), model.config.heads, &model.coupling);
        Ok(t.value(w).clone())
    };
    let x = random_coords(&mut rng, n, 1.5);
    let w0 = weights(&x, &tokens)?;
    let mut att = 0.0f64;
    for _ in 0..cases {
        let r = random_rotation(&mut rng);
        att = att.max(weights(&rotate_rows(&x, &r), &rotate_degree_axis(&tokens, &r, 1)?)?.max_abs_diff(&w0));
    }

    let mut rigid = 0.0f64;
    let motion = |c: &Conformer, rng: &mut ChaCha8Rng| {
        let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
        c.rotated(&random_rotation(rng)).translated(t)
    };
    let mut metric = 0.0f64;
    for _ in 0..cases {
        let a = Conformer::from_array(&gaussian_array(&mut rng, &[n, 3], 1.5))?;
        let b = Conformer::from_array(&gaussian_array(&mut rng, &[n, 3], 1.5))?;
        let base = rmsd(&a, &b, true)?;
        rigid = rigid.max((rmsd(&motion(&a, &mut rng), &b, true)? - base).abs());
        rigid = rigid.max((rmsd(&a, &motion(&b, &mut rng), true)? - base).abs());

        let gen: Vec<Conformer> =
            (0..4).map(|_| Conformer::from_array(&gaussian_array(&mut rng, &[n, 3], 1.5))).collect::<Result<_>>()?;
        let reference: Vec<Conformer> =
            (0..2).map(|_| Conformer::from_array(&gaussian_array(&mut rng, &[n, 3], 1.5))).collect::<Result<_>>()?;
        let moved: Vec<Conformer> = gen.iter().map(|c| motion(c, &mut rng)).collect();
        let s0 = amr_cov(&rmsd_matrix(&gen, &reference, None, false)?, 1.5)?;
        let s1 = amr_cov(&rmsd_matrix(&moved, &reference, None, false)?, 1.5)?;
        metric = metric.max(score_diff(&s0, &s1));
    }
    Ok(SuiteReport {
        name: "invariance",
        checks: vec![
            Check::new("rPE translation, dyadic coordinates (exact)", dyadic, 0.0, cases),
            Check::new("rPE translation, float coordinates", float, FLOAT_TRANSLATION_TOL, cases).strict(),
            Check::new("attention weights under rotation", att, ATTENTION_INVARIANCE_TOL, cases).strict(),
            Check::new("rmsd under rigid motions", rigid, RIGID_MOTION_TOL, 2 * cases).strict(),
            Check::new("amr/cov under rigid motions", metric, RIGID_MOTION_TOL, cases).strict(),
        ],
    })
}

fn score_diff(a: &CoverageScores, b: &CoverageScores) -> f64 {
    [(a.cov_r - b.cov_r), (a.cov_p - b.cov_p), (a.amr_r - b.amr_r), (a.amr_p - b.amr_p)]
        .iter()
        .map(|d| d.abs())
        .fold(0.0, f64::max)
}

fn row_perm_diff(a: &Array, b: &Array, perm: &[usize]) -> f64 {
    let w = a.len() / a.shape()[0];
    let mut d = 0.0f64;
    for (k, &p) in perm.iter().enumerate() {
        for c in 0..w {
            d = d.max((b.data()[k * w + c] - a.data()[p * w + c]).abs());
        }
    }
    d
}

fn pair_perm_diff(a: &Array, b: &Array, perm: &[usize]) -> f64 {
    let n = perm.len();
    let w = a.len() / (n * n);
    let mut d = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let (src, dst) = ((perm[i] * n + perm[j]) * w, (i * n + j) * w);
            for c in 0..w {
                d = d.max((b.data()[dst + c] - a.data()[src + c]).abs());
            }
        }
    }
    d
}

/// Relabeling atoms permutes every atom-indexed output the same way (compared exactly).
pub fn permutation_suite(opts: &CheckOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x2);
    let mut models = Vec::new();
    for variant in [Variant::Ape, Variant::Rpe, Variant::Pe3] {
        for mode in [PairMode::Geodesic, PairMode::Bond, PairMode::None] {
            models.push(tiny_model(variant, mode, opts.seed, &mut rng)?);
        }
    }
    let (mut geo, mut gnn, mut pair, mut forward) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..opts.graphs {
        let n = rng.random_range(2..=12);
        let g = random_graph(&mut rng, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut gp = g.permuted(&perm);
        gp.bonds.shuffle(&mut rng);
        for b in gp.bonds.iter_mut() {
            if rng.random_bool(0.5) {
                std::mem::swap(&mut b.i, &mut b.j);
            }
        }

        let h0 = geodesic_distances(&g, 32)?;
        let h1 = geodesic_distances(&gp, 32)?;
        for i in 0..n {
            for j in 0..n {
                if h1.get(i, j) != h0.get(perm[i], perm[j]) {
                    geo = f64::INFINITY;
                }
            }
        }

        let x = random_coords(&mut rng, n, 1.5);
        let mut xp = Array::zeros(&[n, 3]);
        for (k, &p) in perm.iter().enumerate() {
            for c in 0..3 {
                xp.set(&[k, c], x.get(&[p, c]));
            }
        }
        for model in &models {
            let (a, b) = (model.prepare(&g)?, model.prepare(&gp)?);
            let mut t = Tape::new();
            let (v0, e0) = model.net.gnn.forward(&mut t, &model.params, &a);
            let (v1, e1) = model.net.gnn.forward(&mut t, &model.params, &b);
            gnn = gnn.max(row_perm_diff(t.value(v0), t.value(v1), &perm));
            let mut inv = vec![0; n];
            for (k, &p) in perm.iter().enumerate() {
                inv[p] = k;
            }
            let rows1: HashMap<(usize, usize), usize> =
                b.edges.iter().enumerate().map(|(r, &(s, d, _))| ((s, d), r)).collect();
            let edge_map: Vec<usize> = a.edges.iter().map(|&(s, d, _)| rows1[&(inv[s], inv[d])]).collect();
            let (ev0, ev1) = (t.value(e0).clone(), t.value(e1).clone());
            let w = ev0.len() / ev0.shape()[0].max(1);
            for (r0, &r1) in edge_map.iter().enumerate() {
                for c in 0..w {
                    gnn = gnn.max((ev0.data()[r0 * w + c] - ev1.data()[r1 * w + c]).abs());
                }
            }
            let h = model.config.hidden();
            let p0 = model.net.pair.forward(&mut t, &model.params, &a, e0, h);
            let p1 = model.net.pair.forward(&mut t, &model.params, &b, e1, h);
            if model.config.pair_mode != PairMode::None {
                pair = pair.max(pair_perm_diff(t.value(p0), t.value(p1), &perm));
            }
            let y0 = model.predict(&x, 0.6, &a)?;
            let y1 = model.predict(&xp, 0.6, &b)?;
            forward = forward.max(row_perm_diff(&y0, &y1, &perm));
        }
    }
    let c = opts.graphs;
    Ok(SuiteReport {
        name: "permutation",
        checks: vec![
            Check::new("geodesic_distances", geo, 0.0, c),
            Check::new("gnn_condition (nodes and edges)", gnn, 0.0, c * models.len()),
            Check::new("pair_conditioning (geodesic, bond)", pair, 0.0, c * 6),
            Check::new("model forward (3 variants x 3 pair modes)", forward, 0.0, c * models.len()),
        ],
    })
}

/// Analytic gradients of the full training loss against central differences.
pub fn gradient_suite(opts: &CheckOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x3);
    let mut checks = Vec::new();
    for (variant, n) in [(Variant::Ape, 2), (Variant::Rpe, 3), (Variant::Pe3, 4)] {
        let model = tiny_model(variant, PairMode::Geodesic, opts.seed, &mut rng)?;
        let g = random_graph(&mut rng, n);
        let inputs = model.prepare(&g)?;
        let x1 = Conformer::from_array(&random_coords(&mut rng, n, 1.2))?;
        let prior = PriorSampler::new(&PriorSpec::default(), &g)?;
        let mut draw = LossDraw::sample(&prior, n, &mut rng)?;
        draw.tau = 0.35;
        let loss = |tape: &mut Tape, store: &ParamStore| {
            let mut m = model.clone();
            m.params = store.clone();
            let den = ModelDenoiser { model: &m, graph: &inputs };
            loss_for_draw(&den, tape, &x1, &draw, 0.05)
        };
        let mut t = Tape::new();
        let l = loss(&mut t, &model.params)?;
        let floor = roundoff_floor(t.value(l).item(), GRADIENT_EPS, GRADIENT_TOL);
        let report = grad_check_store_with_floor(&model.params, GRADIENT_EPS, floor, loss)?;
        let name = format!("{variant:?} training loss ({n} atoms)");
        checks.push(Check::new(name, report.max_rel_error, GRADIENT_TOL, report.checked));
    }
    Ok(SuiteReport { name: "gradient", checks })
}

/// Blocks with zero-initialized modulation return their input tokens bit for bit.
pub fn identity_suite(opts: &CheckOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4);
    let mut checks = Vec::new();
    for variant in [Variant::Ape, Variant::Rpe, Variant::Pe3] {
        let mut worst = 0.0f64;
        let mut cases = 0;
        for preset in [ModelConfig::tiny(variant), ModelConfig::by_name(&preset_name(variant)).unwrap()] {
            let model = Model::new(preset, opts.seed)?;
            let n = 4;
            let g = random_graph(&mut rng, n);
            let inputs = model.prepare(&g)?;
            let x = random_coords(&mut rng, n, 1.5);
            let mut t = Tape::new();
            let bundle = model.conditioning(&mut t, &inputs, 0.7)?;
            let silu = modulation_input(&mut t, &bundle);
            let (u, u_hat) = model.pair_injection(&mut t, &bundle, &x)?;
            let hid = model.config.hidden();
            let shape = match variant {
                Variant::Pe3 => vec![n, num_rows(model.config.token_degree()), hid],
                _ => vec![n, hid],
            };
            let h0 = gaussian_array(&mut rng, &shape, 1.0);
            for block in &model.net.blocks {
                let hv = t.constant(h0.clone());
                let out = match block {
                    Block::Flat(b) => b.forward(&mut t, &model.params, hv, silu, u, model.config.heads),
                    Block::Equiv(b) => {
                        b.forward(&mut t, &model.params, hv, silu, u, u_hat.unwrap(), model.config.heads, &model.coupling)
                    }
                };
                worst = worst.max(t.value(out).max_abs_diff(&h0));
                cases += 1;
            }
        }
        checks.push(Check::new(format!("{variant:?} blocks at init"), worst, 0.0, cases));
    }
    Ok(SuiteReport { name: "identity-at-init", checks })
}

fn preset_name(v: Variant) -> String {
    match v {
        Variant::Ape => "ape-s",
        Variant::Rpe => "rpe-b",
        Variant::Pe3 => "pe3-b",
    }
    .to_string()
}

/// With an oracle prediction, the Euler sampler lands on the target and stays centered.
pub fn sampler_suite(opts: &CheckOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5);
    let (mut target, mut centered) = (0.0f64, 0.0f64);
    let mut cases = 0;
    for _ in 0..10 {
        let n = rng.random_range(2..10);
        let x1 = random_coords(&mut rng, n, 1.5);
        let oracle = x1.clone();
        let den = FnDenoiser(move |_: &Array, _: f64| oracle.clone());
        for steps in [1, 5, 50] {
            let mut x0 = gaussian_array(&mut rng, &[n, 3], 1.0);
            center_array(&mut x0);
            let states = euler_from(&den, x0, steps)?;
            target = target.max(states.last().unwrap().max_abs_diff(&x1));
            for s in &states {
                let pts: Vec<[f64; 3]> = s.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                centered = centered.max(centroid(&pts).iter().map(|v| v.abs()).fold(0.0, f64::max));
            }
            cases += 1;
        }
    }
    Ok(SuiteReport {
        name: "sampler",
        checks: vec![
            Check::new("final state vs target (steps 1, 5, 50)", target, SAMPLER_TARGET_TOL, cases).strict(),
            Check::new("center of mass of every state", centered, SAMPLER_CENTER_TOL, cases).strict(),
        ],
    })
}

/// Independent re-evaluation of the coverage and AMR formulas.
pub fn brute_force_scores(m: &[Vec<f64>], delta: f64) -> (f64, f64, f64, f64) {
    let (l, k) = (m.len(), m[0].len());
    let mut cov_r = 0usize;
    let mut amr_r = 0.0;
    for c in 0..k {
        let mut col: Vec<f64> = (0..l).map(|r| m[r][c]).collect();
        if col.iter().any(|&v| v < delta) {
            cov_r += 1;
        }
        col.sort_by(|a, b| a.total_cmp(b));
        amr_r += col[0];
    }
    let mut cov_p = 0usize;
    let mut amr_p = 0.0;
    for row in m {
        if row.iter().any(|&v| v < delta) {
            cov_p += 1;
        }
        let mut r = row.clone();
        r.sort_by(|a, b| a.total_cmp(b));
        amr_p += r[0];
    }
    (cov_r as f64 / k as f64, cov_p as f64 / l as f64, amr_r / k as f64, amr_p / l as f64)
}

pub fn metric_suite(opts: &CheckOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6);
    let mut exact = 0.0f64;
    let mut perm = 0.0f64;
    let mut monotone = 0.0f64;
    for _ in 0..opts.metric_cases {
        let (l, k) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let rows: Vec<Vec<f64>> = (0..l).map(|_| (0..k).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
        let delta = rng.random_range(0.05..2.0);
        let m = RmsdMatrix::from_rows(&rows)?;
        let s = amr_cov(&m, delta)?;
        let (a, b, c, d) = brute_force_scores(&rows, delta);
        let same = s.cov_r == a && s.cov_p == b && s.amr_r == c && s.amr_p == d;
        if !same {
            exact = exact.max(score_diff(&s, &CoverageScores { cov_r: a, cov_p: b, amr_r: c, amr_p: d }).max(f64::MIN_POSITIVE));
        }
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        let mut cols: Vec<usize> = (0..k).collect();
        cols.shuffle(&mut rng);
        let shuffled: Vec<Vec<f64>> = shuffled.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect();
        perm = perm.max(score_diff(&s, &amr_cov(&RmsdMatrix::from_rows(&shuffled)?, delta)?));
        let grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.1).collect();
        let curve = coverage_curve(&m, &grid)?;
        for w in curve.windows(2) {
            monotone = monotone.max(w[0].1 - w[1].1).max(w[0].2 - w[1].2);
        }
    }
    let worked = amr_cov(&RmsdMatrix::from_rows(&[vec![0.3], vec![0.9]])?, 0.5)?;
    let expected = CoverageScores { cov_r: 1.0, cov_p: 0.5, amr_r: 0.3, amr_p: 0.6 };
    let c = opts.metric_cases;
    Ok(SuiteReport {
        name: "metrics",
        checks: vec![
            Check::new("amr_cov vs brute force (exact)", exact, 0.0, c),
            Check::new("worked example [[0.3],[0.9]], delta 0.5", score_diff(&worked, &expected), 0.0, 1),
            Check::new("row/column permutation", perm, 1e-12, c),
            Check::new("coverage monotone in delta", monotone, 0.0, c),
        ],
    })
}

fn tetrahedral_center<R: Rng + ?Sized>(rng: &mut R) -> Conformer {
    let r = random_rotation(rng);
    let dirs = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
    let mut pts = vec![[0.0; 3]];
    for d in dirs {
        let s = 1.1 + 0.2 * rng.random::<f64>();
        pts.push([d[0] * s / 3f64.sqrt(), d[1] * s / 3f64.sqrt(), d[2] * s / 3f64.sqrt()]);
    }
    let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
    Conformer::new(pts).unwrap().rotated(&r).translated(t)
}

pub fn chirality_suite(opts: &CheckOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7);
    let mut flips = 0usize;
    for _ in 0..opts.tetrahedra {
        let p: Vec<[f64; 3]> =
            (0..4).map(|_| std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal))).collect();
        let v = oriented_volume(p[0], p[1], p[2], p[3]);
        let q: Vec<[f64; 3]> = p.iter().map(|a| [a[0], a[1], -a[2]]).collect();
        let w = oriented_volume(q[0], q[1], q[2], q[3]);
        if v == 0.0 || w != -v {
            flips += 1;
        }
    }
    let mut unresolved = 0usize;
    let cases = 100;
    for _ in 0..cases {
        let x = tetrahedral_center(&mut rng);
        let mut neighbors = [1, 2, 3, 4];
        neighbors.shuffle(&mut rng);
        let p = |k: usize| x.points()[neighbors[k]];
        let parity = if oriented_volume(p(0), p(1), p(2), p(3)) > 0.0 { 1 } else { -1 };
        let centers = [ChiralCenter { center: 0, neighbors, parity }];
        let wrong = x.reflected_z();
        let fixed = chirality_correct(&wrong, &centers)?;
        let kept = chirality_correct(&x, &centers)?;
        if chirality_disagreements(&wrong, &centers)? != 1
            || chirality_disagreements(&fixed, &centers)? != 0
            || kept != x
        {
            unresolved += 1;
        }
    }
    Ok(SuiteReport {
        name: "chirality",
        checks: vec![
            Check::new("oriented volume negates under z-reflection", flips as f64, 0.0, opts.tetrahedra),
            Check::new("chirality_correct restores parity", unresolved as f64, 0.0, cases),
        ],
    })
}

/// Sample statistics of the harmonic prior.
pub fn prior_suite(opts: &CheckOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x8);
    let m = opts.prior_samples;
    let prior = HarmonicPrior::new(&path_graph(6))?;
    let (mut bonded, mut three) = (0.0, 0.0);
    let sq = |c: &Conformer, i: usize, j: usize| {
        let (a, b) = (c.points()[i], c.points()[j]);
        (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>()
    };
    for _ in 0..m {
        let c = prior.sample(1.0, &mut rng)?;
        bonded += (1..6).map(|k| sq(&c, k - 1, k)).sum::<f64>() / 5.0;
        three += (3..6).map(|k| sq(&c, k - 3, k)).sum::<f64>() / 3.0;
    }
    let ratio = bonded / three;

    // two bonded atoms: each coordinate of r_0 - r_1 is N(0, 1), so |d|^2 ~ chi^2_3
    let pair = HarmonicPrior::new(&path_graph(2))?;
    let mut total = 0.0;
    for _ in 0..m {
        total += sq(&pair.sample(1.0, &mut rng)?, 0, 1);
    }
    let mean = total / m as f64;
    let sigma = (6.0 / m as f64).sqrt();
    let z = (mean - 3.0).abs() / sigma;
    Ok(SuiteReport {
        name: "harmonic prior",
        checks: vec![
            Check::new("bonded / 3-hop mean squared distance", ratio, 1.0, m).strict(),
            Check::new("2-atom E|d|^2 = 3, |z-score|", z, 3.0, m),
        ],
    })
}

/// Every suite in order.
pub fn run_all(opts: &CheckOptions) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        equivariance_suite(opts)?,
        invariance_suite(opts)?,
        permutation_suite(opts)?,
        gradient_suite(opts)?,
        identity_suite(opts)?,
        sampler_suite(opts)?,
        metric_suite(opts)?,
        chirality_suite(opts)?,
        prior_suite(opts)?,
    ])
}
