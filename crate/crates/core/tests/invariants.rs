use confgen_core::autodiff::{Array, Tape};
use confgen_core::checks::{random_coords, random_graph};
use confgen_core::flow::{euler_from, interpolant, loss_for_draw, FnDenoiser, LossDraw, ModelDenoiser};
use confgen_core::geometry::{
    axis_angle, center, centroid, chirality_correct, chirality_disagreements, rmsd, symmetric_rmsd, Conformer,
};
use confgen_core::metrics::{amr_cov, RmsdMatrix};
use confgen_core::model::{Model, ModelConfig, Variant};
use confgen_core::molgraph::{geodesic_distances, ChiralCenter};
use confgen_core::priors::{PriorSampler, PriorSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conformer(n: usize, seed: u64) -> Conformer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Conformer::from_array(&random_coords(&mut rng, n, 1.5)).unwrap()
}

fn matrix(rows: usize, cols: usize, seed: u64) -> RmsdMatrix {
    let c = conformer(rows * cols, seed);
    let data = c.points().iter().map(|p| p[0].abs() * 2.0).collect();
    RmsdMatrix::new(rows, cols, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(64) })]

    #[test]
    fn rmsd_is_invariant_to_rigid_motions(n in 3usize..15, seed in any::<u64>(), angle in -3.1f64..3.1, t in prop::array::uniform3(-5.0f64..5.0)) {
        let a = conformer(n, seed);
        let b = conformer(n, seed.wrapping_add(1));
        let r = axis_angle([0.3, -0.5, 0.8], angle);
        let base = rmsd(&a, &b, true).unwrap();
        let moved = rmsd(&a.rotated(&r).translated(t), &b, true).unwrap();
        prop_assert!((base - moved).abs() < 1e-9);
        prop_assert!((rmsd(&b, &a, true).unwrap() - base).abs() < 1e-9);
        prop_assert!(rmsd(&a, &a.rotated(&r).translated(t), true).unwrap() < 1e-7);
        prop_assert!(base <= rmsd(&a, &b, false).unwrap() + 1e-12);
    }

    #[test]
    fn symmetric_rmsd_never_exceeds_plain(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 6);
        let a = conformer(g.num_atoms(), seed);
        let b = conformer(g.num_atoms(), seed ^ 7);
        prop_assert!(symmetric_rmsd(&g, &a, &b).unwrap() <= rmsd(&a, &b, true).unwrap() + 1e-12);
    }

    #[test]
    fn coverage_scores_ignore_conformer_order(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>(), delta in 0.05f64..3.0) {
        let m = matrix(rows, cols, seed);
        let s = amr_cov(&m, delta).unwrap();
        let rperm: Vec<usize> = (0..rows).rev().collect();
        let cperm: Vec<usize> = (0..cols).map(|k| (k + 1) % cols).collect();
        let mut data = Vec::new();
        for &l in &rperm {
            for &k in &cperm {
                data.push(m.get(l, k));
            }
        }
        let p = amr_cov(&RmsdMatrix::new(rows, cols, data).unwrap(), delta).unwrap();
        prop_assert_eq!((s.cov_r, s.cov_p), (p.cov_r, p.cov_p));
        prop_assert!((s.amr_r - p.amr_r).abs() < 1e-12 && (s.amr_p - p.amr_p).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&s.cov_r) && (0.0..=1.0).contains(&s.cov_p));
    }

    #[test]
    fn coverage_is_monotone_in_threshold(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>(), d1 in 0.01f64..3.0, d2 in 0.01f64..3.0) {
        let m = matrix(rows, cols, seed);
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let a = amr_cov(&m, lo).unwrap();
        let b = amr_cov(&m, hi).unwrap();
        prop_assert!(a.cov_r <= b.cov_r && a.cov_p <= b.cov_p);
        prop_assert_eq!(a.amr_r, b.amr_r);
    }

    #[test]
    fn adding_a_generated_conformer_never_hurts_recall(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let m = matrix(rows + 1, cols, seed);
        let data: Vec<f64> = (0..rows).flat_map(|l| (0..cols).map(move |k| (l, k))).map(|(l, k)| m.get(l, k)).collect();
        let smaller = RmsdMatrix::new(rows, cols, data).unwrap();
        let (a, b) = (amr_cov(&smaller, 0.7).unwrap(), amr_cov(&m, 0.7).unwrap());
        prop_assert!(b.amr_r <= a.amr_r && b.cov_r >= a.cov_r);
    }

    #[test]
    fn interpolant_hits_its_endpoints(n in 1usize..10, seed in any::<u64>()) {
        let x0 = conformer(n, seed).to_array();
        let x1 = conformer(n, seed ^ 3).to_array();
        let eps = conformer(n, seed ^ 5).to_array();
        prop_assert_eq!(interpolant(&x0, &x1, &eps, 0.0, 0.0).unwrap(), x0.clone());
        prop_assert_eq!(interpolant(&x0, &x1, &eps, 1.0, 0.0).unwrap(), x1);
    }

    #[test]
    fn harmonic_prior_samples_are_centered(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 8);
        let prior = PriorSampler::new(&PriorSpec::default(), &g).unwrap();
        let x = prior.sample(&mut rng).unwrap();
        prop_assert!(centroid(x.points()).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn geodesic_distances_are_a_metric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 9);
        let d = geodesic_distances(&g, 64).unwrap();
        let n = g.num_atoms();
        for i in 0..n {
            prop_assert_eq!(d.get(i, i), 0);
            for j in 0..n {
                prop_assert_eq!(d.get(i, j), d.get(j, i));
                for k in 0..n {
                    prop_assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k));
                }
            }
        }
    }

    #[test]
    fn chirality_correction_fixes_mirror_images(seed in any::<u64>()) {
        let x = conformer(5, seed);
        let center = ChiralCenter { center: 0, neighbors: [1, 2, 3, 4], parity: 1 };
        let fixed = chirality_correct(&x, &[center]).unwrap();
        prop_assert_eq!(chirality_disagreements(&fixed, &[center]).unwrap(), 0);
        let mirrored = chirality_correct(&fixed.reflected_z(), &[center]).unwrap();
        prop_assert_eq!(chirality_disagreements(&mirrored, &[center]).unwrap(), 0);
    }
}

#[test]
fn oracle_denoiser_sampling_lands_on_the_target() {
    let target = center(&conformer(7, 21));
    let t = target.to_array();
    let den = FnDenoiser(move |_: &Array, _: f64| t.clone());
    let x0 = center(&conformer(7, 22)).to_array();
    for steps in [1, 2, 5, 50] {
        let states = euler_from(&den, x0.clone(), steps).unwrap();
        let last = Conformer::from_array(states.last().unwrap()).unwrap();
        assert!(rmsd(&last, &target, false).unwrap() < 1e-12, "{steps} steps");
    }
}

#[test]
fn sharing_a_tape_never_changes_a_molecules_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Model::new(ModelConfig::tiny(Variant::Ape), 1).unwrap();
    let small = random_graph(&mut rng, 5);
    let large = random_graph(&mut rng, 11);
    let items: Vec<_> = [small, large]
        .iter()
        .map(|g| {
            let prior = PriorSampler::new(&PriorSpec::default(), g).unwrap();
            let x1 = conformer(g.num_atoms(), g.num_atoms() as u64);
            let draw = LossDraw::sample(&prior, g.num_atoms(), &mut rng).unwrap();
            (model.prepare(g).unwrap(), x1, draw)
        })
        .collect();
    let mut alone = Vec::new();
    for (g, x1, d) in &items {
        let mut t = Tape::new();
        let l = loss_for_draw(&ModelDenoiser { model: &model, graph: g }, &mut t, x1, d, 0.05).unwrap();
        alone.push(t.value(l).item());
    }
    let mut t = Tape::new();
    let mut together = Vec::new();
    for (g, x1, d) in items.iter().rev() {
        let l = loss_for_draw(&ModelDenoiser { model: &model, graph: g }, &mut t, x1, d, 0.05).unwrap();
        together.push(t.value(l).item());
    }
    together.reverse();
    assert_eq!(alone, together);
}
