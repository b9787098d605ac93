//! One test per acceptance criterion; each prints a single PASS/FAIL line.
//!
//! Criteria 11 and 12 share two 5000-step training runs (several minutes on one core).

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use confgen_core::checks::{self, CheckOptions, SuiteReport, EQUIVARIANCE_TOL};
use confgen_core::classify::{nonanol_toy_set, train_classifier, ClassifierConfig};
use confgen_core::conditioning::PairMode;
use confgen_core::flow::FlowConfig;
use confgen_core::geometry::symmetric_rmsd;
use confgen_core::metrics::{amr_cov, RmsdMatrix};
use confgen_core::model::ModelConfig;
use confgen_core::molgraph::Molecule;
use confgen_core::train::{load_molecules, sample_conformers, OptimizerConfig, RunConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn report(id: u32, title: &str, passed: bool, detail: impl AsRef<str>) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    println!("acceptance {id:>2} {title}: {verdict} ({})", detail.as_ref());
}

fn suite(id: u32, title: &str, run: impl FnOnce() -> SuiteReport) -> (SuiteReport, Duration) {
    let t0 = Instant::now();
    let r = run();
    let elapsed = t0.elapsed();
    if !r.passed() {
        eprint!("{r}");
    }
    let worst = r.checks.iter().map(|c| format!("{} {:.1e}", c.name, c.violation)).collect::<Vec<_>>().join("; ");
    report(id, title, r.passed(), format!("{worst}; {:.1} s", elapsed.as_secs_f64()));
    (r, elapsed)
}

#[test]
fn criterion_01_equivariance() {
    let (r, elapsed) = suite(1, "equivariance", || checks::equivariance_suite(&CheckOptions::new(101)).unwrap());
    assert!(r.checks.iter().all(|c| c.violation < EQUIVARIANCE_TOL), "{r}");
    assert!(r.checks.iter().all(|c| c.cases >= 100 || c.name.contains("model")));
    assert!(elapsed < Duration::from_secs(60), "equivariance suite took {elapsed:?}");
}

#[test]
fn criterion_02_invariance() {
    let (r, _) = suite(2, "invariance", || checks::invariance_suite(&CheckOptions::new(102)).unwrap());
    assert!(r.passed(), "{r}");
}

#[test]
fn criterion_03_permutation() {
    let (r, _) = suite(3, "permutation", || checks::permutation_suite(&CheckOptions::new(103)).unwrap());
    assert!(r.passed(), "{r}");
    assert_eq!(r.max_violation(), 0.0);
}

#[test]
fn criterion_04_gradients() {
    let (r, _) = suite(4, "gradients", || checks::gradient_suite(&CheckOptions::new(104)).unwrap());
    assert!(r.passed(), "{r}");
}

#[test]
fn criterion_05_identity_at_init() {
    let (r, _) = suite(5, "identity at init", || checks::identity_suite(&CheckOptions::new(105)).unwrap());
    assert!(r.passed(), "{r}");
    assert_eq!(r.max_violation(), 0.0);
}

#[test]
fn criterion_06_sampler() {
    let (r, _) = suite(6, "sampler exactness", || checks::sampler_suite(&CheckOptions::new(106)).unwrap());
    assert!(r.passed(), "{r}");
}

#[test]
fn criterion_07_metrics() {
    let (r, _) = suite(7, "metric oracle", || checks::metric_suite(&CheckOptions::new(107)).unwrap());
    let worked = amr_cov(&RmsdMatrix::from_rows(&[vec![0.3], vec![0.9]]).unwrap(), 0.5).unwrap();
    assert_eq!((worked.cov_r, worked.cov_p, worked.amr_r, worked.amr_p), (1.0, 0.5, 0.3, 0.6));
    assert!(r.passed(), "{r}");
}

#[test]
fn criterion_08_chirality() {
    let (r, _) = suite(8, "chirality", || checks::chirality_suite(&CheckOptions::new(108)).unwrap());
    assert!(r.passed(), "{r}");
}

#[test]
fn criterion_09_harmonic_prior() {
    let (r, _) = suite(9, "harmonic prior", || checks::prior_suite(&CheckOptions::new(109)).unwrap());
    assert!(r.passed(), "{r}");
}

#[test]
fn criterion_10_gnn_discriminability() {
    let t0 = Instant::now();
    let graphs = nonanol_toy_set().unwrap();
    let acc: Vec<f64> =
        [0, 1, 2].iter().map(|&k| train_classifier(&graphs, &ClassifierConfig::new(k)).unwrap().accuracy).collect();
    let elapsed = t0.elapsed();
    let passed = acc[2] == 1.0 && acc[0] <= 0.67 && acc[1] <= 0.67 && elapsed < Duration::from_secs(300);
    report(
        10,
        "GNN discriminability",
        passed,
        format!("accuracy 0/1/2 layers = {:.3}/{:.3}/{:.3}; {:.1} s", acc[0], acc[1], acc[2], elapsed.as_secs_f64()),
    );
    assert!(passed);
}

const OVERFIT_STEPS: u64 = 5000;
const OVERFIT_DRAWS: usize = 20;
const OVERFIT_TOL: f64 = 0.1;

struct Overfit {
    /// Symmetry-aware aligned RMSD of every draw, per molecule.
    rmsd: Vec<Vec<f64>>,
    elapsed: Duration,
}

impl Overfit {
    fn best(&self) -> f64 {
        self.rmsd.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    fn hit_rate(&self) -> Vec<f64> {
        self.rmsd.iter().map(|r| r.iter().filter(|&&x| x < OVERFIT_TOL).count() as f64 / r.len() as f64).collect()
    }
}

fn overfit_molecules() -> Vec<Molecule> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/c3h8o");
    load_molecules(&[dir]).unwrap().into_iter().map(|(_, m)| m).collect()
}

fn overfit(conditioned: bool) -> Overfit {
    let t0 = Instant::now();
    let mols = overfit_molecules();
    let mut model = ModelConfig::ape_s();
    if !conditioned {
        model.node_conditioning = false;
        model.pair_mode = PairMode::None;
    }
    let config = RunConfig {
        version: 1,
        model,
        flow: FlowConfig::small_molecule(),
        optimizer: OptimizerConfig { lr_max: 3e-4, lr_min: 0.0, ..OptimizerConfig::default() },
        train: vec![],
        seed: 0,
        steps: OVERFIT_STEPS,
        batch_size: mols.len(),
        checkpoint: PathBuf::new(),
        checkpoint_every: 0,
        log: None,
    };
    let mut trainer = Trainer::new(config, &mols).unwrap();
    while trainer.step_index() < OVERFIT_STEPS {
        trainer.step().unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let rmsd = mols
        .iter()
        .map(|m| {
            let target = &m.conformers[0];
            sample_conformers(&trainer.model, &trainer.config.flow, m, OVERFIT_DRAWS, 50, &mut rng)
                .unwrap()
                .iter()
                .map(|c| symmetric_rmsd(&m.graph, c, target).unwrap())
                .collect()
        })
        .collect();
    Overfit { rmsd, elapsed: t0.elapsed() }
}

fn conditioned_run() -> &'static Overfit {
    static RUN: OnceLock<Overfit> = OnceLock::new();
    RUN.get_or_init(|| overfit(true))
}

fn unconditioned_run() -> &'static Overfit {
    static RUN: OnceLock<Overfit> = OnceLock::new();
    RUN.get_or_init(|| overfit(false))
}

#[test]
fn criterion_11_end_to_end_overfit() {
    let run = conditioned_run();
    let rates = run.hit_rate();
    let passed = rates.iter().all(|&r| r >= 0.9);
    let means: Vec<String> =
        run.rmsd.iter().map(|r| format!("{:.3}", r.iter().sum::<f64>() / r.len() as f64)).collect();
    report(
        11,
        "end-to-end overfit",
        passed,
        format!(
            "fraction below {OVERFIT_TOL} A per molecule = {rates:?}; mean RMSD {}; best {:.3} A; {:.0} s",
            means.join("/"),
            run.best(),
            run.elapsed.as_secs_f64()
        ),
    );
    assert!(passed, "overfit samples below {OVERFIT_TOL} A: {rates:?}");
}

#[test]
fn criterion_12_conditioning_ablation() {
    let with = conditioned_run().best();
    let without = unconditioned_run().best();
    let passed = without > with;
    report(
        12,
        "conditioning ablation",
        passed,
        format!("best RMSD node+pair {with:.3} A vs none {without:.3} A"),
    );
    assert!(passed);
}
