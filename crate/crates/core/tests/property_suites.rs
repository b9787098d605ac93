use confgen_core::checks::{self, CheckOptions, SuiteReport};

fn assert_passes(report: SuiteReport) {
    print!("{report}");
    assert!(report.passed(), "suite {} failed:\n{report}", report.name);
}

#[test]
fn equivariance() {
    assert_passes(checks::equivariance_suite(&CheckOptions::new(11)).unwrap());
}

#[test]
fn perturbed_coupling_breaks_equivariance() {
    let opts = CheckOptions { cg_perturbation: Some(0.05), rotations: 10, ..CheckOptions::new(11) };
    let r = checks::equivariance_suite(&opts).unwrap();
    print!("{r}");
    assert!(!r.passed());
    assert!(!r.check("cg_contraction").unwrap().passed());
    assert!(!r.check("PE3 model forward").unwrap().passed());
    assert!(r.check("equiv_layer_norm").unwrap().passed());
}

#[test]
fn invariance() {
    assert_passes(checks::invariance_suite(&CheckOptions::new(12)).unwrap());
}

#[test]
fn permutation() {
    assert_passes(checks::permutation_suite(&CheckOptions::new(13)).unwrap());
}

#[test]
fn gradients() {
    assert_passes(checks::gradient_suite(&CheckOptions::new(14)).unwrap());
}

#[test]
fn identity_at_init() {
    assert_passes(checks::identity_suite(&CheckOptions::new(15)).unwrap());
}

#[test]
fn sampler() {
    assert_passes(checks::sampler_suite(&CheckOptions::new(16)).unwrap());
}

#[test]
fn metrics() {
    assert_passes(checks::metric_suite(&CheckOptions::new(17)).unwrap());
}

#[test]
fn chirality() {
    assert_passes(checks::chirality_suite(&CheckOptions::new(18)).unwrap());
}

#[test]
fn harmonic_prior() {
    assert_passes(checks::prior_suite(&CheckOptions::new(19)).unwrap());
}
