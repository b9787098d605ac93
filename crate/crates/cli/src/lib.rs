//! Command-line front end: training, sampling, evaluation, property checks,
//! loss profiling and the GNN classification probe.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use confgen_core::checks::{run_all, CheckOptions};
use confgen_core::classify::{nonanol_toy_set, train_classifier, ClassifierConfig};
use confgen_core::flow::{loss_profile, profile_csv, profile_grid, ModelDenoiser, ProfileItem};
use confgen_core::geometry::chirality_correct;
use confgen_core::metrics::{aggregate, amr_cov, coverage_curve, rmsd_matrix, CoverageScores};
use confgen_core::molgraph::Molecule;
use confgen_core::priors::PriorSampler;
use confgen_core::train::{load_checkpoint, load_molecules, log_csv, sample_conformers, RunConfig, Trainer};
use confgen_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_SUITE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "confgen", version, about = "Graph-conditioned transformer flows for molecular conformers")]
pub struct Cli {
    /// Force single-threaded, fixed-order execution (always the case in this build).
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Generate conformers for molecular graphs.
    Sample(SampleArgs),
    /// Coverage and average-minimum-RMSD between generated and reference ensembles.
    Eval(EvalArgs),
    /// Run every property suite; exits with 2 if any fails.
    CheckEquivariance(CheckArgs),
    /// Noise-free validation loss on a grid of times close to the data end.
    LossProfile(ProfileArgs),
    /// Train the conditioning GNN to tell graphs apart and report training accuracy.
    ClassifySmoke(ClassifyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A molecule file or a directory of them.
    #[arg(long)]
    pub graphs: PathBuf,
    /// Conformers per molecule; defaults to twice the number of conformers already in each file.
    #[arg(long)]
    pub num: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write documents holding only the new conformers here instead of appending in place.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Coverage curve grid `min:max:n`.
    #[arg(long)]
    pub curve: Option<String>,
    /// Where to write the curve CSV (default: stdout after the report).
    #[arg(long)]
    pub curve_out: Option<PathBuf>,
    /// Minimize RMSD over graph automorphisms.
    #[arg(long)]
    pub symmetry: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test hook: perturb one Clebsch-Gordan coefficient by this amount.
    #[arg(long)]
    pub perturb_cg: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Directory of molecule files; each file is its own class. Defaults to the built-in nonanol set.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 5000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Maps an error chain to the documented exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(Error::NonFinite(_)) = cause.downcast_ref::<Error>() {
            return EXIT_NUMERIC;
        }
    }
    EXIT_USAGE
}

/// The error chain joined with `: `, dropping causes already quoted by their parent.
pub fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if last.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
        last = text;
    }
    out
}

/// Runs a parsed command; `Ok(code)` carries non-error exit codes such as suite failures.
pub fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::CheckEquivariance(a) => cmd_check(&a),
        Command::LossProfile(a) => cmd_profile(&a),
        Command::ClassifySmoke(a) => cmd_classify(&a),
    }
}

fn molecules_at(path: &Path) -> anyhow::Result<Vec<(PathBuf, Molecule)>> {
    let mols = load_molecules(&[path.to_path_buf()])?;
    if mols.is_empty() {
        bail!("no molecule files found at {}", path.display());
    }
    Ok(mols)
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<i32> {
    let config = RunConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    let molecules: Vec<Molecule> = load_molecules(&config.train)?.into_iter().map(|(_, m)| m).collect();
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = Trainer::resume(p, &molecules).with_context(|| format!("resuming from {}", p.display()))?;
            t.redirect(config)?;
            log::info!("resuming at step {}", t.step_index());
            t
        }
        None => Trainer::new(config, &molecules)?,
    };
    log::info!(
        "training {:?} ({} parameters) on {} molecules for {} steps, seed {}",
        trainer.config.model.variant,
        trainer.model.num_parameters(),
        molecules.len(),
        trainer.config.steps,
        trainer.config.seed
    );
    let every = (trainer.config.steps / 20).max(1);
    let records = trainer.run(|r| {
        if r.step % every == 0 {
            log::info!("step {} lr {:.3e} loss {:.5}", r.step, r.lr, r.loss);
        }
    })?;
    if trainer.config.log.is_none() {
        print!("{}", log_csv(&records));
    }
    log::info!("checkpoint written to {}", trainer.config.checkpoint.display());
    Ok(EXIT_OK)
}

pub fn cmd_sample(a: &SampleArgs) -> anyhow::Result<i32> {
    if a.num == Some(0) {
        log::warn!("--num 0: nothing to sample");
        return Ok(EXIT_OK);
    }
    let ck = load_checkpoint(&a.checkpoint).with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
    }
    for (path, mut mol) in molecules_at(&a.graphs)? {
        let num = a.num.unwrap_or(2 * mol.conformers.len());
        if num == 0 {
            log::warn!("{}: no reference conformers to size the ensemble, pass --num", path.display());
            continue;
        }
        let generated = sample_conformers(&ck.model, &ck.flow, &mol, num, a.steps, &mut rng)
            .with_context(|| format!("sampling {}", path.display()))?;
        let target = match &a.out {
            Some(dir) => {
                mol.conformers = generated;
                dir.join(path.file_name().unwrap())
            }
            None => {
                mol.conformers.extend(generated);
                path.clone()
            }
        };
        fs::write(&target, mol.to_json()?)?;
        log::info!("{}: {num} conformers", target.display());
    }
    Ok(EXIT_OK)
}

/// Parses `min:max:n` into an ascending grid.
pub fn parse_grid(spec: &str) -> anyhow::Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        bail!("curve grid must look like min:max:n, got {spec}");
    }
    let (lo, hi): (f64, f64) = (parts[0].parse()?, parts[1].parse()?);
    let n: usize = parts[2].parse()?;
    if n == 0 || !(hi >= lo) || !(lo > 0.0) {
        bail!("curve grid needs 0 < min <= max and n >= 1");
    }
    Ok((0..n).map(|i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect())
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<i32> {
    let grid = a.curve.as_deref().map(parse_grid).transpose()?;
    let generated = molecules_at(&a.generated)?;
    let reference = molecules_at(&a.reference)?;
    let mut per_molecule = Vec::new();
    let mut scores: Vec<CoverageScores> = Vec::new();
    let mut curves: Vec<Vec<(f64, f64, f64)>> = Vec::new();
    for (ref_path, ref_mol) in &reference {
        let name = ref_path.file_name().unwrap();
        let Some((_, gen_mol)) = generated.iter().find(|(p, _)| p.file_name() == Some(name)) else {
            log::warn!("{}: no generated file, skipped", name.to_string_lossy());
            continue;
        };
        if gen_mol.graph.num_atoms() != ref_mol.graph.num_atoms() {
            bail!("{}: generated and reference atom counts differ", name.to_string_lossy());
        }
        let centers = &ref_mol.graph.chiral_centers;
        let gen: Vec<_> = gen_mol
            .conformers
            .iter()
            .map(|c| if centers.is_empty() { Ok(c.clone()) } else { chirality_correct(c, centers) })
            .collect::<confgen_core::Result<_>>()?;
        let m = rmsd_matrix(&gen, &ref_mol.conformers, Some(&ref_mol.graph), a.symmetry)?;
        let s = amr_cov(&m, a.threshold)?;
        if let Some(g) = &grid {
            curves.push(coverage_curve(&m, g)?);
        }
        per_molecule.push(json!({
            "molecule": name.to_string_lossy(),
            "generated": gen.len(),
            "reference": ref_mol.conformers.len(),
            "cov_r": s.cov_r,
            "cov_p": s.cov_p,
            "amr_r": s.amr_r,
            "amr_p": s.amr_p,
        }));
        scores.push(s);
    }
    let agg = aggregate(&scores)?;
    let report = json!({ "threshold": a.threshold, "symmetry": a.symmetry, "per_molecule": per_molecule, "aggregate": agg });
    let text = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    if let Some(g) = &grid {
        let mut csv = String::from("delta,cov_r_mean,cov_p_mean\n");
        for (i, d) in g.iter().enumerate() {
            let k = curves.len() as f64;
            let r = curves.iter().map(|c| c[i].1).sum::<f64>() / k;
            let p = curves.iter().map(|c| c[i].2).sum::<f64>() / k;
            csv.push_str(&format!("{d},{r},{p}\n"));
        }
        match &a.curve_out {
            Some(p) => fs::write(p, csv)?,
            None => print!("{csv}"),
        }
    }
    Ok(EXIT_OK)
}

pub fn cmd_check(a: &CheckArgs) -> anyhow::Result<i32> {
    let opts = CheckOptions { cg_perturbation: a.perturb_cg, ..CheckOptions::new(a.seed) };
    let reports = run_all(&opts)?;
    let mut ok = true;
    for r in &reports {
        print!("{r}");
        ok &= r.passed();
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} suites, {failed} failed (seed {})", reports.len(), a.seed);
    Ok(if ok { EXIT_OK } else { EXIT_SUITE })
}

pub fn cmd_profile(a: &ProfileArgs) -> anyhow::Result<i32> {
    let ck = load_checkpoint(&a.checkpoint).with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))?;
    let mols = molecules_at(&a.val)?;
    let prepared = mols
        .iter()
        .map(|(_, m)| Ok((ck.model.prepare(&m.graph)?, PriorSampler::new(&ck.flow.prior, &m.graph)?)))
        .collect::<confgen_core::Result<Vec<_>>>()?;
    let dens: Vec<ModelDenoiser<'_>> = prepared.iter().map(|(g, _)| ModelDenoiser { model: &ck.model, graph: g }).collect();
    let items: Vec<ProfileItem<'_>> = mols
        .iter()
        .zip(&prepared)
        .zip(&dens)
        .map(|(((_, m), (_, prior)), den)| ProfileItem { denoiser: den, conformers: &m.conformers, prior })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let profile = loss_profile(&items, &profile_grid(a.points), &mut rng)?;
    let csv = profile_csv(&profile);
    match &a.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(EXIT_OK)
}

pub fn cmd_classify(a: &ClassifyArgs) -> anyhow::Result<i32> {
    let graphs = match &a.dataset {
        Some(d) => molecules_at(d)?.into_iter().map(|(_, m)| m.graph).collect(),
        None => nonanol_toy_set()?,
    };
    let cfg = ClassifierConfig { epochs: a.epochs, seed: a.seed, ..ClassifierConfig::new(a.layers) };
    let r = train_classifier(&graphs, &cfg)?;
    println!(
        "{}",
        serde_json::to_string(&json!({
            "layers": r.layers,
            "accuracy": r.accuracy,
            "final_loss": r.final_loss,
            "epochs": r.epochs_run,
            "predictions": r.predictions,
        }))?
    );
    Ok(EXIT_OK)
}
