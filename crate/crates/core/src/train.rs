//! Run configuration, dataset loading, the training loop, checkpoints and sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{load_tensors, save_tensors, Dtype};
use crate::autodiff::{adamw_step, AdamWConfig, Array, LrSchedule, OptimizerState, StepOutcome, Tape};
use crate::conditioning::GraphInputs;
use crate::error::{Error, Result};
use crate::flow::{euler_sample, training_loss, FlowConfig, ModelDenoiser};
use crate::geometry::Conformer;
use crate::model::{Model, ModelConfig};
use crate::molgraph::{parse_molecule, Molecule};
use crate::priors::PriorSampler;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_max: f64,
    #[serde(default = "default_lr_init")]
    pub lr_init: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_lr_init() -> f64 {
    1e-5
}
fn default_warmup() -> f64 {
    0.01
}
fn default_weight_decay() -> f64 {
    0.01
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_max: 3e-4,
            lr_init: default_lr_init(),
            lr_min: 0.0,
            warmup_fraction: default_warmup(),
            weight_decay: default_weight_decay(),
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self, total_steps: u64) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            schedule: LrSchedule {
                lr_max: self.lr_max,
                lr_init: self.lr_init,
                lr_min: self.lr_min,
                warmup_fraction: self.warmup_fraction,
                total_steps: total_steps.max(1),
            },
            ..AdamWConfig::default()
        }
    }
}

/// `run.ckpt` at step 200 becomes `run.ckpt.step200`.
pub fn periodic_checkpoint_path(checkpoint: &Path, step: u64) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".step{step}"));
    checkpoint.with_file_name(name)
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Molecule files or directories of `*.json` files; relative paths resolve against the config file.
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub checkpoint: PathBuf,
    /// Also write a checkpoint every this many steps; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub log: Option<PathBuf>,
}

fn default_batch() -> usize {
    1
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.optimizer.lr_max > 0.0) {
            return Err(Error::Config("lr_max must be positive".into()));
        }
        self.model.validate()?;
        self.flow.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Loads a config and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = RunConfig::from_json(&fs::read_to_string(path)?)?;
        if c.train.is_empty() {
            return Err(Error::Config("no training data listed".into()));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        c.train.iter_mut().for_each(fix);
        fix(&mut c.checkpoint);
        if let Some(l) = c.log.as_mut() {
            fix(l);
        }
        Ok(c)
    }
}

/// Reads molecule documents from files and directories (sorted `*.json` entries).
pub fn load_molecules(paths: &[PathBuf]) -> Result<Vec<(PathBuf, Molecule)>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| q.extension().is_some_and(|x| x == "json"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else if p.exists() {
            files.push(p.clone());
        } else {
            return Err(Error::Config(format!("data path {} does not exist", p.display())));
        }
    }
    files
        .into_iter()
        .map(|f| {
            let text = fs::read_to_string(&f)?;
            let m = parse_molecule(&text).map_err(|e| Error::InvalidGraph(format!("{}: {e}", f.display())))?;
            Ok((f, m))
        })
        .collect()
}

struct TrainItem {
    graph: GraphInputs,
    conformers: Vec<Conformer>,
    prior: PriorSampler,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    model: ModelConfig,
    flow: FlowConfig,
    #[serde(default)]
    run: Option<RunConfig>,
    step: u64,
    #[serde(default)]
    rng: Option<RngState>,
}

const CHECKPOINT_KIND: &str = "confgen-checkpoint";

/// Writes model parameters (and optionally optimizer state) next to `path`.
fn write_checkpoint(
    path: &Path,
    model: &Model,
    flow: &FlowConfig,
    run: Option<&RunConfig>,
    opt: Option<(&OptimizerState, &ChaCha8Rng)>,
) -> Result<()> {
    let mut names: Vec<(String, &Array)> = model.params.iter().map(|(_, n, a)| (n.to_string(), a)).collect();
    let mut step = 0;
    let mut rng_state = None;
    if let Some((state, rng)) = opt {
        for (k, (_, n, _)) in model.params.iter().enumerate() {
            names.push((format!("adam.m.{n}"), &state.m[k]));
            names.push((format!("adam.v.{n}"), &state.v[k]));
        }
        step = state.step;
        rng_state = Some(RngState::capture(rng));
    }
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.into(),
        model: model.config,
        flow: *flow,
        run: run.cloned(),
        step,
        rng: rng_state,
    };
    save_tensors(path, &names, serde_json::to_value(meta)?, Dtype::F64)
}

/// A trained model loaded from disk.
pub struct LoadedCheckpoint {
    pub model: Model,
    pub flow: FlowConfig,
    pub run: Option<RunConfig>,
    pub step: u64,
    optimizer: Option<(OptimizerState, ChaCha8Rng)>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let (manifest, tensors) = load_tensors(path)?;
    let meta: CheckpointMeta = serde_json::from_value(manifest.metadata)
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!("not a model checkpoint: {}", meta.kind)));
    }
    let mut model = Model::new(meta.model, 0)?;
    let lookup: std::collections::HashMap<&str, &Array> = tensors.iter().map(|(n, a)| (n.as_str(), a)).collect();
    let ids: Vec<_> = model.params.ids().collect();
    for id in &ids {
        let name = model.params.name(*id).to_string();
        let a = lookup.get(name.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if a.shape() != model.params.get(*id).shape() {
            return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}", a.shape())));
        }
        *model.params.get_mut(*id) = (*a).clone();
    }
    let optimizer = match meta.rng {
        Some(rng) => {
            let mut state = OptimizerState::new(&model.params);
            for (k, id) in ids.iter().enumerate() {
                let name = model.params.name(*id);
                let get = |prefix: &str| {
                    lookup
                        .get(format!("{prefix}{name}").as_str())
                        .map(|a| (*a).clone())
                        .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment for {name}")))
                };
                state.m[k] = get("adam.m.")?;
                state.v[k] = get("adam.v.")?;
            }
            state.step = meta.step;
            Some((state, rng.restore()))
        }
        None => None,
    };
    Ok(LoadedCheckpoint { model, flow: meta.flow, run: meta.run, step: meta.step, optimizer })
}

/// Saves parameters only (no optimizer state).
pub fn save_model(path: &Path, model: &Model, flow: &FlowConfig) -> Result<()> {
    write_checkpoint(path, model, flow, None, None)
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub opt: OptimizerState,
    pub adam: AdamWConfig,
    rng: ChaCha8Rng,
    items: Vec<TrainItem>,
}

impl Trainer {
    pub fn new(config: RunConfig, molecules: &[Molecule]) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model, config.seed)?;
        let opt = OptimizerState::new(&model.params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f10e);
        Self::assemble(config, model, opt, rng, molecules)
    }

    fn assemble(
        config: RunConfig,
        model: Model,
        opt: OptimizerState,
        rng: ChaCha8Rng,
        molecules: &[Molecule],
    ) -> Result<Self> {
        let items = molecules
            .iter()
            .map(|m| {
                if m.conformers.is_empty() {
                    return Err(Error::InvalidInput("training molecules need at least one conformer".into()));
                }
                Ok(TrainItem {
                    graph: model.prepare(&m.graph)?,
                    conformers: m.conformers.clone(),
                    prior: PriorSampler::new(&config.flow.prior, &m.graph)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        let adam = config.optimizer.adamw(config.steps);
        Ok(Trainer { config, model, opt, adam, rng, items })
    }

    /// Replaces the run configuration of a resumed run. Only output locations and
    /// training-file paths may differ from the checkpointed configuration.
    pub fn redirect(&mut self, config: RunConfig) -> Result<()> {
        let mut same = config.clone();
        same.checkpoint = self.config.checkpoint.clone();
        same.checkpoint_every = self.config.checkpoint_every;
        same.log = self.config.log.clone();
        same.train = self.config.train.clone();
        if same != self.config {
            return Err(Error::Config("resumed run must use the configuration it was started with".into()));
        }
        self.config = config;
        Ok(())
    }

    /// Continues a run from a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path, molecules: &[Molecule]) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let config = ck.run.ok_or_else(|| Error::Checkpoint("checkpoint has no run configuration".into()))?;
        let (opt, rng) = ck.optimizer.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        Self::assemble(config, ck.model, opt, rng, molecules)
    }

    pub fn step_index(&self) -> u64 {
        self.opt.step
    }

    /// Mean loss over one batch; molecules are visited cyclically.
    pub fn step(&mut self) -> Result<StepRecord> {
        let b = self.config.batch_size;
        let m = self.items.len();
        let start = (self.opt.step as usize).wrapping_mul(b);
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(b);
        for k in 0..b {
            let item = &self.items[(start + k) % m];
            let c = self.rng.random_range(0..item.conformers.len());
            let den = ModelDenoiser { model: &self.model, graph: &item.graph };
            let l = training_loss(&den, &mut tape, &item.conformers[c], &item.prior, self.config.flow.sigma, &mut self.rng)?;
            losses.push(l);
        }
        let flat: Vec<_> = losses.iter().map(|&l| tape.reshape(l, &[1])).collect();
        let stacked = tape.concat(&flat, 0);
        let loss = tape.mean(stacked);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.opt.step)));
        }
        tape.backward(loss)?;
        let grads = tape.param_grads();
        let step = self.opt.step;
        match adamw_step(&mut self.model.params, &grads, &mut self.opt, &self.adam)? {
            StepOutcome::Applied { lr } => Ok(StepRecord { step, lr, loss: value, skipped: false }),
            StepOutcome::Skipped { param } => {
                log::warn!("step {step}: non-finite gradient in {param}, update skipped");
                Ok(StepRecord { step, lr: 0.0, loss: value, skipped: true })
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.model, &self.config.flow, Some(&self.config), Some((&self.opt, &self.rng)))
    }

    /// Trains until `config.steps` updates have been applied, writing checkpoints and a CSV log.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        let mut guard = 0u64;
        while self.opt.step < self.config.steps {
            let r = self.step()?;
            on_step(&r);
            records.push(r);
            guard = if r.skipped { guard + 1 } else { 0 };
            if guard >= 100 {
                return Err(Error::NonFinite("100 consecutive steps skipped on non-finite gradients".into()));
            }
            let every = self.config.checkpoint_every;
            if !r.skipped && every > 0 && self.opt.step % every == 0 && self.opt.step < self.config.steps {
                self.save(&periodic_checkpoint_path(&self.config.checkpoint, self.opt.step))?;
            }
        }
        self.save(&self.config.checkpoint)?;
        if let Some(log) = &self.config.log {
            fs::write(log, log_csv(&records))?;
        }
        Ok(records)
    }
}

pub fn log_csv(records: &[StepRecord]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in records {
        s.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    s
}

/// Draws `num` conformers for `molecule` with the Euler sampler.
pub fn sample_conformers<R: Rng + ?Sized>(
    model: &Model,
    flow: &FlowConfig,
    molecule: &Molecule,
    num: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<Conformer>> {
    if let Some(bad) = molecule.graph.atoms.iter().find(|a| model.config.vocab.index_of(a.z).is_none()) {
        return Err(Error::InvalidGraph(format!(
            "vocabulary mismatch: element Z={} is not in the checkpoint's {:?} vocabulary",
            bad.z, model.config.vocab
        )));
    }
    let graph = model.prepare(&molecule.graph)?;
    let prior = PriorSampler::new(&flow.prior, &molecule.graph)?;
    let den = ModelDenoiser { model, graph: &graph };
    (0..num).map(|_| euler_sample(&den, &prior, steps, rng)).collect()
}
