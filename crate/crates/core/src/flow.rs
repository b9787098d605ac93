//! Stochastic interpolant, weighted flow-matching loss, Euler ODE sampling and
//! loss-versus-time profiling.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape, Var};
use crate::conditioning::GraphInputs;
use crate::error::{Error, Result};
use crate::geometry::{center, center_array, kabsch_align, random_rotation, Conformer, Rotation};
use crate::model::{center_var, Model};
use crate::priors::{PriorSampler, PriorSpec};

pub const TAU_MAX: f64 = 1.0 - 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub sigma: f64,
    pub steps: usize,
    #[serde(default)]
    pub prior: PriorSpec,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig::small_molecule()
    }
}

impl FlowConfig {
    pub fn small_molecule() -> Self {
        FlowConfig { sigma: 0.05, steps: 50, prior: PriorSpec::default() }
    }

    pub fn drug_like() -> Self {
        FlowConfig { sigma: 0.5, ..Self::small_molecule() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        self.prior.validate()
    }
}

/// Anything that predicts the clean sample from a noisy, centered state.
pub trait Denoiser {
    fn predict(&self, tape: &mut Tape, x: &Array, tau: f64) -> Result<Var>;
}

/// A model bound to one molecular graph.
pub struct ModelDenoiser<'a> {
    pub model: &'a Model,
    pub graph: &'a GraphInputs,
}

impl Denoiser for ModelDenoiser<'_> {
    fn predict(&self, tape: &mut Tape, x: &Array, tau: f64) -> Result<Var> {
        self.model.forward(tape, x, tau, self.graph)
    }
}

/// A fixed function of the state, recorded as a constant.
pub struct FnDenoiser<F>(pub F);

impl<F: Fn(&Array, f64) -> Array> Denoiser for FnDenoiser<F> {
    fn predict(&self, tape: &mut Tape, x: &Array, tau: f64) -> Result<Var> {
        Ok(tape.constant((self.0)(x, tau)))
    }
}

fn check_same_shape(a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { expected: b.shape().to_vec(), found: a.shape().to_vec() });
    }
    Ok(())
}

/// `(1 - tau) x0 + tau x1 + sigma eps`.
pub fn interpolant(x0: &Array, x1: &Array, eps: &Array, tau: f64, sigma: f64) -> Result<Array> {
    check_same_shape(x0, x1)?;
    check_same_shape(eps, x1)?;
    let d = x0.data().iter().zip(x1.data()).zip(eps.data()).map(|((a, b), e)| (1.0 - tau) * a + tau * b + sigma * e);
    Ok(Array::new(x1.shape().to_vec(), d.collect()))
}

/// `(x1_hat - x) / (1 - tau)`.
pub fn velocity(x1_hat: &Array, x: &Array, tau: f64) -> Result<Array> {
    check_same_shape(x1_hat, x)?;
    if tau >= 1.0 {
        return Err(Error::InvalidInput(format!("velocity is undefined at tau = {tau}")));
    }
    Ok(x1_hat.zip_map(x, |a, b| (a - b) / (1.0 - tau)))
}

/// Every random quantity of one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossDraw {
    pub x0: Conformer,
    pub eps: Array,
    pub tau: f64,
    pub rotation: Rotation,
}

impl LossDraw {
    pub fn sample<R: Rng + ?Sized>(prior: &PriorSampler, n: usize, rng: &mut R) -> Result<Self> {
        let x0 = prior.sample(rng)?;
        let mut eps = Array::new(vec![n, 3], (0..3 * n).map(|_| rng.sample(StandardNormal)).collect());
        center_array(&mut eps);
        let tau = rng.random::<f64>().min(TAU_MAX);
        let rotation = random_rotation(rng);
        Ok(LossDraw { x0, eps, tau, rotation })
    }
}

/// `||center(x1_hat) - x1||^2 / (1 - tau)^2` for a fixed draw.
///
/// The prior sample is aligned onto the centered target, the interpolated state and the
/// target are both rotated by the draw's rotation, and the prediction is centered.
pub fn loss_for_draw<D: Denoiser + ?Sized>(
    den: &D,
    tape: &mut Tape,
    x1: &Conformer,
    draw: &LossDraw,
    sigma: f64,
) -> Result<Var> {
    if draw.x0.len() != x1.len() {
        return Err(Error::ShapeMismatch { expected: vec![x1.len(), 3], found: vec![draw.x0.len(), 3] });
    }
    let tau = draw.tau.min(TAU_MAX);
    let x1c = center(x1);
    let (_, x0a) = kabsch_align(&draw.x0, &x1c)?;
    let xt = interpolant(&x0a.to_array(), &x1c.to_array(), &draw.eps, tau, sigma)?;
    let mut xt = Conformer::from_array(&xt)?.rotated(&draw.rotation).to_array();
    center_array(&mut xt);
    let target = x1c.rotated(&draw.rotation).to_array();
    let pred = den.predict(tape, &xt, tau)?;
    let pred = center_var(tape, pred);
    let t = tape.constant(target);
    let diff = tape.sub(pred, t);
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / ((1.0 - tau) * (1.0 - tau))))
}

/// One stochastic evaluation of the training loss.
pub fn training_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    den: &D,
    tape: &mut Tape,
    x1: &Conformer,
    prior: &PriorSampler,
    sigma: f64,
    rng: &mut R,
) -> Result<Var> {
    let draw = LossDraw::sample(prior, x1.len(), rng)?;
    loss_for_draw(den, tape, x1, &draw, sigma)
}

/// Euler integration from a centered prior sample; returns every state, first to last.
pub fn euler_trajectory<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    den: &D,
    prior: &PriorSampler,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<Array>> {
    let x0 = center(&prior.sample(rng)?).to_array();
    euler_from(den, x0, steps)
}

/// Euler integration from a given centered starting state.
pub fn euler_from<D: Denoiser + ?Sized>(den: &D, x0: Array, steps: usize) -> Result<Vec<Array>> {
    if steps == 0 {
        return Err(Error::InvalidInput("at least one Euler step is required".into()));
    }
    let mut x = x0;
    let mut states = vec![x.clone()];
    let dt = 1.0 / steps as f64;
    for n in 0..steps {
        let tau = n as f64 / steps as f64;
        let mut tape = Tape::new();
        let pred = den.predict(&mut tape, &x, tau)?;
        let mut x1_hat = tape.value(pred).clone();
        center_array(&mut x1_hat);
        let v = velocity(&x1_hat, &x, tau)?;
        x = x.zip_map(&v, |a, b| a + dt * b);
        center_array(&mut x);
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("sampler state at step {n}")));
        }
        states.push(x.clone());
    }
    Ok(states)
}

pub fn euler_sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    den: &D,
    prior: &PriorSampler,
    steps: usize,
    rng: &mut R,
) -> Result<Conformer> {
    let states = euler_trajectory(den, prior, steps, rng)?;
    Conformer::from_array(states.last().unwrap())
}

/// `tau_i = 1 - 10^{x_i}` for `points` values of `x` evenly spaced on `[-1.8, 0]`.
pub fn profile_grid(points: usize) -> Vec<f64> {
    let (lo, hi) = (-1.8f64, 0.0f64);
    (0..points)
        .map(|i| {
            let x = if points == 1 { lo } else { lo + (hi - lo) * i as f64 / (points - 1) as f64 };
            1.0 - 10f64.powf(x)
        })
        .collect()
}

/// One validation item: a denoiser bound to its graph, the reference conformers and its prior.
pub struct ProfileItem<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub conformers: &'a [Conformer],
    pub prior: &'a PriorSampler,
}

/// Mean noise-free loss at each grid time over all conformers of all items.
pub fn loss_profile<R: Rng + ?Sized>(items: &[ProfileItem<'_>], grid: &[f64], rng: &mut R) -> Result<Vec<(f64, f64)>> {
    let count: usize = items.iter().map(|it| it.conformers.len()).sum();
    if count == 0 {
        return Err(Error::InvalidInput("loss profile needs a non-empty validation set".into()));
    }
    let mut out = Vec::with_capacity(grid.len());
    for &tau in grid {
        let mut total = 0.0;
        for it in items {
            for x1 in it.conformers {
                let mut draw = LossDraw::sample(it.prior, x1.len(), rng)?;
                draw.tau = tau;
                let mut tape = Tape::new();
                let l = loss_for_draw(it.denoiser, &mut tape, x1, &draw, 0.0)?;
                total += tape.value(l).item();
            }
        }
        out.push((tau, total / count as f64));
    }
    Ok(out)
}

pub fn profile_csv(profile: &[(f64, f64)]) -> String {
    let mut s = String::from("tau,mean_loss\n");
    for (t, l) in profile {
        s.push_str(&format!("{t},{l}\n"));
    }
    s
}
