//! Static-trajectory Hamiltonian Monte Carlo with dual-averaging step size.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{CapError, Result};

/// A differentiable log-density on `R^dim`.
///
/// Returning `Err` marks the point as outside the numerically usable region;
/// the transition that reached it is counted as divergent.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64>;

    /// Optional exact Gibbs move applied after every transition. Returns
    /// whether `x` changed.
    fn refresh(&self, _x: &mut [f64], _rng: &mut dyn RngCore) -> bool {
        false
    }
}

/// Energy error beyond which a transition is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    pub seed: u64,
    /// Adapt a diagonal inverse metric in windows during warmup. Off means a
    /// unit metric throughout.
    pub adapt_metric: bool,
    /// Each transition uses `ε · U(1 - jitter, 1 + jitter)`.
    pub step_jitter: f64,
    /// Fraction of divergent post-warmup transitions tolerated per chain.
    pub max_divergent_fraction: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            draws: 1000,
            leapfrog_steps: 32,
            target_accept: 0.8,
            seed: 1,
            adapt_metric: false,
            step_jitter: 0.1,
            max_divergent_fraction: 0.1,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("chains", self.chains),
            ("warmup", self.warmup),
            ("draws", self.draws),
            ("leapfrog_steps", self.leapfrog_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CapError::Validation(format!("hmc.{name} must be positive")));
            }
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(CapError::Validation(format!(
                "hmc.target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return Err(CapError::Validation(format!(
                "hmc.step_jitter must lie in [0, 1), got {}",
                self.step_jitter
            )));
        }
        if !(0.0..=1.0).contains(&self.max_divergent_fraction) {
            return Err(CapError::Validation(format!(
                "hmc.max_divergent_fraction must lie in [0, 1], got {}",
                self.max_divergent_fraction
            )));
        }
        Ok(())
    }

    pub fn chain_rng(&self, chain: usize) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(self.seed.wrapping_add(chain as u64))
    }
}

/// Raw output of one chain.
#[derive(Debug, Clone)]
pub struct ChainRun {
    pub draws: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub accept_prob: Vec<f64>,
    pub divergent: Vec<bool>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub warmup_divergences: usize,
}

impl ChainRun {
    pub fn divergences(&self) -> usize {
        self.divergent.iter().filter(|d| **d).count()
    }

    pub fn mean_accept(&self) -> f64 {
        crate::stats::mean(&self.accept_prob)
    }
}

struct Point {
    x: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
}

struct Transition {
    accept_prob: f64,
    divergent: bool,
}

struct Hamiltonian<'a, T: LogDensity> {
    target: &'a T,
    inv_metric: Vec<f64>,
}

impl<T: LogDensity> Hamiltonian<'_, T> {
    fn evaluate(&self, x: Vec<f64>) -> Option<Point> {
        let mut grad = vec![0.0; x.len()];
        match self.target.log_density_and_grad(&x, &mut grad) {
            Ok(logp) if logp.is_finite() && grad.iter().all(|g| g.is_finite()) => {
                Some(Point { x, logp, grad })
            }
            _ => None,
        }
    }

    fn kinetic(&self, momentum: &[f64]) -> f64 {
        0.5 * momentum
            .iter()
            .zip(&self.inv_metric)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
    }

    fn sample_momentum<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.inv_metric
            .iter()
            .map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt())
            .collect()
    }

    /// `steps` leapfrog steps from `start`; `None` if the trajectory left the
    /// region where the density is finite.
    fn integrate(
        &self,
        start: &Point,
        momentum: &mut [f64],
        eps: f64,
        steps: usize,
    ) -> Option<Point> {
        let mut x = start.x.clone();
        for (p, g) in momentum.iter_mut().zip(&start.grad) {
            *p += 0.5 * eps * g;
        }
        let mut point = None;
        for step in 0..steps {
            for ((xi, p), m) in x.iter_mut().zip(momentum.iter()).zip(&self.inv_metric) {
                *xi += eps * m * p;
            }
            let next = self.evaluate(x)?;
            let half = if step + 1 == steps { 0.5 } else { 1.0 };
            for (p, g) in momentum.iter_mut().zip(&next.grad) {
                *p += half * eps * g;
            }
            x = next.x.clone();
            point = Some(next);
        }
        point
    }

    /// Applies the target's Gibbs move, keeping `current` if the moved
    /// point cannot be evaluated.
    fn refresh(&self, current: &mut Point, rng: &mut Xoshiro256PlusPlus) {
        let mut x = current.x.clone();
        if self.target.refresh(&mut x, rng) {
            if let Some(moved) = self.evaluate(x) {
                *current = moved;
            }
        }
    }

    fn transition<R: Rng>(
        &self,
        current: &mut Point,
        eps: f64,
        steps: usize,
        rng: &mut R,
    ) -> Transition {
        let mut momentum = self.sample_momentum(rng);
        let h0 = -current.logp + self.kinetic(&momentum);
        let Some(proposal) = self.integrate(current, &mut momentum, eps, steps) else {
            return Transition {
                accept_prob: 0.0,
                divergent: true,
            };
        };
        let h1 = -proposal.logp + self.kinetic(&momentum);
        let delta = h1 - h0;
        if !delta.is_finite() || delta > DIVERGENCE_THRESHOLD {
            return Transition {
                accept_prob: 0.0,
                divergent: true,
            };
        }
        let accept_prob = (-delta).exp().min(1.0);
        if rng.random::<f64>() < accept_prob {
            *current = proposal;
        }
        Transition {
            accept_prob,
            divergent: false,
        }
    }

    /// Doubles or halves a trial step until a single leapfrog step crosses
    /// acceptance probability 1/2.
    fn initial_step_size<R: Rng>(&self, current: &Point, rng: &mut R) -> f64 {
        let mut eps: f64 = 1.0;
        let log_accept = |eps: f64, rng: &mut R| -> f64 {
            let mut momentum = self.sample_momentum(rng);
            let h0 = -current.logp + self.kinetic(&momentum);
            match self.integrate(current, &mut momentum, eps, 1) {
                Some(p) => {
                    let d = h0 - (-p.logp + self.kinetic(&momentum));
                    if d.is_finite() {
                        d
                    } else {
                        f64::NEG_INFINITY
                    }
                }
                None => f64::NEG_INFINITY,
            }
        };
        let ln_half = 0.5f64.ln();
        let direction = if log_accept(eps, rng) > ln_half {
            1.0
        } else {
            -1.0
        };
        for _ in 0..60 {
            let la = log_accept(eps, rng);
            if direction * la <= direction * ln_half {
                break;
            }
            eps *= 2f64.powf(direction);
        }
        eps
    }
}

/// Nesterov dual averaging of `log ε` toward a target acceptance rate.
struct DualAveraging {
    mu: f64,
    target: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    count: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            target,
            h_bar: 0.0,
            log_eps: eps.ln(),
            log_eps_bar: 0.0,
            count: 0.0,
        }
    }

    fn update(&mut self, accept_prob: f64) {
        self.count += 1.0;
        let m = self.count;
        let w = 1.0 / (m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_eps = self.mu - m.sqrt() / Self::GAMMA * self.h_bar;
        let decay = m.powf(-Self::KAPPA);
        self.log_eps_bar = decay * self.log_eps + (1.0 - decay) * self.log_eps_bar;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Iterations (0-based, exclusive end) at which metric windows close.
fn metric_window_ends(warmup: usize) -> Vec<usize> {
    if warmup < 20 {
        return Vec::new();
    }
    let (init, term, base) = if warmup < 150 {
        let init = (0.15 * warmup as f64) as usize;
        let term = (0.1 * warmup as f64) as usize;
        (init, term, warmup - init - term)
    } else {
        (75, 50, 25)
    };
    let last = warmup - term;
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < last {
        let mut end = start + size;
        // absorb a trailing window that would be shorter than the next one
        if end + 2 * size > last {
            end = last;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    ends
}

#[derive(Default)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn push(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.n;
            *s += delta * (v - *m);
        }
    }

    /// Regularized variance, shrunk toward 1e-3.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

/// Runs one chain from `init`: warmup with adaptation, then `config.draws`
/// recorded transitions.
pub fn run_chain<T: LogDensity>(
    target: &T,
    init: &[f64],
    config: &HmcConfig,
    chain: usize,
) -> Result<ChainRun> {
    config.validate()?;
    let dim = target.dim();
    if init.len() != dim {
        return Err(CapError::Validation(format!(
            "initial point has {} entries, target dimension is {dim}",
            init.len()
        )));
    }
    let mut rng = config.chain_rng(chain);
    let mut ham = Hamiltonian {
        target,
        inv_metric: vec![1.0; dim],
    };
    let mut current = ham.evaluate(init.to_vec()).ok_or_else(|| {
        CapError::Initialization(format!(
            "chain {chain}: log-posterior or gradient is not finite at the initial point"
        ))
    })?;

    let jitter = |rng: &mut Xoshiro256PlusPlus, eps: f64| -> f64 {
        if config.step_jitter > 0.0 {
            eps * (1.0 + config.step_jitter * (2.0 * rng.random::<f64>() - 1.0))
        } else {
            eps
        }
    };

    let window_ends = if config.adapt_metric {
        metric_window_ends(config.warmup)
    } else {
        Vec::new()
    };
    let window_start = if window_ends.is_empty() {
        usize::MAX
    } else if config.warmup < 150 {
        (0.15 * config.warmup as f64) as usize
    } else {
        75
    };
    let mut next_window = 0;
    let mut welford = Welford::default();

    let mut adapt = DualAveraging::new(
        ham.initial_step_size(&current, &mut rng),
        config.target_accept,
    );
    let mut warmup_divergences = 0;
    for iter in 0..config.warmup {
        let eps = jitter(&mut rng, adapt.current());
        let t = ham.transition(&mut current, eps, config.leapfrog_steps, &mut rng);
        ham.refresh(&mut current, &mut rng);
        warmup_divergences += t.divergent as usize;
        adapt.update(t.accept_prob);

        if iter >= window_start && next_window < window_ends.len() {
            welford.push(&current.x);
            if iter + 1 == window_ends[next_window] {
                ham.inv_metric = welford.regularized();
                welford = Welford::default();
                next_window += 1;
                let restart = ham.initial_step_size(&current, &mut rng);
                adapt = DualAveraging::new(restart, config.target_accept);
            }
        }
    }
    let step_size = adapt.final_step();

    let mut run = ChainRun {
        draws: Vec::with_capacity(config.draws),
        log_density: Vec::with_capacity(config.draws),
        accept_prob: Vec::with_capacity(config.draws),
        divergent: Vec::with_capacity(config.draws),
        step_size,
        inv_metric: ham.inv_metric.clone(),
        warmup_divergences,
    };
    for _ in 0..config.draws {
        let eps = jitter(&mut rng, step_size);
        let t = ham.transition(&mut current, eps, config.leapfrog_steps, &mut rng);
        ham.refresh(&mut current, &mut rng);
        run.draws.push(current.x.clone());
        run.log_density.push(current.logp);
        run.accept_prob.push(t.accept_prob);
        run.divergent.push(t.divergent);
    }
    Ok(run)
}

/// Change in the Hamiltonian along one trajectory of `steps` leapfrog steps
/// with unit metric, from `x` with momentum `p`.
pub fn energy_error<T: LogDensity>(
    target: &T,
    x: &[f64],
    p: &[f64],
    eps: f64,
    steps: usize,
) -> Option<f64> {
    let ham = Hamiltonian {
        target,
        inv_metric: vec![1.0; x.len()],
    };
    let start = ham.evaluate(x.to_vec())?;
    let mut momentum = p.to_vec();
    let h0 = -start.logp + ham.kinetic(&momentum);
    let end = ham.integrate(&start, &mut momentum, eps, steps)?;
    Some(-end.logp + ham.kinetic(&momentum) - h0)
}
