//! Comparison schemes: ideal cooperation (IC), no cooperation (NC), projected
//! gradient ascent (PGD), max power and random power.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Mlp, MlpSpec, ParamStore, Tape, Var};
use crate::env::{sum_utility, utility_gradient, NetworkState, PowerVector, UtilityKind, DEFAULT_POWER_BUDGET};
use crate::error::{Error, Result};
use crate::fronthaul::FronthaulModel;
use crate::model::{check_batch, global_matrix, observation_matrix, PowerPolicy};
use crate::rng::{self, streams};

const NO_FRONTHAUL: FronthaulModel = FronthaulModel::Perfect;

/// Projected gradient ascent with Adam-style preconditioning and Armijo
/// backtracking. The direction is `∇f / (√v̂ + ε)` with `v̂` the bias-corrected
/// running mean of squared gradients; a trial step `Π(x + s·d)` is shrunk by
/// `decay` until it gains at least a fixed fraction of the first-order
/// prediction, and `s` grows back by `1/decay` after each accepted step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdConfig {
    /// Initial step size `s`.
    pub learning_rate: f64,
    /// Backtracking factor in (0, 1).
    pub decay: f64,
    /// Stop once `‖x − Π(x + ∇f)‖∞` is at most this.
    pub precision: f64,
    pub max_iterations: usize,
    pub power_budget: f64,
    /// Also start from `P·1` and a uniform-random point and keep the best.
    pub multi_start: bool,
    /// Seed of the random start.
    pub seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            decay: 0.5,
            precision: 1e-5,
            max_iterations: 10_000,
            power_budget: DEFAULT_POWER_BUDGET,
            multi_start: false,
            seed: 0,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.precision > 0.0) {
            return Err(Error::config("PGD precision must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::config("PGD needs a positive step size and a decay in (0, 1)"));
        }
        if !(self.power_budget > 0.0 && self.power_budget.is_finite()) {
            return Err(Error::config("power budget must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgdSolution {
    pub powers: PowerVector,
    pub utility: f64,
    /// Projected-gradient residual at `powers`.
    pub residual: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit; `powers` is then the best iterate.
    pub converged: bool,
}

/// `‖x − Π_[0,P](x + g)‖∞`
pub fn projected_residual(x: &[f64], grad: &[f64], budget: f64) -> f64 {
    x.iter()
        .zip(grad)
        .map(|(&x, &g)| (x - (x + g).clamp(0.0, budget)).abs())
        .fold(0.0, f64::max)
}

/// Sufficient-increase constant of the Armijo test.
const ARMIJO: f64 = 1e-4;
/// Step sizes below this cannot move an iterate in double precision.
const MIN_STEP: f64 = 1e-12;
const MAX_STEP: f64 = 1e6;

fn pgd_from(a: &NetworkState, kind: UtilityKind, cfg: &PgdConfig, start: Vec<f64>) -> PgdSolution {
    let p = cfg.power_budget;
    let (beta2, eps): (f64, f64) = (0.999, 1e-8);
    let mut x = start;
    let mut v = vec![0.0; x.len()];
    let mut step = cfg.learning_rate;
    let (mut value, mut grad) = utility_gradient(kind, a, &x);
    let mut iterations = 0;
    let mut residual = projected_residual(&x, &grad, p);
    while residual > cfg.precision && iterations < cfg.max_iterations {
        iterations += 1;
        let correction = 1.0 - beta2.powi(iterations as i32);
        let direction: Vec<f64> = v
            .iter_mut()
            .zip(&grad)
            .map(|(v, g)| {
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                g / ((*v / correction).sqrt() + eps)
            })
            .collect();
        // each coordinate moves along its own gradient sign, so `gain` >= 0
        let accepted = loop {
            let trial: Vec<f64> = x.iter().zip(&direction).map(|(x, d)| (x + step * d).clamp(0.0, p)).collect();
            let gain: f64 = trial.iter().zip(&x).zip(&grad).map(|((t, x), g)| g * (t - x)).sum();
            if sum_utility(kind, a, &trial) >= value + ARMIJO * gain {
                break Some(trial);
            }
            step *= cfg.decay;
            if step < MIN_STEP {
                break None;
            }
        };
        let Some(next) = accepted else { break };
        x = next;
        (value, grad) = utility_gradient(kind, a, &x);
        residual = projected_residual(&x, &grad, p);
        step = (step / cfg.decay).min(MAX_STEP);
    }
    PgdSolution {
        powers: PowerVector::new(x, p).expect("iterates stay in the box"),
        utility: value,
        residual,
        iterations,
        converged: residual <= cfg.precision,
    }
}

/// Projected gradient ascent from `x⁰ = (P/2)·1`, or from each of
/// `{P/2·1, P·1, uniform}` keeping the best when `multi_start` is set.
pub fn pgd_solve(a: &NetworkState, kind: UtilityKind, cfg: &PgdConfig) -> Result<PgdSolution> {
    cfg.validate()?;
    kind.validate()?;
    let n = a.size();
    let p = cfg.power_budget;
    let mut best = pgd_from(a, kind, cfg, vec![p / 2.0; n]);
    if cfg.multi_start {
        let mut rng = rng::stream(cfg.seed, streams::BASELINE);
        let random: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=p)).collect();
        for start in [vec![p; n], random] {
            let s = pgd_from(a, kind, cfg, start);
            if s.utility > best.utility {
                best = s;
            }
        }
    }
    Ok(best)
}

/// Runs PGD on every state.
pub fn pgd_batch(batch: &[NetworkState], kind: UtilityKind, cfg: &PgdConfig) -> Result<Vec<PgdSolution>> {
    batch.iter().map(|a| pgd_solve(a, kind, cfg)).collect()
}

pub fn max_power(n: usize) -> PowerVector {
    max_power_with(n, DEFAULT_POWER_BUDGET)
}

pub fn max_power_with(n: usize, budget: f64) -> PowerVector {
    PowerVector::new(vec![budget; n], budget).expect("budget is a valid power")
}

/// I.i.d. `Uniform[0, P]` entries.
pub fn random_power<R: Rng + ?Sized>(n: usize, rng: &mut R) -> PowerVector {
    random_power_with(n, DEFAULT_POWER_BUDGET, rng)
}

pub fn random_power_with<R: Rng + ?Sized>(n: usize, budget: f64, rng: &mut R) -> PowerVector {
    let values = (0..n).map(|_| rng.random_range(0.0..=budget)).collect();
    PowerVector::new(values, budget).expect("draws lie in the box")
}

/// Utility of a fixed power vector on every state.
pub fn fixed_policy_utilities(batch: &[NetworkState], kind: UtilityKind, powers: &[PowerVector]) -> Vec<f64> {
    batch
        .iter()
        .zip(powers)
        .map(|(a, x)| sum_utility(kind, a, x.as_slice()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineArchitecture {
    /// Affine layers including the output layer.
    pub depth: usize,
    pub hidden: usize,
}

impl BaselineArchitecture {
    pub const IC: Self = Self { depth: 12, hidden: 100 };
    /// Matches the per-EN decision network of the cooperative model.
    pub const NC: Self = Self { depth: 3, hidden: 50 };
}

/// Ideal cooperation: one network reads the full gain matrix and outputs
/// every EN's power.
#[derive(Clone, Debug)]
pub struct IcModel {
    n: usize,
    utility: UtilityKind,
    budget: f64,
    arch: BaselineArchitecture,
    seed: u64,
    store: ParamStore,
    net: Mlp,
}

impl IcModel {
    pub fn new(n: usize, utility: UtilityKind, arch: BaselineArchitecture, seed: u64) -> Result<Self> {
        Self::with_budget(n, utility, arch, DEFAULT_POWER_BUDGET, seed)
    }

    pub fn with_budget(n: usize, utility: UtilityKind, arch: BaselineArchitecture, budget: f64, seed: u64) -> Result<Self> {
        utility.validate()?;
        if n == 0 {
            return Err(Error::config("N must be positive"));
        }
        let mut store = ParamStore::new();
        let spec = MlpSpec::hidden_then_head(n * n, arch.depth, arch.hidden, n, Activation::ScaledSigmoid(budget));
        let net = Mlp::new("ic", spec, &mut store, &mut rng::stream(seed, streams::INIT))?;
        Ok(Self {
            n,
            utility,
            budget,
            arch,
            seed,
            store,
            net,
        })
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn architecture(&self) -> BaselineArchitecture {
        self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl PowerPolicy for IcModel {
    fn ens(&self) -> usize {
        self.n
    }

    fn power_budget(&self) -> f64 {
        self.budget
    }

    fn utility(&self) -> UtilityKind {
        self.utility
    }

    fn train_channel(&self) -> &FronthaulModel {
        &NO_FRONTHAUL
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward_powers(
        &mut self,
        tape: &mut Tape,
        batch: &[NetworkState],
        _channel: &FronthaulModel,
        _rng: &mut dyn RngCore,
    ) -> Result<Var> {
        check_batch(batch, self.n)?;
        let x = tape.input(global_matrix(batch));
        self.net.forward(tape, &mut self.store, x)
    }
}

/// No cooperation: EN `i` maps its own observation to its power.
#[derive(Clone, Debug)]
pub struct NcModel {
    utility: UtilityKind,
    budget: f64,
    arch: BaselineArchitecture,
    seed: u64,
    store: ParamStore,
    nets: Vec<Mlp>,
}

impl NcModel {
    pub fn new(n: usize, utility: UtilityKind, arch: BaselineArchitecture, seed: u64) -> Result<Self> {
        Self::with_budget(n, utility, arch, DEFAULT_POWER_BUDGET, seed)
    }

    pub fn with_budget(n: usize, utility: UtilityKind, arch: BaselineArchitecture, budget: f64, seed: u64) -> Result<Self> {
        utility.validate()?;
        if n == 0 {
            return Err(Error::config("N must be positive"));
        }
        let mut store = ParamStore::new();
        let mut init = rng::stream(seed, streams::INIT);
        let nets = (0..n)
            .map(|i| {
                let spec = MlpSpec::hidden_then_head(n, arch.depth, arch.hidden, 1, Activation::ScaledSigmoid(budget));
                Mlp::new(&format!("nc{i}"), spec, &mut store, &mut init)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            utility,
            budget,
            arch,
            seed,
            store,
            nets,
        })
    }

    pub fn network(&self, i: usize) -> &Mlp {
        &self.nets[i]
    }

    pub fn architecture(&self) -> BaselineArchitecture {
        self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl PowerPolicy for NcModel {
    fn ens(&self) -> usize {
        self.nets.len()
    }

    fn power_budget(&self) -> f64 {
        self.budget
    }

    fn utility(&self) -> UtilityKind {
        self.utility
    }

    fn train_channel(&self) -> &FronthaulModel {
        &NO_FRONTHAUL
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward_powers(
        &mut self,
        tape: &mut Tape,
        batch: &[NetworkState],
        _channel: &FronthaulModel,
        _rng: &mut dyn RngCore,
    ) -> Result<Var> {
        check_batch(batch, self.nets.len())?;
        let mut outs = Vec::with_capacity(self.nets.len());
        for (i, net) in self.nets.iter().enumerate() {
            let obs = tape.input(observation_matrix(batch, i, false));
            outs.push(net.forward(tape, &mut self.store, obs)?);
        }
        tape.concat(&outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::sample_batch;
    use crate::rng::seeded;
    use ndarray::array;

    fn state(g: ndarray::Array2<f64>) -> NetworkState {
        NetworkState::new(g).unwrap()
    }

    #[test]
    fn single_link_goes_to_full_power() {
        let a = state(array![[1.0]]);
        let s = pgd_solve(&a, UtilityKind::SumRate, &PgdConfig::default()).unwrap();
        assert!(s.converged);
        assert_eq!(s.powers.as_slice(), &[10.0]);
        assert!((s.utility - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_grid_search_on_strong_interference() {
        // from the symmetric start PGD stays on the diagonal, so the random
        // start is what reaches the one-user-off optimum
        let a = state(array![[1.0, 5.0], [5.0, 1.0]]);
        let cfg = PgdConfig {
            multi_start: true,
            ..PgdConfig::default()
        };
        let s = pgd_solve(&a, UtilityKind::SumRate, &cfg).unwrap();
        let mut grid_best = f64::NEG_INFINITY;
        for i in 0..=1000 {
            for j in 0..=1000 {
                let x = [i as f64 * 0.01, j as f64 * 0.01];
                grid_best = grid_best.max(sum_utility(UtilityKind::SumRate, &a, &x));
            }
        }
        assert!(s.utility >= grid_best - 1e-3, "{} vs {grid_best}", s.utility);
    }

    #[test]
    fn stationarity_at_return() {
        let batch = sample_batch(50, 3, &mut seeded(11));
        for kind in [UtilityKind::SumRate, UtilityKind::energy_efficiency()] {
            for a in &batch {
                let s = pgd_solve(a, kind, &PgdConfig::default()).unwrap();
                if s.converged {
                    let (_, g) = utility_gradient(kind, a, s.powers.as_slice());
                    assert!(projected_residual(s.powers.as_slice(), &g, 10.0) <= 1e-5);
                } else {
                    assert!(s.residual > 1e-5);
                }
            }
        }
    }

    #[test]
    fn pgd_is_deterministic() {
        let a = sample_batch(1, 4, &mut seeded(2)).remove(0);
        let cfg = PgdConfig {
            multi_start: true,
            ..PgdConfig::default()
        };
        assert_eq!(
            pgd_solve(&a, UtilityKind::SumRate, &cfg).unwrap(),
            pgd_solve(&a, UtilityKind::SumRate, &cfg).unwrap()
        );
    }

    #[test]
    fn pgd_never_worse_than_its_start() {
        let batch = sample_batch(100, 4, &mut seeded(3));
        let mut rng = seeded(4);
        for a in &batch {
            for start in [vec![10.0; 4], random_power(4, &mut rng).into_vec()] {
                let u0 = sum_utility(UtilityKind::SumRate, a, &start);
                let s = pgd_from(a, UtilityKind::SumRate, &PgdConfig::default(), start);
                assert!(s.utility >= u0 - 1e-12);
            }
        }
    }

    #[test]
    fn bad_pgd_config() {
        let a = state(array![[1.0]]);
        for cfg in [
            PgdConfig { precision: 0.0, ..PgdConfig::default() },
            PgdConfig { decay: 1.0, ..PgdConfig::default() },
        ] {
            assert!(matches!(pgd_solve(&a, UtilityKind::SumRate, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn projected_residual_ignores_blocked_directions() {
        // pushing up at the upper bound and down at zero is stationary
        assert_eq!(projected_residual(&[10.0, 0.0], &[3.0, -2.0], 10.0), 0.0);
        assert_eq!(projected_residual(&[5.0], &[0.25], 10.0), 0.25);
        assert_eq!(projected_residual(&[9.5], &[3.0], 10.0), 0.5);
    }

    #[test]
    fn naive_policies() {
        assert_eq!(max_power(3).as_slice(), &[10.0, 10.0, 10.0]);
        let mut rng = seeded(5);
        let draws: Vec<f64> = (0..100_000).flat_map(|_| random_power(1, &mut rng).into_vec()).collect();
        assert!(draws.iter().all(|&x| (0.0..=10.0).contains(&x)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 5.0).abs() < 0.05, "{mean}");
        let a = state(array![[1.0, 0.5], [0.2, 2.0]]);
        let u = fixed_policy_utilities(std::slice::from_ref(&a), UtilityKind::SumRate, &[max_power(2)]);
        assert_eq!(u[0], sum_utility(UtilityKind::SumRate, &a, &[10.0, 10.0]));
    }

    #[test]
    fn nc_output_depends_only_on_own_column() {
        let n = 3;
        let mut nc = NcModel::new(n, UtilityKind::SumRate, BaselineArchitecture { depth: 3, hidden: 8 }, 1).unwrap();
        let base = sample_batch(1, n, &mut seeded(6));
        let x0 = nc.powers(&base, &NO_FRONTHAUL, &mut seeded(0)).unwrap();
        let mut g = base[0].gains().clone();
        g.column_mut(0).mapv_inplace(|v| v * 3.0 + 1.0);
        let x1 = nc.powers(&[state(g)], &NO_FRONTHAUL, &mut seeded(0)).unwrap();
        assert_ne!(x0[0].as_slice()[0], x1[0].as_slice()[0]);
        assert_eq!(x0[0].as_slice()[1..], x1[0].as_slice()[1..]);
    }

    #[test]
    fn ic_shapes() {
        let mut ic = IcModel::new(3, UtilityKind::SumRate, BaselineArchitecture { depth: 4, hidden: 10 }, 1).unwrap();
        assert_eq!(ic.network().input_width(), 9);
        let batch = sample_batch(7, 3, &mut seeded(1));
        let x = ic.powers(&batch, &NO_FRONTHAUL, &mut seeded(0)).unwrap();
        assert_eq!(x.len(), 7);
        assert!(x.iter().all(|p| p.len() == 3));
    }
}
