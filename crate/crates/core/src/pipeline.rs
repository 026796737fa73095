//! Explore-then-commit runs, the linear comparator, regret accounting and
//! scaling sweeps.

use std::fmt;
use std::ops::Range;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::de::{Deserializer, Error as _};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpc::{default_memory, default_step, GpcController, PerturbationPolicy, SurrogateModel};
use crate::lds::{
    check_strong_controllability, check_strong_stability, make_costs, make_disturbance, step_unchecked, CostGen,
    CostKind, CostParams, DisturbanceGen, DisturbanceKind, DisturbanceParams, Instance, InstanceSpec, LinSystem,
    StabilityCertificate, StageCost, Trajectory,
};
use crate::numerics::{dot, inverse, spectral_radius, Mat};
use crate::rng::{gaussian_mat, streams, CounterRng};
use crate::scalar::Real;
use crate::sysid::{estimate_disturbance, estimate_moments, explore, recover_system, recovery_error, ExplorationPlan, SysIdEstimate};

pub const REGRET_NOTE: &str =
    "comparator is the best linear controller found by search, so regret is a lower bound on regret against the true optimum";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// A parameter that is either `"auto"` or an explicit value.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Setting<T> {
    #[default]
    Auto,
    Value(T),
}

impl<T: Copy> Setting<T> {
    pub fn value(&self) -> Option<T> {
        match self {
            Setting::Auto => None,
            Setting::Value(v) => Some(*v),
        }
    }
}

impl<T: Serialize> Serialize for Setting<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Setting::Auto => s.serialize_str("auto"),
            Setting::Value(v) => v.serialize(s),
        }
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Setting<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw<T> {
            Text(String),
            Value(T),
        }
        match Raw::<T>::deserialize(d)? {
            Raw::Text(s) if s == "auto" => Ok(Setting::Auto),
            Raw::Text(s) => Err(D::Error::custom(format!("expected \"auto\" or a number, got \"{s}\""))),
            Raw::Value(v) => Ok(Setting::Value(v)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExploreScale {
    /// `eta_t` in `{-1, +1}^{d_u}`.
    #[default]
    #[serde(rename = "unit")]
    Unit,
    /// `eta_t` in `{-W, +W}^{d_u}`, moments rescaled by `W^-2`.
    #[serde(rename = "W")]
    Disturbance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    pub kind: DisturbanceKind,
    #[serde(default)]
    pub params: DisturbanceParams,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        DisturbanceSpec {
            kind: DisturbanceKind::Sinusoid,
            params: DisturbanceParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub kind: CostKind,
    #[serde(default)]
    pub params: CostParams,
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec {
            kind: CostKind::Quadratic,
            params: CostParams::default(),
        }
    }
}

/// An explicit plant with its stability certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "L")]
    pub l: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparatorConfig {
    pub restarts: usize,
    pub max_sweeps: usize,
    pub initial_step: f64,
    pub min_step: f64,
    /// Relative size of random restart offsets.
    pub spread: f64,
}

impl Default for ComparatorConfig {
    fn default() -> Self {
        ComparatorConfig {
            restarts: 20,
            max_sweeps: 60,
            initial_step: 0.25,
            min_step: 1e-3,
            spread: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    #[serde(rename = "T")]
    pub horizons: Vec<usize>,
    #[serde(rename = "T0")]
    pub explore_horizons: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            horizons: (10..=15).map(|p| 1usize << p).collect(),
            explore_horizons: (10..=16).map(|p| 1usize << p).collect(),
            seeds: (0..5).collect(),
        }
    }
}

fn default_delta() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `[d_x, d_u]`.
    pub dims: [usize; 2],
    pub kappa: f64,
    pub gamma: f64,
    #[serde(default)]
    pub k: Setting<usize>,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "T0", default)]
    pub t0: Setting<usize>,
    #[serde(rename = "H", default)]
    pub memory: Setting<usize>,
    #[serde(default)]
    pub eta: Setting<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(rename = "W")]
    pub w_bound: f64,
    #[serde(rename = "G", default)]
    pub g_bound: Setting<f64>,
    #[serde(default)]
    pub disturbance: DisturbanceSpec,
    #[serde(default)]
    pub cost: CostSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub explore_scale: ExploreScale,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub instance: Option<InstanceConfig>,
    #[serde(default)]
    pub comparator: ComparatorConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

/// `max(ceil(T^{2/3} ln(1/delta)), k + 10)`.
pub fn auto_explore_horizon(horizon: usize, delta: f64, k: usize) -> usize {
    let v = ((horizon as f64).powf(2.0 / 3.0) * (1.0 / delta).ln()).ceil();
    (v as usize).max(k + 10)
}

impl ExperimentConfig {
    /// Parses JSON, naming the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".to_string() } else { path }, e.inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Minimal settings used by examples and tests.
    pub fn example() -> Self {
        ExperimentConfig {
            dims: [3, 2],
            kappa: 2.0,
            gamma: 0.3,
            k: Setting::Auto,
            horizon: 4096,
            t0: Setting::Auto,
            memory: Setting::Auto,
            eta: Setting::Auto,
            delta: 0.1,
            w_bound: 1.0,
            g_bound: Setting::Auto,
            disturbance: DisturbanceSpec::default(),
            cost: CostSpec::default(),
            seed: 7,
            explore_scale: ExploreScale::Unit,
            precision: Precision::F64,
            instance: None,
            comparator: ComparatorConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [dx, du] = self.dims;
        if dx == 0 || du == 0 {
            return Err(Error::config("dims", "dimensions must be >= 1"));
        }
        if !(self.kappa >= 1.0) || !self.kappa.is_finite() {
            return Err(Error::config("kappa", "must be a finite value >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma", "must lie in (0, 1)"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", format!("must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.w_bound >= 0.0) || !self.w_bound.is_finite() {
            return Err(Error::config("W", "must be a finite value >= 0"));
        }
        if self.horizon < 2 {
            return Err(Error::config("T", "must be >= 2"));
        }
        if let Some(g) = self.g_bound.value() {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::config("G", "must be positive"));
            }
        }
        if let Some(eta) = self.eta.value() {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(Error::config("eta", "must be positive"));
            }
        }
        if self.memory.value() == Some(0) {
            return Err(Error::config("H", "must be >= 1"));
        }
        if let Some(k) = self.k.value() {
            if k == 0 {
                return Err(Error::config("k", "must be >= 1"));
            }
            if k > dx {
                return Err(Error::config("k", format!("controllability index cannot exceed d_x = {dx}")));
            }
        }
        if self.explore_scale == ExploreScale::Disturbance && !(self.w_bound > 0.0) {
            return Err(Error::config("explore_scale", "scaling by W requires W > 0"));
        }
        self.check_explore_horizon(self.k.value())?;
        if let Some(inst) = &self.instance {
            let shapes = [
                ("instance.A", &inst.a, (dx, dx)),
                ("instance.B", &inst.b, (dx, du)),
                ("instance.K", &inst.k, (du, dx)),
                ("instance.Q", &inst.q, (dx, dx)),
                ("instance.L", &inst.l, (dx, dx)),
            ];
            for (field, rows, shape) in shapes {
                let m = Mat::<f64>::from_rows(rows).map_err(|e| Error::config(field, e.to_string()))?;
                if m.shape() != shape {
                    return Err(Error::config(field, format!("expected {shape:?}, got {:?}", m.shape())));
                }
            }
        }
        if self.comparator.min_step <= 0.0 || self.comparator.initial_step < self.comparator.min_step {
            return Err(Error::config("comparator", "need 0 < min_step <= initial_step"));
        }
        Ok(())
    }

    fn check_explore_horizon(&self, k: Option<usize>) -> Result<()> {
        let t0 = match (self.t0.value(), k) {
            (Some(t0), _) => t0,
            (None, Some(k)) => auto_explore_horizon(self.horizon, self.delta, k),
            (None, None) => return Ok(()),
        };
        if let Some(k) = k {
            if t0 <= k {
                return Err(Error::config("T0", format!("T0 = {t0} must exceed k = {k}")));
            }
        }
        if self.horizon <= t0 {
            return Err(Error::config("T", format!("T = {} must exceed T0 = {t0}", self.horizon)));
        }
        Ok(())
    }

    pub fn explore_scale_value(&self) -> f64 {
        match self.explore_scale {
            ExploreScale::Unit => 1.0,
            ExploreScale::Disturbance => self.w_bound,
        }
    }
}

/// Every parameter after auto rules are applied.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolvedParams {
    pub d_x: usize,
    pub d_u: usize,
    pub kappa: f64,
    pub gamma: f64,
    pub k: usize,
    pub kappa_c: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "T0")]
    pub t0: usize,
    #[serde(rename = "H")]
    pub memory: usize,
    pub eta: f64,
    pub delta: f64,
    #[serde(rename = "W")]
    pub w_bound: f64,
    #[serde(rename = "G")]
    pub g_bound: f64,
    pub explore_scale: f64,
    pub instance_seed: u64,
    pub run_seed: u64,
}

/// An instance with its disturbance and cost generators and resolved parameters.
#[derive(Clone, Debug)]
pub struct Experiment<T: Real> {
    pub instance: Instance<T>,
    pub disturbance: DisturbanceGen<T>,
    pub costs: CostGen<T>,
    pub params: ResolvedParams,
    pub comparator: ComparatorConfig,
}

fn supplied_instance<T: Real>(cfg: &ExperimentConfig, inst: &InstanceConfig) -> Result<Instance<T>> {
    let mat = |rows: &Vec<Vec<f64>>| Mat::<f64>::from_rows(rows).map(|m| m.cast::<T>());
    let system = LinSystem::new(mat(&inst.a)?, mat(&inst.b)?)?;
    let certificate = StabilityCertificate {
        k: mat(&inst.k)?,
        q: mat(&inst.q)?,
        l: mat(&inst.l)?,
        kappa: T::lit(cfg.kappa),
        gamma: T::lit(cfg.gamma),
    };
    let report = check_strong_stability(&system, &certificate);
    if !report.pass {
        return Err(Error::Precondition(format!(
            "supplied certificate fails: {:?}",
            report.violated()
        )));
    }
    let a_prime = system.closed_loop(&certificate.k)?;
    let mut found = None;
    for k in 1..=cfg.dims[0] {
        let rep = check_strong_controllability(&a_prime, system.b(), k, f64::INFINITY)?;
        if rep.full_row_rank {
            found = Some((k, rep.kappa_c_required));
            break;
        }
    }
    let (k_min, kappa_c) = found.ok_or_else(|| {
        Error::Precondition("supplied (A - BK, B) is not controllable within d_x steps".into())
    })?;
    Ok(Instance {
        system,
        certificate,
        k: k_min,
        kappa_c,
    })
}

/// Builds the experiment for `cfg`; `run_seed` drives the disturbance and
/// exploration while `cfg.seed` fixes the instance.
pub fn build_experiment<T: Real>(cfg: &ExperimentConfig, run_seed: u64) -> Result<Experiment<T>> {
    cfg.validate()?;
    let [dx, du] = cfg.dims;
    let instance = match &cfg.instance {
        Some(inst) => supplied_instance(cfg, inst)?,
        None => {
            let mut spec = InstanceSpec::new(dx, du, cfg.kappa, cfg.gamma);
            if let Some(k) = cfg.k.value() {
                spec.max_index = k;
            }
            crate::lds::synth_instance(&spec, cfg.seed)?
        }
    };
    let k = match cfg.k.value() {
        Some(k) => {
            let a_prime = instance.system.closed_loop(&instance.certificate.k)?;
            let rep = check_strong_controllability(&a_prime, instance.system.b(), k, f64::INFINITY)?;
            if !rep.full_row_rank {
                return Err(Error::Precondition(format!("(A - BK, B) is not controllable at k = {k}")));
            }
            k
        }
        None => instance.k,
    };
    let a_prime = instance.system.closed_loop(&instance.certificate.k)?;
    let kappa_c = check_strong_controllability(&a_prime, instance.system.b(), k, f64::INFINITY)?.kappa_c_required;
    cfg.check_explore_horizon(Some(k))?;
    let disturbance = make_disturbance(cfg.disturbance.kind, cfg.w_bound, dx, &cfg.disturbance.params, run_seed)?;
    let costs: CostGen<T> = make_costs(cfg.cost.kind, &cfg.cost.params, dx, du)?;
    let g_bound = cfg.g_bound.value().unwrap_or_else(|| costs.gradient_bound());
    let horizon = cfg.horizon;
    let t0 = cfg.t0.value().unwrap_or_else(|| auto_explore_horizon(horizon, cfg.delta, k));
    let params = ResolvedParams {
        d_x: dx,
        d_u: du,
        kappa: cfg.kappa,
        gamma: cfg.gamma,
        k,
        kappa_c,
        horizon,
        t0,
        memory: cfg.memory.value().unwrap_or_else(|| default_memory(cfg.kappa, cfg.gamma, horizon)),
        eta: cfg.eta.value().unwrap_or_else(|| default_step(g_bound, cfg.w_bound, horizon)),
        delta: cfg.delta,
        w_bound: cfg.w_bound,
        g_bound,
        explore_scale: cfg.explore_scale_value(),
        instance_seed: cfg.seed,
        run_seed,
    };
    Ok(Experiment {
        instance,
        disturbance,
        costs,
        params,
        comparator: cfg.comparator.clone(),
    })
}

// ---------------------------------------------------------------------------
// Comparator
// ---------------------------------------------------------------------------

/// Cost of `u_t = -K x_t` from rest, summed over `range`; no stability check.
fn linear_cost_unchecked<T: Real, S: StageCost<T> + ?Sized>(
    sys: &LinSystem<T>,
    w: &[Vec<T>],
    costs: &S,
    k: &Mat<T>,
    range: Range<usize>,
) -> T {
    let (n, m) = (sys.state_dim(), sys.control_dim());
    let mut x = vec![T::zero(); n];
    let mut next = vec![T::zero(); n];
    let mut u = vec![T::zero(); m];
    let mut total = T::zero();
    for (t, w_t) in w.iter().enumerate().take(range.end) {
        k.matvec_into(&x, &mut u);
        u.iter_mut().for_each(|v| *v = -*v);
        if t >= range.start {
            total = total + costs.eval(t, &x, &u);
        }
        sys.a().matvec_into(&x, &mut next);
        for i in 0..n {
            next[i] = next[i] + dot(sys.b().row(i), &u) + w_t[i];
        }
        std::mem::swap(&mut x, &mut next);
    }
    total
}

/// `J(K)`: cost of `u_t = -K x_t` on the true system over the steps in `range`.
pub fn comparator_cost<T: Real, S: StageCost<T> + ?Sized>(
    sys: &LinSystem<T>,
    w: &[Vec<T>],
    costs: &S,
    k: &Mat<T>,
    range: Range<usize>,
) -> Result<T> {
    let a_cl = sys.closed_loop(k)?;
    let radius = spectral_radius(&a_cl)?.as_f64();
    if !(radius < 1.0) {
        return Err(Error::Unstable { radius, limit: 1.0 });
    }
    if range.end > w.len() || range.start > range.end {
        return Err(Error::shape(
            "comparator_cost",
            format!("range {range:?} with {} disturbances", w.len()),
        ));
    }
    Ok(linear_cost_unchecked(sys, w, costs, k, range))
}

/// Gain of the infinite-horizon discrete Riccati equation, by value iteration.
pub fn riccati_gain<T: Real>(a: &Mat<T>, b: &Mat<T>, q: &Mat<T>, r: &Mat<T>) -> Result<Mat<T>> {
    let (a, b, q, r) = (a.cast::<f64>(), b.cast::<f64>(), q.cast::<f64>(), r.cast::<f64>());
    let (at, bt) = (a.transpose(), b.transpose());
    let mut p = q.clone();
    for _ in 0..100_000 {
        let s = &r + &(&(&bt * &p) * &b);
        let s_inv = inverse(&s).map_err(|_| Error::Search("R + B^T P B is singular".into()))?;
        let k = &(&(&s_inv * &bt) * &p) * &a;
        let p_next = &q + &(&(&at * &p) * &(&a - &(&b * &k)));
        let p_next = &(&p_next + &p_next.transpose()).scale(0.5);
        let diff = (p_next - &p).max_abs();
        let scale = p.max_abs().max(1.0);
        p = p_next.clone();
        if !diff.is_finite() {
            break;
        }
        if diff <= 1e-13 * scale {
            return Ok(k.cast());
        }
    }
    Err(Error::Search("Riccati iteration did not converge".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateSource {
    Stabilizer,
    Riccati,
    Search(usize),
}

impl fmt::Display for CandidateSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CandidateSource::Stabilizer => f.write_str("stabilizer"),
            CandidateSource::Riccati => f.write_str("riccati"),
            CandidateSource::Search(i) => write!(f, "search-{i}"),
        }
    }
}

impl Serialize for CandidateSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparatorResult<T> {
    pub k_star: Mat<T>,
    pub j_star: T,
    pub source: CandidateSource,
    pub evaluations: usize,
}

struct SearchProblem<'a, T: Real> {
    sys: &'a LinSystem<T>,
    w: &'a [Vec<T>],
    costs: &'a CostGen<T>,
    horizon: usize,
    radius_limit: f64,
}

impl<T: Real> SearchProblem<'_, T> {
    fn admissible(&self, k: &Mat<T>) -> bool {
        self.sys
            .closed_loop(k)
            .and_then(|a| spectral_radius(&a))
            .is_ok_and(|r| r.as_f64() <= self.radius_limit)
    }

    fn cost(&self, k: &Mat<T>) -> T {
        linear_cost_unchecked(self.sys, self.w, self.costs, k, 0..self.horizon)
    }

    /// Coordinate descent with halving steps; returns `(K, J, evaluations)`.
    fn descend(&self, start: Mat<T>, cfg: &ComparatorConfig) -> (Mat<T>, T, usize) {
        let mut k = start;
        let mut best = self.cost(&k);
        let mut evals = 1;
        let mut step = cfg.initial_step;
        for _ in 0..cfg.max_sweeps {
            let mut improved = false;
            for idx in 0..k.as_slice().len() {
                for sign in [1.0, -1.0] {
                    let mut cand = k.clone();
                    cand.as_mut_slice()[idx] = cand.as_slice()[idx] + T::lit(sign * step);
                    if !self.admissible(&cand) {
                        continue;
                    }
                    let j = self.cost(&cand);
                    evals += 1;
                    if j < best {
                        best = j;
                        k = cand;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                step *= 0.5;
                if step < cfg.min_step {
                    break;
                }
            }
        }
        (k, best, evals)
    }
}

/// Best linear controller found among the stabilizer, the Riccati gain for the
/// averaged quadratic cost, and multi-start coordinate descent, all restricted
/// to spectral radius `<= 1 - gamma/4`.
pub fn best_linear_comparator<T: Real>(
    sys: &LinSystem<T>,
    kbar: &Mat<T>,
    gamma: f64,
    w: &[Vec<T>],
    costs: &CostGen<T>,
    horizon: usize,
    cfg: &ComparatorConfig,
    seed: u64,
) -> Result<ComparatorResult<T>> {
    if w.len() < horizon {
        return Err(Error::shape("best_linear_comparator", "fewer disturbances than steps"));
    }
    let problem = SearchProblem {
        sys,
        w,
        costs,
        horizon,
        radius_limit: 1.0 - gamma / 4.0,
    };
    let mut pool: Vec<(CandidateSource, Mat<T>)> = Vec::new();
    if problem.admissible(kbar) {
        pool.push((CandidateSource::Stabilizer, kbar.clone()));
    }
    let (q, r) = costs.average_quadratic();
    if let Ok(k) = riccati_gain(sys.a(), sys.b(), &q, &r) {
        if problem.admissible(&k) {
            pool.push((CandidateSource::Riccati, k));
        }
    }
    if pool.is_empty() {
        return Err(Error::Search("no admissible starting controller".into()));
    }
    let spread = cfg.spread * kbar.frobenius_norm().as_f64().max(0.1) / (kbar.as_slice().len() as f64).sqrt();
    let source = CounterRng::new(seed, streams::COMPARATOR);
    let starts: Vec<(CandidateSource, Mat<T>)> = (0..cfg.restarts)
        .filter_map(|i| {
            if let Some((_, k)) = pool.get(i) {
                return Some((CandidateSource::Search(i), k.clone()));
            }
            let mut rng = source.at(i as u64);
            for _ in 0..50 {
                let base = &pool[rng.random_range(0..pool.len())].1;
                let noise: Mat<T> = gaussian_mat(&mut rng, base.rows(), base.cols());
                let cand = base + &noise.scale(T::lit(spread));
                if problem.admissible(&cand) {
                    return Some((CandidateSource::Search(i), cand));
                }
            }
            None
        })
        .collect();

    let mut results: Vec<(CandidateSource, Mat<T>, T, usize)> = pool
        .par_iter()
        .map(|(src, k)| (*src, k.clone(), problem.cost(k), 1))
        .collect();
    results.extend(
        starts
            .into_par_iter()
            .map(|(src, k)| {
                let (k, j, e) = problem.descend(k, cfg);
                (src, k, j, e)
            })
            .collect::<Vec<_>>(),
    );
    let evaluations = results.iter().map(|r| r.3).sum();
    // First minimum in pool order keeps the choice independent of scheduling.
    let (source, k_star, j_star, _) = results
        .into_iter()
        .reduce(|best, cur| if cur.2 < best.2 { cur } else { best })
        .expect("pool is nonempty");
    Ok(ComparatorResult {
        k_star,
        j_star,
        source,
        evaluations,
    })
}

pub fn compute_regret(j_alg: f64, j_star: f64) -> f64 {
    j_alg - j_star
}

// ---------------------------------------------------------------------------
// Explore, identify, control
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct RunOptions<T> {
    /// Replaces the identified `(A_hat, B_hat)` used in the second phase.
    pub model_override: Option<(Mat<T>, Mat<T>)>,
    /// Starts the second phase at `t = 0` with no exploration.
    pub skip_exploration: bool,
    /// Runs the comparator search and reports regret.
    pub comparator: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparatorSummary {
    pub j_star: f64,
    pub k_star: Vec<Vec<f64>>,
    pub source: String,
    pub evaluations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegretReport {
    pub params: ResolvedParams,
    /// First step of the gradient phase.
    pub phase2_start: usize,
    pub j_alg: f64,
    pub j_phase1: f64,
    pub j_phase2: f64,
    pub comparator: Option<ComparatorSummary>,
    pub regret: Option<f64>,
    pub note: &'static str,
    pub eps_a: Option<f64>,
    pub eps_b: Option<f64>,
    /// `16 G n kappa^8 gamma^-2 max(W,1)^2`.
    pub phase1_step_bound: f64,
    pub phase1_max_step_cost: f64,
    pub cost_series: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Algorithm1Run<T: Real> {
    pub report: RegretReport,
    /// `estimated` holds `w_hat_t` for every step (zero before `T0`).
    pub trajectory: Trajectory<T>,
    pub estimate: Option<SysIdEstimate<T>>,
    pub etas: Vec<Vec<T>>,
    pub model: (Mat<T>, Mat<T>),
    pub phase2_start: usize,
    pub final_policy: PerturbationPolicy<T>,
}

pub fn phase1_step_bound(p: &ResolvedParams) -> f64 {
    16.0 * p.g_bound * p.d_u as f64 * p.kappa.powi(8) * p.gamma.powi(-2) * p.w_bound.max(1.0).powi(2)
}

pub fn run_algorithm1<T: Real>(exp: &Experiment<T>, opts: &RunOptions<T>) -> Result<Algorithm1Run<T>> {
    let p = &exp.params;
    let sys = &exp.instance.system;
    let kbar = &exp.instance.certificate.k;
    let horizon = p.horizon;
    let w_seq = exp.disturbance.sequence(horizon);

    let (mut traj, etas, estimate, model, start) = if opts.skip_exploration {
        let model = opts
            .model_override
            .clone()
            .unwrap_or_else(|| (sys.a().clone(), sys.b().clone()));
        let traj = Trajectory::with_initial_state(vec![T::zero(); p.d_x]);
        (traj, Vec::new(), None, model, 0)
    } else {
        if p.t0 + 1 > horizon {
            return Err(Error::config("T0", "exploration does not fit in the horizon"));
        }
        let plan = ExplorationPlan {
            t0: p.t0,
            k: p.k,
            seed: p.run_seed,
            scale: p.explore_scale,
        };
        let run = explore(sys, kbar, &plan, &w_seq, &exp.costs)?;
        let moments = estimate_moments(&run.trajectory.states, &run.etas, p.k, p.t0, p.explore_scale)?;
        let recovered = recover_system(&moments, kbar);
        let (estimate, model) = match (&opts.model_override, recovered) {
            (Some(m), rec) => (rec.ok(), m.clone()),
            (None, Ok(est)) => {
                let m = (est.a_hat.clone(), est.b_hat.clone());
                (Some(est), m)
            }
            (None, Err(e)) => return Err(e),
        };
        let mut traj = run.trajectory;
        let mut est_w = vec![vec![T::zero(); p.d_x]; p.t0];
        est_w.push(traj.states[p.t0 + 1].clone());
        traj.estimated = Some(est_w);
        (traj, run.etas, estimate, model, p.t0 + 1)
    };
    log::debug!("second phase from t = {start} with H = {} and eta = {:e}", p.memory, p.eta);

    let surrogate = SurrogateModel::new(&model.0, &model.1, kbar, p.memory)?;
    let mut ctrl = GpcController::new(surrogate, p.kappa, p.gamma, p.eta)?;
    let mut estimated = traj.estimated.take().unwrap_or_default();
    if start > 0 {
        ctrl.set_latest(estimated[start - 1].clone());
    }
    for t in start..horizon {
        let x = traj.states[t].clone();
        let u = ctrl.act(&x);
        let w = w_seq[t].clone();
        let cost = exp.costs.eval(t, &x, &u);
        let next = step_unchecked(sys.a(), sys.b(), &x, &u, &w);
        let w_hat = estimate_disturbance(&next, &x, &u, &model.0, &model.1)?;
        ctrl.update(t, &exp.costs, w_hat.clone())?;
        estimated.push(w_hat);
        traj.push(u, w, cost, next);
    }
    traj.estimated = Some(estimated);
    if let Some(t) = traj.costs.iter().position(|c| !c.is_finite()) {
        let eps = estimate.as_ref().map(|est| recovery_error(&est.a_hat, &est.b_hat, sys));
        return Err(Error::Precondition(format!(
            "closed loop on the estimated model diverged at t = {t} (model errors {eps:?})"
        )));
    }

    let cost_series: Vec<f64> = traj.costs.iter().map(|c| c.as_f64()).collect();
    let j_phase1: f64 = cost_series[..start].iter().sum();
    let j_phase2: f64 = cost_series[start..].iter().sum();
    let j_alg = j_phase1 + j_phase2;
    let comparator = if opts.comparator {
        let res = best_linear_comparator(sys, kbar, p.gamma, &w_seq, &exp.costs, horizon, &exp.comparator, p.run_seed)?;
        Some(ComparatorSummary {
            j_star: res.j_star.as_f64(),
            k_star: res.k_star.to_f64_rows(),
            source: res.source.to_string(),
            evaluations: res.evaluations,
        })
    } else {
        None
    };
    let (eps_a, eps_b) = match &estimate {
        Some(est) => {
            let (a, b) = recovery_error(&est.a_hat, &est.b_hat, sys);
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    let report = RegretReport {
        params: p.clone(),
        phase2_start: start,
        j_alg,
        j_phase1,
        j_phase2,
        regret: comparator.as_ref().map(|c| compute_regret(j_alg, c.j_star)),
        comparator,
        note: REGRET_NOTE,
        eps_a,
        eps_b,
        phase1_step_bound: phase1_step_bound(p),
        phase1_max_step_cost: cost_series[..start].iter().copied().fold(0.0, f64::max),
        cost_series,
    };
    Ok(Algorithm1Run {
        report,
        trajectory: traj,
        estimate,
        etas,
        model,
        phase2_start: start,
        final_policy: ctrl.policy().clone(),
    })
}

/// The online controller on the known system, with the same report layout.
pub fn run_known_experiment<T: Real>(exp: &Experiment<T>, comparator: bool) -> Result<Algorithm1Run<T>> {
    run_algorithm1(
        exp,
        &RunOptions {
            model_override: None,
            skip_exploration: true,
            comparator,
        },
    )
}

// ---------------------------------------------------------------------------
// Sweeps and fits
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "T0")]
    pub t0: usize,
    pub regret: Option<f64>,
    #[serde(rename = "eps_A")]
    pub eps_a: Option<f64>,
    #[serde(rename = "eps_B")]
    pub eps_b: Option<f64>,
    pub seed: u64,
    pub runtime_ms: u64,
}

fn elapsed_ms(start: Instant, timing: bool) -> u64 {
    if timing {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

/// Full runs with regret for every `(T, seed)`, sorted by `(T, seed)`.
pub fn regret_sweep<T: Real>(cfg: &ExperimentConfig, horizons: &[usize], seeds: &[u64], timing: bool) -> Result<Vec<SweepRow>> {
    let jobs: Vec<(usize, u64)> = horizons.iter().flat_map(|&h| seeds.iter().map(move |&s| (h, s))).collect();
    let mut rows = jobs
        .into_par_iter()
        .map(|(horizon, seed)| {
            let started = Instant::now();
            let mut c = cfg.clone();
            c.horizon = horizon;
            let exp = build_experiment::<T>(&c, seed)?;
            let run = run_algorithm1(
                &exp,
                &RunOptions {
                    comparator: true,
                    ..Default::default()
                },
            )?;
            log::info!("T = {horizon} seed = {seed}: regret {:?}", run.report.regret);
            Ok(SweepRow {
                horizon,
                t0: exp.params.t0,
                regret: run.report.regret,
                eps_a: run.report.eps_a,
                eps_b: run.report.eps_b,
                seed,
                runtime_ms: elapsed_ms(started, timing),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| (r.horizon, r.seed));
    Ok(rows)
}

/// Identification only, for every `(T0, seed)`; `T` is reported as `T0 + 1`.
pub fn sysid_sweep<T: Real>(cfg: &ExperimentConfig, explore_horizons: &[usize], seeds: &[u64], timing: bool) -> Result<Vec<SweepRow>> {
    let jobs: Vec<(usize, u64)> = explore_horizons
        .iter()
        .flat_map(|&h| seeds.iter().map(move |&s| (h, s)))
        .collect();
    let mut rows = jobs
        .into_par_iter()
        .map(|(t0, seed)| {
            let started = Instant::now();
            let mut c = cfg.clone();
            c.t0 = Setting::Value(t0);
            c.horizon = c.horizon.max(t0 + 2);
            let exp = build_experiment::<T>(&c, seed)?;
            let est = identify_experiment(&exp)?.1;
            let (ea, eb) = recovery_error(&est.a_hat, &est.b_hat, &exp.instance.system);
            Ok(SweepRow {
                horizon: t0 + 1,
                t0,
                regret: None,
                eps_a: Some(ea),
                eps_b: Some(eb),
                seed,
                runtime_ms: elapsed_ms(started, timing),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| (r.t0, r.seed));
    Ok(rows)
}

/// First phase only: exploration and recovery.
pub fn identify_experiment<T: Real>(exp: &Experiment<T>) -> Result<(crate::sysid::Exploration<T>, SysIdEstimate<T>)> {
    let p = &exp.params;
    let plan = ExplorationPlan {
        t0: p.t0,
        k: p.k,
        seed: p.run_seed,
        scale: p.explore_scale,
    };
    let w = exp.disturbance.sequence(p.t0 + 1);
    crate::sysid::identify(&exp.instance.system, &exp.instance.certificate.k, &plan, &w, &exp.costs)
}

/// Ordinary least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidInput("need at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidInput("x values are all equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Linear-interpolation quantile (`q` in `[0, 1]`).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Groups `(x, y)` pairs by `x` and reduces each group with `f`, in `x` order.
pub fn aggregate_by<F: Fn(&[f64]) -> f64>(pairs: &[(usize, f64)], f: F) -> (Vec<f64>, Vec<f64>) {
    let mut keys: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    keys.sort_unstable();
    keys.dedup();
    let ys = keys
        .iter()
        .map(|&k| {
            let group: Vec<f64> = pairs.iter().filter(|p| p.0 == k).map(|p| p.1).collect();
            f(&group)
        })
        .collect();
    (keys.into_iter().map(|k| k as f64).collect(), ys)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpc::run_known_system;
    use crate::lds::{linear_feedback, rollout};

    fn trivial_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::example();
        cfg.dims = [2, 2];
        cfg.kappa = 1.0;
        cfg.gamma = 0.5;
        cfg.horizon = 400;
        cfg.w_bound = 0.0;
        cfg.disturbance.kind = DisturbanceKind::Zero;
        cfg.instance = Some(InstanceConfig {
            a: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            b: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            k: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            l: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        });
        cfg
    }

    #[test]
    fn auto_explore_horizon_example() {
        // ceil(4096^(2/3) * ln 10) = ceil(256 * 2.302585...) = 590
        assert_eq!(auto_explore_horizon(4096, 0.1, 3), 590);
        assert_eq!(auto_explore_horizon(8, 0.9, 3), 13);
    }

    #[test]
    fn config_parsing_examples() {
        let text = r#"{"T":4096,"dims":[3,2],"kappa":2,"gamma":0.3,"k":3,"W":1,"G":2,"delta":0.1,"seed":7}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.t0, Setting::Auto);
        let exp: Experiment<f64> = build_experiment(&cfg, 7).unwrap();
        assert_eq!(exp.params.t0, 590);
        assert_eq!(exp.params.g_bound, 2.0);

        let bad = text.replace("\"delta\":0.1", "\"delta\":1.5");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config { ref field, .. }) if field == "delta"));

        let unknown = text.replace("\"seed\":7", "\"seed\":7,\"foo\":1");
        let err = ExperimentConfig::from_json(&unknown).unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");

        let nested = text.replace("\"seed\":7", "\"seed\":7,\"cost\":{\"kind\":\"quadratic\",\"params\":{\"q_scale\":\"x\"}}");
        let err = ExperimentConfig::from_json(&nested).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "cost.params.q_scale"), "{err}");

        let short = text.replace("\"T\":4096", "\"T\":100,\"T0\":100");
        assert!(matches!(ExperimentConfig::from_json(&short), Err(Error::Config { ref field, .. }) if field == "T"));
    }

    #[test]
    fn settings_round_trip() {
        let cfg = ExperimentConfig::example();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"T0\":\"auto\""));
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn trivial_system_regret_is_exploration_cost() {
        let exp: Experiment<f64> = build_experiment(&trivial_config(), 1).unwrap();
        let run = run_algorithm1(&exp, &RunOptions { comparator: true, ..Default::default() }).unwrap();
        let r = &run.report;
        let comp = r.comparator.as_ref().unwrap();
        assert_eq!(comp.j_star, 0.0);
        assert!(comp.k_star.iter().flatten().all(|&v| v == 0.0));
        // After exploration the states return to rest; x_{T0+1} = eta_{T0} leaves one step of cost.
        let tail = &run.trajectory.states[r.phase2_start + 2..];
        assert!(tail.iter().flatten().all(|&v| v.abs() < 1e-12));
        assert!(r.regret.unwrap() <= r.j_phase1 + 2.0 + 1e-9);
    }

    #[test]
    fn injected_truth_without_exploration_matches_known_controller() {
        let mut cfg = ExperimentConfig::example();
        cfg.horizon = 600;
        let exp: Experiment<f64> = build_experiment(&cfg, 3).unwrap();
        let run = run_known_experiment(&exp, false).unwrap();
        let known = run_known_system(
            &exp.instance.system,
            &exp.instance.certificate,
            &exp.disturbance,
            &exp.costs,
            600,
            Some(exp.params.memory),
            Some(exp.params.eta),
        )
        .unwrap();
        assert_eq!(run.trajectory, known.trajectory);
    }

    #[test]
    fn runs_are_deterministic() {
        let mut cfg = ExperimentConfig::example();
        cfg.horizon = 1500;
        cfg.comparator.restarts = 3;
        let exp: Experiment<f64> = build_experiment(&cfg, 5).unwrap();
        let opts = RunOptions { comparator: true, ..Default::default() };
        let a = run_algorithm1(&exp, &opts).unwrap();
        let b = run_algorithm1(&exp, &opts).unwrap();
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn comparator_cost_examples() {
        let cfg = ExperimentConfig::example();
        let exp: Experiment<f64> = build_experiment(&cfg, 2).unwrap();
        let sys = &exp.instance.system;
        let zero = vec![vec![0.0; 3]; 50];
        assert_eq!(comparator_cost(sys, &zero, &exp.costs, &exp.instance.certificate.k, 0..50).unwrap(), 0.0);

        let w = exp.disturbance.sequence(300);
        let kbar = &exp.instance.certificate.k;
        let j = comparator_cost(sys, &w, &exp.costs, kbar, 0..300).unwrap();
        let tr = rollout(sys, linear_feedback(kbar), &w, &exp.costs, 300).unwrap();
        assert_eq!(j, tr.total_cost());
        let j_tail = comparator_cost(sys, &w, &exp.costs, kbar, 100..300).unwrap();
        assert!((j_tail - tr.cost_over(100..300)).abs() < 1e-9 * j_tail);
    }

    #[test]
    fn comparator_cost_scalar_steady_state() {
        // x_{t+1} = (a - b k) x_t + c, cost x^2 + (k x)^2; x_t = c (1 - r^t) / (1 - r).
        let sys = LinSystem::new(Mat::from_diag(&[0.9_f64]), Mat::from_diag(&[1.0])).unwrap();
        let k = Mat::from_diag(&[0.4]);
        let costs: CostGen<f64> = make_costs(CostKind::Quadratic, &CostParams::default(), 1, 1).unwrap();
        let c = 0.2;
        let w = vec![vec![c]; 200];
        let r: f64 = 0.5;
        let expected: f64 = (0..200)
            .map(|t| {
                let x = c * (1.0 - r.powi(t)) / (1.0 - r);
                x * x * (1.0 + 0.16)
            })
            .sum();
        let j = comparator_cost(&sys, &w, &costs, &k, 0..200).unwrap();
        assert!((j - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn comparator_rejects_unstable_gain() {
        let sys = LinSystem::new(Mat::from_diag(&[1.2_f64]), Mat::from_diag(&[1.0])).unwrap();
        let costs: CostGen<f64> = make_costs(CostKind::Quadratic, &CostParams::default(), 1, 1).unwrap();
        let err = comparator_cost(&sys, &[vec![0.0]], &costs, &Mat::from_diag(&[0.1]), 0..1).unwrap_err();
        assert!(matches!(err, Error::Unstable { radius, .. } if (radius - 1.1).abs() < 1e-12));
    }

    #[test]
    fn scalar_search_lands_near_riccati_gain() {
        let sys = LinSystem::new(Mat::from_diag(&[0.9_f64]), Mat::from_diag(&[1.0])).unwrap();
        let costs: CostGen<f64> = make_costs(CostKind::Quadratic, &CostParams::default(), 1, 1).unwrap();
        let dist: DisturbanceGen<f64> =
            make_disturbance(DisturbanceKind::UniformBounded, 1.0, 1, &DisturbanceParams::default(), 3).unwrap();
        let w = dist.sequence(20_000);
        let (q, r) = costs.average_quadratic();
        let k_ric = riccati_gain(sys.a(), sys.b(), &q, &r).unwrap()[(0, 0)];
        // Scalar Riccati fixed point: p = 1 + 0.81 p / (1 + p), k = 0.9 p / (1 + p).
        let p = (0.81 + (0.81f64 * 0.81 + 4.0).sqrt()) / 2.0;
        assert!((k_ric - 0.9 * p / (1.0 + p)).abs() < 1e-10);
        let cfg = ComparatorConfig { restarts: 4, ..Default::default() };
        let res = best_linear_comparator(&sys, &Mat::from_diag(&[0.5]), 0.2, &w, &costs, 20_000, &cfg, 1).unwrap();
        assert!((res.k_star[(0, 0)] - k_ric).abs() <= 0.05 * k_ric, "{} vs {k_ric}", res.k_star[(0, 0)]);
        let j_stab = comparator_cost(&sys, &w, &costs, &Mat::from_diag(&[0.5]), 0..20_000).unwrap();
        assert!(res.j_star <= j_stab);
    }

    #[test]
    fn fit_and_quantiles() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((fit_loglog_slope(&xs, &ys).unwrap() + 0.5).abs() < 1e-12);
        assert!(fit_loglog_slope(&xs, &[1.0, -1.0, 1.0, 1.0]).is_err());
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert!((quantile(&[0.0, 10.0], 0.9) - 9.0).abs() < 1e-12);
        assert_eq!(compute_regret(5.0, 5.0), 0.0);
    }
}
