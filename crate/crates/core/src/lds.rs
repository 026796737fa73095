//! Linear dynamical systems `x_{t+1} = A x_t + B u_t + w_t`.
//!
//! Holds the plant, oblivious disturbance and cost generators, trajectories,
//! and the quantitative stability/controllability certificates used by the
//! controllers and by the bound checks.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    add_vec, axpy, inverse, mat_power, min_norm_solve, norm2, sigma_min, spectral_norm,
    symmetric_eigenvalues, Mat, RANK_THRESHOLD,
};
use crate::rng::{random_orthogonal, random_with_norm, sphere_vec, streams, CounterRng};
use crate::scalar::Real;

// ---------------------------------------------------------------------------
// Plant
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LinSystem<T> {
    a: Mat<T>,
    b: Mat<T>,
}

impl<T: Real> LinSystem<T> {
    pub fn new(a: Mat<T>, b: Mat<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::shape("LinSystem::new", format!("A is {:?}", a.shape())));
        }
        if b.rows() != a.rows() || b.cols() == 0 {
            return Err(Error::shape(
                "LinSystem::new",
                format!("A is {:?} but B is {:?}", a.shape(), b.shape()),
            ));
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidInput("non-finite system matrix".into()));
        }
        Ok(LinSystem { a, b })
    }

    pub fn a(&self) -> &Mat<T> {
        &self.a
    }

    pub fn b(&self) -> &Mat<T> {
        &self.b
    }

    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.cols()
    }

    /// `A - B K`.
    pub fn closed_loop(&self, k: &Mat<T>) -> Result<Mat<T>> {
        if k.shape() != (self.control_dim(), self.state_dim()) {
            return Err(Error::shape(
                "closed_loop",
                format!("K is {:?}, expected {:?}", k.shape(), (self.control_dim(), self.state_dim())),
            ));
        }
        Ok(&self.a - &(&self.b * k))
    }

    pub fn cast<U: Real>(&self) -> LinSystem<U> {
        LinSystem {
            a: self.a.cast(),
            b: self.b.cast(),
        }
    }
}

/// One transition `A x + B u + w`.
pub fn step<T: Real>(sys: &LinSystem<T>, x: &[T], u: &[T], w: &[T]) -> Result<Vec<T>> {
    let n = sys.state_dim();
    if x.len() != n || w.len() != n || u.len() != sys.control_dim() {
        return Err(Error::shape(
            "step",
            format!(
                "x:{} u:{} w:{} for d_x={} d_u={}",
                x.len(),
                u.len(),
                w.len(),
                n,
                sys.control_dim()
            ),
        ));
    }
    Ok(step_unchecked(sys.a(), sys.b(), x, u, w))
}

#[inline]
pub(crate) fn step_unchecked<T: Real>(a: &Mat<T>, b: &Mat<T>, x: &[T], u: &[T], w: &[T]) -> Vec<T> {
    let ax = a.matvec(x);
    let bu = b.matvec(u);
    ax.iter()
        .zip(&bu)
        .zip(w)
        .map(|((&p, &q), &r)| p + q + r)
        .collect()
}

// ---------------------------------------------------------------------------
// Strong stability
// ---------------------------------------------------------------------------

/// Witness that `K` is `(kappa, gamma)`-strongly stable: `A - BK = Q L Q^{-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityCertificate<T> {
    pub k: Mat<T>,
    pub q: Mat<T>,
    pub l: Mat<T>,
    pub kappa: T,
    pub gamma: T,
}

impl<T: Real> StabilityCertificate<T> {
    pub fn cast<U: Real>(&self) -> StabilityCertificate<U> {
        StabilityCertificate {
            k: self.k.cast(),
            q: self.q.cast(),
            l: self.l.cast(),
            kappa: U::lit(self.kappa.as_f64()),
            gamma: U::lit(self.gamma.as_f64()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    pub name: &'static str,
    pub value: f64,
    pub limit: f64,
    /// `limit - value`; negative means violated.
    pub margin: f64,
    pub pass: bool,
}

impl BoundCheck {
    fn new(name: &'static str, value: f64, limit: f64, slack: f64) -> Self {
        BoundCheck {
            name,
            value,
            limit,
            margin: limit - value,
            pass: value <= limit + slack,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    pub checks: Vec<BoundCheck>,
    pub pass: bool,
}

impl StabilityReport {
    pub fn violated(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.name).collect()
    }
}

/// Relative slack for norm bounds that hold with equality by construction.
fn norm_slack<T: Real>(limit: f64) -> f64 {
    64.0 * T::epsilon().as_f64() * limit.abs().max(1.0)
}

/// Checks every inequality of the strong-stability definition.
pub fn check_strong_stability<T: Real>(
    sys: &LinSystem<T>,
    cert: &StabilityCertificate<T>,
) -> StabilityReport {
    let kappa = cert.kappa.as_f64();
    let gamma = cert.gamma.as_f64();
    let norm = |m: &Mat<T>| spectral_norm(m).map(|x| x.as_f64()).unwrap_or(f64::INFINITY);
    let mut checks = Vec::new();

    let q_inv = inverse(&cert.q).ok();
    let residual = match (&q_inv, sys.closed_loop(&cert.k)) {
        (Some(qi), Ok(acl)) if cert.l.shape() == acl.shape() && cert.q.shape() == acl.shape() => {
            let qlqi = &(&cert.q * &cert.l) * qi;
            norm(&(&acl - &qlqi))
        }
        _ => f64::INFINITY,
    };
    let residual_tol = RANK_THRESHOLD.max(64.0 * T::epsilon().as_f64()) * kappa;
    checks.push(BoundCheck::new("decomposition_residual", residual, residual_tol, 0.0));
    checks.push(BoundCheck::new("norm_L", norm(&cert.l), 1.0 - gamma, norm_slack::<T>(1.0)));
    for (name, m) in [
        ("norm_A", Some(sys.a())),
        ("norm_B", Some(sys.b())),
        ("norm_K", Some(&cert.k)),
        ("norm_Q", Some(&cert.q)),
        ("norm_Q_inv", q_inv.as_ref()),
    ] {
        let v = m.map_or(f64::INFINITY, norm);
        checks.push(BoundCheck::new(name, v, kappa, norm_slack::<T>(kappa)));
    }
    let valid_params = kappa >= 1.0 && gamma > 0.0 && gamma < 1.0;
    let pass = valid_params && checks.iter().all(|c| c.pass);
    StabilityReport { checks, pass }
}

// ---------------------------------------------------------------------------
// Controllability
// ---------------------------------------------------------------------------

/// `C_k = [B, A'B, ..., A'^{k-1} B]`, shape `d_x x (k d_u)`.
pub fn controllability_matrix<T: Real>(a_prime: &Mat<T>, b: &Mat<T>, k: usize) -> Result<Mat<T>> {
    if k == 0 {
        return Err(Error::InvalidInput("controllability index k must be >= 1".into()));
    }
    if !a_prime.is_square() || a_prime.rows() != b.rows() {
        return Err(Error::shape(
            "controllability_matrix",
            format!("A' is {:?}, B is {:?}", a_prime.shape(), b.shape()),
        ));
    }
    let mut blocks = Vec::with_capacity(k);
    let mut cur = b.clone();
    for _ in 0..k {
        let next = a_prime * &cur;
        blocks.push(cur);
        cur = next;
    }
    Mat::hcat(&blocks)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControllabilityReport {
    pub k: usize,
    pub sigma_min: f64,
    pub full_row_rank: bool,
    /// `1 / sigma_min^2`, the smallest `kappa_c` this `k` certifies.
    pub kappa_c_required: f64,
    pub pass: bool,
}

/// Whether `(A', B)` is `(k, kappa_c)`-strongly controllable.
pub fn check_strong_controllability<T: Real>(
    a_prime: &Mat<T>,
    b: &Mat<T>,
    k: usize,
    kappa_c: f64,
) -> Result<ControllabilityReport> {
    let c = controllability_matrix(a_prime, b, k)?;
    let smin = if c.rows() > c.cols() {
        0.0
    } else {
        sigma_min(&c)?.as_f64()
    };
    let full_row_rank = c.rows() <= c.cols() && smin >= RANK_THRESHOLD;
    Ok(ControllabilityReport {
        k,
        sigma_min: smin,
        full_row_rank,
        kappa_c_required: if smin > 0.0 { 1.0 / (smin * smin) } else { f64::INFINITY },
        pass: full_row_rank && smin * smin * (1.0 + 1e-9) >= 1.0 / kappa_c,
    })
}

/// Controls that drive `(A, B)` from rest to a target in `k` steps, built from
/// the closed-loop system `(A - B Kbar, B)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedControls<T> {
    /// Block `j` multiplies `A^j B` in `C_k`; block `k-1` is applied first.
    pub open_loop: Vec<Vec<T>>,
    /// Minimum-norm solution of `C'_k u' = x` in the same block layout.
    pub closed_loop: Vec<Vec<T>>,
    /// `||u|| / ||x||` (zero for a zero target).
    pub gain: f64,
    /// `||u|| / ||u'||` (one for a zero target).
    pub ratio_to_closed_loop: f64,
}

pub fn lift_controls<T: Real>(
    sys: &LinSystem<T>,
    kbar: &Mat<T>,
    k: usize,
    target: &[T],
) -> Result<LiftedControls<T>> {
    if target.len() != sys.state_dim() {
        return Err(Error::shape("lift_controls", "target dimension"));
    }
    let a_prime = sys.closed_loop(kbar)?;
    let c_prime = controllability_matrix(&a_prime, sys.b(), k)?;
    let report = check_strong_controllability(&a_prime, sys.b(), k, f64::INFINITY)?;
    if !report.full_row_rank {
        return Err(Error::Precondition(format!(
            "(A - B K, B) is not controllable at k = {k} (sigma_min = {:e})",
            report.sigma_min
        )));
    }
    let stacked = min_norm_solve(&c_prime, target)?;
    let du = sys.control_dim();
    let closed: Vec<Vec<T>> = stacked.chunks(du).map(<[T]>::to_vec).collect();

    // Apply the closed-loop inputs in time order from rest; the same state path
    // is produced open-loop by u_j = u'_j - Kbar z_j.
    let mut z = vec![T::zero(); sys.state_dim()];
    let mut open = vec![Vec::new(); k];
    for i in 0..k {
        let block = k - 1 - i;
        let v_prime = &closed[block];
        let kz = kbar.matvec(&z);
        open[block] = v_prime.iter().zip(&kz).map(|(&a, &b)| a - b).collect();
        z = add_vec(&a_prime.matvec(&z), &sys.b().matvec(v_prime));
    }

    let flat_norm = |blocks: &[Vec<T>]| {
        blocks
            .iter()
            .flat_map(|b| b.iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
            .as_f64()
    };
    let un = flat_norm(&open);
    let upn = flat_norm(&closed);
    let xn = norm2(target).as_f64();
    Ok(LiftedControls {
        open_loop: open,
        closed_loop: closed,
        gain: if xn > 0.0 { un / xn } else { 0.0 },
        ratio_to_closed_loop: if upn > 0.0 { un / upn } else { 1.0 },
    })
}

// ---------------------------------------------------------------------------
// Instance generation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub kappa: f64,
    pub gamma: f64,
    /// Largest controllability index accepted.
    pub max_index: usize,
    /// Minimum `sigma_min(C_k)` accepted for the reported index.
    pub min_sigma: f64,
    pub max_attempts: usize,
}

impl InstanceSpec {
    pub fn new(state_dim: usize, control_dim: usize, kappa: f64, gamma: f64) -> Self {
        InstanceSpec {
            state_dim,
            control_dim,
            kappa,
            gamma,
            max_index: state_dim,
            min_sigma: 0.1,
            max_attempts: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance<T> {
    pub system: LinSystem<T>,
    pub certificate: StabilityCertificate<T>,
    /// Controllability index of `(A - B Kbar, B)` at the accepted threshold.
    pub k: usize,
    /// `1 / sigma_min(C_k)^2`.
    pub kappa_c: f64,
}

/// Random `(A, B)` with a strongly stable `Kbar` and a strongly controllable
/// closed loop, deterministic in `seed`.
pub fn synth_instance<T: Real>(spec: &InstanceSpec, seed: u64) -> Result<Instance<T>> {
    let InstanceSpec {
        state_dim: n,
        control_dim: m,
        kappa,
        gamma,
        ..
    } = *spec;
    if !(kappa >= 1.0) || !(gamma > 0.0 && gamma < 1.0) || n == 0 || m == 0 {
        return Err(Error::InvalidInput(format!(
            "instance parameters d_x={n} d_u={m} kappa={kappa} gamma={gamma}"
        )));
    }
    let max_index = spec.max_index.max(1);
    let source = CounterRng::new(seed, streams::INSTANCE);
    let mut last_sigma = 0.0;
    for attempt in 0..spec.max_attempts {
        let mut rng = source.at(attempt as u64);
        let rho = 1.0 - gamma;
        let l_diag: Vec<f64> = (0..n).map(|_| rng.random_range(-rho..=rho)).collect();
        let rot: Mat<f64> = random_orthogonal(&mut rng, n);
        let scales: Vec<f64> = (0..n)
            .map(|_| kappa.powf(0.5 * rng.random_range(-1.0..=1.0)))
            .collect();
        let q = &rot * &Mat::from_diag(&scales);
        let q_inv = &Mat::from_diag(&scales.iter().map(|s| 1.0 / s).collect::<Vec<_>>())
            * &rot.transpose();
        let l = Mat::from_diag(&l_diag);
        let a_prime = &(&q * &l) * &q_inv;
        let a_prime_norm = spectral_norm(&a_prime)?;

        let b_norm = rng.random_range(0.5..=1.0_f64).min(kappa);
        let b: Mat<f64> = random_with_norm(&mut rng, n, m, b_norm);
        let room = (kappa - a_prime_norm).max(0.0);
        let k_norm = rng.random_range(0.2..=1.0) * kappa.min(room / b_norm);
        let kbar: Mat<f64> = random_with_norm(&mut rng, m, n, k_norm);
        let a = &a_prime + &(&b * &kbar);

        let mut accepted = None;
        for k in 1..=max_index {
            let rep = check_strong_controllability(&a_prime, &b, k, f64::INFINITY)?;
            last_sigma = rep.sigma_min;
            if rep.full_row_rank && rep.sigma_min >= spec.min_sigma {
                accepted = Some((k, rep.kappa_c_required));
                break;
            }
        }
        let Some((k, kappa_c)) = accepted else {
            continue;
        };
        let system = LinSystem::new(a.cast(), b.cast())?;
        let certificate = StabilityCertificate {
            k: kbar.cast(),
            q: q.cast(),
            l: l.cast(),
            kappa: T::lit(kappa),
            gamma: T::lit(gamma),
        };
        if !check_strong_stability(&system, &certificate).pass {
            continue;
        }
        return Ok(Instance {
            system,
            certificate,
            k,
            kappa_c,
        });
    }
    Err(Error::Generation {
        attempts: spec.max_attempts,
        reason: format!(
            "no sample reached sigma_min(C_k) >= {} within k <= {max_index} (last {last_sigma:e})",
            spec.min_sigma
        ),
    })
}

/// Shorthand for [`synth_instance`] with default controllability thresholds.
pub fn synth_stable_instance<T: Real>(
    state_dim: usize,
    control_dim: usize,
    kappa: f64,
    gamma: f64,
    seed: u64,
) -> Result<Instance<T>> {
    synth_instance(&InstanceSpec::new(state_dim, control_dim, kappa, gamma), seed)
}

// ---------------------------------------------------------------------------
// Disturbances
// ---------------------------------------------------------------------------

/// A disturbance sequence indexed by time.
pub trait Disturbances<T> {
    fn dim(&self) -> usize;
    fn at(&self, t: usize) -> Vec<T>;
}

impl<T: Real> Disturbances<T> for [Vec<T>] {
    fn dim(&self) -> usize {
        self.first().map_or(0, Vec::len)
    }

    fn at(&self, t: usize) -> Vec<T> {
        self[t].clone()
    }
}

impl<T: Real> Disturbances<T> for Vec<Vec<T>> {
    fn dim(&self) -> usize {
        self.as_slice().dim()
    }

    fn at(&self, t: usize) -> Vec<T> {
        self[t].clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceKind {
    Zero,
    Constant,
    Sinusoid,
    UniformBounded,
    RademacherScaled,
    GaussianClipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceParams {
    /// Period (in steps) of the sinusoid.
    pub period: f64,
    /// Direction for the constant kind; drawn from the seed when absent.
    pub direction: Option<Vec<f64>>,
}

impl Default for DisturbanceParams {
    fn default() -> Self {
        DisturbanceParams {
            period: 20.0,
            direction: None,
        }
    }
}

/// Oblivious disturbance generator: `w_t` depends only on `(t, seed)` and
/// always satisfies `||w_t|| <= W`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisturbanceGen<T> {
    kind: DisturbanceKind,
    bound: T,
    dim: usize,
    period: f64,
    direction: Vec<T>,
    phases: Vec<f64>,
    source: CounterRng,
}

pub fn make_disturbance<T: Real>(
    kind: DisturbanceKind,
    bound: f64,
    dim: usize,
    params: &DisturbanceParams,
    seed: u64,
) -> Result<DisturbanceGen<T>> {
    if !(bound >= 0.0) || !bound.is_finite() {
        return Err(Error::config("W", format!("must be a finite value >= 0, got {bound}")));
    }
    if !(params.period > 0.0) {
        return Err(Error::config("disturbance.period", "must be positive"));
    }
    let mut prng = CounterRng::new(seed, streams::DISTURBANCE_PARAMS).at(0);
    let direction: Vec<T> = match &params.direction {
        Some(d) => {
            let n = norm2(d);
            if d.len() != dim || !(n > 0.0) {
                return Err(Error::config(
                    "disturbance.direction",
                    format!("need a nonzero vector of length {dim}"),
                ));
            }
            d.iter().map(|&x| T::lit(x / n)).collect()
        }
        None => sphere_vec(&mut prng, dim, 1.0),
    };
    let phases = (0..dim).map(|_| prng.random_range(0.0..2.0 * PI)).collect();
    Ok(DisturbanceGen {
        kind,
        bound: T::lit(bound),
        dim,
        period: params.period,
        direction,
        phases,
        source: CounterRng::new(seed, streams::DISTURBANCE),
    })
}

impl<T: Real> DisturbanceGen<T> {
    pub fn kind(&self) -> DisturbanceKind {
        self.kind
    }

    pub fn bound(&self) -> T {
        self.bound
    }

    /// First `horizon` disturbances.
    pub fn sequence(&self, horizon: usize) -> Vec<Vec<T>> {
        (0..horizon).map(|t| self.at(t)).collect()
    }

    fn per_coord(&self) -> f64 {
        self.bound.as_f64() / (self.dim.max(1) as f64).sqrt()
    }
}

impl<T: Real> Disturbances<T> for DisturbanceGen<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn at(&self, t: usize) -> Vec<T> {
        let d = self.dim;
        match self.kind {
            DisturbanceKind::Zero => vec![T::zero(); d],
            DisturbanceKind::Constant => self.direction.iter().map(|&x| x * self.bound).collect(),
            DisturbanceKind::Sinusoid => {
                let c = self.per_coord();
                let omega = 2.0 * PI * t as f64 / self.period;
                self.phases
                    .iter()
                    .map(|&ph| T::lit(c * (omega + ph).sin()))
                    .collect()
            }
            DisturbanceKind::UniformBounded => self.source.uniform_symmetric(t as u64, d, self.per_coord()),
            DisturbanceKind::RademacherScaled => {
                let c = T::lit(self.per_coord());
                self.source.signs::<T>(t as u64, d).into_iter().map(|s| s * c).collect()
            }
            DisturbanceKind::GaussianClipped => {
                let mut g: Vec<T> = self.source.gaussian(t as u64, d, 0.5 * self.per_coord());
                let n = norm2(&g);
                if n > self.bound {
                    let s = self.bound / n;
                    g.iter_mut().for_each(|x| *x = *x * s);
                }
                g
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Costs
// ---------------------------------------------------------------------------

/// Per-step convex cost `c_t(x, u)`.
pub trait StageCost<T: Real>: Sync {
    fn eval(&self, t: usize, x: &[T], u: &[T]) -> T;

    /// Gradient `(d/dx, d/du)` when available in closed form.
    fn gradient(&self, _t: usize, _x: &[T], _u: &[T]) -> Option<(Vec<T>, Vec<T>)> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    Quadratic,
    TimeVaryingQuadratic,
    LinearPlusQuadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    /// Explicit state weight; `q_scale * I` when absent.
    pub q: Option<Vec<Vec<f64>>>,
    /// Explicit control weight; `r_scale * I` when absent.
    pub r: Option<Vec<Vec<f64>>>,
    pub q_scale: f64,
    pub r_scale: f64,
    /// Relative modulation of the quadratic part, in `[0, 1)`.
    pub amplitude: f64,
    pub period: f64,
    /// Linear coefficients `(q_lin, r_lin)` for the linear-plus-quadratic kind.
    pub q_lin: Option<Vec<f64>>,
    pub r_lin: Option<Vec<f64>>,
    /// Radius `D` used when spot-checking the gradient bound.
    pub radius: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            q: None,
            r: None,
            q_scale: 1.0,
            r_scale: 1.0,
            amplitude: 0.5,
            period: 50.0,
            q_lin: None,
            r_lin: None,
            radius: 1.0,
        }
    }
}

/// `c_t(x, u) = s_t (x^T Q x + u^T R u) + q^T x + r^T u`, with `s_t = 1` except
/// for the time-varying kind.
#[derive(Clone, Debug, PartialEq)]
pub struct CostGen<T> {
    kind: CostKind,
    q: Mat<T>,
    r: Mat<T>,
    q_lin: Vec<T>,
    r_lin: Vec<T>,
    amplitude: f64,
    period: f64,
    gradient_bound: f64,
    radius: f64,
}

fn psd_matrix<T: Real>(
    explicit: &Option<Vec<Vec<f64>>>,
    scale: f64,
    dim: usize,
    field: &str,
) -> Result<Mat<T>> {
    let m: Mat<f64> = match explicit {
        Some(rows) => Mat::from_rows(rows).map_err(|e| Error::config(field, e.to_string()))?,
        None => Mat::<f64>::identity(dim).scale(scale),
    };
    if m.shape() != (dim, dim) {
        return Err(Error::config(field, format!("expected {dim}x{dim}, got {:?}", m.shape())));
    }
    if !m.is_symmetric(1e-12) {
        return Err(Error::config(field, "not symmetric"));
    }
    let min_ev = symmetric_eigenvalues(&m).map_err(|e| Error::config(field, e.to_string()))?[0];
    if min_ev < -1e-12 * m.max_abs().max(1.0) {
        return Err(Error::config(
            field,
            format!("not positive semidefinite (eigenvalue {min_ev:e})"),
        ));
    }
    Ok(m.cast())
}

pub fn make_costs<T: Real>(
    kind: CostKind,
    params: &CostParams,
    state_dim: usize,
    control_dim: usize,
) -> Result<CostGen<T>> {
    let q: Mat<T> = psd_matrix(&params.q, params.q_scale, state_dim, "cost.q")?;
    let r: Mat<T> = psd_matrix(&params.r, params.r_scale, control_dim, "cost.r")?;
    let lin = |v: &Option<Vec<f64>>, n: usize, field: &str| -> Result<Vec<T>> {
        match (kind, v) {
            (CostKind::LinearPlusQuadratic, Some(v)) if v.len() == n => {
                Ok(v.iter().map(|&x| T::lit(x)).collect())
            }
            (CostKind::LinearPlusQuadratic, Some(_)) => {
                Err(Error::config(field, format!("expected length {n}")))
            }
            _ => Ok(vec![T::zero(); n]),
        }
    };
    let q_lin = lin(&params.q_lin, state_dim, "cost.q_lin")?;
    let r_lin = lin(&params.r_lin, control_dim, "cost.r_lin")?;
    let amplitude = match kind {
        CostKind::TimeVaryingQuadratic => {
            if !(0.0..1.0).contains(&params.amplitude) {
                return Err(Error::config("cost.amplitude", "must lie in [0, 1)"));
            }
            params.amplitude
        }
        _ => 0.0,
    };
    if !(params.period > 0.0) {
        return Err(Error::config("cost.period", "must be positive"));
    }
    if !(params.radius >= 1.0) {
        return Err(Error::config("cost.radius", "must be >= 1"));
    }
    let weight = spectral_norm(&q)?.max(spectral_norm(&r)?).as_f64();
    let lin_norm = (norm2(&q_lin).powi(2) + norm2(&r_lin).powi(2)).sqrt().as_f64();
    // ||(2sQx + q, 2sRu + r)|| <= 2 sqrt(2) s_max max(||Q||,||R||) D + ||(q, r)|| and D >= 1.
    let gradient_bound = 2.0 * 2f64.sqrt() * (1.0 + amplitude) * weight + lin_norm;
    Ok(CostGen {
        kind,
        q,
        r,
        q_lin,
        r_lin,
        amplitude,
        period: params.period,
        gradient_bound,
        radius: params.radius,
    })
}

impl<T: Real> CostGen<T> {
    pub fn kind(&self) -> CostKind {
        self.kind
    }

    /// Declared `G` such that `||grad c_t|| <= G D` whenever `||x||, ||u|| <= D`.
    pub fn gradient_bound(&self) -> f64 {
        self.gradient_bound
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Time-averaged quadratic weights `(Q, R)`.
    pub fn average_quadratic(&self) -> (Mat<T>, Mat<T>) {
        (self.q.clone(), self.r.clone())
    }

    fn modulation(&self, t: usize) -> T {
        if self.amplitude == 0.0 {
            T::one()
        } else {
            T::lit(1.0 + self.amplitude * (2.0 * PI * t as f64 / self.period).sin())
        }
    }

    /// Samples points with `||x||, ||u|| <= D` and returns the largest
    /// observed `||grad|| / (G D)`; at most one when the declared bound holds.
    pub fn spot_check_gradient_bound(&self, samples: usize, seed: u64) -> f64 {
        let src = CounterRng::new(seed, streams::COSTS);
        let d = self.radius;
        let mut worst: f64 = 0.0;
        for i in 0..samples {
            let mut rng = src.at(i as u64);
            let rx = d * rng.random_range(0.0..=1.0_f64);
            let ru = d * rng.random_range(0.0..=1.0_f64);
            let x: Vec<T> = sphere_vec(&mut rng, self.q.rows(), rx);
            let u: Vec<T> = sphere_vec(&mut rng, self.r.rows(), ru);
            let t = rng.random_range(0..10_000usize);
            let (gx, gu) = self.gradient(t, &x, &u).expect("closed form");
            let g = (norm2(&gx).powi(2) + norm2(&gu).powi(2)).sqrt().as_f64();
            worst = worst.max(g / (self.gradient_bound * d));
        }
        worst
    }
}

impl<T: Real> StageCost<T> for CostGen<T> {
    fn eval(&self, t: usize, x: &[T], u: &[T]) -> T {
        let quad = crate::numerics::dot(x, &self.q.matvec(x)) + crate::numerics::dot(u, &self.r.matvec(u));
        self.modulation(t) * quad + crate::numerics::dot(&self.q_lin, x) + crate::numerics::dot(&self.r_lin, u)
    }

    fn gradient(&self, t: usize, x: &[T], u: &[T]) -> Option<(Vec<T>, Vec<T>)> {
        let two_s = self.modulation(t) * T::lit(2.0);
        let mut gx = self.q_lin.clone();
        axpy(&mut gx, two_s, &self.q.matvec(x));
        let mut gu = self.r_lin.clone();
        axpy(&mut gu, two_s, &self.r.matvec(u));
        Some((gx, gu))
    }
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// States `x_0..x_T`, controls/disturbances/costs for steps `0..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub states: Vec<Vec<T>>,
    pub controls: Vec<Vec<T>>,
    pub disturbances: Vec<Vec<T>>,
    /// Disturbance estimates, when the controller forms them.
    pub estimated: Option<Vec<Vec<T>>>,
    pub costs: Vec<T>,
}

impl<T: Real> Trajectory<T> {
    pub fn with_initial_state(x0: Vec<T>) -> Self {
        Trajectory {
            states: vec![x0],
            controls: Vec::new(),
            disturbances: Vec::new(),
            estimated: None,
            costs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn total_cost(&self) -> T {
        self.costs.iter().copied().sum()
    }

    pub fn cost_over(&self, range: std::ops::Range<usize>) -> T {
        self.costs[range].iter().copied().sum()
    }

    pub(crate) fn push(&mut self, u: Vec<T>, w: Vec<T>, cost: T, next: Vec<T>) {
        self.controls.push(u);
        self.disturbances.push(w);
        self.costs.push(cost);
        self.states.push(next);
    }

    /// Whether lengths line up and every transition replays bit-for-bit.
    pub fn replays_exactly(&self, sys: &LinSystem<T>) -> bool {
        let n = self.controls.len();
        if self.states.len() != n + 1 || self.disturbances.len() != n || self.costs.len() != n {
            return false;
        }
        if let Some(est) = &self.estimated {
            if est.len() != n {
                return false;
            }
        }
        (0..n).all(|t| {
            step(sys, &self.states[t], &self.controls[t], &self.disturbances[t])
                .is_ok_and(|x| x == self.states[t + 1])
        })
    }
}

/// Simulates `horizon` steps from `x_0 = 0` under `controller(t, x_t)`.
pub fn rollout<T, C, D, S>(
    sys: &LinSystem<T>,
    mut controller: C,
    dist: &D,
    costs: &S,
    horizon: usize,
) -> Result<Trajectory<T>>
where
    T: Real,
    C: FnMut(usize, &[T]) -> Vec<T>,
    D: Disturbances<T> + ?Sized,
    S: StageCost<T> + ?Sized,
{
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be >= 1".into()));
    }
    if dist.dim() != sys.state_dim() {
        return Err(Error::shape("rollout", "disturbance dimension"));
    }
    let mut traj = Trajectory::with_initial_state(vec![T::zero(); sys.state_dim()]);
    let mut x = traj.states[0].clone();
    for t in 0..horizon {
        let u = controller(t, &x);
        if u.len() != sys.control_dim() {
            return Err(Error::shape(
                "rollout",
                format!("controller returned {} entries, expected {}", u.len(), sys.control_dim()),
            ));
        }
        let w = dist.at(t);
        let cost = costs.eval(t, &x, &u);
        let next = step_unchecked(sys.a(), sys.b(), &x, &u, &w);
        x = next.clone();
        traj.push(u, w, cost, next);
    }
    Ok(traj)
}

/// Linear state feedback `u = -K x` as a rollout controller.
pub fn linear_feedback<T: Real>(k: &Mat<T>) -> impl FnMut(usize, &[T]) -> Vec<T> + '_ {
    move |_, x| k.matvec(x).into_iter().map(|v| -v).collect()
}

/// `x_{t+1} = sum_{i=0}^{t} A'^{t-i} (w_i + B u~_i)` for the control law
/// `u_t = -Kbar x_t + u~_t` started from rest.
pub fn unrolled_state<T: Real>(
    a_prime: &Mat<T>,
    b: &Mat<T>,
    w: &[Vec<T>],
    u_tilde: &[Vec<T>],
    t: usize,
) -> Result<Vec<T>> {
    if w.len() <= t || u_tilde.len() <= t {
        return Err(Error::shape("unrolled_state", "sequences shorter than t + 1"));
    }
    if !a_prime.is_square() || a_prime.rows() != b.rows() {
        return Err(Error::shape("unrolled_state", "A'/B shapes"));
    }
    let n = a_prime.rows();
    let mut x = vec![T::zero(); n];
    for i in 0..=t {
        if w[i].len() != n || u_tilde[i].len() != b.cols() {
            return Err(Error::shape("unrolled_state", format!("entry {i}")));
        }
        let drive = add_vec(&w[i], &b.matvec(&u_tilde[i]));
        let p = mat_power(a_prime, (t - i) as u32)?;
        let term = p.matvec(&drive);
        axpy(&mut x, T::one(), &term);
    }
    Ok(x)
}
