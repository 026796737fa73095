//! Identification of `(A, B)` from sign-random exploration.
//!
//! Exploration plays `u_t = -K x_t + eta_t` with i.i.d. `eta_t` in
//! `{-s, +s}^{d_u}`. The moments `N_j = E[x_{t+j+1} eta_t^T] / s^2` equal
//! `A'^j B` for `A' = A - B K` regardless of the (oblivious) disturbance, so
//! `B = N_0` and `A'` solves `A' [N_0 .. N_{k-1}] = [N_1 .. N_k]`.

use crate::error::{Error, Result};
use crate::lds::{step_unchecked, Disturbances, LinSystem, StageCost, Trajectory};
use crate::numerics::{solve_least_squares, sub_vec, Mat};
use crate::rng::{streams, CounterRng};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExplorationPlan {
    /// Last exploration step; steps `0..=t0` are played.
    pub t0: usize,
    /// Controllability index used for recovery.
    pub k: usize,
    pub seed: u64,
    /// Exploration amplitude `s` (1, or `W` for the scaled variant).
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exploration<T> {
    /// States `x_0..x_{t0+1}` and steps `0..=t0`.
    pub trajectory: Trajectory<T>,
    /// `eta_0..eta_{t0}`.
    pub etas: Vec<Vec<T>>,
    pub scale: f64,
}

/// The sign sequence is a pure function of `(seed, t)`.
pub fn exploration_signal<T: Real>(seed: u64, t: usize, control_dim: usize, scale: f64) -> Vec<T> {
    let s = T::lit(scale);
    CounterRng::new(seed, streams::EXPLORATION)
        .signs::<T>(t as u64, control_dim)
        .into_iter()
        .map(|v| v * s)
        .collect()
}

pub fn explore<T, D, S>(
    sys: &LinSystem<T>,
    kbar: &Mat<T>,
    plan: &ExplorationPlan,
    dist: &D,
    costs: &S,
) -> Result<Exploration<T>>
where
    T: Real,
    D: Disturbances<T> + ?Sized,
    S: StageCost<T> + ?Sized,
{
    if plan.k == 0 || plan.t0 <= plan.k {
        return Err(Error::config(
            "T0",
            format!("need T0 > k >= 1, got T0 = {} and k = {}", plan.t0, plan.k),
        ));
    }
    if !(plan.scale > 0.0) || !plan.scale.is_finite() {
        return Err(Error::config("scale", "exploration scale must be positive"));
    }
    if kbar.shape() != (sys.control_dim(), sys.state_dim()) {
        return Err(Error::shape("explore", "K shape"));
    }
    if dist.dim() != sys.state_dim() {
        return Err(Error::shape("explore", "disturbance dimension"));
    }
    let mut traj = Trajectory::with_initial_state(vec![T::zero(); sys.state_dim()]);
    let mut etas = Vec::with_capacity(plan.t0 + 1);
    for t in 0..=plan.t0 {
        let x = &traj.states[t];
        let eta: Vec<T> = exploration_signal(plan.seed, t, sys.control_dim(), plan.scale);
        let u: Vec<T> = kbar
            .matvec(x)
            .iter()
            .zip(&eta)
            .map(|(&kx, &e)| e - kx)
            .collect();
        let w = dist.at(t);
        let cost = costs.eval(t, x, &u);
        let next = step_unchecked(sys.a(), sys.b(), x, &u, &w);
        traj.push(u, w, cost, next);
        etas.push(eta);
    }
    Ok(Exploration {
        trajectory: traj,
        etas,
        scale: plan.scale,
    })
}

/// `N_j = (T0-k)^{-1} sum_{t=0}^{T0-k-1} x_{t+j+1} eta_t^T / s^2` for `j = 0..=k`,
/// accumulated as a running mean.
pub fn estimate_moments<T: Real>(
    states: &[Vec<T>],
    etas: &[Vec<T>],
    k: usize,
    t0: usize,
    scale: f64,
) -> Result<Vec<Mat<T>>> {
    if k == 0 || t0 <= k {
        return Err(Error::config("T0", format!("need T0 > k >= 1, got T0 = {t0}, k = {k}")));
    }
    if states.len() < t0 + 1 || etas.len() < t0 - k {
        return Err(Error::shape(
            "estimate_moments",
            format!("have {} states and {} signs for T0 = {t0}", states.len(), etas.len()),
        ));
    }
    let dx = states[0].len();
    let du = etas[0].len();
    let mut moments = vec![Mat::<T>::zeros(dx, du); k + 1];
    for t in 0..(t0 - k) {
        let inv_count = T::one() / T::lit((t + 1) as f64);
        let eta = &etas[t];
        for (j, n) in moments.iter_mut().enumerate() {
            let x = &states[t + j + 1];
            for r in 0..dx {
                for c in 0..du {
                    let term = x[r] * eta[c];
                    let cur = n[(r, c)];
                    n[(r, c)] = cur + (term - cur) * inv_count;
                }
            }
        }
    }
    if scale != 1.0 {
        let s = T::lit(1.0 / (scale * scale));
        for n in &mut moments {
            *n = n.scale(s);
        }
    }
    Ok(moments)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SysIdEstimate<T> {
    pub moments: Vec<Mat<T>>,
    pub c0: Mat<T>,
    pub c1: Mat<T>,
    pub a_prime_hat: Mat<T>,
    pub a_hat: Mat<T>,
    pub b_hat: Mat<T>,
}

impl<T: Real> SysIdEstimate<T> {
    pub fn system(&self) -> Result<LinSystem<T>> {
        LinSystem::new(self.a_hat.clone(), self.b_hat.clone())
    }
}

/// `B_hat = N_0`, `A'_hat C0 = C1` in the least-squares sense, `A_hat = A'_hat + B_hat K`.
pub fn recover_system<T: Real>(moments: &[Mat<T>], kbar: &Mat<T>) -> Result<SysIdEstimate<T>> {
    if moments.len() < 2 {
        return Err(Error::InvalidInput("need moments N_0..N_k with k >= 1".into()));
    }
    let k = moments.len() - 1;
    let b_hat = moments[0].clone();
    if kbar.shape() != (b_hat.cols(), b_hat.rows()) {
        return Err(Error::shape("recover_system", "K shape"));
    }
    let c0 = Mat::hcat(&moments[..k])?;
    let c1 = Mat::hcat(&moments[1..])?;
    let a_prime_hat = solve_least_squares(&c0, &c1).map_err(|e| match e {
        Error::RankDeficient { sigma, .. } => Error::Recovery { phase: "C0", sigma },
        other => other,
    })?;
    let a_hat = &a_prime_hat + &(&b_hat * kbar);
    Ok(SysIdEstimate {
        moments: moments.to_vec(),
        c0,
        c1,
        a_prime_hat,
        a_hat,
        b_hat,
    })
}

/// Explores and recovers in one go.
pub fn identify<T, D, S>(
    sys: &LinSystem<T>,
    kbar: &Mat<T>,
    plan: &ExplorationPlan,
    dist: &D,
    costs: &S,
) -> Result<(Exploration<T>, SysIdEstimate<T>)>
where
    T: Real,
    D: Disturbances<T> + ?Sized,
    S: StageCost<T> + ?Sized,
{
    let run = explore(sys, kbar, plan, dist, costs)?;
    let moments = estimate_moments(&run.trajectory.states, &run.etas, plan.k, plan.t0, plan.scale)?;
    let est = recover_system(&moments, kbar)?;
    Ok((run, est))
}

/// `x_{t+1} - A_hat x_t - B_hat u_t`.
pub fn estimate_disturbance<T: Real>(
    x_next: &[T],
    x: &[T],
    u: &[T],
    a_hat: &Mat<T>,
    b_hat: &Mat<T>,
) -> Result<Vec<T>> {
    let n = a_hat.rows();
    if !a_hat.is_square()
        || b_hat.rows() != n
        || x.len() != n
        || x_next.len() != n
        || u.len() != b_hat.cols()
    {
        return Err(Error::shape("estimate_disturbance", "dimension mismatch"));
    }
    let predicted = step_unchecked(a_hat, b_hat, x, u, &vec![T::zero(); n]);
    Ok(sub_vec(x_next, &predicted))
}

/// Frobenius errors `(||A_hat - A||_F, ||B_hat - B||_F)`.
pub fn recovery_error<T: Real>(a_hat: &Mat<T>, b_hat: &Mat<T>, truth: &LinSystem<T>) -> (f64, f64) {
    let ea = if a_hat.shape() == truth.a().shape() {
        (a_hat - truth.a()).frobenius_norm().as_f64()
    } else {
        f64::INFINITY
    };
    let eb = if b_hat.shape() == truth.b().shape() {
        (b_hat - truth.b()).frobenius_norm().as_f64()
    } else {
        f64::INFINITY
    };
    (ea, eb)
}

/// Ordinary least squares of `x_{t+1}` on `(x_t, u_t)` without intercept over
/// steps `0..=t0`; returns `(A, B)`.
pub fn naive_least_squares<T: Real>(traj: &Trajectory<T>, t0: usize) -> Result<(Mat<T>, Mat<T>)> {
    if traj.controls.len() < t0 + 1 {
        return Err(Error::shape("naive_least_squares", "trajectory shorter than T0"));
    }
    let dx = traj.states[0].len();
    let du = traj.controls[0].len();
    let cols = t0 + 1;
    let mut z = Mat::zeros(dx + du, cols);
    let mut y = Mat::zeros(dx, cols);
    for t in 0..cols {
        for r in 0..dx {
            z[(r, t)] = traj.states[t][r];
            y[(r, t)] = traj.states[t + 1][r];
        }
        for r in 0..du {
            z[(dx + r, t)] = traj.controls[t][r];
        }
    }
    let theta = solve_least_squares(&z, &y).map_err(|e| match e {
        Error::RankDeficient { sigma, .. } => Error::Recovery { phase: "regressors", sigma },
        other => other,
    })?;
    Ok((theta.col_block(0, dx), theta.col_block(dx, du)))
}
