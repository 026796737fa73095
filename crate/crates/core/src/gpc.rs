//! Perturbation-based policies and the online gradient controller.
//!
//! A policy with memory `H` plays `u_t = -K x_t + sum_{i=1}^H M^[i-1] w_{t-i}`.
//! The surrogate cost `f_t(M)` evaluates `c_t` on the memory-truncated state
//! and action, which are affine in `M`, so `f_t` is convex whenever `c_t` is.
//!
//! Windows are passed newest first: `window[i] = w_{t-1-i}`.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::lds::{
    check_strong_stability, step_unchecked, CostGen, DisturbanceGen, Disturbances, LinSystem,
    StabilityCertificate, StageCost, Trajectory,
};
use crate::numerics::{axpy, mat_power, project_spectral_ball, spectral_norm, Mat};
use crate::scalar::Real;

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Policy
// ---------------------------------------------------------------------------

/// Blocks `M^[0]..M^[H-1]`, each `d_u x d_x`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationPolicy<T> {
    blocks: Vec<Mat<T>>,
}

/// Radius of block `b` (0-based) in the constraint set: `kappa^4 (1-gamma)^(b+1)`.
pub fn block_radius(b: usize, kappa: f64, gamma: f64) -> f64 {
    kappa.powi(4) * (1.0 - gamma).powi(b as i32 + 1)
}

impl<T: Real> PerturbationPolicy<T> {
    pub fn zeros(memory: usize, control_dim: usize, state_dim: usize) -> Self {
        PerturbationPolicy {
            blocks: vec![Mat::zeros(control_dim, state_dim); memory],
        }
    }

    pub fn from_blocks(blocks: Vec<Mat<T>>) -> Result<Self> {
        if let Some(first) = blocks.first() {
            if blocks.iter().any(|b| b.shape() != first.shape()) {
                return Err(Error::shape("PerturbationPolicy", "blocks differ in shape"));
            }
        }
        Ok(PerturbationPolicy { blocks })
    }

    pub fn memory(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Mat<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Mat<T>] {
        &mut self.blocks
    }

    /// `(d_u, d_x)`, or `None` for zero memory.
    pub fn block_shape(&self) -> Option<(usize, usize)> {
        self.blocks.first().map(Mat::shape)
    }

    /// `alpha * self + beta * other`.
    pub fn combine(&self, alpha: T, other: &Self, beta: T) -> Result<Self> {
        if self.memory() != other.memory() || self.block_shape() != other.block_shape() {
            return Err(Error::shape("PerturbationPolicy::combine", "policies differ in shape"));
        }
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| &a.scale(alpha) + &b.scale(beta))
            .collect();
        Ok(PerturbationPolicy { blocks })
    }

    pub fn frobenius_norm(&self) -> T {
        self.blocks
            .iter()
            .map(|b| {
                let n = b.frobenius_norm();
                n * n
            })
            .sum::<T>()
            .sqrt()
    }

    /// Whether every block lies in its ball, up to `tol`.
    pub fn is_feasible(&self, kappa: f64, gamma: f64, tol: f64) -> bool {
        self.blocks.iter().enumerate().all(|(b, m)| {
            spectral_norm(m).is_ok_and(|n| n.as_f64() <= block_radius(b, kappa, gamma) + tol)
        })
    }
}

/// Projects each block onto its spectral ball.
pub fn project_policy<T: Real>(m: &PerturbationPolicy<T>, kappa: f64, gamma: f64) -> PerturbationPolicy<T> {
    let blocks = m
        .blocks
        .iter()
        .enumerate()
        .map(|(b, blk)| project_spectral_ball(blk, T::lit(block_radius(b, kappa, gamma))))
        .collect();
    PerturbationPolicy { blocks }
}

/// `u = -K x + sum_{i=1}^H M^[i-1] recent[i-1]` with `recent[i-1] = w_{t-i}`.
pub fn act<T: Real>(m: &PerturbationPolicy<T>, x: &[T], k: &Mat<T>, recent: &[Vec<T>]) -> Result<Vec<T>> {
    if recent.len() < m.memory() {
        return Err(Error::shape(
            "act",
            format!("window has {} entries, memory is {}", recent.len(), m.memory()),
        ));
    }
    if k.cols() != x.len() {
        return Err(Error::shape("act", "K and x disagree"));
    }
    let mut u: Vec<T> = k.matvec(x).into_iter().map(|v| -v).collect();
    for (blk, w) in m.blocks.iter().zip(recent) {
        if blk.shape() != (k.rows(), w.len()) {
            return Err(Error::shape("act", "policy block shape"));
        }
        axpy(&mut u, T::one(), &blk.matvec(w));
    }
    Ok(u)
}

// ---------------------------------------------------------------------------
// Surrogate
// ---------------------------------------------------------------------------

/// The model `(A_hat, B_hat, K)` with cached powers of `A' = A_hat - B_hat K`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModel<T> {
    a_hat: Mat<T>,
    b_hat: Mat<T>,
    k: Mat<T>,
    memory: usize,
    /// `A'^j` for `j = 0..=H`.
    powers: Vec<Mat<T>>,
    /// `A'^j B_hat` for `j = 0..=H`.
    powers_b: Vec<Mat<T>>,
}

impl<T: Real> SurrogateModel<T> {
    pub fn new(a_hat: &Mat<T>, b_hat: &Mat<T>, k: &Mat<T>, memory: usize) -> Result<Self> {
        let sys = LinSystem::new(a_hat.clone(), b_hat.clone())?;
        let a_prime = sys.closed_loop(k)?;
        let mut powers = Vec::with_capacity(memory + 1);
        let mut cur = Mat::identity(a_prime.rows());
        for _ in 0..=memory {
            let next = &a_prime * &cur;
            powers.push(cur);
            cur = next;
        }
        let powers_b = powers.iter().map(|p| p * b_hat).collect();
        Ok(SurrogateModel {
            a_hat: a_hat.clone(),
            b_hat: b_hat.clone(),
            k: k.clone(),
            memory,
            powers,
            powers_b,
        })
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn state_dim(&self) -> usize {
        self.a_hat.rows()
    }

    pub fn control_dim(&self) -> usize {
        self.b_hat.cols()
    }

    pub fn a_hat(&self) -> &Mat<T> {
        &self.a_hat
    }

    pub fn b_hat(&self) -> &Mat<T> {
        &self.b_hat
    }

    pub fn k(&self) -> &Mat<T> {
        &self.k
    }

    /// Required window length `2H + 1`.
    pub fn window_len(&self) -> usize {
        2 * self.memory + 1
    }

    fn check(&self, m: &PerturbationPolicy<T>, window: &[Vec<T>]) -> Result<()> {
        if m.memory() != self.memory {
            return Err(Error::shape(
                "surrogate",
                format!("policy memory {} vs model memory {}", m.memory(), self.memory),
            ));
        }
        if let Some(shape) = m.block_shape() {
            if shape != (self.control_dim(), self.state_dim()) {
                return Err(Error::shape("surrogate", "policy block shape"));
            }
        }
        if window.len() != self.window_len() {
            return Err(Error::shape(
                "surrogate",
                format!("window has {} entries, expected {}", window.len(), self.window_len()),
            ));
        }
        if window.iter().any(|w| w.len() != self.state_dim()) {
            return Err(Error::shape("surrogate", "window entry dimension"));
        }
        Ok(())
    }
}

/// Everything `f_t` depends on besides `M`.
pub struct SurrogateContext<'a, T: Real> {
    pub model: &'a SurrogateModel<T>,
    /// `window[i] = w_{t-1-i}`, `i = 0..=2H`.
    pub window: &'a [Vec<T>],
    pub cost: &'a dyn StageCost<T>,
    pub t: usize,
}

/// `Psi_i = A'^i 1{i<=H} + sum_{j=0}^H A'^j B M^[i-j-1] 1{i-j in [1,H]}`.
pub fn transfer_matrix_psi<T: Real>(m: &PerturbationPolicy<T>, model: &SurrogateModel<T>, i: usize) -> Result<Mat<T>> {
    let h = model.memory;
    if i > 2 * h {
        return Err(Error::InvalidInput(format!("Psi index {i} outside 0..={}", 2 * h)));
    }
    if m.memory() != h {
        return Err(Error::shape("transfer_matrix_psi", "policy memory"));
    }
    let n = model.state_dim();
    let mut psi = if i <= h {
        model.powers[i].clone()
    } else {
        Mat::zeros(n, n)
    };
    for j in 0..=h.min(i) {
        let l = i - j;
        if (1..=h).contains(&l) {
            psi += &(&model.powers_b[j] * &m.blocks[l - 1]);
        }
    }
    Ok(psi)
}

/// `u_j = sum_{l=1}^H M^[l-1] window[j+l]` for `j = 0..=H`.
fn inner_controls<T: Real>(m: &PerturbationPolicy<T>, window: &[Vec<T>], du: usize) -> Vec<Vec<T>> {
    let h = m.memory();
    (0..=h)
        .map(|j| {
            let mut u = vec![T::zero(); du];
            for (l, blk) in m.blocks.iter().enumerate() {
                blk.matvec_add(&window[j + l + 1], &mut u);
            }
            u
        })
        .collect()
}

fn surrogate_pair_unchecked<T: Real>(
    m: &PerturbationPolicy<T>,
    model: &SurrogateModel<T>,
    window: &[Vec<T>],
) -> (Vec<T>, Vec<T>) {
    let h = model.memory;
    let mut y = vec![T::zero(); model.state_dim()];
    for i in 0..=h {
        model.powers[i].matvec_add(&window[i], &mut y);
    }
    for (j, u) in inner_controls(m, window, model.control_dim()).iter().enumerate() {
        model.powers_b[j].matvec_add(u, &mut y);
    }
    let mut v: Vec<T> = model.k.matvec(&y).into_iter().map(|x| -x).collect();
    for (l, blk) in m.blocks.iter().enumerate() {
        blk.matvec_add(&window[l], &mut v);
    }
    (y, v)
}

/// Surrogate state `y_t = sum_{i=0}^{2H} Psi_i w_{t-1-i}`.
pub fn surrogate_state<T: Real>(m: &PerturbationPolicy<T>, model: &SurrogateModel<T>, window: &[Vec<T>]) -> Result<Vec<T>> {
    model.check(m, window)?;
    Ok(surrogate_pair_unchecked(m, model, window).0)
}

/// Surrogate action `v_t = -K y_t + sum_{i=1}^H M^[i-1] w_{t-i}`.
pub fn surrogate_action<T: Real>(m: &PerturbationPolicy<T>, model: &SurrogateModel<T>, window: &[Vec<T>]) -> Result<Vec<T>> {
    model.check(m, window)?;
    Ok(surrogate_pair_unchecked(m, model, window).1)
}

/// `f_t(M) = c_t(y_t, v_t)`.
pub fn surrogate_cost<T: Real>(m: &PerturbationPolicy<T>, ctx: &SurrogateContext<'_, T>) -> Result<T> {
    ctx.model.check(m, ctx.window)?;
    let (y, v) = surrogate_pair_unchecked(m, ctx.model, ctx.window);
    Ok(ctx.cost.eval(ctx.t, &y, &v))
}

/// Gradient of `f_t` in `M`: closed form when the cost supplies its gradient,
/// central differences otherwise.
pub fn grad_surrogate<T: Real>(m: &PerturbationPolicy<T>, ctx: &SurrogateContext<'_, T>) -> Result<PerturbationPolicy<T>> {
    ctx.model.check(m, ctx.window)?;
    let model = ctx.model;
    let (y, v) = surrogate_pair_unchecked(m, model, ctx.window);
    let Some((gy, gv)) = ctx.cost.gradient(ctx.t, &y, &v) else {
        return grad_surrogate_fd(m, ctx);
    };
    // Pull the action gradient back through v = -K y + ...
    let mut gy_total = gy;
    axpy(&mut gy_total, -T::one(), &model.k.tmatvec(&gv));
    let lambdas: Vec<Vec<T>> = model.powers_b.iter().map(|pb| pb.tmatvec(&gy_total)).collect();
    let (du, dx) = (model.control_dim(), model.state_dim());
    let blocks = (0..m.memory())
        .map(|b| {
            let l = b + 1;
            let mut g = Mat::outer(&gv, &ctx.window[b]);
            for (j, lam) in lambdas.iter().enumerate() {
                g.add_outer(T::one(), lam, &ctx.window[j + l]);
            }
            debug_assert_eq!(g.shape(), (du, dx));
            g
        })
        .collect();
    Ok(PerturbationPolicy { blocks })
}

/// Per-entry central differences with step [`FD_STEP`].
pub fn grad_surrogate_fd<T: Real>(m: &PerturbationPolicy<T>, ctx: &SurrogateContext<'_, T>) -> Result<PerturbationPolicy<T>> {
    ctx.model.check(m, ctx.window)?;
    let h = T::lit(FD_STEP);
    let two_h = h + h;
    let mut probe = m.clone();
    let mut grad = PerturbationPolicy::zeros(m.memory(), ctx.model.control_dim(), ctx.model.state_dim());
    let f = |p: &PerturbationPolicy<T>| {
        let (y, v) = surrogate_pair_unchecked(p, ctx.model, ctx.window);
        ctx.cost.eval(ctx.t, &y, &v)
    };
    for b in 0..m.memory() {
        for idx in 0..m.blocks[b].as_slice().len() {
            let orig = m.blocks[b].as_slice()[idx];
            probe.blocks[b].as_mut_slice()[idx] = orig + h;
            let up = f(&probe);
            probe.blocks[b].as_mut_slice()[idx] = orig - h;
            let down = f(&probe);
            probe.blocks[b].as_mut_slice()[idx] = orig;
            grad.blocks[b].as_mut_slice()[idx] = (up - down) / two_h;
        }
    }
    Ok(grad)
}

/// `Pi(M - eta grad f_t(M))`.
pub fn ogd_update<T: Real>(
    m: &PerturbationPolicy<T>,
    ctx: &SurrogateContext<'_, T>,
    eta: f64,
    kappa: f64,
    gamma: f64,
) -> Result<PerturbationPolicy<T>> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::InvalidInput(format!("step size must be finite and >= 0, got {eta}")));
    }
    let g = grad_surrogate(m, ctx)?;
    let stepped = m.combine(T::one(), &g, T::lit(-eta))?;
    Ok(project_policy(&stepped, kappa, gamma))
}

// ---------------------------------------------------------------------------
// Controller
// ---------------------------------------------------------------------------

/// `ceil(gamma^-1 ln(kappa^2 T))`, at least one.
pub fn default_memory(kappa: f64, gamma: f64, horizon: usize) -> usize {
    let v = ((kappa * kappa * horizon.max(1) as f64).ln() / gamma).ceil();
    if v.is_finite() && v >= 1.0 {
        v as usize
    } else {
        1
    }
}

/// `1 / (G W sqrt(T))` with `G` and `W` floored at one.
pub fn default_step(gradient_bound: f64, disturbance_bound: f64, horizon: usize) -> f64 {
    1.0 / (gradient_bound.max(1.0) * disturbance_bound.max(1.0) * (horizon.max(1) as f64).sqrt())
}

/// Online gradient controller on a (possibly estimated) model.
#[derive(Clone, Debug)]
pub struct GpcController<T: Real> {
    policy: PerturbationPolicy<T>,
    model: SurrogateModel<T>,
    kappa: f64,
    gamma: f64,
    eta: f64,
    /// `history[i] = w_{t-1-i}`, length `2H + 1`.
    history: VecDeque<Vec<T>>,
}

impl<T: Real> GpcController<T> {
    pub fn new(model: SurrogateModel<T>, kappa: f64, gamma: f64, eta: f64) -> Result<Self> {
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(Error::InvalidInput(format!("step size must be finite and >= 0, got {eta}")));
        }
        let h = model.memory();
        let history = std::iter::repeat_n(vec![T::zero(); model.state_dim()], 2 * h + 1).collect();
        Ok(GpcController {
            policy: PerturbationPolicy::zeros(h, model.control_dim(), model.state_dim()),
            model,
            kappa,
            gamma,
            eta,
            history,
        })
    }

    pub fn policy(&self) -> &PerturbationPolicy<T> {
        &self.policy
    }

    pub fn model(&self) -> &SurrogateModel<T> {
        &self.model
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Overwrites the most recent estimate `w_{t-1}`.
    pub fn set_latest(&mut self, w: Vec<T>) {
        self.history[0] = w;
    }

    pub fn act(&self, x: &[T]) -> Vec<T> {
        let mut u: Vec<T> = self.model.k.matvec(x).into_iter().map(|v| -v).collect();
        for (blk, w) in self.policy.blocks.iter().zip(&self.history) {
            blk.matvec_add(w, &mut u);
        }
        u
    }

    /// Gradient step on `f_t`, then records `w_t`.
    pub fn update(&mut self, t: usize, cost: &dyn StageCost<T>, w_t: Vec<T>) -> Result<()> {
        self.history.make_contiguous();
        let window = self.history.as_slices().0;
        let ctx = SurrogateContext {
            model: &self.model,
            window,
            cost,
            t,
        };
        self.policy = ogd_update(&self.policy, &ctx, self.eta, self.kappa, self.gamma)?;
        self.history.pop_back();
        self.history.push_front(w_t);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct KnownSystemRun<T: Real> {
    pub trajectory: Trajectory<T>,
    pub total_cost: T,
    pub memory: usize,
    pub eta: f64,
    pub final_policy: PerturbationPolicy<T>,
}

/// Runs the online controller on a known system, recovering each disturbance
/// as `x_{t+1} - A x_t - B u_t`.
pub fn run_known_system<T: Real>(
    sys: &LinSystem<T>,
    cert: &StabilityCertificate<T>,
    dist: &DisturbanceGen<T>,
    costs: &CostGen<T>,
    horizon: usize,
    memory: Option<usize>,
    eta: Option<f64>,
) -> Result<KnownSystemRun<T>> {
    let report = check_strong_stability(sys, cert);
    if !report.pass {
        return Err(Error::Precondition(format!(
            "stability certificate fails: {:?}",
            report.violated()
        )));
    }
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be >= 1".into()));
    }
    let (kappa, gamma) = (cert.kappa.as_f64(), cert.gamma.as_f64());
    let h = memory.unwrap_or_else(|| default_memory(kappa, gamma, horizon));
    let eta = eta.unwrap_or_else(|| default_step(costs.gradient_bound(), dist.bound().as_f64(), horizon));
    let model = SurrogateModel::new(sys.a(), sys.b(), &cert.k, h)?;
    let mut ctrl = GpcController::new(model, kappa, gamma, eta)?;

    let mut traj = Trajectory::with_initial_state(vec![T::zero(); sys.state_dim()]);
    let mut recovered = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let x = traj.states[t].clone();
        let u = ctrl.act(&x);
        let w = dist.at(t);
        let cost = costs.eval(t, &x, &u);
        let next = step_unchecked(sys.a(), sys.b(), &x, &u, &w);
        let predicted = step_unchecked(sys.a(), sys.b(), &x, &u, &vec![T::zero(); x.len()]);
        let w_rec: Vec<T> = next.iter().zip(&predicted).map(|(&a, &b)| a - b).collect();
        ctrl.update(t, costs, w_rec.clone())?;
        recovered.push(w_rec);
        traj.push(u, w, cost, next);
    }
    traj.estimated = Some(recovered);
    let total_cost = traj.total_cost();
    Ok(KnownSystemRun {
        trajectory: traj,
        total_cost,
        memory: h,
        eta,
        final_policy: ctrl.policy,
    })
}

/// Largest `||A'^j||` used by the model; handy for diagnostics.
pub fn max_power_norm<T: Real>(model: &SurrogateModel<T>) -> Result<T> {
    let mut best = T::zero();
    for p in &model.powers {
        best = best.max(spectral_norm(p)?);
    }
    Ok(best)
}

/// `A'^i` computed directly, for oracles outside this module.
pub fn closed_loop_power<T: Real>(model: &SurrogateModel<T>, i: u32) -> Result<Mat<T>> {
    let a_prime = &model.a_hat - &(&model.b_hat * &model.k);
    mat_power(&a_prime, i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lds::{make_costs, make_disturbance, synth_stable_instance, CostKind, CostParams, DisturbanceKind, DisturbanceParams, Instance};
    use crate::numerics::norm2;
    use crate::rng::{gaussian_mat, gaussian_vec, streams, CounterRng};

    struct Constant;
    impl StageCost<f64> for Constant {
        fn eval(&self, _: usize, _: &[f64], _: &[f64]) -> f64 {
            3.0
        }
    }

    fn setup(seed: u64, h: usize) -> (Instance<f64>, SurrogateModel<f64>, PerturbationPolicy<f64>, Vec<Vec<f64>>) {
        let inst: Instance<f64> = synth_stable_instance(3, 2, 2.0, 0.3, seed).unwrap();
        let model = SurrogateModel::new(inst.system.a(), inst.system.b(), &inst.certificate.k, h).unwrap();
        let mut rng = CounterRng::new(seed, streams::VERIFY).at(0);
        let blocks = (0..h).map(|_| gaussian_mat(&mut rng, 2, 3).scale(0.3)).collect();
        let m = PerturbationPolicy::from_blocks(blocks).unwrap();
        let window = (0..2 * h + 1).map(|_| gaussian_vec(&mut rng, 3)).collect();
        (inst, model, m, window)
    }

    #[test]
    fn psi_trivial_cases() {
        let (_, model, m, _) = setup(1, 3);
        assert_eq!(transfer_matrix_psi(&m, &model, 0).unwrap(), Mat::identity(3));
        let zero = PerturbationPolicy::zeros(3, 2, 3);
        for i in 0..=6 {
            let psi = transfer_matrix_psi(&zero, &model, i).unwrap();
            let expect = if i <= 3 { closed_loop_power(&model, i as u32).unwrap() } else { Mat::zeros(3, 3) };
            assert!((&psi - &expect).max_abs() < 1e-13);
        }
        assert!(transfer_matrix_psi(&m, &model, 7).is_err());
    }

    #[test]
    fn surrogate_with_zero_window_is_zero() {
        let (_, model, m, _) = setup(2, 2);
        let window = vec![vec![0.0; 3]; 5];
        assert_eq!(surrogate_state(&m, &model, &window).unwrap(), vec![0.0; 3]);
        assert_eq!(surrogate_action(&m, &model, &window).unwrap(), vec![0.0; 2]);
        let cost: CostGen<f64> = make_costs(CostKind::Quadratic, &CostParams::default(), 3, 2).unwrap();
        let ctx = SurrogateContext { model: &model, window: &window, cost: &cost, t: 0 };
        assert_eq!(surrogate_cost(&m, &ctx).unwrap(), 0.0);
        let g = grad_surrogate(&m, &ctx).unwrap();
        assert_eq!(g.frobenius_norm(), 0.0);
    }

    #[test]
    fn surrogate_rejects_short_window() {
        let (_, model, m, window) = setup(2, 2);
        assert!(matches!(surrogate_state(&m, &model, &window[..4]), Err(Error::Shape { .. })));
    }

    #[test]
    fn constant_cost_has_zero_gradient() {
        let (_, model, m, window) = setup(3, 2);
        let ctx = SurrogateContext { model: &model, window: &window, cost: &Constant, t: 0 };
        assert_eq!(grad_surrogate(&m, &ctx).unwrap().frobenius_norm(), 0.0);
    }

    #[test]
    fn projection_scalar_example() {
        let m = PerturbationPolicy::from_blocks(vec![Mat::from_diag(&[5.0_f64])]).unwrap();
        let p = project_policy(&m, 1.0, 0.5);
        assert!((p.blocks()[0][(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ogd_with_zero_step_is_identity() {
        let (_, model, m, window) = setup(4, 2);
        let m = project_policy(&m, 2.0, 0.3);
        let cost: CostGen<f64> = make_costs(CostKind::Quadratic, &CostParams::default(), 3, 2).unwrap();
        let ctx = SurrogateContext { model: &model, window: &window, cost: &cost, t: 0 };
        assert_eq!(ogd_update(&m, &ctx, 0.0, 2.0, 0.3).unwrap(), m);
    }

    #[test]
    fn act_examples() {
        let k = Mat::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let zero = PerturbationPolicy::<f64>::zeros(2, 1, 2);
        let window = vec![vec![1.0, 1.0]; 2];
        assert_eq!(act(&zero, &[1.0, -1.0], &k, &window).unwrap(), vec![1.0]);
        let m = PerturbationPolicy::from_blocks(vec![Mat::from_rows(&[vec![1.0, 0.0]]).unwrap(); 2]).unwrap();
        assert_eq!(act(&m, &[0.0, 0.0], &k, &vec![vec![0.0; 2]; 2]).unwrap(), vec![0.0]);
        assert_eq!(act(&m, &[0.0, 0.0], &k, &[vec![1.0, 5.0], vec![2.0, 7.0]]).unwrap(), vec![3.0]);
    }

    #[test]
    fn known_system_zero_disturbance() {
        let inst: Instance<f64> = synth_stable_instance(3, 2, 2.0, 0.3, 5).unwrap();
        let dist: DisturbanceGen<f64> = make_disturbance(DisturbanceKind::Zero, 0.0, 3, &DisturbanceParams::default(), 0).unwrap();
        let costs: CostGen<f64> = make_costs(CostKind::Quadratic, &CostParams::default(), 3, 2).unwrap();
        let run = run_known_system(&inst.system, &inst.certificate, &dist, &costs, 200, None, None).unwrap();
        assert_eq!(run.total_cost, 0.0);
        assert!(run.trajectory.controls.iter().flatten().all(|&u| u == 0.0));
    }

    #[test]
    fn known_system_recovers_disturbances() {
        let inst: Instance<f64> = synth_stable_instance(3, 2, 2.0, 0.3, 6).unwrap();
        let dist: DisturbanceGen<f64> =
            make_disturbance(DisturbanceKind::Sinusoid, 1.0, 3, &DisturbanceParams::default(), 6).unwrap();
        let costs: CostGen<f64> = make_costs(CostKind::Quadratic, &CostParams::default(), 3, 2).unwrap();
        let run = run_known_system(&inst.system, &inst.certificate, &dist, &costs, 300, Some(4), None).unwrap();
        let tr = &run.trajectory;
        assert!(tr.replays_exactly(&inst.system));
        for (t, (w, w_hat)) in tr.disturbances.iter().zip(tr.estimated.as_ref().unwrap()).enumerate() {
            let scale = norm2(&tr.states[t + 1]) + norm2(w) + 1.0;
            let err: f64 = w.iter().zip(w_hat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 8.0 * f64::EPSILON * scale, "t={t} err={err:e}");
        }
        assert!(run.final_policy.is_feasible(2.0, 0.3, 1e-10));
    }

    #[test]
    fn known_system_rejects_bad_certificate() {
        let inst: Instance<f64> = synth_stable_instance(3, 2, 2.0, 0.3, 5).unwrap();
        let mut cert = inst.certificate.clone();
        cert.kappa = 0.5;
        let dist: DisturbanceGen<f64> = make_disturbance(DisturbanceKind::Zero, 0.0, 3, &DisturbanceParams::default(), 0).unwrap();
        let costs: CostGen<f64> = make_costs(CostKind::Quadratic, &CostParams::default(), 3, 2).unwrap();
        let err = run_known_system(&inst.system, &cert, &dist, &costs, 10, None, None).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn defaults() {
        assert_eq!(default_memory(1.0, 0.5, 1), 1);
        // ceil(ln(4 * 10^4) / 0.3) = ceil(35.32)
        assert_eq!(default_memory(2.0, 0.3, 10_000), 36);
        assert!((default_step(2.0, 1.0, 100) - 0.05).abs() < 1e-15);
    }
}
