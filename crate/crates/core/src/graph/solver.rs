use thiserror::Error;

use super::{solve_normal_equations, FactorGraph, GraphError, Relinearization, Values};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussNewtonConfig<T> {
    pub max_iters: usize,
    /// Stop when `‖δX‖∞` falls below this.
    pub abs_tol: T,
    /// Stop when the relative cost decrease falls below this.
    pub rel_tol: T,
    pub relinearization: Relinearization<T>,
}

impl<T: Real> Default for GaussNewtonConfig<T> {
    fn default() -> Self {
        Self { max_iters: 50, abs_tol: T::lit(1e-10), rel_tol: T::lit(1e-8), relinearization: Relinearization::Full }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussNewtonReport<T> {
    pub iterations: usize,
    pub initial_cost: T,
    pub final_cost: T,
    /// Cost after each accepted (non-increasing) iteration.
    pub cost_trace: Vec<T>,
    pub converged: bool,
    /// Factor Jacobian evaluations during this run.
    pub linearizations: usize,
}

#[derive(Debug, Error)]
pub enum SolveError<T: Real> {
    #[error("Gauss-Newton diverged: cost rose for 3 consecutive iterations (best cost {})", report.final_cost)]
    Diverged { best: Box<Values<T>>, report: GaussNewtonReport<T> },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

const MAX_CONSECUTIVE_INCREASES: usize = 3;
/// Relative cost changes below this are summation noise, whatever `rel_tol` asks for.
const ROUNDING_REL: f64 = 1e-12;

/// Undamped Gauss-Newton: assemble, solve, retract, repeat. On return the
/// graph's cached error norms belong to the returned values.
pub fn gauss_newton<T: Real>(
    graph: &mut FactorGraph<T>,
    initial: Values<T>,
    config: &GaussNewtonConfig<T>,
) -> Result<(Values<T>, GaussNewtonReport<T>), SolveError<T>> {
    let lin_before = graph.linearization_count();
    let mut values = initial;
    let mut assembly = graph.assemble(&values, config.relinearization)?;
    let mut report = GaussNewtonReport {
        iterations: 0,
        initial_cost: assembly.cost,
        final_cost: assembly.cost,
        cost_trace: Vec::new(),
        converged: false,
        linearizations: 0,
    };
    let mut best = (values.clone(), assembly.cost);
    let mut increases = 0;
    let mut at_noise_floor: Option<T> = None;
    let rounding = |cost: T| config.rel_tol.max(T::lit(ROUNDING_REL)) * cost + T::default_epsilon() * T::lit(1e3);

    while report.iterations < config.max_iters {
        if assembly.system.layout().is_empty() || assembly.cost == T::zero() {
            report.converged = true;
            break;
        }
        let delta = solve_normal_equations(&assembly.system)?;
        let step = delta.amax();
        if step < config.abs_tol || at_noise_floor.is_some_and(|prev| step > prev * T::lit(0.5)) {
            report.converged = true;
            break;
        }
        let candidate = values.retract(assembly.system.layout(), &delta)?;
        let next = graph.assemble(&candidate, config.relinearization)?;
        report.iterations += 1;
        let cost = next.cost;
        values = candidate;
        assembly = next;
        // Accepted means no worse than the best point so far.
        if cost <= best.1 {
            increases = 0;
            at_noise_floor = None;
            report.cost_trace.push(cost);
            let prev_best = best.1;
            best = (values.clone(), cost);
            if (prev_best - cost) / prev_best.max(T::lit(1e-30)) < config.rel_tol {
                report.converged = true;
                break;
            }
        } else if cost - best.1 < rounding(best.1) {
            // Rounding-level increase at the optimum. The cost no longer
            // resolves progress but the step still does along flat
            // directions; keep going while it shrinks.
            increases = 0;
            at_noise_floor = Some(step);
            continue;
        } else {
            increases += 1;
            log::debug!("Gauss-Newton cost increased: {} -> {cost}", best.1);
            if increases >= MAX_CONSECUTIVE_INCREASES {
                report.final_cost = best.1;
                report.linearizations = graph.linearization_count() - lin_before;
                graph.refresh_errors(&best.0)?;
                return Err(SolveError::Diverged { best: Box::new(best.0), report });
            }
        }
    }
    // Points at the noise floor are kept; anything worse falls back to the best.
    report.final_cost = assembly.cost;
    if assembly.cost - best.1 >= rounding(best.1) {
        values = best.0;
        graph.refresh_errors(&values)?;
        report.final_cost = best.1;
    }
    report.linearizations = graph.linearization_count() - lin_before;
    Ok((values, report))
}
