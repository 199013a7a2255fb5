//! Cost functionals over rolled-out trajectories.
//!
//! Left-endpoint Riemann quadrature on the Euler grid: the running total is
//! `dt * sum_k L(t_k, x_k, u_k)` plus a variant-specific terminal term, all
//! on the tape. Batched evaluation returns one cost per batch row; every row
//! must use the same cost variant but may carry its own weights and target.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Value};
use crate::dynamics::{StepTime, TapeTrajectory, TerminalTime};
use crate::env::{BatchField, EnvironmentSpec};
use crate::error::{Error, Result};

/// Which cost functional applies, and its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostSpec {
    /// `int (|u|^2/2 + B(x)) dt + w_t |x(T)|^2`
    Bump { w_t: f64 },
    /// `w_r int |u|^2/2 dt + w_b int B(x) dt + w_t |x(T)|^2`
    Maze { w_r: f64, w_b: f64, w_t: f64 },
    /// `w_r int |u|^2/2 dt + w_b int B(x, y) dt + w_t |x(T) - x_T|^2`
    Unicycle { w_r: f64, w_b: f64, w_t: f64 },
    /// `w1 int |u|^2 dt + w2 int B dt + w3 ||x(T) - x_T|| + w4 T`
    FreeTime { w1: f64, w2: f64, w3: f64, w4: f64 },
    /// `int (q x^2 + r |u|^2) dt + lambda |x(T) - xi|`, scalar state;
    /// xi is the task target.
    Lqr { q: f64, r: f64, lambda: f64 },
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        let ws: Vec<f64> = match self {
            CostSpec::Bump { w_t } => vec![*w_t],
            CostSpec::Maze { w_r, w_b, w_t } => vec![*w_r, *w_b, *w_t],
            CostSpec::Unicycle { w_r, w_b, w_t } => vec![*w_r, *w_b, *w_t],
            CostSpec::FreeTime { w1, w2, w3, w4 } => vec![*w1, *w2, *w3, *w4],
            CostSpec::Lqr { q, r, lambda } => vec![*q, *r, *lambda],
        };
        if ws.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::invalid("cost weights must be finite and >= 0"));
        }
        Ok(())
    }

    /// True when the variant's terminal term needs a target state.
    pub fn needs_target(&self) -> bool {
        matches!(
            self,
            CostSpec::Unicycle { .. } | CostSpec::FreeTime { .. } | CostSpec::Lqr { .. }
        )
    }

    fn variant_index(&self) -> u8 {
        match self {
            CostSpec::Bump { .. } => 0,
            CostSpec::Maze { .. } => 1,
            CostSpec::Unicycle { .. } => 2,
            CostSpec::FreeTime { .. } => 3,
            CostSpec::Lqr { .. } => 4,
        }
    }
}

/// Stacks one weight across the batch into a (B, 1) constant.
fn weight_column(
    tape: &mut Tape,
    specs: &[&CostSpec],
    pick: impl Fn(&CostSpec) -> f64,
) -> Result<Value> {
    let col: Vec<f64> = specs.iter().map(|s| pick(s)).collect();
    tape.constant(Tensor::matrix(col.len(), 1, col)?)
}

/// Squared row norms of a (B, D) tensor, as (B, 1).
fn row_norm_sq(tape: &mut Tape, x: Value) -> Result<Value> {
    let sq = tape.square(x)?;
    tape.sum_axis(sq, 1)
}

fn plain_time(t: &StepTime, moving: bool) -> Result<f64> {
    match t {
        StepTime::Fixed(t) => Ok(*t),
        // the realized field value only depends on t for moving bumps
        StepTime::Tape(_) if !moving => Ok(0.0),
        StepTime::Tape(_) => Err(Error::invalid(
            "moving obstacle fields require a fixed-horizon rollout",
        )),
    }
}

/// Per-row total cost of a batched trajectory. `specs` carries one cost per
/// row (all the same variant); `field` evaluates the shared environment
/// layout; `targets` is (B, target_dim) where the variant needs one.
pub fn total_cost_batch(
    tape: &mut Tape,
    specs: &[&CostSpec],
    field: Option<&BatchField>,
    traj: &TapeTrajectory,
    targets: Option<&Tensor>,
) -> Result<Value> {
    let first = *specs
        .first()
        .ok_or_else(|| Error::invalid("cost over an empty batch"))?;
    if specs.iter().any(|s| s.variant_index() != first.variant_index()) {
        return Err(Error::invalid("batched costs must share the cost variant"));
    }
    if specs.len() != traj.batch {
        return Err(Error::invalid(format!(
            "{} cost specs for a batch of {}",
            specs.len(),
            traj.batch
        )));
    }
    for s in specs {
        s.validate()?;
    }
    if first.needs_target() && targets.is_none() {
        return Err(Error::MissingData(
            "cost variant requires a target state".into(),
        ));
    }

    let state_dim = traj.kind.state_dim();

    // running term, accumulated per step then scaled once by dt
    let mut running: Option<Value> = None;
    for k in 0..traj.n_steps {
        let x = traj.states[k];
        let u = traj.controls[k];
        let u2 = row_norm_sq(tape, u)?;
        let mut term = match first {
            CostSpec::Bump { .. } => tape.scale(u2, 0.5)?,
            CostSpec::Maze { .. } | CostSpec::Unicycle { .. } => {
                let half = tape.scale(u2, 0.5)?;
                let w_r = weight_column(tape, specs, |s| match s {
                    CostSpec::Maze { w_r, .. } | CostSpec::Unicycle { w_r, .. } => *w_r,
                    _ => 0.0,
                })?;
                tape.mul(half, w_r)?
            }
            CostSpec::FreeTime { .. } => {
                let w1 = weight_column(tape, specs, |s| match s {
                    CostSpec::FreeTime { w1, .. } => *w1,
                    _ => 0.0,
                })?;
                tape.mul(u2, w1)?
            }
            CostSpec::Lqr { .. } => {
                let x2 = row_norm_sq(tape, x)?;
                let q = weight_column(tape, specs, |s| match s {
                    CostSpec::Lqr { q, .. } => *q,
                    _ => 0.0,
                })?;
                let r = weight_column(tape, specs, |s| match s {
                    CostSpec::Lqr { r, .. } => *r,
                    _ => 0.0,
                })?;
                let qx = tape.mul(x2, q)?;
                let ru = tape.mul(u2, r)?;
                tape.add(qx, ru)?
            }
        };
        if let Some(field) = field {
            if field.has_obstacles() {
                let pos = if state_dim > field.dim() {
                    tape.slice(x, 1, 0, field.dim())?
                } else {
                    x
                };
                let t_k = plain_time(&traj.step_times[k], field.is_moving())?;
                let b = field.eval_tape(tape, pos, t_k)?;
                let weighted = match first {
                    CostSpec::Bump { .. } => b,
                    CostSpec::Maze { .. } | CostSpec::Unicycle { .. } => {
                        let w_b = weight_column(tape, specs, |s| match s {
                            CostSpec::Maze { w_b, .. } | CostSpec::Unicycle { w_b, .. } => *w_b,
                            _ => 0.0,
                        })?;
                        tape.mul(b, w_b)?
                    }
                    CostSpec::FreeTime { .. } => {
                        let w2 = weight_column(tape, specs, |s| match s {
                            CostSpec::FreeTime { w2, .. } => *w2,
                            _ => 0.0,
                        })?;
                        tape.mul(b, w2)?
                    }
                    CostSpec::Lqr { .. } => {
                        return Err(Error::invalid("LQR tasks use an empty environment"))
                    }
                };
                term = tape.add(term, weighted)?;
            }
        }
        running = Some(match running {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let running = running.ok_or_else(|| Error::invalid("empty trajectory"))?;
    let integral = tape.mul(running, traj.dt)?;

    // terminal term
    let x_t = *traj.states.last().unwrap();
    let terminal = match first {
        CostSpec::Bump { .. } | CostSpec::Maze { .. } => {
            let n2 = row_norm_sq(tape, x_t)?;
            let w_t = weight_column(tape, specs, |s| match s {
                CostSpec::Bump { w_t } | CostSpec::Maze { w_t, .. } => *w_t,
                _ => 0.0,
            })?;
            tape.mul(n2, w_t)?
        }
        CostSpec::Unicycle { .. } => {
            let tgt = tape.constant(targets.unwrap().clone())?;
            let diff = tape.sub(x_t, tgt)?;
            let n2 = row_norm_sq(tape, diff)?;
            let w_t = weight_column(tape, specs, |s| match s {
                CostSpec::Unicycle { w_t, .. } => *w_t,
                _ => 0.0,
            })?;
            tape.mul(n2, w_t)?
        }
        CostSpec::FreeTime { .. } => {
            let tgt = tape.constant(targets.unwrap().clone())?;
            let diff = tape.sub(x_t, tgt)?;
            let n2 = row_norm_sq(tape, diff)?;
            let dist = tape.sqrt(n2)?;
            let w3 = weight_column(tape, specs, |s| match s {
                CostSpec::FreeTime { w3, .. } => *w3,
                _ => 0.0,
            })?;
            let dterm = tape.mul(dist, w3)?;
            let t_val = match traj.t_final {
                TerminalTime::Tape(v) => v,
                TerminalTime::Fixed(t) => tape.scalar(t)?,
            };
            let w4 = weight_column(tape, specs, |s| match s {
                CostSpec::FreeTime { w4, .. } => *w4,
                _ => 0.0,
            })?;
            let tterm = tape.mul(w4, t_val)?;
            tape.add(dterm, tterm)?
        }
        CostSpec::Lqr { .. } => {
            let tgt = tape.constant(targets.unwrap().clone())?;
            let diff = tape.sub(x_t, tgt)?;
            let adiff = tape.abs(diff)?;
            let n = tape.sum_axis(adiff, 1)?;
            let lam = weight_column(tape, specs, |s| match s {
                CostSpec::Lqr { lambda, .. } => *lambda,
                _ => 0.0,
            })?;
            tape.mul(n, lam)?
        }
    };
    tape.add(integral, terminal)
}

/// Scalar total cost for a single task.
pub fn total_cost(
    tape: &mut Tape,
    spec: &CostSpec,
    traj: &TapeTrajectory,
    env: &EnvironmentSpec,
    target: Option<&[f64]>,
) -> Result<Value> {
    if traj.batch != 1 {
        return Err(Error::invalid("total_cost expects a single-row trajectory"));
    }
    let field = BatchField::new(&[env])?;
    let targets = target
        .map(|t| Tensor::matrix(1, t.len(), t.to_vec()))
        .transpose()?;
    let per_row = total_cost_batch(
        tape,
        &[spec],
        if env.is_empty() { None } else { Some(&field) },
        traj,
        targets.as_ref(),
    )?;
    tape.sum_all(per_row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{euler_rollout, DynamicsKind};
    use crate::env::GaussianBump;

    fn zero_control(dim: usize) -> impl FnMut(&mut Tape, usize, StepTime) -> Result<Value> {
        move |tape, _, _| tape.constant(Tensor::matrix(1, dim, vec![0.0; dim]).unwrap())
    }

    fn rollout_cost(
        spec: &CostSpec,
        env: &EnvironmentSpec,
        x0: Vec<f64>,
        control: &mut dyn FnMut(&mut Tape, usize, StepTime) -> Result<Value>,
        t_final: f64,
        n_steps: usize,
        target: Option<&[f64]>,
    ) -> f64 {
        let mut tape = Tape::new();
        let dim = x0.len();
        let x0 = tape.input(Tensor::matrix(1, dim, x0).unwrap(), false).unwrap();
        let traj = euler_rollout(
            &mut tape,
            DynamicsKind::SingleIntegrator { dim },
            x0,
            control,
            t_final,
            n_steps,
        )
        .unwrap();
        let c = total_cost(&mut tape, spec, &traj, env, target).unwrap();
        tape.value(c).item().unwrap()
    }

    #[test]
    fn zero_control_pays_only_terminal() {
        let spec = CostSpec::Bump { w_t: 1.0 };
        let env = EnvironmentSpec::empty(2);
        let c = rollout_cost(&spec, &env, vec![0.5, 0.0], &mut zero_control(2), 1.0, 16, None);
        assert!((c - 0.25).abs() < 1e-14, "{c}");
    }

    #[test]
    fn constant_integrand_is_exact_for_any_grid() {
        let spec = CostSpec::Bump { w_t: 0.0 };
        let env = EnvironmentSpec::empty(2);
        for n in [1, 7, 30, 113] {
            let c = rollout_cost(
                &spec,
                &env,
                vec![0.0, 0.0],
                &mut |tape: &mut Tape, _: usize, _: StepTime| {
                    tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap())
                },
                1.0,
                n,
                None,
            );
            assert!((c - 0.5).abs() < 1e-13, "n={n}: {c}");
        }
    }

    #[test]
    fn stationary_state_on_bump_integrates_peak() {
        let x0 = vec![0.4, 0.6];
        let env = EnvironmentSpec::gaussian(
            2,
            vec![GaussianBump::stationary(x0.clone(), 0.1, 1.0)],
        );
        let spec = CostSpec::Bump { w_t: 0.0 };
        let c = rollout_cost(&spec, &env, x0, &mut zero_control(2), 1.0, 25, None);
        let peak = 1.0 / (2.0 * std::f64::consts::PI * 0.01);
        assert!((c - peak).abs() < 1e-9, "{c} vs {peak}");
    }

    #[test]
    fn weights_enter_affinely() {
        let env = EnvironmentSpec::gaussian(
            2,
            vec![GaussianBump::stationary(vec![0.2, 0.1], 0.08, 0.6)],
        );
        let mut control = |tape: &mut Tape, _: usize, _: StepTime| {
            tape.constant(Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap())
        };
        let at = |w_r: f64, w_b: f64, w_t: f64, control: &mut dyn FnMut(&mut Tape, usize, StepTime) -> Result<Value>| {
            rollout_cost(
                &CostSpec::Maze { w_r, w_b, w_t },
                &env,
                vec![0.3, 0.3],
                control,
                1.0,
                10,
                None,
            )
        };
        let base = at(1.0, 1.0, 1.0, &mut control);
        let double_r = at(2.0, 1.0, 1.0, &mut control);
        let r_component = double_r - base;
        let no_r = at(0.0, 1.0, 1.0, &mut control);
        assert!((base - no_r - r_component).abs() < 1e-12);
    }

    #[test]
    fn nonnegative_for_nonnegative_weights() {
        let env = EnvironmentSpec::gaussian(
            2,
            vec![GaussianBump::stationary(vec![0.5, 0.5], 0.1, 0.9)],
        );
        let spec = CostSpec::Maze {
            w_r: 0.7,
            w_b: 3.0,
            w_t: 2.0,
        };
        let mut control = |tape: &mut Tape, k: usize, _: StepTime| {
            let v = if k % 2 == 0 { -0.4 } else { 0.8 };
            tape.constant(Tensor::matrix(1, 2, vec![v, -v]).unwrap())
        };
        let c = rollout_cost(&spec, &env, vec![0.9, 0.1], &mut control, 2.0, 13, None);
        assert!(c >= 0.0);
    }

    #[test]
    fn missing_target_is_an_error() {
        let mut tape = Tape::new();
        let x0 = tape
            .input(Tensor::matrix(1, 1, vec![0.5]).unwrap(), false)
            .unwrap();
        let traj = euler_rollout(
            &mut tape,
            DynamicsKind::SingleIntegrator { dim: 1 },
            x0,
            &mut zero_control(1),
            1.0,
            4,
        )
        .unwrap();
        let spec = CostSpec::Lqr {
            q: 1.0,
            r: 1.0,
            lambda: 1.0,
        };
        let env = EnvironmentSpec::empty(1);
        assert!(total_cost(&mut tape, &spec, &traj, &env, None).is_err());
    }

    #[test]
    fn negative_weight_rejected() {
        assert!(CostSpec::Bump { w_t: -1.0 }.validate().is_err());
        assert!(CostSpec::FreeTime {
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0
        }
        .validate()
        .is_ok());
    }
}
