//! Differentiable forward-Euler rollout of controlled dynamics.
//!
//! State and control are both evaluated at the left endpoint of each step:
//! `x[k+1] = x[k] + dt * f(t_k, x[k], u(t_k))` with `t_k = k dt`. The whole
//! recursion lives on the tape, so gradients flow to control parameters and,
//! for free-terminal-time rollouts, to the horizon itself. Gradients are
//! those of the discretized system, not of the continuous ODE.
//!
//! Rollouts are batched: states are (B, S) tensors and the control closure
//! returns (B, C). Single-instance rollouts use B = 1.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Value};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DynamicsKind {
    SingleIntegrator { dim: usize },
    /// State (x, y, phi, v); control (steering rate, acceleration).
    Unicycle,
}

impl DynamicsKind {
    pub fn state_dim(&self) -> usize {
        match self {
            DynamicsKind::SingleIntegrator { dim } => *dim,
            DynamicsKind::Unicycle => 4,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            DynamicsKind::SingleIntegrator { dim } => *dim,
            DynamicsKind::Unicycle => 2,
        }
    }

    /// Plain (non-tape) vector field, for inference-mode integration.
    pub fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self {
            DynamicsKind::SingleIntegrator { .. } => u.to_vec(),
            DynamicsKind::Unicycle => {
                vec![x[3] * x[2].cos(), x[3] * x[2].sin(), u[0], u[1]]
            }
        }
    }

    /// Tape vector field over a batch: x (B, S), u (B, C) -> (B, S).
    pub fn eval_tape(&self, tape: &mut Tape, x: Value, u: Value) -> Result<Value> {
        match self {
            DynamicsKind::SingleIntegrator { dim } => {
                let (_, c) = tape.value(u).dims2()?;
                if c != *dim {
                    return Err(Error::invalid(format!(
                        "single integrator expects {dim}-d control, got {c}"
                    )));
                }
                Ok(u)
            }
            DynamicsKind::Unicycle => {
                let phi = tape.slice(x, 1, 2, 3)?;
                let v = tape.slice(x, 1, 3, 4)?;
                let cos_phi = tape.cos(phi)?;
                let sin_phi = tape.sin(phi)?;
                let dx = tape.mul(v, cos_phi)?;
                let dy = tape.mul(v, sin_phi)?;
                tape.concat(&[dx, dy, u], 1)
            }
        }
    }
}

/// Left-endpoint time of one Euler step, as seen by the control closure.
#[derive(Clone, Copy)]
pub enum StepTime {
    /// Fixed horizon: the plain grid time k * dt.
    Fixed(f64),
    /// Free horizon: k * dt as a tape value of shape (B, 1) or (1, 1).
    Tape(Value),
}

/// Terminal time of a rollout.
#[derive(Clone, Copy)]
pub enum TerminalTime {
    Fixed(f64),
    Tape(Value),
}

/// The on-tape result of a rollout: states at all N_t + 1 grid points and
/// the controls that produced them.
pub struct TapeTrajectory {
    pub kind: DynamicsKind,
    pub batch: usize,
    pub n_steps: usize,
    /// dt as a tape value, shape (1,1) for fixed horizons or matching the
    /// terminal-time tensor for free horizons.
    pub dt: Value,
    pub t_final: TerminalTime,
    pub step_times: Vec<StepTime>,
    /// length N_t + 1, each (B, S)
    pub states: Vec<Value>,
    /// length N_t, each (B, C)
    pub controls: Vec<Value>,
}

impl TapeTrajectory {
    /// Extracts the plain trajectory of one batch row.
    pub fn extract(&self, tape: &Tape, row: usize) -> Result<Trajectory> {
        let sd = self.kind.state_dim();
        let cd = self.kind.control_dim();
        let t_final = match self.t_final {
            TerminalTime::Fixed(t) => t,
            TerminalTime::Tape(v) => {
                let t = tape.value(v);
                t.data()[row.min(t.numel() - 1)]
            }
        };
        let dt = t_final * (1.0 / self.n_steps as f64);
        let times: Vec<f64> = (0..=self.n_steps).map(|k| k as f64 * dt).collect();
        let mut states = Vec::with_capacity(self.n_steps + 1);
        for v in &self.states {
            let t = tape.value(*v);
            states.push(t.data()[row * sd..(row + 1) * sd].to_vec());
        }
        let mut controls = Vec::with_capacity(self.n_steps);
        for v in &self.controls {
            let t = tape.value(*v);
            controls.push(t.data()[row * cd..(row + 1) * cd].to_vec());
        }
        Trajectory::new(times, states, controls, t_final)
    }
}

/// A realized time-gridded trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub t_final: f64,
}

impl Trajectory {
    pub fn new(
        times: Vec<f64>,
        states: Vec<Vec<f64>>,
        controls: Vec<Vec<f64>>,
        t_final: f64,
    ) -> Result<Self> {
        if times.len() != states.len() || controls.len() + 1 != states.len() {
            return Err(Error::invalid(format!(
                "trajectory grid mismatch: {} times, {} states, {} controls",
                times.len(),
                states.len(),
                controls.len()
            )));
        }
        Ok(Trajectory {
            times,
            states,
            controls,
            t_final,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.controls.len()
    }

    pub fn terminal_state(&self) -> &[f64] {
        self.states.last().expect("non-empty trajectory")
    }

    /// CSV with header `t,x_0..x_{S-1},u_0..u_{C-1}`, one row per grid
    /// point; the final row has empty control columns.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let sd = self.states[0].len();
        let cd = self.controls.first().map_or(0, |c| c.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..sd).map(|i| format!("x_{i}")));
        header.extend((0..cd).map(|i| format!("u_{i}")));
        w.write_record(&header)?;
        for (k, t) in self.times.iter().enumerate() {
            let mut rec = vec![format!("{t}")];
            rec.extend(self.states[k].iter().map(|v| format!("{v}")));
            if k < self.controls.len() {
                rec.extend(self.controls[k].iter().map(|v| format!("{v}")));
            } else {
                rec.extend((0..cd).map(|_| String::new()));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn rollout_step_error(e: Error, k: usize) -> Error {
    match e {
        Error::NonFinite { op, .. } => Error::NonFinite {
            op,
            detail: Some(format!("rollout step {k}")),
        },
        other => other,
    }
}

fn rollout_impl(
    tape: &mut Tape,
    kind: DynamicsKind,
    x0: Value,
    control_fn: &mut dyn FnMut(&mut Tape, usize, StepTime) -> Result<Value>,
    dt: Value,
    t_final: TerminalTime,
    n_steps: usize,
    fixed_dt: Option<f64>,
) -> Result<TapeTrajectory> {
    let (batch, sd) = tape.value(x0).dims2()?;
    if sd != kind.state_dim() {
        return Err(Error::invalid(format!(
            "state dim {} does not match dynamics ({})",
            sd,
            kind.state_dim()
        )));
    }
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut controls = Vec::with_capacity(n_steps);
    let mut step_times = Vec::with_capacity(n_steps);
    states.push(x0);
    let mut x = x0;
    for k in 0..n_steps {
        let t_k = match fixed_dt {
            Some(h) => StepTime::Fixed(k as f64 * h),
            None => StepTime::Tape(tape.scale(dt, k as f64).map_err(|e| rollout_step_error(e, k))?),
        };
        step_times.push(t_k);
        let u = control_fn(tape, k, t_k).map_err(|e| rollout_step_error(e, k))?;
        let f = kind
            .eval_tape(tape, x, u)
            .map_err(|e| rollout_step_error(e, k))?;
        let df = tape.mul(f, dt).map_err(|e| rollout_step_error(e, k))?;
        x = tape.add(x, df).map_err(|e| rollout_step_error(e, k))?;
        states.push(x);
        controls.push(u);
    }
    Ok(TapeTrajectory {
        kind,
        batch,
        n_steps,
        dt,
        t_final,
        step_times,
        states,
        controls,
    })
}

/// Fixed-horizon Euler rollout.
pub fn euler_rollout(
    tape: &mut Tape,
    kind: DynamicsKind,
    x0: Value,
    control_fn: &mut dyn FnMut(&mut Tape, usize, StepTime) -> Result<Value>,
    t_final: f64,
    n_steps: usize,
) -> Result<TapeTrajectory> {
    if t_final <= 0.0 {
        return Err(Error::invalid("rollout horizon must be positive"));
    }
    if n_steps == 0 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    // same expression as the free-time path so the two recursions agree
    // bit-for-bit at equal horizons
    let h = t_final * (1.0 / n_steps as f64);
    let dt = tape.scalar(h)?;
    rollout_impl(
        tape,
        kind,
        x0,
        control_fn,
        dt,
        TerminalTime::Fixed(t_final),
        n_steps,
        Some(h),
    )
}

/// Free-terminal-time rollout: `t_total` is a tape value of shape (B, 1) or
/// (1, 1) produced by a positivity-ensuring map; dt = t_total / n_steps stays
/// on the tape so d(cost)/dT is exact for the discretized system.
pub fn free_time_rollout(
    tape: &mut Tape,
    kind: DynamicsKind,
    x0: Value,
    control_fn: &mut dyn FnMut(&mut Tape, usize, StepTime) -> Result<Value>,
    t_total: Value,
    n_steps: usize,
) -> Result<TapeTrajectory> {
    if n_steps == 0 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    if tape.value(t_total).data().iter().any(|&t| t <= 0.0) {
        return Err(Error::invalid(
            "free-time rollout requires a strictly positive horizon",
        ));
    }
    let dt = tape.scale(t_total, 1.0 / n_steps as f64)?;
    rollout_impl(
        tape,
        kind,
        x0,
        control_fn,
        dt,
        TerminalTime::Tape(t_total),
        n_steps,
        None,
    )
}
