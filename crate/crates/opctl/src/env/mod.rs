//! Environment functions: Gaussian-mixture fields (stationary or moving),
//! sigmoid rectangle walls, and DFS mazes decomposed into rectangles.
//!
//! Every field comes in two forms: a plain `f64` evaluation for inference
//! and tests, and a tape evaluation that contributes nodes so the field's
//! spatial gradient flows into rollout gradients.

mod maze;

pub use maze::{generate_maze, maze_to_rects, MazeGrid};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Value};
use crate::error::{Error, Result};

/// Default sigmoid sharpness for walls. At 100 the wall transition width is
/// about 0.04, thinner than one corridor of a 5x5 maze on the unit square.
pub const DEFAULT_WALL_SHARPNESS: f64 = 100.0;

/// One isotropic Gaussian bump, optionally translating linearly in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBump {
    /// Center position at t = 0.
    #[serde(rename = "c")]
    pub center: Vec<f64>,
    /// Isotropic standard deviation (> 0).
    pub sigma: f64,
    /// Height multiplying the normalized density.
    #[serde(rename = "h")]
    pub height: f64,
    /// Linear drift velocity; zero for stationary bumps.
    #[serde(rename = "v")]
    pub velocity: Vec<f64>,
}

impl GaussianBump {
    pub fn stationary(center: Vec<f64>, sigma: f64, height: f64) -> Self {
        let dim = center.len();
        GaussianBump {
            center,
            sigma,
            height,
            velocity: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Center at time `t`.
    pub fn center_at(&self, t: f64) -> Vec<f64> {
        self.center
            .iter()
            .zip(&self.velocity)
            .map(|(c, v)| c + v * t)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(Error::invalid("gaussian bump sigma must be positive"));
        }
        if self.center.len() != self.velocity.len() {
            return Err(Error::invalid("bump center and velocity dims differ"));
        }
        if !(2..=3).contains(&self.center.len()) {
            return Err(Error::invalid("gaussian bumps support D in {2, 3}"));
        }
        Ok(())
    }
}

/// Axis-aligned soft rectangle: a product of four sigmoids that is ~1 inside
/// `[a, b] x [c, d]` and ~0 outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectWall {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    #[serde(rename = "lambda")]
    pub lambda_sharp: f64,
}

impl RectWall {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        RectWall {
            a,
            b,
            c,
            d,
            lambda_sharp: DEFAULT_WALL_SHARPNESS,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.a >= self.b || self.c >= self.d {
            return Err(Error::invalid(format!(
                "degenerate wall rectangle [{}, {}] x [{}, {}]",
                self.a, self.b, self.c, self.d
            )));
        }
        if self.lambda_sharp <= 0.0 {
            return Err(Error::invalid("wall sharpness must be positive"));
        }
        Ok(())
    }

    /// True if `p` lies inside the hard rectangle inflated by `margin`.
    pub fn contains(&self, p: &[f64], margin: f64) -> bool {
        p[0] >= self.a - margin
            && p[0] <= self.b + margin
            && p[1] >= self.c - margin
            && p[1] <= self.d + margin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Gaussian,
    Walls,
    Composite,
}

/// An obstacle field: Gaussian mixture, wall set, or both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub kind: EnvKind,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bumps: Vec<GaussianBump>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub walls: Vec<RectWall>,
}

impl EnvironmentSpec {
    pub fn gaussian(dim: usize, bumps: Vec<GaussianBump>) -> Self {
        EnvironmentSpec {
            kind: EnvKind::Gaussian,
            dim,
            bumps,
            walls: Vec::new(),
        }
    }

    pub fn walls(walls: Vec<RectWall>) -> Self {
        EnvironmentSpec {
            kind: EnvKind::Walls,
            dim: 2,
            bumps: Vec::new(),
            walls,
        }
    }

    pub fn composite(walls: Vec<RectWall>, bumps: Vec<GaussianBump>) -> Self {
        EnvironmentSpec {
            kind: EnvKind::Composite,
            dim: 2,
            bumps,
            walls,
        }
    }

    /// An explicitly empty environment (zero field everywhere).
    pub fn empty(dim: usize) -> Self {
        EnvironmentSpec {
            kind: EnvKind::Gaussian,
            dim,
            bumps: Vec::new(),
            walls: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.bumps.is_empty() && self.walls.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.bumps {
            b.validate()?;
            if b.dim() != self.dim {
                return Err(Error::invalid(format!(
                    "bump dim {} does not match environment dim {}",
                    b.dim(),
                    self.dim
                )));
            }
        }
        if !self.walls.is_empty() && self.dim != 2 {
            return Err(Error::invalid("walls require a 2-d environment"));
        }
        for w in &self.walls {
            w.validate()?;
        }
        Ok(())
    }

    /// Plain evaluation of the whole field at position `x`, time `t`.
    pub fn eval(&self, x: &[f64], t: f64) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "query dim {} does not match environment dim {}",
                x.len(),
                self.dim
            )));
        }
        let mut total = eval_gaussian_field(&self.bumps, x, t)?;
        if !self.walls.is_empty() {
            total += eval_wall_field(&self.walls, &[x[0], x[1]]);
        }
        Ok(total)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum of normalized Gaussian densities scaled by their heights,
/// `sum_j h_j (2 pi sigma_j^2)^(-D/2) exp(-|x - c_j(t)|^2 / (2 sigma_j^2))`,
/// with centers translated to `c_j + v_j t`.
pub fn eval_gaussian_field(bumps: &[GaussianBump], x: &[f64], t: f64) -> Result<f64> {
    let mut total = 0.0;
    for bump in bumps {
        if bump.dim() != x.len() {
            return Err(Error::invalid(format!(
                "bump dim {} does not match query dim {}",
                bump.dim(),
                x.len()
            )));
        }
        let d = x.len() as f64;
        let s2 = bump.sigma * bump.sigma;
        let mut dist2 = 0.0;
        for (i, xi) in x.iter().enumerate() {
            let ci = bump.center[i] + bump.velocity[i] * t;
            dist2 += (xi - ci) * (xi - ci);
        }
        let norm = (2.0 * std::f64::consts::PI * s2).powf(-d / 2.0);
        total += bump.height * norm * (-dist2 / (2.0 * s2)).exp();
    }
    Ok(total)
}

/// Product-of-sigmoids wall field at a 2-d point.
pub fn eval_wall_field(walls: &[RectWall], x: &[f64; 2]) -> f64 {
    walls
        .iter()
        .map(|w| {
            let l = w.lambda_sharp;
            sigmoid(l * (x[0] - w.a))
                * sigmoid(l * (w.b - x[0]))
                * sigmoid(l * (x[1] - w.c))
                * sigmoid(l * (w.d - x[1]))
        })
        .sum()
}

/// Tape evaluation of a batch of environments at one time.
///
/// `x` has shape (B, D); row i is evaluated in `envs[i]`. All rows must have
/// the same bump count so the per-bump constants stack into (B, D) tensors.
/// Returns shape (B, 1).
pub struct BatchField {
    dim: usize,
    batch: usize,
    /// Per bump index j: stacked centers (B,D), velocities (B,D) if any move,
    /// -1/(2 sigma^2) column (B,1), height*(2 pi sigma^2)^(-D/2) column (B,1).
    bump_consts: Vec<BumpConsts>,
    /// Walls per batch row; the wall set must be identical across the batch.
    walls: Vec<RectWall>,
    any_moving: bool,
}

struct BumpConsts {
    centers: Vec<f64>,
    velocities: Vec<f64>,
    neg_inv_2s2: Vec<f64>,
    coef: Vec<f64>,
}

impl BatchField {
    pub fn new(envs: &[&EnvironmentSpec]) -> Result<Self> {
        let first = envs
            .first()
            .ok_or_else(|| Error::invalid("BatchField over an empty batch"))?;
        let dim = first.dim;
        let n_bumps = first.bumps.len();
        let batch = envs.len();
        let mut any_moving = false;
        for env in envs {
            env.validate()?;
            if env.dim != dim || env.bumps.len() != n_bumps || env.walls != first.walls {
                return Err(Error::invalid(
                    "batched environments must share dim, bump count and wall set",
                ));
            }
            any_moving |= env.bumps.iter().any(|b| b.velocity.iter().any(|&v| v != 0.0));
        }
        let mut bump_consts = Vec::with_capacity(n_bumps);
        for j in 0..n_bumps {
            let mut centers = Vec::with_capacity(batch * dim);
            let mut velocities = Vec::with_capacity(batch * dim);
            let mut neg_inv_2s2 = Vec::with_capacity(batch);
            let mut coef = Vec::with_capacity(batch);
            for env in envs {
                let b = &env.bumps[j];
                centers.extend_from_slice(&b.center);
                velocities.extend_from_slice(&b.velocity);
                let s2 = b.sigma * b.sigma;
                neg_inv_2s2.push(-1.0 / (2.0 * s2));
                coef.push(b.height * (2.0 * std::f64::consts::PI * s2).powf(-(dim as f64) / 2.0));
            }
            bump_consts.push(BumpConsts {
                centers,
                velocities,
                neg_inv_2s2,
                coef,
            });
        }
        Ok(BatchField {
            dim,
            batch,
            bump_consts,
            walls: first.walls.clone(),
            any_moving,
        })
    }

    pub fn has_obstacles(&self) -> bool {
        !self.bump_consts.is_empty() || !self.walls.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True if any bump in the batch translates over time.
    pub fn is_moving(&self) -> bool {
        self.any_moving
    }

    /// Evaluates the field at states `x` (B, D) and plain time `t`,
    /// differentiably in `x`. Returns (B, 1).
    pub fn eval_tape(&self, tape: &mut Tape, x: Value, t: f64) -> Result<Value> {
        let (b, d) = tape.value(x).dims2()?;
        if b != self.batch || d != self.dim {
            return Err(Error::invalid(format!(
                "BatchField: expected states ({}, {}), got ({b}, {d})",
                self.batch, self.dim
            )));
        }
        let mut total: Option<Value> = None;
        for bc in &self.bump_consts {
            let center_data: Vec<f64> = if self.any_moving {
                bc.centers
                    .iter()
                    .zip(&bc.velocities)
                    .map(|(c, v)| c + v * t)
                    .collect()
            } else {
                bc.centers.clone()
            };
            let centers = tape.constant(Tensor::matrix(b, d, center_data)?)?;
            let diff = tape.sub(x, centers)?;
            let sq = tape.square(diff)?;
            let dist2 = tape.sum_axis(sq, 1)?;
            let scaled = {
                let col = tape.constant(Tensor::matrix(b, 1, bc.neg_inv_2s2.clone())?)?;
                tape.mul(dist2, col)?
            };
            let e = tape.exp(scaled)?;
            let coef = tape.constant(Tensor::matrix(b, 1, bc.coef.clone())?)?;
            let term = tape.mul(e, coef)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        if !self.walls.is_empty() {
            let wall_val = eval_wall_field_tape(tape, &self.walls, x)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, wall_val)?,
                None => wall_val,
            });
        }
        match total {
            Some(v) => Ok(v),
            None => tape.constant(Tensor::zeros(vec![b, 1])),
        }
    }
}

/// Tape evaluation of the Gaussian field for one environment shared by every
/// row of `x` (B, D).
pub fn eval_gaussian_field_tape(
    tape: &mut Tape,
    bumps: &[GaussianBump],
    x: Value,
    t: f64,
) -> Result<Value> {
    let (b, d) = tape.value(x).dims2()?;
    let mut total: Option<Value> = None;
    for bump in bumps {
        if bump.dim() != d {
            return Err(Error::invalid(format!(
                "bump dim {} does not match state dim {d}",
                bump.dim()
            )));
        }
        let c = bump.center_at(t);
        let centers = tape.constant(Tensor::vector(c))?;
        let diff = tape.sub(x, centers)?;
        let sq = tape.square(diff)?;
        let dist2 = tape.sum_axis(sq, 1)?;
        let s2 = bump.sigma * bump.sigma;
        let scaled = tape.scale(dist2, -1.0 / (2.0 * s2))?;
        let e = tape.exp(scaled)?;
        let coef = bump.height * (2.0 * std::f64::consts::PI * s2).powf(-(d as f64) / 2.0);
        let term = tape.scale(e, coef)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => tape.constant(Tensor::zeros(vec![b, 1])),
    }
}

/// Tape evaluation of the wall field at positions `x` (B, 2) (or the first
/// two state columns of a wider state). Returns (B, 1).
pub fn eval_wall_field_tape(tape: &mut Tape, walls: &[RectWall], x: Value) -> Result<Value> {
    let xcol = tape.slice(x, 1, 0, 1)?;
    let ycol = tape.slice(x, 1, 1, 2)?;
    let mut total: Option<Value> = None;
    for w in walls {
        let l = w.lambda_sharp;
        let s1 = {
            let a = tape.affine(xcol, l, -l * w.a)?;
            tape.sigmoid(a)?
        };
        let s2 = {
            let a = tape.affine(xcol, -l, l * w.b)?;
            tape.sigmoid(a)?
        };
        let s3 = {
            let a = tape.affine(ycol, l, -l * w.c)?;
            tape.sigmoid(a)?
        };
        let s4 = {
            let a = tape.affine(ycol, -l, l * w.d)?;
            tape.sigmoid(a)?
        };
        let p = tape.mul(s1, s2)?;
        let p = tape.mul(p, s3)?;
        let p = tape.mul(p, s4)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, p)?,
            None => p,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => {
            let (b, _) = tape.value(x).dims2()?;
            tape.constant(Tensor::zeros(vec![b, 1]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PEAK_2D: f64 = 15.915494309189535; // 1 / (2 pi 0.01)

    #[test]
    fn gaussian_peak_value() {
        let bump = GaussianBump::stationary(vec![0.3, 0.3], 0.1, 1.0);
        let v = eval_gaussian_field(&[bump], &[0.3, 0.3], 0.0).unwrap();
        assert!((v - PEAK_2D).abs() < 1e-12, "{v}");
    }

    #[test]
    fn gaussian_one_sigma_falloff() {
        let bump = GaussianBump::stationary(vec![0.3, 0.3], 0.1, 1.0);
        let v = eval_gaussian_field(&[bump], &[0.4, 0.3], 0.0).unwrap();
        assert!((v - PEAK_2D * (-0.5f64).exp()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn moving_bump_center_translates() {
        let bump = GaussianBump {
            center: vec![0.3, 0.3],
            sigma: 0.1,
            height: 1.0,
            velocity: vec![0.15, 0.0],
        };
        let v = eval_gaussian_field(&[bump], &[0.45, 0.3], 1.0).unwrap();
        assert!((v - PEAK_2D).abs() < 1e-12, "{v}");
    }

    #[test]
    fn wall_saturates_inside() {
        let w = RectWall::new(0.0, 1.0, 0.0, 1.0);
        let v = eval_wall_field(&[w], &[0.5, 0.5]);
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn wall_corner_is_quarter() {
        let w = RectWall::new(0.0, 1.0, 0.0, 1.0);
        let v = eval_wall_field(&[w], &[0.0, 0.0]);
        assert!((v - 0.25).abs() < 1e-12, "{v}");
    }

    #[test]
    fn appendix_wall_matches_hand_evaluation() {
        // independent oracle: direct product of the four sigmoids
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (a, b, c, d, l) = (0.1, 0.25, 0.4, 0.43, 100.0);
        let (x, y) = (0.175, 0.415);
        let expect = sig(l * (x - a)) * sig(l * (b - x)) * sig(l * (y - c)) * sig(l * (d - y));
        let w = RectWall::new(a, b, c, d);
        let v = eval_wall_field(&[w], &[x, y]);
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn translation_equivariance() {
        let bump = GaussianBump::stationary(vec![0.2, 0.7], 0.07, 0.5);
        let delta = [0.13, -0.21];
        let shifted = GaussianBump::stationary(vec![0.2 + delta[0], 0.7 + delta[1]], 0.07, 0.5);
        for &(x, y) in &[(0.1, 0.4), (0.5, 0.9), (0.25, 0.65)] {
            let v1 = eval_gaussian_field(&[bump.clone()], &[x, y], 0.0).unwrap();
            let v2 =
                eval_gaussian_field(&[shifted.clone()], &[x + delta[0], y + delta[1]], 0.0).unwrap();
            assert!((v1 - v2).abs() < 1e-12);
        }
    }

    #[test]
    fn sharper_walls_closer_to_one_inside() {
        let soft = RectWall {
            lambda_sharp: 30.0,
            ..RectWall::new(0.2, 0.8, 0.2, 0.8)
        };
        let hard = RectWall {
            lambda_sharp: 300.0,
            ..RectWall::new(0.2, 0.8, 0.2, 0.8)
        };
        let p = [0.3, 0.7];
        let vs = eval_wall_field(&[soft], &p);
        let vh = eval_wall_field(&[hard], &p);
        assert!(vh > vs && vh <= 1.0);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let bump = GaussianBump::stationary(vec![0.3, 0.3], 0.1, 1.0);
        assert!(eval_gaussian_field(&[bump], &[0.3, 0.3, 0.3], 0.0).is_err());
    }

    #[test]
    fn tape_field_matches_plain_eval() {
        let env = EnvironmentSpec::composite(
            vec![RectWall::new(0.1, 0.25, 0.4, 0.43)],
            vec![GaussianBump::stationary(vec![0.5, 0.5], 0.08, 0.7)],
        );
        let field = BatchField::new(&[&env, &env]).unwrap();
        let mut tape = Tape::new();
        let x = tape
            .input(
                Tensor::matrix(2, 2, vec![0.2, 0.41, 0.52, 0.48]).unwrap(),
                false,
            )
            .unwrap();
        let v = field.eval_tape(&mut tape, x, 0.0).unwrap();
        let expect0 = env.eval(&[0.2, 0.41], 0.0).unwrap();
        let expect1 = env.eval(&[0.52, 0.48], 0.0).unwrap();
        assert!((tape.value(v).data()[0] - expect0).abs() < 1e-14);
        assert!((tape.value(v).data()[1] - expect1).abs() < 1e-14);
    }

    #[test]
    fn env_json_schema_roundtrip() {
        let env = EnvironmentSpec::gaussian(
            2,
            vec![GaussianBump {
                center: vec![0.4, 0.5],
                sigma: 0.07,
                height: 0.9,
                velocity: vec![0.1, -0.1],
            }],
        );
        let js = serde_json::to_value(&env).unwrap();
        assert_eq!(js["kind"], "gaussian");
        assert_eq!(js["dim"], 2);
        assert_eq!(js["bumps"][0]["c"][0], 0.4);
        assert_eq!(js["bumps"][0]["sigma"], 0.07);
        assert_eq!(js["bumps"][0]["h"], 0.9);
        assert_eq!(js["bumps"][0]["v"][1], -0.1);
        let back: EnvironmentSpec = serde_json::from_value(js).unwrap();
        assert_eq!(back, env);

        let walls = EnvironmentSpec::walls(vec![RectWall::new(0.1, 0.2, 0.3, 0.4)]);
        let js = serde_json::to_value(&walls).unwrap();
        assert_eq!(js["kind"], "walls");
        assert_eq!(js["walls"][0]["lambda"], DEFAULT_WALL_SHARPNESS);
    }
}
