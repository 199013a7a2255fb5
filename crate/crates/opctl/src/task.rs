//! Problem instances and the distributions they are sampled from.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::dynamics::DynamicsKind;
use crate::env::{generate_maze, maze_to_rects, EnvironmentSpec, GaussianBump, RectWall};
use crate::error::{Error, Result};
use crate::rng;

/// Fixed or free terminal time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Horizon {
    Fixed { t_final: f64 },
    Free,
}

/// One optimal-control problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub env: EnvironmentSpec,
    pub dynamics: DynamicsKind,
    pub x0: Vec<f64>,
    /// Target state where the cost variant uses one (xi for LQR tasks).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    pub cost: CostSpec,
    pub horizon: Horizon,
}

impl TaskInstance {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.cost.validate()?;
        if self.x0.len() != self.dynamics.state_dim() {
            return Err(Error::invalid(format!(
                "x0 dim {} does not match dynamics state dim {}",
                self.x0.len(),
                self.dynamics.state_dim()
            )));
        }
        if self.cost.needs_target() && self.target.is_none() {
            return Err(Error::MissingData("task cost requires a target".into()));
        }
        if let Horizon::Fixed { t_final } = self.horizon {
            if t_final <= 0.0 {
                return Err(Error::invalid("fixed horizon must be positive"));
            }
        }
        Ok(())
    }
}

/// A union of axis-aligned boxes, sampled uniformly by rejection from the
/// bounding box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region(pub Vec<Vec<(f64, f64)>>);

impl Region {
    pub fn single(bounds: Vec<(f64, f64)>) -> Self {
        Region(vec![bounds])
    }

    pub fn dim(&self) -> usize {
        self.0.first().map_or(0, |b| b.len())
    }

    fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::invalid("empty sampling region"));
        }
        let d = self.dim();
        for b in &self.0 {
            if b.len() != d {
                return Err(Error::invalid("region boxes must share a dimension"));
            }
            for (lo, hi) in b {
                if lo > hi {
                    return Err(Error::invalid(format!("malformed range [{lo}, {hi}]")));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        self.0.iter().any(|b| {
            b.iter()
                .zip(p.iter())
                .all(|((lo, hi), x)| x >= lo && x <= hi)
        })
    }

    pub fn sample(&self, rng: &mut ChaCha12Rng) -> Result<Vec<f64>> {
        self.validate()?;
        let d = self.dim();
        let mut bounding = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
        for b in &self.0 {
            for (i, (lo, hi)) in b.iter().enumerate() {
                bounding[i].0 = bounding[i].0.min(*lo);
                bounding[i].1 = bounding[i].1.max(*hi);
            }
        }
        for _ in 0..100_000 {
            let p: Vec<f64> = bounding
                .iter()
                .map(|(lo, hi)| uniform(rng, *lo, *hi))
                .collect::<Result<_>>()?;
            if self.contains(&p) {
                return Ok(p);
            }
        }
        Err(Error::invalid(
            "region rejection sampling failed; boxes have negligible volume",
        ))
    }
}

/// Uniform draw with an explicit malformed-range check; degenerate ranges
/// return the endpoint.
pub fn uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> Result<f64> {
    if lo > hi {
        return Err(Error::invalid(format!("malformed range [{lo}, {hi}]")));
    }
    if lo == hi {
        return Ok(lo);
    }
    Ok(rng.gen_range(lo..hi))
}

/// Gaussian-bump navigation family (single integrator, fixed horizon).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumpTaskDist {
    pub dim: usize,
    pub n_bumps: usize,
    pub moving: bool,
    pub center_range: (f64, f64),
    pub sigma_range: (f64, f64),
    pub height_range: (f64, f64),
    /// Per-axis velocity range for moving bumps.
    pub velocity_range: (f64, f64),
    pub x0_region: Region,
    pub w_t: f64,
    pub t_final: f64,
}

impl Default for BumpTaskDist {
    fn default() -> Self {
        // single stationary bump between the start strips and the origin
        BumpTaskDist {
            dim: 2,
            n_bumps: 1,
            moving: false,
            center_range: (0.3, 0.6),
            sigma_range: (0.05, 0.1),
            height_range: (0.1, 1.0),
            velocity_range: (-0.15, 0.15),
            x0_region: Region(vec![
                vec![(0.5, 1.0), (0.9, 1.0)],
                vec![(0.9, 1.0), (0.5, 1.0)],
            ]),
            w_t: 1.0,
            t_final: 3.0,
        }
    }
}

/// Scalar LQR family; `dof` in {2, 3, 4} controls which of (q, r) vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrTaskDist {
    pub dof: usize,
    pub xi_range: (f64, f64),
    pub x0_range: (f64, f64),
    pub qr_range: (f64, f64),
    pub lambda: f64,
    pub t_final: f64,
}

impl Default for LqrTaskDist {
    fn default() -> Self {
        LqrTaskDist {
            dof: 2,
            xi_range: (-0.5, 1.5),
            x0_range: (0.5, 1.0),
            qr_range: (0.5, 1.0),
            lambda: 1.0,
            t_final: 1.0,
        }
    }
}

/// Maze navigation family: one maze per task, fixed start (1,1) and target
/// at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeTaskDist {
    pub size: usize,
    pub p_loop: f64,
    pub w_r: f64,
    pub w_b: f64,
    pub w_t: f64,
    pub t_final: f64,
}

impl Default for MazeTaskDist {
    fn default() -> Self {
        // w_b and w_t are artifact defaults ("large" weights), config-exposed
        MazeTaskDist {
            size: 5,
            p_loop: 0.4,
            w_r: 1.0,
            w_b: 200.0,
            w_t: 500.0,
            t_final: 3.0,
        }
    }
}

/// Fixed-horizon unicycle family: fixed start pose, sampled target pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnicycleTaskDist {
    pub n_bumps: usize,
    pub center_range: (f64, f64),
    pub sigma_range: (f64, f64),
    pub height_range: (f64, f64),
    pub x0: Vec<f64>,
    pub target_pos_range: (f64, f64),
    pub w_r: f64,
    pub w_b: f64,
    pub w_t: f64,
    pub t_final: f64,
}

impl Default for UnicycleTaskDist {
    fn default() -> Self {
        UnicycleTaskDist {
            n_bumps: 1,
            center_range: (0.3, 0.6),
            sigma_range: (0.05, 0.1),
            height_range: (0.1, 1.0),
            x0: vec![0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0],
            target_pos_range: (0.9, 1.0),
            w_r: 1.0,
            w_b: 50.0,
            w_t: 200.0,
            t_final: 3.0,
        }
    }
}

/// Free-terminal-time unicycle family for the MPC operator: fixed walls,
/// up to `max_bumps` needle obstacles, start states spread over free space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnicycleFreeTaskDist {
    pub walls: Vec<RectWall>,
    pub max_bumps: usize,
    pub bump_sigma: f64,
    pub bump_height: f64,
    pub bump_center_range: (f64, f64),
    /// Bump centers closer than this to a wall are rejected and resampled.
    pub wall_margin: f64,
    /// Start states closer than this to a bump center are resampled.
    pub x0_bump_margin: f64,
    pub x0_pos_range: (f64, f64),
    pub x0_speed_range: (f64, f64),
    pub target: Vec<f64>,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
}

/// The three static walls of the delivery environment.
pub fn delivery_walls() -> Vec<RectWall> {
    vec![
        RectWall::new(0.1, 0.25, 0.4, 0.43),
        RectWall::new(0.5, 0.7, 0.67, 0.7),
        RectWall::new(0.6, 0.63, 0.2, 0.3),
    ]
}

impl Default for UnicycleFreeTaskDist {
    fn default() -> Self {
        UnicycleFreeTaskDist {
            walls: delivery_walls(),
            max_bumps: 2,
            bump_sigma: 0.02,
            bump_height: 1.0,
            bump_center_range: (0.25, 0.8),
            wall_margin: 0.04,
            x0_bump_margin: 0.1,
            x0_pos_range: (0.05, 0.95),
            x0_speed_range: (-0.5, 2.0),
            target: vec![0.9, 0.9, std::f64::consts::FRAC_PI_4, 0.0],
            w1: 1.0,
            w2: 400.0,
            w3: 200.0,
            w4: 2.0,
        }
    }
}

/// Which task family to sample, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TaskDistribution {
    Bumps(BumpTaskDist),
    Lqr(LqrTaskDist),
    Maze(MazeTaskDist),
    Unicycle(UnicycleTaskDist),
    UnicycleFree(UnicycleFreeTaskDist),
}

impl TaskDistribution {
    pub fn dynamics(&self) -> DynamicsKind {
        match self {
            TaskDistribution::Bumps(d) => DynamicsKind::SingleIntegrator { dim: d.dim },
            TaskDistribution::Lqr(_) => DynamicsKind::SingleIntegrator { dim: 1 },
            TaskDistribution::Maze(_) => DynamicsKind::SingleIntegrator { dim: 2 },
            TaskDistribution::Unicycle(_) | TaskDistribution::UnicycleFree(_) => {
                DynamicsKind::Unicycle
            }
        }
    }
}

fn sample_bump(
    rng: &mut ChaCha12Rng,
    dim: usize,
    center_range: (f64, f64),
    sigma_range: (f64, f64),
    height_range: (f64, f64),
    velocity_range: Option<(f64, f64)>,
) -> Result<GaussianBump> {
    let center: Vec<f64> = (0..dim)
        .map(|_| uniform(rng, center_range.0, center_range.1))
        .collect::<Result<_>>()?;
    let sigma = uniform(rng, sigma_range.0, sigma_range.1)?;
    let height = uniform(rng, height_range.0, height_range.1)?;
    let velocity = match velocity_range {
        Some((lo, hi)) => (0..dim)
            .map(|_| uniform(rng, lo, hi))
            .collect::<Result<_>>()?,
        None => vec![0.0; dim],
    };
    Ok(GaussianBump {
        center,
        sigma,
        height,
        velocity,
    })
}

/// Draws `n` i.i.d. tasks from the distribution; the same seed yields the
/// identical list.
pub fn sample_tasks(dist: &TaskDistribution, n: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    if n == 0 {
        return Err(Error::invalid("cannot sample an empty dataset"));
    }
    let mut rng = rng::stream(seed, "dataset");
    let mut tasks = Vec::with_capacity(n);
    for i in 0..n {
        let task = match dist {
            TaskDistribution::Bumps(d) => {
                let bumps: Vec<GaussianBump> = (0..d.n_bumps)
                    .map(|_| {
                        sample_bump(
                            &mut rng,
                            d.dim,
                            d.center_range,
                            d.sigma_range,
                            d.height_range,
                            d.moving.then_some(d.velocity_range),
                        )
                    })
                    .collect::<Result<_>>()?;
                TaskInstance {
                    env: EnvironmentSpec::gaussian(d.dim, bumps),
                    dynamics: DynamicsKind::SingleIntegrator { dim: d.dim },
                    x0: d.x0_region.sample(&mut rng)?,
                    target: None,
                    cost: CostSpec::Bump { w_t: d.w_t },
                    horizon: Horizon::Fixed { t_final: d.t_final },
                }
            }
            TaskDistribution::Lqr(d) => {
                if !(2..=4).contains(&d.dof) {
                    return Err(Error::invalid("LQR dof must be 2, 3 or 4"));
                }
                let xi = uniform(&mut rng, d.xi_range.0, d.xi_range.1)?;
                let x0 = uniform(&mut rng, d.x0_range.0, d.x0_range.1)?;
                let r = if d.dof >= 3 {
                    uniform(&mut rng, d.qr_range.0, d.qr_range.1)?
                } else {
                    1.0
                };
                let q = if d.dof >= 4 {
                    uniform(&mut rng, d.qr_range.0, d.qr_range.1)?
                } else {
                    1.0
                };
                TaskInstance {
                    env: EnvironmentSpec::empty(1),
                    dynamics: DynamicsKind::SingleIntegrator { dim: 1 },
                    x0: vec![x0],
                    target: Some(vec![xi]),
                    cost: CostSpec::Lqr {
                        q,
                        r,
                        lambda: d.lambda,
                    },
                    horizon: Horizon::Fixed { t_final: d.t_final },
                }
            }
            TaskDistribution::Maze(d) => {
                let size = d.size;
                let maze_seed = seed.wrapping_add(i as u64);
                let grid = generate_maze(
                    size,
                    size,
                    (size - 1, size - 1),
                    (0, 0),
                    d.p_loop,
                    maze_seed,
                )?;
                TaskInstance {
                    env: EnvironmentSpec::walls(maze_to_rects(&grid)),
                    dynamics: DynamicsKind::SingleIntegrator { dim: 2 },
                    x0: vec![1.0, 1.0],
                    target: None,
                    cost: CostSpec::Maze {
                        w_r: d.w_r,
                        w_b: d.w_b,
                        w_t: d.w_t,
                    },
                    horizon: Horizon::Fixed { t_final: d.t_final },
                }
            }
            TaskDistribution::Unicycle(d) => {
                let bumps: Vec<GaussianBump> = (0..d.n_bumps)
                    .map(|_| {
                        sample_bump(
                            &mut rng,
                            2,
                            d.center_range,
                            d.sigma_range,
                            d.height_range,
                            None,
                        )
                    })
                    .collect::<Result<_>>()?;
                let tx = uniform(&mut rng, d.target_pos_range.0, d.target_pos_range.1)?;
                let ty = uniform(&mut rng, d.target_pos_range.0, d.target_pos_range.1)?;
                let phi = uniform(&mut rng, -std::f64::consts::PI, std::f64::consts::PI)?;
                TaskInstance {
                    env: EnvironmentSpec::gaussian(2, bumps),
                    dynamics: DynamicsKind::Unicycle,
                    x0: d.x0.clone(),
                    target: Some(vec![tx, ty, phi, 0.0]),
                    cost: CostSpec::Unicycle {
                        w_r: d.w_r,
                        w_b: d.w_b,
                        w_t: d.w_t,
                    },
                    horizon: Horizon::Fixed { t_final: d.t_final },
                }
            }
            TaskDistribution::UnicycleFree(d) => {
                let n_bumps = rng.gen_range(0..=d.max_bumps);
                let mut bumps = Vec::with_capacity(n_bumps);
                while bumps.len() < n_bumps {
                    let c = vec![
                        uniform(&mut rng, d.bump_center_range.0, d.bump_center_range.1)?,
                        uniform(&mut rng, d.bump_center_range.0, d.bump_center_range.1)?,
                    ];
                    // configurations overlapping walls are discarded
                    if d.walls.iter().any(|w| w.contains(&c, d.wall_margin)) {
                        continue;
                    }
                    bumps.push(GaussianBump::stationary(c, d.bump_sigma, d.bump_height));
                }
                let pos = loop {
                    let p = vec![
                        uniform(&mut rng, d.x0_pos_range.0, d.x0_pos_range.1)?,
                        uniform(&mut rng, d.x0_pos_range.0, d.x0_pos_range.1)?,
                    ];
                    if d.walls.iter().any(|w| w.contains(&p, 0.02)) {
                        continue;
                    }
                    let near_bump = bumps.iter().any(|b| {
                        let dx = b.center[0] - p[0];
                        let dy = b.center[1] - p[1];
                        (dx * dx + dy * dy).sqrt() < d.x0_bump_margin
                    });
                    if !near_bump {
                        break p;
                    }
                };
                let phi = uniform(&mut rng, -std::f64::consts::PI, std::f64::consts::PI)?;
                let v = uniform(&mut rng, d.x0_speed_range.0, d.x0_speed_range.1)?;
                TaskInstance {
                    env: EnvironmentSpec::composite(d.walls.clone(), bumps),
                    dynamics: DynamicsKind::Unicycle,
                    x0: vec![pos[0], pos[1], phi, v],
                    target: Some(d.target.clone()),
                    cost: CostSpec::FreeTime {
                        w1: d.w1,
                        w2: d.w2,
                        w3: d.w3,
                        w4: d.w4,
                    },
                    horizon: Horizon::Free,
                }
            }
        };
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

/// JSON-lines dataset IO.
pub fn write_tasks_jsonl<W: std::io::Write>(mut out: W, tasks: &[TaskInstance]) -> Result<()> {
    for t in tasks {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_tasks_jsonl<R: std::io::BufRead>(input: R) -> Result<Vec<TaskInstance>> {
    let mut tasks = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TaskInstance = serde_json::from_str(&line)?;
        t.validate()?;
        tasks.push(t);
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bump_samples_respect_ranges() {
        let dist = TaskDistribution::Bumps(BumpTaskDist::default());
        let tasks = sample_tasks(&dist, 64, 7).unwrap();
        for t in &tasks {
            for b in &t.env.bumps {
                assert!((0.05..=0.1).contains(&b.sigma));
                assert!((0.1..=1.0).contains(&b.height));
            }
            let x0 = &t.x0;
            assert!(x0[1] >= 0.9 || x0[0] >= 0.9, "x0 {x0:?} outside strips");
        }
    }

    #[test]
    fn degenerate_range_collapses() {
        let mut d = BumpTaskDist::default();
        d.sigma_range = (0.07, 0.07);
        let tasks = sample_tasks(&TaskDistribution::Bumps(d), 8, 1).unwrap();
        for t in &tasks {
            assert_eq!(t.env.bumps[0].sigma, 0.07);
        }
    }

    #[test]
    fn malformed_range_is_error() {
        let mut d = BumpTaskDist::default();
        d.height_range = (1.0, 0.1);
        assert!(sample_tasks(&TaskDistribution::Bumps(d), 4, 1).is_err());
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let dist = TaskDistribution::Lqr(LqrTaskDist {
            dof: 4,
            ..Default::default()
        });
        let a = sample_tasks(&dist, 1000, 99).unwrap();
        let b = sample_tasks(&dist, 1000, 99).unwrap();
        assert_eq!(a, b);
        let c = sample_tasks(&dist, 1000, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_tasks_rejected() {
        let dist = TaskDistribution::Lqr(LqrTaskDist::default());
        assert!(sample_tasks(&dist, 0, 1).is_err());
    }

    #[test]
    fn lqr_dof_controls_varying_weights() {
        let d2 = sample_tasks(
            &TaskDistribution::Lqr(LqrTaskDist::default()),
            16,
            3,
        )
        .unwrap();
        for t in &d2 {
            let CostSpec::Lqr { q, r, .. } = t.cost else { panic!() };
            assert_eq!((q, r), (1.0, 1.0));
        }
        let d4 = sample_tasks(
            &TaskDistribution::Lqr(LqrTaskDist {
                dof: 4,
                ..Default::default()
            }),
            16,
            3,
        )
        .unwrap();
        assert!(d4.iter().any(|t| {
            let CostSpec::Lqr { q, r, .. } = t.cost else { panic!() };
            q != 1.0 && r != 1.0
        }));
    }

    #[test]
    fn free_tasks_avoid_walls_and_bumps() {
        let d = UnicycleFreeTaskDist::default();
        let tasks = sample_tasks(&TaskDistribution::UnicycleFree(d.clone()), 128, 5).unwrap();
        let mut counts = [0usize; 3];
        for t in &tasks {
            counts[t.env.bumps.len()] += 1;
            for b in &t.env.bumps {
                assert!(!d.walls.iter().any(|w| w.contains(&b.center, d.wall_margin)));
            }
            for b in &t.env.bumps {
                let dx = b.center[0] - t.x0[0];
                let dy = b.center[1] - t.x0[1];
                assert!((dx * dx + dy * dy).sqrt() >= d.x0_bump_margin);
            }
        }
        assert!(counts.iter().all(|&c| c > 0), "bump counts {counts:?}");
    }

    #[test]
    fn jsonl_roundtrip() {
        let dist = TaskDistribution::Bumps(BumpTaskDist::default());
        let tasks = sample_tasks(&dist, 5, 11).unwrap();
        let mut buf = Vec::new();
        write_tasks_jsonl(&mut buf, &tasks).unwrap();
        let back = read_tasks_jsonl(std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(back, tasks);
    }

    #[test]
    fn maze_tasks_are_wall_environments() {
        let dist = TaskDistribution::Maze(MazeTaskDist::default());
        let tasks = sample_tasks(&dist, 3, 21).unwrap();
        for t in &tasks {
            assert!(!t.env.walls.is_empty());
            assert_eq!(t.x0, vec![1.0, 1.0]);
        }
        // different tasks get different mazes
        assert_ne!(tasks[0].env.walls, tasks[1].env.walls);
    }
}
