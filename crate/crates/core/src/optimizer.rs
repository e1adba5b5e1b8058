//! Direct optimisation of the group's velocity fields.
//!
//! Each stage runs adaptive-moment descent on the objective and projects the
//! velocities back onto the centred set (`Σ_i v_i = 0`) after every update, so
//! the implicit mean space is the barycentre of the group. Stages run from
//! coarse to fine: the accumulated velocity of the previous stages is
//! upsampled (values are in mm, so no rescaling) and held fixed while the
//! stage optimises a residual that is added to it.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{upsample_to, VectorVolume};
use crate::loss::{evaluate, ordered_mean_by, Group, LossParams};
use crate::transform::{exponentiate, DisplacementField, DEFAULT_SQUARING_STEPS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Number of factor-2 downsamplings applied to the inputs.
    pub downsample_levels: usize,
    pub max_iterations: usize,
    /// Learning rate in mm.
    pub step_size: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub lambda: f64,
    pub window_radius: usize,
    pub squaring_steps: usize,
    pub stages: Vec<StageConfig>,
    pub adam: AdamConfig,
    /// Stop once the relative loss change over `convergence_window`
    /// iterations drops below this.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    /// Recorded with the run. Registration itself is deterministic and
    /// starts from zero velocities, so it draws no random numbers.
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            lambda: 0.2,
            window_radius: 4,
            squaring_steps: DEFAULT_SQUARING_STEPS,
            stages: vec![
                StageConfig {
                    downsample_levels: 1,
                    max_iterations: 300,
                    step_size: 0.5,
                },
                StageConfig {
                    downsample_levels: 0,
                    max_iterations: 150,
                    step_size: 0.25,
                },
            ],
            adam: AdamConfig::default(),
            convergence_tol: 1e-5,
            convergence_window: 10,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn loss_params(&self) -> LossParams {
        LossParams {
            lambda: self.lambda,
            window_radius: self.window_radius,
            squaring_steps: self.squaring_steps,
        }
    }

    /// Checks every field; the error names the first offending one.
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| Err(Error::arg(name, reason));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda", "must be finite and >= 0");
        }
        if self.window_radius == 0 {
            return bad("window_radius", "must be >= 1");
        }
        if self.squaring_steps == 0 {
            return bad("squaring_steps", "must be >= 1");
        }
        if self.stages.is_empty() {
            return bad("stages", "at least one stage is required");
        }
        for (k, s) in self.stages.iter().enumerate() {
            if !(s.step_size.is_finite() && s.step_size > 0.0) {
                return bad("step_size", "must be finite and > 0");
            }
            if k > 0 && s.downsample_levels > self.stages[k - 1].downsample_levels {
                return bad("downsample_levels", "stages must run from coarse to fine");
            }
        }
        let AdamConfig { beta1, beta2, epsilon } = self.adam;
        if !(0.0..1.0).contains(&beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return bad("epsilon", "must be finite and > 0");
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol >= 0.0) {
            return bad("convergence_tol", "must be finite and >= 0");
        }
        if self.convergence_window == 0 {
            return bad("convergence_window", "must be >= 1");
        }
        Ok(())
    }
}

/// Loss history of one stage. `losses[k]` is the loss of iterate `k`
/// (iterate 0 is the initialisation).
#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace {
    pub downsample_levels: usize,
    pub losses: Vec<f64>,
    pub best_iteration: usize,
    /// Number of updates applied.
    pub iterations: usize,
    pub converged: bool,
}

impl StageTrace {
    pub fn best_loss(&self) -> f64 {
        self.losses[self.best_iteration]
    }

    /// Running minimum of the losses; the value reported at each accepted
    /// iterate.
    pub fn accepted_losses(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.losses
            .iter()
            .map(|&l| {
                best = best.min(l);
                best
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    /// Final velocity per member on the input grid (mm).
    pub velocities: Vec<VectorVolume>,
    /// `exp(v_i)` per member.
    pub displacements: Vec<DisplacementField>,
    pub stages: Vec<StageTrace>,
    pub wall_time: Duration,
}

/// One progress report: stage index, iteration and loss of that iterate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    pub stage: usize,
    pub iteration: usize,
    pub loss: f64,
}

/// Subtracts the voxelwise mean velocity from every member.
pub fn center_velocities(velocities: &[VectorVolume]) -> Result<Vec<VectorVolume>> {
    let Some(first) = velocities.first() else {
        return Ok(Vec::new());
    };
    let grid = first.grid();
    for v in &velocities[1..] {
        grid.ensure_matches(v.grid(), "center_velocities")?;
    }
    let n = velocities.len();
    let means: Vec<Vec<f64>> = (0..3)
        .map(|c| ordered_mean_by(grid.len(), n, |i, vox| velocities[i].data()[vox][c]))
        .collect();
    Ok(velocities
        .iter()
        .map(|v| {
            let data = v
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| [x[0] - means[0][i], x[1] - means[1][i], x[2] - means[2][i]])
                .collect();
            VectorVolume::from_parts(grid.clone(), data)
        })
        .collect())
}

struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<[f64; 3]>>,
    v: Vec<Vec<[f64; 3]>>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, n: usize, len: usize) -> Self {
        Adam {
            cfg,
            m: vec![vec![[0.0; 3]; len]; n],
            v: vec![vec![[0.0; 3]; len]; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [VectorVolume], grads: &[VectorVolume], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                for d in 0..3 {
                    m[i][d] = beta1 * m[i][d] + (1.0 - beta1) * gi[d];
                    v[i][d] = beta2 * v[i][d] + (1.0 - beta2) * gi[d] * gi[d];
                    let mh = m[i][d] / c1;
                    let vh = v[i][d] / c2;
                    x[d] -= lr * mh / (vh.sqrt() + epsilon);
                }
            }
        }
    }
}

/// Outcome of a single stage: the best residual velocities found and the
/// loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub velocities: Vec<VectorVolume>,
    pub trace: StageTrace,
}

/// Optimises residual velocities `r_i` (starting at `init`) so that the
/// objective at `base_i + r_i` decreases. `base` is held fixed; pass `None`
/// for a zero base.
pub fn register_stage(
    group: &Group,
    init: &[VectorVolume],
    base: Option<&[VectorVolume]>,
    stage: &StageConfig,
    config: &RegistrationConfig,
    stage_index: usize,
    on_progress: &mut dyn FnMut(Progress),
) -> Result<StageOutcome> {
    config.validate()?;
    if init.len() != group.len() {
        return Err(Error::arg("init", format!("expected {} fields, got {}", group.len(), init.len())));
    }
    if let Some(b) = base {
        if b.len() != group.len() {
            return Err(Error::arg("base", format!("expected {} fields, got {}", group.len(), b.len())));
        }
    }
    let params = config.loss_params();
    let combine = |r: &[VectorVolume]| -> Result<Vec<VectorVolume>> {
        match base {
            None => Ok(r.to_vec()),
            Some(b) => b.iter().zip(r).map(|(x, y)| x.add(y)).collect(),
        }
    };
    let wrap = |iteration: usize| move |e: Error| Error::Iterate {
        stage: stage_index,
        iteration,
        source: Box::new(e),
    };

    let mut current = center_velocities(init)?;
    let mut adam = Adam::new(config.adam, group.len(), group.grid().len());
    let mut losses = Vec::with_capacity(stage.max_iterations + 1);
    let mut best = (f64::INFINITY, 0usize, current.clone());
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..=stage.max_iterations {
        let need_grad = it < stage.max_iterations;
        let full = combine(&current).map_err(wrap(it))?;
        let eval = evaluate(group, &full, &params, None, need_grad).map_err(wrap(it))?;
        let loss = eval.breakdown.total;
        if !loss.is_finite() {
            return Err(wrap(it)(Error::NonFinite("loss value".into())));
        }
        losses.push(loss);
        on_progress(Progress {
            stage: stage_index,
            iteration: it,
            loss,
        });
        if loss < best.0 {
            best = (loss, it, current.clone());
        }
        let w = config.convergence_window;
        if it >= w {
            let old = losses[it - w];
            if (old - loss).abs() <= config.convergence_tol * loss.abs() {
                converged = true;
                break;
            }
        }
        let Some(grad) = eval.gradient else { break };
        adam.step(&mut current, &grad, stage.step_size);
        current = center_velocities(&current)?;
        iterations += 1;
    }
    let (_, best_iteration, velocities) = best;
    Ok(StageOutcome {
        velocities,
        trace: StageTrace {
            downsample_levels: stage.downsample_levels,
            losses,
            best_iteration,
            iterations,
            converged,
        },
    })
}

/// Runs every configured stage from coarse to fine and returns the summed
/// velocities on the input grid together with their exponentials.
pub fn register_multistage(group: &Group, config: &RegistrationConfig) -> Result<RegistrationResult> {
    register_multistage_with_progress(group, config, &mut |_| {})
}

pub fn register_multistage_with_progress(
    group: &Group,
    config: &RegistrationConfig,
    on_progress: &mut dyn FnMut(Progress),
) -> Result<RegistrationResult> {
    config.validate()?;
    let start = Instant::now();
    let fine_grid = group.grid().clone();
    let mut accumulated: Option<Vec<VectorVolume>> = None;
    let mut traces = Vec::with_capacity(config.stages.len());
    for (k, stage) in config.stages.iter().enumerate() {
        let level_group = group.downsampled(stage.downsample_levels)?;
        let grid = level_group.grid().clone();
        let base = match &accumulated {
            None => None,
            Some(prev) => Some(prev.iter().map(|v| upsample_to(v, &grid)).collect::<Result<Vec<_>>>()?),
        };
        let init = vec![VectorVolume::zeros(grid.clone()); group.len()];
        let outcome = register_stage(&level_group, &init, base.as_deref(), stage, config, k, on_progress)?;
        let total = match base {
            None => outcome.velocities,
            Some(b) => b.iter().zip(&outcome.velocities).map(|(x, y)| x.add(y)).collect::<Result<_>>()?,
        };
        accumulated = Some(total);
        traces.push(outcome.trace);
    }
    let velocities = accumulated
        .expect("validated: at least one stage")
        .iter()
        .map(|v| upsample_to(v, &fine_grid))
        .collect::<Result<Vec<_>>>()?;
    let displacements = velocities
        .iter()
        .map(|v| exponentiate(v, config.squaring_steps))
        .collect::<Result<Vec<_>>>()?;
    Ok(RegistrationResult {
        velocities,
        displacements,
        stages: traces,
        wall_time: start.elapsed(),
    })
}
