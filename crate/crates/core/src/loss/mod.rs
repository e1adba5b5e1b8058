//! The groupwise objective
//!
//! ```text
//! Ī    = (1/n) Σ_i I_i ∘ T_i
//! loss = -(1/n) Σ_i LNCC(I_i ∘ T_i, Ī; H) + λ (1/n) Σ_i R(v_i)
//! ```
//!
//! with `T_i = exp(v_i)`, `H` the intersection of the warped normal-tissue
//! masks and `R` the diffusion energy of the velocity field. The gradient is
//! exact for a fixed `H`.
//!
//! Reductions across members are summed in sorted order, which makes every
//! quantity invariant (bit for bit) under a permutation of the members.

mod lncc;

use rayon::prelude::*;

pub use lncc::{lncc, LNCC_EPSILON};
use lncc::WindowStats;

use crate::error::{Error, Result};
use crate::image::{derivative, derivative_adjoint, downsample_levels, downsample_mask_levels, Grid, Mask, Volume, VectorVolume};
use crate::transform::{squaring_adjoint, squaring_trace, warp_mask, warp_with_derivative, warp_data, DisplacementField};

/// One time-point: image, normal-appearing tissue mask and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub image: Volume,
    pub mask: Mask,
    pub labels: Option<Volume>,
}

/// `n >= 2` time-points on a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    members: Vec<Member>,
}

impl Group {
    pub fn new(members: Vec<Member>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::arg("group", format!("needs >= 2 members, got {}", members.len())));
        }
        let grid = members[0].image.grid().clone();
        for (i, m) in members.iter().enumerate() {
            grid.ensure_matches(m.image.grid(), &format!("member {i} image"))?;
            grid.ensure_matches(m.mask.grid(), &format!("member {i} mask"))?;
            if let Some(l) = &m.labels {
                grid.ensure_matches(l.grid(), &format!("member {i} labels"))?;
            }
        }
        Ok(Group { members })
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn grid(&self) -> &Grid {
        self.members[0].image.grid()
    }

    /// Images and masks at `levels` halvings of the resolution. Labels are
    /// dropped since they are not used by the objective.
    pub fn downsampled(&self, levels: usize) -> Result<Group> {
        if levels == 0 {
            return Ok(self.clone());
        }
        let members = self
            .members
            .iter()
            .map(|m| {
                Ok(Member {
                    image: downsample_levels(&m.image, levels)?,
                    mask: downsample_mask_levels(&m.mask, levels)?,
                    labels: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Group::new(members)
    }

    /// Members reordered so that member `k` of the result is `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Group {
        Group {
            members: order.iter().map(|&i| self.members[i].clone()).collect(),
        }
    }
}

/// Parameters of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub lambda: f64,
    pub window_radius: usize,
    pub squaring_steps: usize,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            lambda: 0.2,
            window_radius: 4,
            squaring_steps: crate::transform::DEFAULT_SQUARING_STEPS,
        }
    }
}

/// Value of the objective and its parts:
/// `total = -similarity_term + lambda * regularizer_term`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub similarity_term: f64,
    pub regularizer_term: f64,
    pub masked_voxel_count: usize,
}

pub(crate) fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Voxelwise `(1/n) Σ_i f(i, voxel)`, summed in sorted order per voxel.
pub(crate) fn ordered_mean_by(len: usize, n: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Vec<f64> {
    (0..len)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |buf, v| {
                for (i, slot) in buf.iter_mut().enumerate() {
                    *slot = f(i, v);
                }
                ordered_sum(buf) / n as f64
            },
        )
        .collect()
}

/// Voxelwise arithmetic mean of the warped images.
pub fn mean_image(warped: &[Volume]) -> Result<Volume> {
    if warped.len() < 2 {
        return Err(Error::arg("warped", "mean_image needs >= 2 volumes"));
    }
    let grid = warped[0].grid();
    for w in &warped[1..] {
        grid.ensure_matches(w.grid(), "mean_image")?;
    }
    let data = ordered_mean_by(grid.len(), warped.len(), |i, v| warped[i].data()[v]);
    Ok(Volume::from_parts(grid.clone(), data))
}

/// Intersection of the warped masks. An empty result is returned as is.
pub fn common_mask(warped_masks: &[Mask]) -> Result<Mask> {
    if warped_masks.len() < 2 {
        return Err(Error::arg("warped_masks", "common_mask needs >= 2 masks"));
    }
    let mut acc = warped_masks[0].clone();
    for m in &warped_masks[1..] {
        acc = acc.and(m)?;
    }
    Ok(acc)
}

/// Mean over voxels of `‖∇v‖²_F` (central differences in mm).
pub fn regularizer(v: &VectorVolume) -> Result<f64> {
    v.grid().require_min_dims(2, "regularizer")?;
    Ok(regularizer_value(v))
}

fn regularizer_value(v: &VectorVolume) -> f64 {
    let grid = v.grid();
    let mut total = 0.0;
    for c in 0..3 {
        let comp = v.component(c);
        for a in 0..3 {
            total += derivative(comp.data(), grid, a).iter().map(|d| d * d).sum::<f64>();
        }
    }
    total / grid.len() as f64
}

/// `∂R/∂v = (2/N) Σ_a D_aᵀ D_a v`.
pub(crate) fn regularizer_gradient(v: &VectorVolume) -> VectorVolume {
    let grid = v.grid();
    let scale = 2.0 / grid.len() as f64;
    let mut out = vec![[0.0; 3]; grid.len()];
    for c in 0..3 {
        let comp = v.component(c);
        for a in 0..3 {
            let d = derivative(comp.data(), grid, a);
            let dt = derivative_adjoint(&d, grid, a);
            for (o, x) in out.iter_mut().zip(dt) {
                o[c] += scale * x;
            }
        }
    }
    VectorVolume::from_parts(grid.clone(), out)
}

/// Result of one evaluation of the objective.
pub(crate) struct Evaluation {
    pub breakdown: LossBreakdown,
    pub gradient: Option<Vec<VectorVolume>>,
}

fn validate(group: &Group, velocities: &[VectorVolume], params: &LossParams) -> Result<()> {
    if velocities.len() != group.len() {
        return Err(Error::arg(
            "velocities",
            format!("expected {} fields (one per member), got {}", group.len(), velocities.len()),
        ));
    }
    for (i, v) in velocities.iter().enumerate() {
        group.grid().ensure_matches(v.grid(), &format!("velocity {i}"))?;
    }
    if params.window_radius == 0 {
        return Err(Error::arg("window_radius", "must be >= 1"));
    }
    if params.squaring_steps == 0 {
        return Err(Error::arg("squaring_steps", "must be >= 1"));
    }
    if !(params.lambda.is_finite() && params.lambda >= 0.0) {
        return Err(Error::arg("lambda", "must be finite and >= 0"));
    }
    group.grid().require_min_dims(2, "loss evaluation")
}

/// Evaluates the objective, optionally with a caller-provided common mask in
/// place of the intersection of the warped masks.
pub(crate) fn evaluate(
    group: &Group,
    velocities: &[VectorVolume],
    params: &LossParams,
    fixed_mask: Option<&Mask>,
    need_grad: bool,
) -> Result<Evaluation> {
    validate(group, velocities, params)?;
    let grid = group.grid();
    let n = group.len();
    let len = grid.len();

    let mut traces = Vec::with_capacity(n);
    let mut warped = Vec::with_capacity(n);
    let mut warp_derivs = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for (member, v) in group.members().iter().zip(velocities) {
        let mut trace = squaring_trace(v, params.squaring_steps);
        let u = trace.last().expect("non-empty trace");
        if need_grad {
            let (w, d) = warp_with_derivative(member.image.data(), grid, u);
            warped.push(w);
            warp_derivs.push(d);
        } else {
            warped.push(warp_data(member.image.data(), grid, u));
        }
        if fixed_mask.is_none() {
            let field = DisplacementField::new(VectorVolume::from_parts(grid.clone(), u.clone()));
            masks.push(warp_mask(&member.mask, &field)?);
        }
        if need_grad {
            traces.push(trace);
        } else {
            trace.clear();
        }
    }

    let h = match fixed_mask {
        Some(m) => {
            grid.ensure_matches(m.grid(), "common mask")?;
            m.clone()
        }
        None => common_mask(&masks)?,
    };
    let masked_voxel_count = h.count();
    if masked_voxel_count == 0 {
        return Err(Error::EmptyMask(
            "the warped normal-tissue masks do not overlap; the similarity has no support".into(),
        ));
    }

    let mean = ordered_mean_by(len, n, |i, v| warped[i][v]);

    let mut sims = Vec::with_capacity(n);
    let mut lncc_grads = Vec::with_capacity(n);
    for w in &warped {
        let stats = WindowStats::new(w, &mean, grid.dims(), params.window_radius);
        let (value, grad) = stats.evaluate(h.data(), need_grad)?;
        sims.push(value);
        lncc_grads.push(grad);
    }
    let mut regs: Vec<f64> = velocities.iter().map(regularizer_value).collect();

    let similarity_term = ordered_sum(&mut sims.clone()) / n as f64;
    let regularizer_term = ordered_sum(&mut regs) / n as f64;
    let total = -similarity_term + params.lambda * regularizer_term;
    let breakdown = LossBreakdown {
        total,
        similarity_term,
        regularizer_term,
        masked_voxel_count,
    };
    if !need_grad {
        return Ok(Evaluation {
            breakdown,
            gradient: None,
        });
    }

    let lncc_grads: Vec<_> = lncc_grads.into_iter().map(|g| g.expect("gradient requested")).collect();
    // ∂loss/∂Ī contributions, shared by every member through Ī.
    let mean_term = ordered_mean_by(len, n, |i, v| lncc_grads[i].db[v]);
    let inv_n = 1.0 / n as f64;
    let mut gradient = Vec::with_capacity(n);
    for (j, trace) in traces.iter().enumerate() {
        let da = &lncc_grads[j].da;
        let dw = &warp_derivs[j];
        let seed: Vec<[f64; 3]> = (0..len)
            .into_par_iter()
            .map(|v| {
                // ∂loss/∂W_j = -(1/n) (∂sim_j/∂a + (1/n) Σ_i ∂sim_i/∂b)
                let gw = -inv_n * (da[v] + mean_term[v]);
                dw[v].map(|d| gw * d)
            })
            .collect();
        let gv = squaring_adjoint(trace, grid, seed);
        let reg = regularizer_gradient(&velocities[j]);
        let scale = params.lambda * inv_n;
        let data = gv
            .iter()
            .zip(reg.data())
            .map(|(a, r)| [a[0] + scale * r[0], a[1] + scale * r[1], a[2] + scale * r[2]])
            .collect();
        gradient.push(VectorVolume::from_parts(grid.clone(), data));
    }
    Ok(Evaluation {
        breakdown,
        gradient: Some(gradient),
    })
}

/// The groupwise objective at the given velocities.
pub fn total_loss(group: &Group, velocities: &[VectorVolume], params: &LossParams) -> Result<LossBreakdown> {
    Ok(evaluate(group, velocities, params, None, false)?.breakdown)
}

/// The objective with `mask` used as the common region instead of the
/// intersection of the warped masks.
pub fn total_loss_with_mask(
    group: &Group,
    velocities: &[VectorVolume],
    params: &LossParams,
    mask: &Mask,
) -> Result<LossBreakdown> {
    Ok(evaluate(group, velocities, params, Some(mask), false)?.breakdown)
}

/// Gradient of [`total_loss`] with respect to every velocity field, holding
/// the common mask of the current iterate fixed.
pub fn loss_gradient(group: &Group, velocities: &[VectorVolume], params: &LossParams) -> Result<Vec<VectorVolume>> {
    Ok(loss_and_gradient(group, velocities, params)?.1)
}

pub fn loss_and_gradient(
    group: &Group,
    velocities: &[VectorVolume],
    params: &LossParams,
) -> Result<(LossBreakdown, Vec<VectorVolume>)> {
    let e = evaluate(group, velocities, params, None, true)?;
    Ok((e.breakdown, e.gradient.expect("gradient requested")))
}

/// Warped common mask `H` at the given velocities.
pub fn common_mask_at(group: &Group, velocities: &[VectorVolume], squaring_steps: usize) -> Result<Mask> {
    let masks = group
        .members()
        .iter()
        .zip(velocities)
        .map(|(m, v)| warp_mask(&m.mask, &crate::transform::exponentiate(v, squaring_steps)?))
        .collect::<Result<Vec<_>>>()?;
    common_mask(&masks)
}
