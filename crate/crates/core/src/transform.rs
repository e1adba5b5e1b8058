//! Stationary-velocity-field diffeomorphisms.
//!
//! A transform is stored as a displacement `u` in mm along the grid axes, so
//! that `T(x) = x + u(x)`. Images are pulled back: `(I ∘ T)(x) = I(T(x))`.
//! `exp(v)` is computed by scaling and squaring; [`squaring_adjoint`] is the
//! exact reverse-mode derivative of that recursion. Displacements are
//! composed with cubic convolution, images are warped trilinearly.

use std::ops::Deref;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::sample::{sample_scalar, sample_scalar_grad, CubicStencil, Stencil};
use crate::image::{derivative, Grid, Mask, Volume, VectorVolume};

pub const DEFAULT_SQUARING_STEPS: usize = 7;

/// Displacement field `u` of the map `T(x) = x + u(x)`, in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField(VectorVolume);

impl DisplacementField {
    pub fn new(u: VectorVolume) -> Self {
        DisplacementField(u)
    }

    pub fn identity(grid: Grid) -> Self {
        DisplacementField(VectorVolume::zeros(grid))
    }

    pub fn field(&self) -> &VectorVolume {
        &self.0
    }

    pub fn into_inner(self) -> VectorVolume {
        self.0
    }
}

impl Deref for DisplacementField {
    type Target = VectorVolume;

    fn deref(&self) -> &VectorVolume {
        &self.0
    }
}

/// Per-voxel determinant of the transform's Jacobian.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMap(Volume);

impl JacobianMap {
    pub fn new(v: Volume) -> Self {
        JacobianMap(v)
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }
}

impl Deref for JacobianMap {
    type Target = Volume;

    fn deref(&self) -> &Volume {
        &self.0
    }
}

#[inline]
pub(crate) fn inv_spacing(grid: &Grid) -> [f64; 3] {
    grid.spacing().map(|s| 1.0 / s)
}

#[inline]
fn displaced(grid: &Grid, idx: usize, u: [f64; 3], inv_s: [f64; 3]) -> [f64; 3] {
    let c = grid.coords(idx);
    [
        c[0] as f64 + u[0] * inv_s[0],
        c[1] as f64 + u[1] * inv_s[1],
        c[2] as f64 + u[2] * inv_s[2],
    ]
}

/// `u(x) + u(x + u(x))`.
fn self_compose(u: &[[f64; 3]], grid: &Grid) -> Vec<[f64; 3]> {
    let dims = grid.dims();
    let inv_s = inv_spacing(grid);
    u.par_iter()
        .enumerate()
        .map(|(idx, &ui)| {
            let s = CubicStencil::new(dims, displaced(grid, idx, ui, inv_s)).sample(u);
            [ui[0] + s[0], ui[1] + s[1], ui[2] + s[2]]
        })
        .collect()
}

/// Every intermediate displacement of scaling and squaring: entry 0 is
/// `v / 2^steps`, entry `steps` is `exp(v)`.
pub(crate) fn squaring_trace(v: &VectorVolume, steps: usize) -> Vec<Vec<[f64; 3]>> {
    let scale = 0.5f64.powi(steps as i32);
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(v.data().iter().map(|x| x.map(|c| c * scale)).collect::<Vec<_>>());
    for k in 0..steps {
        let next = self_compose(&trace[k], v.grid());
        trace.push(next);
    }
    trace
}

/// Pulls a cotangent on `exp(v)` back through the squaring recursion to a
/// cotangent on `v`.
pub(crate) fn squaring_adjoint(trace: &[Vec<[f64; 3]>], grid: &Grid, seed: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
    let dims = grid.dims();
    let inv_s = inv_spacing(grid);
    let steps = trace.len() - 1;
    let mut g = seed;
    for k in (0..steps).rev() {
        let u = &trace[k];
        // u_{k+1}(x) = u(x) + Σ_c w_c(p(x)) u(c), p(x) = x + u(x)/s.
        // Direct term plus the dependence of p on u(x):
        let mut next: Vec<[f64; 3]> = u
            .par_iter()
            .enumerate()
            .map(|(idx, &ui)| {
                let s = CubicStencil::new(dims, displaced(grid, idx, ui, inv_s));
                let gi = g[idx];
                let d = s.derivative_dot(u, gi);
                [gi[0] + d[0] * inv_s[0], gi[1] + d[1] * inv_s[1], gi[2] + d[2] * inv_s[2]]
            })
            .collect();
        // Transpose of the interpolation itself. Scattered, so sequential.
        for (idx, &ui) in u.iter().enumerate() {
            CubicStencil::new(dims, displaced(grid, idx, ui, inv_s)).splat(&mut next, g[idx]);
        }
        g = next;
    }
    let scale = 0.5f64.powi(steps as i32);
    g.iter_mut().for_each(|x| *x = x.map(|c| c * scale));
    g
}

/// Scaling and squaring: `exp(v) = (id + v / 2^S)` self-composed `S` times.
pub fn exponentiate(v: &VectorVolume, squaring_steps: usize) -> Result<DisplacementField> {
    if squaring_steps == 0 {
        return Err(Error::arg("squaring_steps", "must be >= 1"));
    }
    let mut trace = squaring_trace(v, squaring_steps);
    let last = trace.pop().expect("trace holds steps + 1 fields");
    Ok(DisplacementField(VectorVolume::from_parts(v.grid().clone(), last)))
}

/// `(T_outer ∘ T_inner)(x) = T_outer(x + u_inner(x))`, sampling `u_outer` by
/// cubic convolution.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    let grid = inner.grid();
    grid.ensure_matches(outer.grid(), "compose")?;
    let dims = grid.dims();
    let inv_s = inv_spacing(grid);
    let data = inner
        .data()
        .par_iter()
        .enumerate()
        .map(|(idx, &ui)| {
            let s = CubicStencil::new(dims, displaced(grid, idx, ui, inv_s)).sample(outer.data());
            [ui[0] + s[0], ui[1] + s[1], ui[2] + s[2]]
        })
        .collect();
    Ok(DisplacementField(VectorVolume::from_parts(grid.clone(), data)))
}

pub(crate) fn warp_data(img: &[f64], grid: &Grid, u: &[[f64; 3]]) -> Vec<f64> {
    let dims = grid.dims();
    let inv_s = inv_spacing(grid);
    u.par_iter()
        .enumerate()
        .map(|(idx, &ui)| sample_scalar(img, dims, displaced(grid, idx, ui, inv_s)))
        .collect()
}

/// Warped values together with the derivative of each value with respect to
/// the displacement at that voxel (mm⁻¹).
pub(crate) fn warp_with_derivative(img: &[f64], grid: &Grid, u: &[[f64; 3]]) -> (Vec<f64>, Vec<[f64; 3]>) {
    let dims = grid.dims();
    let inv_s = inv_spacing(grid);
    u.par_iter()
        .enumerate()
        .map(|(idx, &ui)| {
            let (v, g) = sample_scalar_grad(img, dims, displaced(grid, idx, ui, inv_s));
            (v, [g[0] * inv_s[0], g[1] * inv_s[1], g[2] * inv_s[2]])
        })
        .unzip()
}

/// Pull-back warp `I ∘ T`.
pub fn warp(img: &Volume, u: &DisplacementField) -> Result<Volume> {
    img.grid().ensure_matches(u.grid(), "warp")?;
    Ok(Volume::from_parts(img.grid().clone(), warp_data(img.data(), img.grid(), u.data())))
}

/// Warps the mask indicator trilinearly and keeps values `>= 0.5`.
pub fn warp_mask(mask: &Mask, u: &DisplacementField) -> Result<Mask> {
    Ok(Mask::threshold(&warp(&mask.to_volume(), u)?, 0.5))
}

/// Warps an integer label map. Each output voxel takes the class whose
/// trilinearly warped indicator is largest (lowest class id on ties), so the
/// output only contains classes present in the input.
pub fn warp_labels(labels: &Volume, u: &DisplacementField) -> Result<Volume> {
    let grid = labels.grid();
    grid.ensure_matches(u.grid(), "warp_labels")?;
    let dims = grid.dims();
    let inv_s = inv_spacing(grid);
    let data = labels.data();
    let out = u
        .data()
        .par_iter()
        .enumerate()
        .map(|(idx, &ui)| {
            let (cidx, w) = Stencil::new(dims, displaced(grid, idx, ui, inv_s)).corners(dims);
            let mut classes = [0.0f64; 8];
            let mut weight = [0.0f64; 8];
            let mut n = 0;
            for c in 0..8 {
                let l = data[cidx[c]];
                match classes[..n].iter().position(|&k| k == l) {
                    Some(j) => weight[j] += w[c],
                    None => {
                        classes[n] = l;
                        weight[n] = w[c];
                        n += 1;
                    }
                }
            }
            let mut best = 0;
            for j in 1..n {
                if weight[j] > weight[best] || (weight[j] == weight[best] && classes[j] < classes[best]) {
                    best = j;
                }
            }
            classes[best]
        })
        .collect();
    Ok(Volume::from_parts(grid.clone(), out))
}

/// `det(I + ∂u/∂x)` with central differences in mm.
pub fn jacobian_determinant(u: &DisplacementField) -> Result<JacobianMap> {
    let grid = u.grid();
    grid.require_min_dims(2, "jacobian_determinant")?;
    // d[c][a] = ∂u_c/∂x_a
    let d: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|c| {
            let comp = u.component(c);
            (0..3).map(|a| derivative(comp.data(), grid, a)).collect()
        })
        .collect();
    let det = (0..grid.len())
        .map(|i| {
            let m = |c: usize, a: usize| d[c][a][i] + if c == a { 1.0 } else { 0.0 };
            m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
        })
        .collect();
    Ok(JacobianMap(Volume::from_parts(grid.clone(), det)))
}
