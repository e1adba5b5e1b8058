use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Grid, Volume, VectorVolume};

/// Visits every 1-D line of the grid along `axis`, handing the callback the
/// linear indices of the line in order.
fn for_each_line(dims: [usize; 3], axis: usize, mut f: impl FnMut(&mut dyn Iterator<Item = usize>)) {
    let [nx, ny, nz] = dims;
    let stride = [1, nx, nx * ny][axis];
    let n = dims[axis];
    let (o1, o2) = match axis {
        0 => ((0..ny, nx), (0..nz, nx * ny)),
        1 => ((0..nx, 1), (0..nz, nx * ny)),
        _ => ((0..nx, 1), (0..ny, nx)),
    };
    for b in o2.0.clone() {
        for a in o1.0.clone() {
            let base = a * o1.1 + b * o2.1;
            let mut it = (0..n).map(move |k| base + k * stride);
            f(&mut it);
        }
    }
}

/// Applies a 1-D line filter along one axis. Lines are independent, so the
/// result does not depend on scheduling.
fn filter_axis(
    data: &[f64],
    dims: [usize; 3],
    axis: usize,
    line_filter: &(dyn Fn(&[f64], &mut [f64]) + Sync),
) -> Vec<f64> {
    let mut lines: Vec<Vec<usize>> = Vec::new();
    for_each_line(dims, axis, |it| lines.push(it.collect()));
    let filtered: Vec<Vec<f64>> = lines
        .par_iter()
        .map(|line| {
            let input: Vec<f64> = line.iter().map(|&i| data[i]).collect();
            let mut out = vec![0.0; input.len()];
            line_filter(&input, &mut out);
            out
        })
        .collect();
    let mut out = vec![0.0; data.len()];
    for (line, vals) in lines.iter().zip(filtered) {
        for (&i, v) in line.iter().zip(vals) {
            out[i] = v;
        }
    }
    out
}

/// Central difference of a line, one-sided at both ends. Requires `n >= 2`.
fn diff_line(f: &[f64], out: &mut [f64], inv_h: f64) {
    let n = f.len();
    out[0] = (f[1] - f[0]) * inv_h;
    out[n - 1] = (f[n - 1] - f[n - 2]) * inv_h;
    for i in 1..n - 1 {
        out[i] = (f[i + 1] - f[i - 1]) * 0.5 * inv_h;
    }
}

/// Transpose of [`diff_line`].
fn diff_line_adjoint(g: &[f64], out: &mut [f64], inv_h: f64) {
    let n = g.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    out[0] -= g[0] * inv_h;
    out[1] += g[0] * inv_h;
    out[n - 1] += g[n - 1] * inv_h;
    out[n - 2] -= g[n - 1] * inv_h;
    for i in 1..n - 1 {
        out[i + 1] += g[i] * 0.5 * inv_h;
        out[i - 1] -= g[i] * 0.5 * inv_h;
    }
}

/// Partial derivative along `axis` in mm⁻¹.
pub(crate) fn derivative(data: &[f64], grid: &Grid, axis: usize) -> Vec<f64> {
    let inv_h = 1.0 / grid.spacing()[axis];
    filter_axis(data, grid.dims(), axis, &move |f, o| diff_line(f, o, inv_h))
}

pub(crate) fn derivative_adjoint(data: &[f64], grid: &Grid, axis: usize) -> Vec<f64> {
    let inv_h = 1.0 / grid.spacing()[axis];
    filter_axis(data, grid.dims(), axis, &move |f, o| diff_line_adjoint(f, o, inv_h))
}

/// Spatial gradient by central differences in mm (one-sided on faces).
pub fn gradient_central(vol: &Volume) -> Result<VectorVolume> {
    let grid = vol.grid();
    grid.require_min_dims(2, "gradient_central")?;
    let d: Vec<Vec<f64>> = (0..3).map(|a| derivative(vol.data(), grid, a)).collect();
    let data = (0..grid.len()).map(|i| [d[0][i], d[1][i], d[2][i]]).collect();
    Ok(VectorVolume::from_parts(grid.clone(), data))
}

/// Normalised discrete Gaussian with radius `ceil(3 sigma)` (sigma in voxels).
pub(crate) fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_vox).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (sigma_vox * sigma_vox)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Convolution of a line with edge replication.
fn convolve_line(f: &[f64], out: &mut [f64], kernel: &[f64]) {
    let n = f.len() as isize;
    let r = (kernel.len() / 2) as isize;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, &w) in kernel.iter().enumerate() {
            let j = (i as isize + k as isize - r).clamp(0, n - 1);
            acc += w * f[j as usize];
        }
        *o = acc;
    }
}

pub(crate) fn smooth_data(data: &[f64], grid: &Grid, sigma_mm: [f64; 3]) -> Vec<f64> {
    let mut cur = data.to_vec();
    for (axis, &s) in sigma_mm.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        let kernel = gaussian_kernel(s / grid.spacing()[axis]);
        if kernel.len() == 1 {
            continue;
        }
        cur = filter_axis(&cur, grid.dims(), axis, &|f, o| convolve_line(f, o, &kernel));
    }
    cur
}

/// Separable Gaussian smoothing, sigma per axis in mm, edge-replicated
/// borders. A zero sigma leaves that axis untouched.
pub fn gaussian_smooth(vol: &Volume, sigma_mm: [f64; 3]) -> Result<Volume> {
    if sigma_mm.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::arg("sigma_mm", format!("must be finite and >= 0, got {sigma_mm:?}")));
    }
    let data = smooth_data(vol.data(), vol.grid(), sigma_mm);
    Ok(Volume::from_parts(vol.grid().clone(), data))
}

pub(crate) fn gaussian_smooth_vector(field: &VectorVolume, sigma_mm: [f64; 3]) -> VectorVolume {
    let comps: Vec<Vec<f64>> = (0..3)
        .map(|c| smooth_data(field.component(c).data(), field.grid(), sigma_mm))
        .collect();
    let data = (0..field.grid().len())
        .map(|i| [comps[0][i], comps[1][i], comps[2][i]])
        .collect();
    VectorVolume::from_parts(field.grid().clone(), data)
}

fn box_line(f: &[f64], out: &mut [f64], r: usize) {
    let n = f.len();
    for (i, o) in out.iter_mut().enumerate() {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(n - 1);
        *o = f[lo..=hi].iter().sum();
    }
}

/// Sum over the `(2r+1)³` box around each voxel, truncated at the grid
/// boundary. The truncated box relation is symmetric, so this operator is
/// its own transpose.
pub(crate) fn box_sum(data: &[f64], dims: [usize; 3], r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    for axis in 0..3 {
        if dims[axis] > 1 {
            cur = filter_axis(&cur, dims, axis, &|f, o| box_line(f, o, r));
        }
    }
    cur
}

/// Number of in-grid voxels in the truncated box around each voxel.
pub(crate) fn box_counts(dims: [usize; 3], r: usize) -> Vec<f64> {
    let per_axis = |n: usize, i: usize| (((i + r).min(n - 1)) - i.saturating_sub(r) + 1) as f64;
    let mut out = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for z in 0..dims[2] {
        let cz = per_axis(dims[2], z);
        for y in 0..dims[1] {
            let cy = per_axis(dims[1], y);
            for x in 0..dims[0] {
                out.push(per_axis(dims[0], x) * cy * cz);
            }
        }
    }
    out
}
