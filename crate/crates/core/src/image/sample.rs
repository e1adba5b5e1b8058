//! Interpolation with edge clamping, plus derivatives and transposes.
//!
//! Images are sampled trilinearly. Displacement fields are composed with
//! cubic convolution (Catmull-Rom), whose O(h³) error keeps the bias of
//! repeated self-composition well below that of trilinear sampling. Each
//! kernel shares one stencil between value, derivative and transpose, so the
//! adjoints used by the loss gradient are exact.

use crate::error::{Error, Result};
use crate::image::{Volume};

/// Interpolation cell for one continuous voxel coordinate.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    lo: [usize; 3],
    hi: [usize; 3],
    t: [f64; 3],
    /// Whether the coordinate lies inside `[0, n-1]` on each axis. Outside,
    /// the clamped sample is constant in that coordinate.
    inside: [bool; 3],
}

impl Stencil {
    #[inline]
    pub(crate) fn new(dims: [usize; 3], p: [f64; 3]) -> Stencil {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        let mut t = [0.0; 3];
        let mut inside = [false; 3];
        for a in 0..3 {
            let n = dims[a];
            if n == 1 {
                continue;
            }
            let max = (n - 1) as f64;
            let q = p[a];
            if q < 0.0 {
                lo[a] = 0;
                hi[a] = 1;
            } else if q > max {
                lo[a] = n - 2;
                hi[a] = n - 1;
                t[a] = 1.0;
            } else {
                let f = (q.floor() as usize).min(n - 2);
                lo[a] = f;
                hi[a] = f + 1;
                t[a] = q - f as f64;
                inside[a] = true;
            }
        }
        Stencil { lo, hi, t, inside }
    }

    /// Corner linear indices and weights, corner bit `b` selects `hi` on
    /// axis `b`.
    #[inline]
    pub(crate) fn corners(&self, dims: [usize; 3]) -> ([usize; 8], [f64; 8]) {
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        let sx = 1;
        let sy = dims[0];
        let sz = dims[0] * dims[1];
        for (c, (i, wc)) in idx.iter_mut().zip(w.iter_mut()).enumerate() {
            let bx = c & 1;
            let by = (c >> 1) & 1;
            let bz = (c >> 2) & 1;
            let x = if bx == 1 { self.hi[0] } else { self.lo[0] };
            let y = if by == 1 { self.hi[1] } else { self.lo[1] };
            let z = if bz == 1 { self.hi[2] } else { self.lo[2] };
            *i = x * sx + y * sy + z * sz;
            let wx = if bx == 1 { self.t[0] } else { 1.0 - self.t[0] };
            let wy = if by == 1 { self.t[1] } else { 1.0 - self.t[1] };
            let wz = if bz == 1 { self.t[2] } else { 1.0 - self.t[2] };
            *wc = wx * wy * wz;
        }
        (idx, w)
    }

    /// Weights of the partial derivative with respect to each coordinate,
    /// per corner. Zero on clamped axes.
    #[inline]
    pub(crate) fn derivative_weights(&self) -> [[f64; 8]; 3] {
        let mut d = [[0.0; 8]; 3];
        for c in 0..8 {
            let b = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let lin = |a: usize| if b[a] == 1 { self.t[a] } else { 1.0 - self.t[a] };
            let dlin = |a: usize| {
                if !self.inside[a] {
                    0.0
                } else if b[a] == 1 {
                    1.0
                } else {
                    -1.0
                }
            };
            d[0][c] = dlin(0) * lin(1) * lin(2);
            d[1][c] = lin(0) * dlin(1) * lin(2);
            d[2][c] = lin(0) * lin(1) * dlin(2);
        }
        d
    }
}

#[inline]
pub(crate) fn sample_scalar(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let (idx, w) = Stencil::new(dims, p).corners(dims);
    let mut acc = 0.0;
    for c in 0..8 {
        acc += w[c] * data[idx[c]];
    }
    acc
}

/// Value and derivative with respect to the voxel coordinate.
#[inline]
pub(crate) fn sample_scalar_grad(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> (f64, [f64; 3]) {
    let s = Stencil::new(dims, p);
    let (idx, w) = s.corners(dims);
    let dw = s.derivative_weights();
    let mut acc = 0.0;
    let mut g = [0.0; 3];
    for c in 0..8 {
        let v = data[idx[c]];
        acc += w[c] * v;
        g[0] += dw[0][c] * v;
        g[1] += dw[1][c] * v;
        g[2] += dw[2][c] * v;
    }
    (acc, g)
}

#[inline]
pub(crate) fn sample_vector(data: &[[f64; 3]], dims: [usize; 3], p: [f64; 3]) -> [f64; 3] {
    let (idx, w) = Stencil::new(dims, p).corners(dims);
    let mut acc = [0.0; 3];
    for c in 0..8 {
        let v = data[idx[c]];
        acc[0] += w[c] * v[0];
        acc[1] += w[c] * v[1];
        acc[2] += w[c] * v[2];
    }
    acc
}

#[inline]
fn keys(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

#[inline]
fn keys_derivative(t: f64) -> [f64; 4] {
    let t2 = t * t;
    [
        -1.5 * t2 + 2.0 * t - 0.5,
        4.5 * t2 - 5.0 * t,
        -4.5 * t2 + 4.0 * t + 0.5,
        1.5 * t2 - t,
    ]
}

/// Catmull-Rom stencil: four taps per axis with edge-replicated indices.
/// The coordinate is clamped to `[0, n-1]` first, as in [`Stencil`], so
/// outside the grid the sample is constant along that axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct CubicStencil {
    /// Tap offsets into the flat array, already multiplied by the stride.
    off: [[usize; 4]; 3],
    w: [[f64; 4]; 3],
    dw: [[f64; 4]; 3],
}

impl CubicStencil {
    #[inline]
    pub(crate) fn new(dims: [usize; 3], p: [f64; 3]) -> CubicStencil {
        let stride = [1, dims[0], dims[0] * dims[1]];
        let mut off = [[0; 4]; 3];
        let mut w = [[1.0, 0.0, 0.0, 0.0]; 3];
        let mut dw = [[0.0; 4]; 3];
        for a in 0..3 {
            let n = dims[a];
            if n == 1 {
                continue;
            }
            let max = (n - 1) as f64;
            let q = p[a].clamp(0.0, max);
            let f = (q.floor() as usize).min(n - 2);
            let t = q - f as f64;
            for (k, o) in off[a].iter_mut().enumerate() {
                *o = (f + k).saturating_sub(1).min(n - 1) * stride[a];
            }
            w[a] = keys(t);
            if (0.0..=max).contains(&p[a]) {
                dw[a] = keys_derivative(t);
            }
        }
        CubicStencil { off, w, dw }
    }

    #[inline]
    pub(crate) fn sample(&self, data: &[[f64; 3]]) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for k in 0..4 {
            let wz = self.w[2][k];
            if wz == 0.0 {
                continue;
            }
            for j in 0..4 {
                let wyz = self.w[1][j] * wz;
                if wyz == 0.0 {
                    continue;
                }
                let row = self.off[2][k] + self.off[1][j];
                for i in 0..4 {
                    let wt = self.w[0][i] * wyz;
                    let v = data[row + self.off[0][i]];
                    acc[0] += wt * v[0];
                    acc[1] += wt * v[1];
                    acc[2] += wt * v[2];
                }
            }
        }
        acc
    }

    /// `Σ_c g_c ∂sample_c/∂p_a` for each coordinate `a`.
    #[inline]
    pub(crate) fn derivative_dot(&self, data: &[[f64; 3]], g: [f64; 3]) -> [f64; 3] {
        let mut d = [0.0; 3];
        for k in 0..4 {
            let (wz, dz) = (self.w[2][k], self.dw[2][k]);
            for j in 0..4 {
                let (wy, dy) = (self.w[1][j], self.dw[1][j]);
                let row = self.off[2][k] + self.off[1][j];
                for i in 0..4 {
                    let (wx, dx) = (self.w[0][i], self.dw[0][i]);
                    let v = data[row + self.off[0][i]];
                    let gv = g[0] * v[0] + g[1] * v[1] + g[2] * v[2];
                    d[0] += dx * wy * wz * gv;
                    d[1] += wx * dy * wz * gv;
                    d[2] += wx * wy * dz * gv;
                }
            }
        }
        d
    }

    /// Transpose of [`CubicStencil::sample`].
    #[inline]
    pub(crate) fn splat(&self, out: &mut [[f64; 3]], value: [f64; 3]) {
        for k in 0..4 {
            let wz = self.w[2][k];
            if wz == 0.0 {
                continue;
            }
            for j in 0..4 {
                let wyz = self.w[1][j] * wz;
                if wyz == 0.0 {
                    continue;
                }
                let row = self.off[2][k] + self.off[1][j];
                for i in 0..4 {
                    let wt = self.w[0][i] * wyz;
                    let o = &mut out[row + self.off[0][i]];
                    o[0] += wt * value[0];
                    o[1] += wt * value[1];
                    o[2] += wt * value[2];
                }
            }
        }
    }
}

/// Interpolates `vol` at a continuous voxel coordinate, clamping to the
/// boundary voxels outside the grid.
pub fn sample_trilinear(vol: &Volume, point: [f64; 3]) -> Result<f64> {
    if point.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sample point {point:?}")));
    }
    Ok(sample_scalar(vol.data(), vol.grid().dims(), point))
}
