use nalgebra::{Matrix4, Vector4};

use crate::error::{Error, Result};

/// Relative tolerance used when comparing spacings and affines of two grids.
const GRID_TOL: f64 = 1e-9;

/// Voxel lattice shared by every container: dimensions, spacing in mm and
/// the voxel-to-world affine. Linear index order is x-fastest:
/// `idx = x + nx * (y + ny * z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: [[f64; 4]; 4],
}

impl Grid {
    /// Axis-aligned grid with its first voxel at the world origin.
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let mut affine = [[0.0; 4]; 4];
        for a in 0..3 {
            affine[a][a] = spacing[a];
        }
        affine[3][3] = 1.0;
        Self::with_affine(dims, spacing, affine)
    }

    pub fn with_affine(dims: [usize; 3], spacing: [f64; 3], affine: [[f64; 4]; 4]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be finite and > 0, got {spacing:?}"
            )));
        }
        if affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("affine has non-finite entries".into()));
        }
        if Matrix4::from_fn(|r, c| affine[r][c]).try_inverse().is_none() {
            return Err(Error::InvalidGrid("affine is singular".into()));
        }
        Ok(Grid {
            dims,
            spacing,
            affine,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> [[f64; 4]; 4] {
        self.affine
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let r = idx / self.dims[0];
        [x, r % self.dims[1], r / self.dims[1]]
    }

    /// Physical size of the sampled lattice along each axis (`dims * spacing`).
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.spacing[a])
    }

    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let a = &self.affine;
        [0, 1, 2].map(|r| a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2] + a[r][3])
    }

    pub fn world_to_voxel(&self, w: [f64; 3]) -> [f64; 3] {
        let inv = self.inverse_affine();
        let v = inv * Vector4::new(w[0], w[1], w[2], 1.0);
        [v[0], v[1], v[2]]
    }

    fn inverse_affine(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|r, c| self.affine[r][c])
            .try_inverse()
            .expect("affine invertibility checked at construction")
    }

    /// Map that takes voxel coordinates of `self` to voxel coordinates of
    /// `other` through world space, as a 3x4 matrix.
    pub(crate) fn voxel_map_to(&self, other: &Grid) -> [[f64; 4]; 3] {
        let m = other.inverse_affine() * Matrix4::from_fn(|r, c| self.affine[r][c]);
        let mut out = [[0.0; 4]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                let x = m[(r, c)];
                // Snap rounding noise from the inverse so that coincident
                // nodes map to exact integers.
                let rounded = x.round();
                *v = if (x - rounded).abs() < 1e-12 { rounded } else { x };
            }
        }
        out
    }

    /// Grid of half the resolution sharing the first voxel's world position:
    /// dims become `ceil(d / 2)` and spacing doubles.
    pub fn downsampled(&self) -> Result<Grid> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidGrid(format!(
                "cannot downsample dims {:?}: every axis needs >= 2 voxels",
                self.dims
            )));
        }
        let dims = self.dims.map(|d| d.div_ceil(2));
        let spacing = self.spacing.map(|s| 2.0 * s);
        let mut affine = self.affine;
        for row in affine.iter_mut().take(3) {
            for v in row.iter_mut().take(3) {
                *v *= 2.0;
            }
        }
        Grid::with_affine(dims, spacing, affine)
    }

    pub fn matches(&self, other: &Grid) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= GRID_TOL * (1.0 + a.abs().max(b.abs()));
        self.dims == other.dims
            && self.spacing.iter().zip(&other.spacing).all(|(&a, &b)| close(a, b))
            && self
                .affine
                .iter()
                .flatten()
                .zip(other.affine.iter().flatten())
                .all(|(&a, &b)| close(a, b))
    }

    pub(crate) fn ensure_matches(&self, other: &Grid, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: dims {:?} spacing {:?} vs dims {:?} spacing {:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    pub(crate) fn require_min_dims(&self, min: usize, what: &str) -> Result<()> {
        if self.dims.iter().all(|&d| d >= min) {
            Ok(())
        } else {
            Err(Error::InvalidGrid(format!(
                "{what} needs >= {min} voxels per axis, got {:?}",
                self.dims
            )))
        }
    }
}
