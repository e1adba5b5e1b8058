use crate::error::{Error, Result};
use crate::image::Grid;

/// Scalar volume with 64-bit samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()));
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        let data = vec![value; grid.len()];
        Volume { grid, data }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([usize; 3]) -> f64) -> Result<Self> {
        let data = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Volume::new(grid, data)
    }

    /// Skips the finiteness scan; for kernels whose outputs are convex
    /// combinations or finite arithmetic of already validated inputs.
    pub(crate) fn from_parts(grid: Grid, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        Volume { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Binary region on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    grid: Grid,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "mask length {} does not match dims {:?}",
                data.len(),
                grid.dims()
            )));
        }
        Ok(Mask { grid, data })
    }

    pub fn full(grid: Grid) -> Self {
        let data = vec![true; grid.len()];
        Mask { grid, data }
    }

    pub fn empty(grid: Grid) -> Self {
        let data = vec![false; grid.len()];
        Mask { grid, data }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        let data = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Mask { grid, data }
    }

    /// Interprets a scalar volume as a mask. Values must be exactly 0 or 1.
    pub fn from_volume(vol: &Volume) -> Result<Self> {
        let mut data = Vec::with_capacity(vol.data().len());
        for &v in vol.data() {
            if v == 0.0 {
                data.push(false);
            } else if v == 1.0 {
                data.push(true);
            } else {
                return Err(Error::arg("mask", format!("mask values must be 0 or 1, found {v}")));
            }
        }
        Ok(Mask {
            grid: vol.grid().clone(),
            data,
        })
    }

    /// Membership where the scalar is `>= threshold`.
    pub fn threshold(vol: &Volume, threshold: f64) -> Self {
        Mask {
            grid: vol.grid().clone(),
            data: vol.data().iter().map(|&v| v >= threshold).collect(),
        }
    }

    pub fn to_volume(&self) -> Volume {
        Volume::from_parts(
            self.grid.clone(),
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.grid.ensure_matches(&other.grid, "mask intersection")?;
        Ok(Mask {
            grid: self.grid.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn not(&self) -> Mask {
        Mask {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    /// Chebyshev (box) dilation by `radius` voxels.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let [nx, ny, nz] = self.grid.dims();
        let mut cur: Vec<bool> = self.data.clone();
        for axis in 0..3 {
            let n = [nx, ny, nz][axis];
            let stride = [1, nx, nx * ny][axis];
            let mut next = vec![false; cur.len()];
            for (idx, out) in next.iter_mut().enumerate() {
                let c = self.grid.coords(idx)[axis];
                let lo = c.saturating_sub(radius);
                let hi = (c + radius).min(n - 1);
                let base = idx - c * stride;
                *out = (lo..=hi).any(|k| cur[base + k * stride]);
            }
            cur = next;
        }
        Mask {
            grid: self.grid.clone(),
            data: cur,
        }
    }
}

/// Three-component vector field, components in mm along the grid axes.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorVolume {
    grid: Grid,
    data: Vec<[f64; 3]>,
}

impl VectorVolume {
    pub fn new(grid: Grid, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "vector data length {} does not match dims {:?}",
                data.len(),
                grid.dims()
            )));
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector field data".into()));
        }
        Ok(VectorVolume { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::filled(grid, [0.0; 3])
    }

    pub fn filled(grid: Grid, value: [f64; 3]) -> Self {
        let data = vec![value; grid.len()];
        VectorVolume { grid, data }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut([usize; 3]) -> [f64; 3]) -> Result<Self> {
        let data = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        VectorVolume::new(grid, data)
    }

    pub(crate) fn from_parts(grid: Grid, data: Vec<[f64; 3]>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        VectorVolume { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<[f64; 3]> {
        self.data
    }

    /// One component as a scalar volume.
    pub fn component(&self, c: usize) -> Volume {
        Volume::from_parts(self.grid.clone(), self.data.iter().map(|v| v[c]).collect())
    }

    pub fn from_components(components: [&Volume; 3]) -> Result<Self> {
        let grid = components[0].grid().clone();
        for c in &components[1..] {
            grid.ensure_matches(c.grid(), "vector components")?;
        }
        let data = (0..grid.len())
            .map(|i| [0, 1, 2].map(|c| components[c].data()[i]))
            .collect();
        Ok(VectorVolume { grid, data })
    }

    /// Largest Euclidean norm over all voxels.
    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|v| norm3(*v)).fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> VectorVolume {
        VectorVolume {
            grid: self.grid.clone(),
            data: self.data.iter().map(|v| v.map(|x| x * factor)).collect(),
        }
    }

    pub fn add(&self, other: &VectorVolume) -> Result<VectorVolume> {
        self.grid.ensure_matches(&other.grid, "vector field sum")?;
        Ok(VectorVolume {
            grid: self.grid.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
                .collect(),
        })
    }
}

#[inline]
pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}
