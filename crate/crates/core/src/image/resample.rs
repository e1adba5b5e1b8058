use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::filter::smooth_data;
use crate::image::sample::sample_vector;
use crate::image::{Grid, Mask, Volume, VectorVolume};

/// Halves the resolution: Gaussian pre-smoothing with sigma of one fine voxel
/// on each axis, then every second voxel is kept.
pub fn downsample2(vol: &Volume) -> Result<Volume> {
    let fine = vol.grid();
    let coarse = fine.downsampled()?;
    let smoothed = smooth_data(vol.data(), fine, fine.spacing());
    let data = (0..coarse.len())
        .map(|i| {
            let [x, y, z] = coarse.coords(i);
            smoothed[fine.index(2 * x, 2 * y, 2 * z)]
        })
        .collect();
    Ok(Volume::from_parts(coarse, data))
}

/// Downsamples the indicator of `mask` and keeps voxels with value >= 0.5.
pub fn downsample2_mask(mask: &Mask) -> Result<Mask> {
    Ok(Mask::threshold(&downsample2(&mask.to_volume())?, 0.5))
}

/// Applies [`downsample2`] `levels` times.
pub fn downsample_levels(vol: &Volume, levels: usize) -> Result<Volume> {
    let mut cur = vol.clone();
    for _ in 0..levels {
        cur = downsample2(&cur)?;
    }
    Ok(cur)
}

pub fn downsample_mask_levels(mask: &Mask, levels: usize) -> Result<Mask> {
    let mut cur = mask.clone();
    for _ in 0..levels {
        cur = downsample2_mask(&cur)?;
    }
    Ok(cur)
}

/// Trilinear resampling of a vector field onto `target`. Components are in
/// mm, so values carry over unchanged; only the sampling lattice changes.
pub fn upsample_to(field: &VectorVolume, target: &Grid) -> Result<VectorVolume> {
    let source = field.grid();
    if source.matches(target) {
        return Ok(field.clone());
    }
    let (se, te) = (source.extent(), target.extent());
    let sw0 = source.voxel_to_world([0.0; 3]);
    let tw0 = target.voxel_to_world([0.0; 3]);
    for a in 0..3 {
        let tol = source.spacing()[a].max(target.spacing()[a]);
        if (se[a] - te[a]).abs() > tol || (sw0[a] - tw0[a]).abs() > tol {
            return Err(Error::GridMismatch(format!(
                "upsample_to: physical extents differ by more than one coarse voxel on axis {a} \
                 ({:.4} mm vs {:.4} mm)",
                se[a], te[a]
            )));
        }
    }
    let map = target.voxel_map_to(source);
    let dims = source.dims();
    let data: Vec<[f64; 3]> = (0..target.len())
        .into_par_iter()
        .map(|i| {
            let c = target.coords(i).map(|v| v as f64);
            let p = [0, 1, 2].map(|r| map[r][0] * c[0] + map[r][1] * c[1] + map[r][2] * c[2] + map[r][3]);
            sample_vector(field.data(), dims, p)
        })
        .collect();
    Ok(VectorVolume::from_parts(target.clone(), data))
}
