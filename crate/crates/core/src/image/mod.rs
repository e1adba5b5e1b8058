//! Grid containers and the sampling, filtering and resampling kernels shared
//! by the rest of the crate. All math is f64 and every boundary is handled by
//! clamping (edge replication).

mod filter;
mod grid;
mod resample;
pub(crate) mod sample;
mod volume;

pub(crate) use filter::{box_counts, box_sum, derivative, derivative_adjoint, gaussian_smooth_vector};
pub use filter::{gaussian_smooth, gradient_central};
pub use grid::Grid;
pub use resample::{
    downsample2, downsample2_mask, downsample_levels, downsample_mask_levels, upsample_to,
};
pub use sample::sample_trilinear;
pub(crate) use volume::norm3;
pub use volume::{Mask, Volume, VectorVolume};
