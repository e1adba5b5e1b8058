use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{box_counts, box_sum, Mask, Volume};

/// Floor added to each local variance.
pub const LNCC_EPSILON: f64 = 1e-5;

/// Windowed Pearson correlation of `a` and `b` averaged over `mask`.
///
/// Each masked voxel uses the `(2r+1)³` box around it, truncated at the grid
/// boundary; the window itself is not restricted to the mask.
pub fn lncc(a: &Volume, b: &Volume, mask: &Mask, window_radius: usize) -> Result<f64> {
    a.grid().ensure_matches(b.grid(), "lncc images")?;
    a.grid().ensure_matches(mask.grid(), "lncc mask")?;
    if window_radius == 0 {
        return Err(Error::arg("window_radius", "must be >= 1"));
    }
    let stats = WindowStats::new(a.data(), b.data(), a.grid().dims(), window_radius);
    Ok(stats.evaluate(mask.data(), false)?.0)
}

/// Per-voxel window sums of `a`, `b`, `a²`, `b²` and `ab`.
pub(crate) struct WindowStats<'a> {
    a: &'a [f64],
    b: &'a [f64],
    dims: [usize; 3],
    radius: usize,
    n: Vec<f64>,
    sa: Vec<f64>,
    sb: Vec<f64>,
    saa: Vec<f64>,
    sbb: Vec<f64>,
    sab: Vec<f64>,
}

/// Gradient of the masked mean LNCC with respect to both inputs.
pub(crate) struct LnccGradient {
    pub da: Vec<f64>,
    pub db: Vec<f64>,
}

impl<'a> WindowStats<'a> {
    pub(crate) fn new(a: &'a [f64], b: &'a [f64], dims: [usize; 3], radius: usize) -> Self {
        let sq = |x: &[f64]| x.par_iter().map(|v| v * v).collect::<Vec<_>>();
        let prod: Vec<f64> = a.par_iter().zip(b).map(|(x, y)| x * y).collect();
        WindowStats {
            a,
            b,
            dims,
            radius,
            n: box_counts(dims, radius),
            sa: box_sum(a, dims, radius),
            sb: box_sum(b, dims, radius),
            saa: box_sum(&sq(a), dims, radius),
            sbb: box_sum(&sq(b), dims, radius),
            sab: box_sum(&prod, dims, radius),
        }
    }

    pub(crate) fn evaluate(&self, mask: &[bool], need_grad: bool) -> Result<(f64, Option<LnccGradient>)> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask("lncc has no voxels to average over".into()));
        }
        let inv_m = 1.0 / count as f64;
        let len = mask.len();
        let mut value = 0.0;
        let (mut c_sa, mut c_sb, mut c_saa, mut c_sbb, mut c_sab) = if need_grad {
            (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len])
        } else {
            Default::default()
        };
        for i in 0..len {
            if !mask[i] {
                continue;
            }
            let n = self.n[i];
            let ma = self.sa[i] / n;
            let mb = self.sb[i] / n;
            let va = self.saa[i] / n - ma * ma + LNCC_EPSILON;
            let vb = self.sbb[i] / n - mb * mb + LNCC_EPSILON;
            let cov = self.sab[i] / n - ma * mb;
            let d = (va * vb).sqrt();
            let cc = cov / d;
            value += cc;
            if need_grad {
                let nd = n * d;
                c_sab[i] = inv_m / nd;
                c_sa[i] = inv_m * (-mb / nd + cc * ma / (n * va));
                c_sb[i] = inv_m * (-ma / nd + cc * mb / (n * vb));
                c_saa[i] = -inv_m * cc / (2.0 * n * va);
                c_sbb[i] = -inv_m * cc / (2.0 * n * vb);
            }
        }
        let value = value * inv_m;
        if !need_grad {
            return Ok((value, None));
        }
        let (dims, r) = (self.dims, self.radius);
        let b_sa = box_sum(&c_sa, dims, r);
        let b_sb = box_sum(&c_sb, dims, r);
        let b_saa = box_sum(&c_saa, dims, r);
        let b_sbb = box_sum(&c_sbb, dims, r);
        let b_sab = box_sum(&c_sab, dims, r);
        let (a, b) = (self.a, self.b);
        let da = (0..len)
            .into_par_iter()
            .map(|i| b_sa[i] + 2.0 * a[i] * b_saa[i] + b[i] * b_sab[i])
            .collect();
        let db = (0..len)
            .into_par_iter()
            .map(|i| b_sb[i] + 2.0 * b[i] * b_sbb[i] + a[i] * b_sab[i])
            .collect();
        Ok((value, Some(LnccGradient { da, db })))
    }
}
