//! Independent reference implementations used as test oracles. They are
//! written as plainly as possible and share no code with the crate.

#![allow(dead_code)]

pub mod fd;

use groupreg::image::{Grid, Mask, Volume, VectorVolume};

pub fn index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// Trilinear interpolation at a continuous voxel position, replicating the
/// edge voxels outside the grid.
pub fn trilinear<T: Copy>(dims: [usize; 3], p: [f64; 3], get: impl Fn(usize) -> T, lerp: impl Fn(T, T, f64) -> T) -> T {
    let mut lo = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let max = (dims[a] - 1) as f64;
        let q = p[a].clamp(0.0, max);
        let f = q.floor().min(max - 1.0).max(0.0);
        lo[a] = f as usize;
        t[a] = q - f;
    }
    let hi = |a: usize| (lo[a] + 1).min(dims[a] - 1);
    let at = |x: usize, y: usize, z: usize| get(index(dims, x, y, z));
    let x00 = lerp(at(lo[0], lo[1], lo[2]), at(hi(0), lo[1], lo[2]), t[0]);
    let x10 = lerp(at(lo[0], hi(1), lo[2]), at(hi(0), hi(1), lo[2]), t[0]);
    let x01 = lerp(at(lo[0], lo[1], hi(2)), at(hi(0), lo[1], hi(2)), t[0]);
    let x11 = lerp(at(lo[0], hi(1), hi(2)), at(hi(0), hi(1), hi(2)), t[0]);
    let y0 = lerp(x00, x10, t[1]);
    let y1 = lerp(x01, x11, t[1]);
    lerp(y0, y1, t[2])
}

pub fn sample(vol: &Volume, p: [f64; 3]) -> f64 {
    trilinear(vol.grid().dims(), p, |i| vol.data()[i], |a, b, t| a + t * (b - a))
}

/// Catmull-Rom kernel.
fn keys_kernel(x: f64) -> f64 {
    let a = x.abs();
    if a <= 1.0 {
        1.5 * a * a * a - 2.5 * a * a + 1.0
    } else if a < 2.0 {
        -0.5 * a * a * a + 2.5 * a * a - 4.0 * a + 2.0
    } else {
        0.0
    }
}

/// Cubic convolution of a vector field at a continuous voxel position. The
/// position is clamped to the grid and taps beyond the faces replicate the
/// edge voxels.
pub fn sample_vec(field: &VectorVolume, p: [f64; 3]) -> [f64; 3] {
    let dims = field.grid().dims();
    let taps = |a: usize| -> Vec<(usize, f64)> {
        let n = dims[a] as i64;
        let q = p[a].clamp(0.0, (n - 1) as f64);
        let f = q.floor() as i64;
        (f - 1..=f + 2).map(|i| (i.clamp(0, n - 1) as usize, keys_kernel(q - i as f64))).collect()
    };
    let (tx, ty, tz) = (taps(0), taps(1), taps(2));
    let mut out = [0.0; 3];
    for &(z, wz) in &tz {
        for &(y, wy) in &ty {
            for &(x, wx) in &tx {
                let v = field.data()[index(dims, x, y, z)];
                for c in 0..3 {
                    out[c] += wx * wy * wz * v[c];
                }
            }
        }
    }
    out
}

/// Flow of `dx/dt = v(x)` over unit time with `steps` forward Euler steps,
/// started at every voxel centre, with `v` interpolated by [`sample_vec`].
/// Returns the displacement in mm.
pub fn euler_flow(v: &VectorVolume, steps: usize) -> Vec<[f64; 3]> {
    let grid = v.grid();
    let s = grid.spacing();
    let dims = grid.dims();
    let h = 1.0 / steps as f64;
    let mut out = Vec::with_capacity(grid.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let start = [x as f64 * s[0], y as f64 * s[1], z as f64 * s[2]];
                let mut p = start;
                for _ in 0..steps {
                    let q = sample_vec(v, [p[0] / s[0], p[1] / s[1], p[2] / s[2]]);
                    for a in 0..3 {
                        p[a] += h * q[a];
                    }
                }
                out.push([p[0] - start[0], p[1] - start[1], p[2] - start[2]]);
            }
        }
    }
    out
}

/// Statistics of the `(2r+1)³` window around `(x, y, z)`, truncated at the
/// faces: (count, mean a, mean b, var a, var b, cov).
pub fn window_stats(a: &Volume, b: &Volume, c: [usize; 3], r: usize) -> (f64, f64, f64, f64, f64, f64) {
    let dims = a.grid().dims();
    let range = |k: usize, n: usize| k.saturating_sub(r)..(k + r + 1).min(n);
    let mut vals = Vec::new();
    for z in range(c[2], dims[2]) {
        for y in range(c[1], dims[1]) {
            for x in range(c[0], dims[0]) {
                let i = index(dims, x, y, z);
                vals.push((a.data()[i], b.data()[i]));
            }
        }
    }
    let n = vals.len() as f64;
    let ma = vals.iter().map(|v| v.0).sum::<f64>() / n;
    let mb = vals.iter().map(|v| v.1).sum::<f64>() / n;
    let va = vals.iter().map(|v| (v.0 - ma).powi(2)).sum::<f64>() / n;
    let vb = vals.iter().map(|v| (v.1 - mb).powi(2)).sum::<f64>() / n;
    let cov = vals.iter().map(|v| (v.0 - ma) * (v.1 - mb)).sum::<f64>() / n;
    (n, ma, mb, va, vb, cov)
}

fn masked_mean(mask: &Mask, f: impl Fn([usize; 3]) -> f64) -> f64 {
    let dims = mask.grid().dims();
    let (mut total, mut count) = (0.0, 0usize);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if mask.data()[index(dims, x, y, z)] {
                    total += f([x, y, z]);
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

pub fn naive_lncc(a: &Volume, b: &Volume, mask: &Mask, r: usize, eps: f64) -> f64 {
    masked_mean(mask, |c| {
        let (_, _, _, va, vb, cov) = window_stats(a, b, c, r);
        cov / ((va + eps) * (vb + eps)).sqrt()
    })
}

/// SSIM with 7³ windows and constants from the masked dynamic range.
pub fn naive_ssim(a: &Volume, b: &Volume, mask: &Mask) -> f64 {
    let inside: Vec<f64> = (0..a.data().len())
        .filter(|&i| mask.data()[i])
        .flat_map(|i| [a.data()[i], b.data()[i]])
        .collect();
    let lo = inside.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = inside.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let c1 = (0.01 * (hi - lo)).powi(2);
    let c2 = (0.03 * (hi - lo)).powi(2);
    masked_mean(mask, |c| {
        let (_, ma, mb, va, vb, cov) = window_stats(a, b, c, 3);
        (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    })
}

/// Exact two-sided signed-rank p-value by listing all `2^m` sign
/// assignments of the mid-ranks of the non-zero differences.
pub fn wilcoxon_enumerated(x: &[f64], y: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let m = d.len();
    let mut ranks = vec![0.0; m];
    for i in 0..m {
        let below = d.iter().filter(|v| v.abs() < d[i].abs()).count();
        let equal = d.iter().filter(|v| v.abs() == d[i].abs()).count();
        ranks[i] = below as f64 + (equal as f64 + 1.0) / 2.0;
    }
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = (0..m).filter(|&i| d[i] > 0.0).map(|i| ranks[i]).sum();
    let stat = w_plus.min(total - w_plus);
    let mut extreme = 0u64;
    for signs in 0u64..(1 << m) {
        let w: f64 = (0..m).filter(|&i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= stat + 1e-9 {
            extreme += 1;
        }
    }
    (stat, (2.0 * extreme as f64 / (1u64 << m) as f64).min(1.0))
}

/// Mean Dice over all pairs `i < j` of label maps, computed from voxel sets.
pub fn pairwise_dice(labels: &[Volume], class_id: f64, mask: Option<&Mask>) -> f64 {
    let sets: Vec<std::collections::BTreeSet<usize>> = labels
        .iter()
        .map(|l| {
            (0..l.data().len())
                .filter(|&i| l.data()[i] == class_id && mask.is_none_or(|m| m.data()[i]))
                .collect()
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let inter = sets[i].intersection(&sets[j]).count() as f64;
            let size = (sets[i].len() + sets[j].len()) as f64;
            total += if size == 0.0 { 1.0 } else { 2.0 * inter / size };
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Maximum of `|a - b|` over voxels at least `margin` voxels from every face.
pub fn interior_max_diff(grid: &Grid, a: &[[f64; 3]], b: &[[f64; 3]], margin: usize) -> f64 {
    let dims = grid.dims();
    let mut worst: f64 = 0.0;
    for z in margin..dims[2] - margin {
        for y in margin..dims[1] - margin {
            for x in margin..dims[0] - margin {
                let i = index(dims, x, y, z);
                let d = [0, 1, 2].map(|c| a[i][c] - b[i][c]);
                worst = worst.max((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
            }
        }
    }
    worst
}
