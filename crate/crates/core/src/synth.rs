//! Deterministic synthetic groups with known ground-truth deformations.
//!
//! # Random numbers
//!
//! All randomness comes from xoshiro256++ whose 256-bit state is filled from
//! the 64-bit seed by SplitMix64 (the reference seeding procedure of the
//! xoshiro family). Uniform doubles are `(next_u64 >> 11) * 2^-53`; normal
//! deviates use Box-Muller with `u1 = 1 - uniform`, `z = sqrt(-2 ln u1)
//! cos(2π u2)`, consuming two uniforms per deviate. Sub-streams for
//! individual members use the seed `splitmix64(seed ^ (stream * φ64))`,
//! `φ64 = 0x9E3779B97F4A7C15`.
//!
//! Test vectors (seed 0, first three `next_u64` outputs):
//! `0x53175d61490b23df`, `0x61da6f3dc380d507`, `0x5c0fdf91ec9a7bfc`.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{gaussian_smooth_vector, Grid, Mask, Volume, VectorVolume};
use crate::loss::{Group, Member};
use crate::metrics::{CLASS_CSF, CLASS_GM, CLASS_TUMOR, CLASS_WM};
use crate::optimizer::center_velocities;
use crate::transform::{exponentiate, jacobian_determinant, DisplacementField, DEFAULT_SQUARING_STEPS};

const PHI64: u64 = 0x9E37_79B9_7F4A_7C15;

/// Intensity of each phantom class; the range spans 0 to 100.
pub const INTENSITY_BACKGROUND: f64 = 0.0;
pub const INTENSITY_CSF: f64 = 15.0;
pub const INTENSITY_GM: f64 = 65.0;
pub const INTENSITY_WM: f64 = 42.0;
pub const INTENSITY_TUMOR: f64 = 100.0;
pub const INTENSITY_RANGE: f64 = 100.0;
/// Noise standard deviation, 1% of the intensity range.
pub const NOISE_SD: f64 = 0.01 * INTENSITY_RANGE;
/// Width of the partial-volume boundaries, in voxels.
const PARTIAL_VOLUME_SIGMA: f64 = 1.0;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(PHI64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sub-stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ stream.wrapping_mul(PHI64))
}

/// The documented generator.
pub struct Rng(Xoshiro256PlusPlus);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Analytic description of the phantom, in mm relative to voxel 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomShape {
    pub center: [f64; 3],
    pub head_radii: [f64; 3],
    /// Low-order modulation of the outer boundaries.
    pub shape_coeffs: [f64; 3],
    /// Amplitude and angular frequencies of the folding of the GM/WM border.
    pub gyral: (f64, f64, f64),
    pub ventricles: Vec<([f64; 3], [f64; 3])>,
    pub tumor_center: [f64; 3],
    pub tumor_radius: f64,
}

/// Normalised radius at which each tissue ends.
const WM_LEVEL: f64 = 0.56;
const GM_LEVEL: f64 = 0.84;

impl PhantomShape {
    fn head_coords(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let q = [0, 1, 2].map(|a| (p[a] - self.center[a]) / self.head_radii[a]);
        let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        let d = if rho > 0.0 { q.map(|v| v / rho) } else { [0.0, 0.0, 1.0] };
        let [c0, c1, c2] = self.shape_coeffs;
        let m = 1.0 + c0 * d[0] * d[1] + c1 * (d[2] * d[2] - 1.0 / 3.0) + c2 * d[0];
        (rho / m, d)
    }

    /// Tissue class at a physical point.
    pub fn label_at(&self, p: [f64; 3]) -> u32 {
        let (rho, d) = self.head_coords(p);
        if rho > 1.0 {
            return 0;
        }
        let t = [0, 1, 2].map(|a| p[a] - self.tumor_center[a]);
        if (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt() <= self.tumor_radius {
            return CLASS_TUMOR;
        }
        for (c, r) in &self.ventricles {
            let q: f64 = (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum();
            if q <= 1.0 {
                return CLASS_CSF;
            }
        }
        let (amp, f_az, f_el) = self.gyral;
        let azimuth = d[1].atan2(d[0]);
        let wm_level = WM_LEVEL * (1.0 + amp * (f_az * azimuth).sin() * (f_el * d[2]).cos());
        if rho <= wm_level {
            CLASS_WM
        } else if rho <= GM_LEVEL {
            CLASS_GM
        } else {
            CLASS_CSF
        }
    }

    /// Partial-volume intensity at a physical point: every boundary of
    /// [`label_at`](Self::label_at) is a smooth step of width `sigma_mm`.
    pub fn intensity_at(&self, p: [f64; 3], sigma_mm: f64, tumor_offset: f64) -> f64 {
        let step = |dist_mm: f64| 0.5 * (1.0 + (dist_mm / sigma_mm).tanh());
        let (rho, d) = self.head_coords(p);
        let radius = (self.head_radii[0] + self.head_radii[1] + self.head_radii[2]) / 3.0;
        let (amp, f_az, f_el) = self.gyral;
        let azimuth = d[1].atan2(d[0]);
        let wm_level = WM_LEVEL * (1.0 + amp * (f_az * azimuth).sin() * (f_el * d[2]).cos());
        let inner = INTENSITY_GM + step((wm_level - rho) * radius) * (INTENSITY_WM - INTENSITY_GM);
        let brain = INTENSITY_CSF + step((GM_LEVEL - rho) * radius) * (inner - INTENSITY_CSF);
        let mut value = INTENSITY_BACKGROUND + step((1.0 - rho) * radius) * (brain - INTENSITY_BACKGROUND);
        for (c, r) in &self.ventricles {
            let q: f64 = (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum();
            let scale = r[0].min(r[1]).min(r[2]);
            value += step((1.0 - q.sqrt()) * scale) * (INTENSITY_CSF - value);
        }
        let t = [0, 1, 2].map(|a| p[a] - self.tumor_center[a]);
        let dist = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
        value + step(self.tumor_radius - dist) * (INTENSITY_TUMOR + tumor_offset - value)
    }
}

/// Clean reference anatomy of a synthetic group.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    /// `clean` plus noise.
    pub image: Volume,
    /// Partial-volume intensities without noise.
    pub clean: Volume,
    pub labels: Volume,
    pub head: Mask,
    pub shape: PhantomShape,
    /// Seed of the noise realisation, shared by every member of a group.
    pub noise_seed: u64,
}

fn voxel_mm(grid: &Grid, idx: usize) -> [f64; 3] {
    let c = grid.coords(idx);
    let s = grid.spacing();
    [c[0] as f64 * s[0], c[1] as f64 * s[1], c[2] as f64 * s[2]]
}

/// Concentric smoothed shells (CSF outside, GM, WM core) with two CSF
/// ventricles and an off-centre tumor, plus 1% Gaussian noise.
pub fn make_phantom(dims: [usize; 3], spacing: [f64; 3], seed: u64) -> Result<Phantom> {
    let grid = Grid::new(dims, spacing)?;
    grid.require_min_dims(8, "make_phantom")?;
    let mut rng = Rng::new(derive_seed(seed, 0));
    let extent = grid.extent();
    let jitter = |rng: &mut Rng, a: f64| rng.uniform_in(-a, a);
    let center = [0, 1, 2].map(|a| (dims[a] - 1) as f64 * spacing[a] / 2.0);
    let head_radii = [0, 1, 2].map(|a| extent[a] * (0.42 + jitter(&mut rng, 0.015)));
    let shape_coeffs = [jitter(&mut rng, 0.06), jitter(&mut rng, 0.06), jitter(&mut rng, 0.04)];
    let gyral = (0.04 + jitter(&mut rng, 0.01), 3.0, 3.0 + jitter(&mut rng, 0.5).round());
    let vent_r = [0.07, 0.14, 0.10].map(|f| f * extent[0].min(extent[1]).min(extent[2]));
    let ventricles = [-1.0, 1.0]
        .iter()
        .map(|&side| {
            let c = [
                center[0] + side * 0.11 * extent[0],
                center[1] + jitter(&mut rng, 0.02) * extent[1],
                center[2] + 0.04 * extent[2],
            ];
            (c, vent_r)
        })
        .collect();
    let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    let tumor_center = [
        center[0] + side * 0.22 * extent[0],
        center[1] + jitter(&mut rng, 0.08) * extent[1],
        center[2] - 0.12 * extent[2],
    ];
    let tumor_radius = 0.10 * extent[0].min(extent[1]).min(extent[2]);
    let shape = PhantomShape {
        center,
        head_radii,
        shape_coeffs,
        gyral,
        ventricles,
        tumor_center,
        tumor_radius,
    };

    let labels: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| shape.label_at(voxel_mm(&grid, i)) as f64)
        .collect();
    let clean = render(&grid, &shape, None, 0.0);
    let noise_seed = derive_seed(seed, NOISE_STREAM);
    let image = add_noise(&clean, noise_seed);
    let head = Mask::new(grid.clone(), labels.iter().map(|&l| l > 0.0).collect())?;
    Ok(Phantom {
        image,
        clean,
        labels: Volume::new(grid, labels)?,
        head,
        shape,
        noise_seed,
    })
}

const NOISE_STREAM: u64 = 1;

/// Partial-volume intensities of `shape` sampled at `x + u(x)`, with
/// `tumor_offset` added to the tumor.
fn render(grid: &Grid, shape: &PhantomShape, u: Option<&DisplacementField>, tumor_offset: f64) -> Volume {
    let sigma = PARTIAL_VOLUME_SIGMA * grid.spacing().iter().copied().fold(f64::INFINITY, f64::min);
    let data = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut p = voxel_mm(grid, i);
            if let Some(u) = u {
                let d = u.data()[i];
                p = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
            }
            shape.intensity_at(p, sigma, tumor_offset)
        })
        .collect();
    Volume::from_parts(grid.clone(), data)
}

fn add_noise(vol: &Volume, seed: u64) -> Volume {
    let mut rng = Rng::new(seed);
    let data = vol.data().iter().map(|v| v + NOISE_SD * rng.normal()).collect();
    Volume::from_parts(vol.grid().clone(), data)
}

/// Smooth window that is 1 in the central part of the grid and falls to 0
/// before the faces.
fn taper(grid: &Grid, idx: usize) -> f64 {
    let c = grid.coords(idx);
    let dims = grid.dims();
    let mut r2 = 0.0;
    for a in 0..3 {
        let half = (dims[a] as f64 - 1.0) / 2.0;
        if half > 0.0 {
            let q = (c[a] as f64 - half) / half;
            r2 += q * q;
        }
    }
    let r = r2.sqrt();
    const INNER: f64 = 0.55;
    const OUTER: f64 = 0.95;
    if r <= INNER {
        1.0
    } else if r >= OUTER {
        0.0
    } else {
        let t = (r - INNER) / (OUTER - INNER);
        0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// White noise smoothed per component with `smoothness_sigma_mm`, tapered
/// to zero towards the grid faces and rescaled so the largest voxel norm is
/// `amplitude_mm`.
pub fn random_smooth_velocity(
    grid: &Grid,
    amplitude_mm: f64,
    smoothness_sigma_mm: f64,
    seed: u64,
) -> Result<VectorVolume> {
    if !(amplitude_mm.is_finite() && amplitude_mm >= 0.0) {
        return Err(Error::arg("amplitude_mm", "must be finite and >= 0"));
    }
    if !(smoothness_sigma_mm.is_finite() && smoothness_sigma_mm > 0.0) {
        return Err(Error::arg("smoothness_sigma_mm", "must be finite and > 0"));
    }
    if amplitude_mm == 0.0 {
        return Ok(VectorVolume::zeros(grid.clone()));
    }
    let mut rng = Rng::new(seed);
    let noise: Vec<[f64; 3]> = (0..grid.len()).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
    let smooth = gaussian_smooth_vector(&VectorVolume::from_parts(grid.clone(), noise), [smoothness_sigma_mm; 3]);
    let tapered: Vec<[f64; 3]> = smooth
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = taper(grid, i);
            v.map(|x| x * w)
        })
        .collect();
    let field = VectorVolume::from_parts(grid.clone(), tapered);
    let peak = field.max_norm();
    if peak == 0.0 {
        return Ok(field);
    }
    Ok(field.scaled(amplitude_mm / peak))
}

/// Radial field of magnitude 1 at the tumor boundary, pointing inwards, so
/// that pulling an image back along it enlarges the tumor.
fn growth_field(grid: &Grid, shape: &PhantomShape) -> VectorVolume {
    const WIDTH: f64 = 1.5;
    let r0 = shape.tumor_radius;
    let data = (0..grid.len())
        .map(|i| {
            let p = voxel_mm(grid, i);
            let d = [0, 1, 2].map(|a| p[a] - shape.tumor_center[a]);
            let s2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / (r0 * r0);
            let k = ((1.0 - s2) / (2.0 * WIDTH * WIDTH)).exp() / r0;
            d.map(|x| -k * x)
        })
        .collect();
    VectorVolume::from_parts(grid.clone(), data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupParams {
    pub n: usize,
    /// Peak velocity norm of each random member field (mm).
    pub amplitude_mm: f64,
    pub smoothness_sigma_mm: f64,
    /// Radial tumor growth from the first to the last member (mm).
    pub tumor_growth_mm: f64,
    /// Tumor intensity change from the first to the last member, as a
    /// fraction of the intensity range.
    pub intensity_shift: f64,
}

impl Default for GroupParams {
    fn default() -> Self {
        GroupParams {
            n: 3,
            amplitude_mm: 3.0,
            smoothness_sigma_mm: 8.0,
            tumor_growth_mm: 0.0,
            intensity_shift: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticGroup {
    pub group: Group,
    /// Centred ground-truth velocities: member `i` is the phantom pulled back
    /// by `exp(true_velocities[i])`.
    pub true_velocities: Vec<VectorVolume>,
    /// Member images before noise.
    pub clean_images: Vec<Volume>,
    pub phantom: Phantom,
}

impl SyntheticGroup {
    /// Velocities that map every member back onto the phantom.
    pub fn aligning_velocities(&self) -> Vec<VectorVolume> {
        self.true_velocities.iter().map(|v| v.scaled(-1.0)).collect()
    }
}

/// Deforms the phantom into `n` members with centred random velocities,
/// radial tumor growth and a tumor intensity shift that both progress
/// linearly from the first to the last member.
///
/// Member anatomy is the analytic phantom evaluated at the deformed voxel
/// positions, blurred like the phantom and given the phantom's noise
/// realisation, so no intensity resampling is involved and zero deformation
/// reproduces the phantom exactly.
pub fn make_group(phantom: &Phantom, params: &GroupParams, seed: u64) -> Result<SyntheticGroup> {
    let grid = phantom.image.grid().clone();
    let n = params.n;
    if n < 2 {
        return Err(Error::arg("n", "a group needs >= 2 members"));
    }
    if !(params.tumor_growth_mm.is_finite() && params.tumor_growth_mm >= 0.0) {
        return Err(Error::arg("tumor_growth", "must be finite and >= 0"));
    }
    if params.tumor_growth_mm >= phantom.shape.tumor_radius {
        return Err(Error::Folding(format!(
            "tumor growth {} mm exceeds the fold-free bound of {:.3} mm (tumor radius)",
            params.tumor_growth_mm, phantom.shape.tumor_radius
        )));
    }
    if !params.intensity_shift.is_finite() {
        return Err(Error::arg("intensity_shift", "must be finite"));
    }

    let mut velocities: Vec<VectorVolume> = (0..n - 1)
        .map(|k| random_smooth_velocity(&grid, params.amplitude_mm, params.smoothness_sigma_mm, derive_seed(seed, 100 + k as u64)))
        .collect::<Result<_>>()?;
    let mut last = VectorVolume::zeros(grid.clone());
    for v in &velocities {
        last = last.add(v)?;
    }
    velocities.push(last.scaled(-1.0));

    let progress = |i: usize| i as f64 / (n - 1) as f64;
    if params.tumor_growth_mm > 0.0 {
        let g = growth_field(&grid, &phantom.shape);
        for (i, v) in velocities.iter_mut().enumerate() {
            let w = (progress(i) - 0.5) * params.tumor_growth_mm;
            *v = v.add(&g.scaled(w))?;
        }
    }
    let velocities = center_velocities(&velocities)?;

    let mut members = Vec::with_capacity(n);
    let mut clean_images = Vec::with_capacity(n);
    for (i, v) in velocities.iter().enumerate() {
        let u = exponentiate(v, DEFAULT_SQUARING_STEPS)?;
        let jac = jacobian_determinant(&u)?;
        if let Some(j) = jac.data().iter().copied().find(|&j| j <= 0.0) {
            return Err(Error::Folding(format!(
                "ground-truth transform of member {i} folds (J = {j:.3e}); lower the amplitude or raise the smoothness"
            )));
        }
        let labels = member_labels(&grid, &phantom.shape, &u);
        let shift = params.intensity_shift * INTENSITY_RANGE * progress(i);
        let clean = render(&grid, &phantom.shape, Some(&u), shift);
        let image = add_noise(&clean, phantom.noise_seed);
        clean_images.push(clean);
        let head = Mask::new(grid.clone(), labels.iter().map(|&l| l > 0.0).collect())?;
        let tumor = Mask::new(grid.clone(), labels.iter().map(|&l| l == CLASS_TUMOR as f64).collect())?;
        let mask = head.and(&tumor.dilate(1).not())?;
        members.push(Member {
            image,
            mask,
            labels: Some(Volume::new(grid.clone(), labels)?),
        });
    }
    Ok(SyntheticGroup {
        group: Group::new(members)?,
        true_velocities: velocities,
        clean_images,
        phantom: phantom.clone(),
    })
}

/// Labels of the phantom evaluated exactly at the displaced positions.
fn member_labels(grid: &Grid, shape: &PhantomShape, u: &DisplacementField) -> Vec<f64> {
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let p = voxel_mm(grid, i);
            let d = u.data()[i];
            shape.label_at([p[0] + d[0], p[1] + d[1], p[2] + d[2]]) as f64
        })
        .collect()
}
