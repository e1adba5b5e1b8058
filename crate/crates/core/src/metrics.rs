//! Evaluation battery: overlap, masked SSIM, centrality, Jacobian smoothness
//! and the exact Wilcoxon signed-rank test.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::{box_counts, box_sum, norm3, Mask, Volume, VectorVolume};
use crate::loss::{common_mask, mean_image, Group};
use crate::optimizer::RegistrationResult;
use crate::transform::{jacobian_determinant, warp, warp_labels, warp_mask, DisplacementField, JacobianMap};

pub const CLASS_CSF: u32 = 1;
pub const CLASS_GM: u32 = 2;
pub const CLASS_WM: u32 = 3;
pub const CLASS_TUMOR: u32 = 4;

/// SSIM window radius (7³ box).
pub const SSIM_RADIUS: usize = 3;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn is_class(v: f64, class_id: u32) -> bool {
    v == class_id as f64
}

/// `2|A∩B| / (|A|+|B|)` over the voxels of `class_id`, optionally only
/// counting voxels inside `mask`. Two empty sets score 1.
pub fn dice_masked(a: &Volume, b: &Volume, class_id: u32, mask: Option<&Mask>) -> Result<f64> {
    a.grid().ensure_matches(b.grid(), "dice")?;
    if let Some(m) = mask {
        a.grid().ensure_matches(m.grid(), "dice mask")?;
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for i in 0..a.data().len() {
        if mask.is_some_and(|m| !m.data()[i]) {
            continue;
        }
        let ia = is_class(a.data()[i], class_id);
        let ib = is_class(b.data()[i], class_id);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

pub fn dice(a: &Volume, b: &Volume, class_id: u32) -> Result<f64> {
    dice_masked(a, b, class_id, None)
}

/// Mean Dice over all unordered pairs of label maps.
pub fn group_dice_masked(labels: &[Volume], class_id: u32, mask: Option<&Mask>) -> Result<f64> {
    if labels.len() < 2 {
        return Err(Error::arg("labels", "group_dice needs >= 2 label maps"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            total += dice_masked(&labels[i], &labels[j], class_id, mask)?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub fn group_dice(labels: &[Volume], class_id: u32) -> Result<f64> {
    group_dice_masked(labels, class_id, None)
}

/// Mean of the local SSIM map (7³ truncated box windows) over `mask`. The
/// dynamic range is taken from both images inside the mask.
pub fn ssim_masked(a: &Volume, b: &Volume, mask: &Mask) -> Result<f64> {
    a.grid().ensure_matches(b.grid(), "ssim")?;
    a.grid().ensure_matches(mask.grid(), "ssim mask")?;
    let m = mask.data();
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask("ssim needs a non-empty mask".into()));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in (0..m.len()).filter(|&i| m[i]) {
        for v in [a.data()[i], b.data()[i]] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let range = hi - lo;
    if range == 0.0 {
        return Ok(1.0);
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let dims = a.grid().dims();
    let (ad, bd) = (a.data(), b.data());
    let n = box_counts(dims, SSIM_RADIUS);
    let sa = box_sum(ad, dims, SSIM_RADIUS);
    let sb = box_sum(bd, dims, SSIM_RADIUS);
    let saa = box_sum(&ad.iter().map(|v| v * v).collect::<Vec<_>>(), dims, SSIM_RADIUS);
    let sbb = box_sum(&bd.iter().map(|v| v * v).collect::<Vec<_>>(), dims, SSIM_RADIUS);
    let sab = box_sum(&ad.iter().zip(bd).map(|(x, y)| x * y).collect::<Vec<_>>(), dims, SSIM_RADIUS);
    let mut total = 0.0;
    for i in (0..m.len()).filter(|&i| m[i]) {
        let ma = sa[i] / n[i];
        let mb = sb[i] / n[i];
        let va = saa[i] / n[i] - ma * ma;
        let vb = sbb[i] / n[i] - mb * mb;
        let cov = sab[i] / n[i] - ma * mb;
        total += ssim_formula(ma, mb, va, vb, cov, c1, c2);
    }
    Ok(total / count as f64)
}

#[inline]
fn ssim_formula(ma: f64, mb: f64, va: f64, vb: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// How the group's deformations are reduced to a single centrality value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CentralityMode {
    /// `‖(1/n) Σ_i u_i‖`: distance of the mean space from the barycentre.
    #[default]
    NormOfMean,
    /// `(1/n) Σ_i ‖u_i‖`: average deformation magnitude.
    MeanOfNorms,
}

/// Mean over `mask` of `‖(1/n) Σ_i u_i(x)‖` in mm.
pub fn centrality(fields: &[VectorVolume], mask: &Mask) -> Result<f64> {
    centrality_with(fields, mask, CentralityMode::NormOfMean)
}

pub fn centrality_with(fields: &[VectorVolume], mask: &Mask, mode: CentralityMode) -> Result<f64> {
    if fields.len() < 2 {
        return Err(Error::arg("fields", "centrality needs >= 2 fields"));
    }
    let grid = fields[0].grid();
    for f in &fields[1..] {
        grid.ensure_matches(f.grid(), "centrality")?;
    }
    grid.ensure_matches(mask.grid(), "centrality mask")?;
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyMask("centrality needs a non-empty mask".into()));
    }
    let n = fields.len() as f64;
    let mut total = 0.0;
    for i in (0..grid.len()).filter(|&i| mask.data()[i]) {
        total += match mode {
            CentralityMode::NormOfMean => {
                let mut s = [0.0; 3];
                for f in fields {
                    let v = f.data()[i];
                    s[0] += v[0];
                    s[1] += v[1];
                    s[2] += v[2];
                }
                norm3(s.map(|x| x / n))
            }
            CentralityMode::MeanOfNorms => fields.iter().map(|f| norm3(f.data()[i])).sum::<f64>() / n,
        };
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Smoothness {
    /// Percentage of masked voxels with `J <= 0`.
    pub folding_percent: f64,
    /// Population standard deviation of `J` over the mask.
    pub jacobian_sd: f64,
}

pub fn smoothness(jac: &JacobianMap, mask: &Mask) -> Result<Smoothness> {
    jac.grid().ensure_matches(mask.grid(), "smoothness")?;
    let vals: Vec<f64> = (0..jac.data().len())
        .filter(|&i| mask.data()[i])
        .map(|i| jac.data()[i])
        .collect();
    if vals.is_empty() {
        return Err(Error::EmptyMask("smoothness needs a non-empty mask".into()));
    }
    let n = vals.len() as f64;
    let folds = vals.iter().filter(|&&j| j <= 0.0).count() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|j| (j - mean) * (j - mean)).sum::<f64>() / n;
    Ok(Smoothness {
        folding_percent: 100.0 * folds / n,
        jacobian_sd: var.sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    /// Two-sided exact p-value.
    pub p_value: f64,
    /// Number of non-zero differences.
    pub n_nonzero: usize,
}

/// Largest number of pairs accepted by the exact test.
pub const WILCOXON_MAX_PAIRS: usize = 25;

/// Mid-ranks of `|d|` for the non-zero differences, doubled so they are
/// integers.
fn doubled_ranks(diffs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0u64; diffs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && diffs[order[end + 1]].abs() == diffs[order[start]].abs() {
            end += 1;
        }
        // ranks start..=end (1-based) averaged, doubled: (start+1)+(end+1)
        let r2 = (start + 1 + end + 1) as u64;
        for &k in &order[start..=end] {
            ranks[k] = r2;
        }
        start = end + 1;
    }
    ranks
}

/// Exact two-sided Wilcoxon signed-rank test on paired samples. Zero
/// differences are dropped and tied magnitudes share their mean rank; the
/// null distribution is the exact distribution of `W+` over all `2^m` sign
/// assignments of the observed ranks.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::arg("y", format!("length {} differs from x ({})", y.len(), x.len())));
    }
    if x.len() < 2 || x.len() > WILCOXON_MAX_PAIRS {
        return Err(Error::arg(
            "x",
            format!("exact test supports 2..={WILCOXON_MAX_PAIRS} pairs, got {}", x.len()),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("wilcoxon samples".into()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::Undefined("all paired differences are zero".into()));
    }
    let ranks = doubled_ranks(&diffs);
    let w_plus2: u64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total2: u64 = ranks.iter().sum();
    let w_minus2 = total2 - w_plus2;
    let stat2 = w_plus2.min(w_minus2);

    let counts = signed_rank_distribution(&ranks);
    let m = diffs.len() as i32;
    let tail: u64 = counts.iter().take(stat2 as usize + 1).sum();
    let p = (2.0 * tail as f64 / 2f64.powi(m)).min(1.0);
    Ok(WilcoxonResult {
        statistic: stat2 as f64 / 2.0,
        p_value: p,
        n_nonzero: diffs.len(),
    })
}

/// `counts[s]` = number of sign assignments whose doubled positive-rank sum
/// is `s`.
pub(crate) fn signed_rank_distribution(doubled: &[u64]) -> Vec<u64> {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Per-group evaluation row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub group_id: String,
    pub n_members: usize,
    /// Dice per class restricted to the normal-appearing mask (tumor over the
    /// full grid). `None` without labels.
    pub dice_csf: Option<f64>,
    pub dice_gm: Option<f64>,
    pub dice_wm: Option<f64>,
    pub dice_tumor: Option<f64>,
    pub ssim: Option<f64>,
    /// Norm of the mean deformation over the mask, computed on the
    /// stationary velocity fields when they are known and on the
    /// displacement fields otherwise.
    pub centrality: f64,
    /// Norm of the mean displacement field over the mask.
    pub centrality_displacement: f64,
    pub folding_percent: f64,
    pub jacobian_sd: f64,
    pub masked_voxels: usize,
}

/// Column order of the CSV rows.
pub const CSV_COLUMNS: [&str; 13] = [
    "group",
    "n",
    "dice_csf",
    "dice_gm",
    "dice_wm",
    "dice_tumor",
    "ssim",
    "centrality_mm",
    "centrality_displacement_mm",
    "folding_percent",
    "jacobian_sd",
    "masked_voxels",
    "dice_gm_wm",
];

impl MetricsReport {
    /// Mean of GM and WM Dice.
    pub fn dice_gm_wm(&self) -> Option<f64> {
        Some(0.5 * (self.dice_gm? + self.dice_wm?))
    }

    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    /// One CSV row; missing values are left empty. Floats use Rust's
    /// shortest round-trip formatting.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        [
            self.group_id.clone(),
            self.n_members.to_string(),
            opt(self.dice_csf),
            opt(self.dice_gm),
            opt(self.dice_wm),
            opt(self.dice_tumor),
            opt(self.ssim),
            format!("{:e}", self.centrality),
            format!("{:e}", self.centrality_displacement),
            format!("{:e}", self.folding_percent),
            format!("{:e}", self.jacobian_sd),
            self.masked_voxels.to_string(),
            opt(self.dice_gm_wm()),
        ]
        .join(",")
    }
}

/// Header plus one row per report plus a `mean` row when there are at least
/// two reports.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = MetricsReport::csv_header();
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    if reports.len() > 1 {
        out.push_str(&cohort_mean(reports).csv_row());
        out.push('\n');
    }
    out
}

/// Column-wise mean over groups (`group = "mean"`).
pub fn cohort_mean(reports: &[MetricsReport]) -> MetricsReport {
    let k = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    let mean_opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        reports.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / k)
    };
    MetricsReport {
        group_id: "mean".into(),
        n_members: reports.first().map_or(0, |r| r.n_members),
        dice_csf: mean_opt(&|r| r.dice_csf),
        dice_gm: mean_opt(&|r| r.dice_gm),
        dice_wm: mean_opt(&|r| r.dice_wm),
        dice_tumor: mean_opt(&|r| r.dice_tumor),
        ssim: mean_opt(&|r| r.ssim),
        centrality: mean(&|r| r.centrality),
        centrality_displacement: mean(&|r| r.centrality_displacement),
        folding_percent: mean(&|r| r.folding_percent),
        jacobian_sd: mean(&|r| r.jacobian_sd),
        masked_voxels: (reports.iter().map(|r| r.masked_voxels).sum::<usize>() as f64 / k).round() as usize,
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        writeln!(f, "group {} ({} members, {} masked voxels)", self.group_id, self.n_members, self.masked_voxels)?;
        writeln!(
            f,
            "  dice   csf {}  gm {}  wm {}  tumor {}",
            opt(self.dice_csf),
            opt(self.dice_gm),
            opt(self.dice_wm),
            opt(self.dice_tumor)
        )?;
        writeln!(f, "  ssim   {}", opt(self.ssim))?;
        writeln!(
            f,
            "  centrality {:.3e} mm (displacement {:.3e} mm)",
            self.centrality, self.centrality_displacement
        )?;
        write!(f, "  J<=0 {:.3e} %   SD(J) {:.4}", self.folding_percent, self.jacobian_sd)
    }
}

/// Deformations of a group in the mean space.
#[derive(Clone, Debug)]
pub struct EvaluationInput<'a> {
    pub group_id: String,
    pub displacements: &'a [DisplacementField],
    /// Stationary velocities generating `displacements`, when known.
    pub velocities: Option<&'a [VectorVolume]>,
    /// Unwarped member images.
    pub images: Option<&'a [Volume]>,
    /// Unwarped member label maps.
    pub labels: Option<&'a [Volume]>,
    /// Normal-appearing region in the mean space.
    pub mask: &'a Mask,
}

/// Full metric battery for one group; everything except tumor Dice is
/// restricted to `mask`.
pub fn evaluate_group(input: &EvaluationInput<'_>) -> Result<MetricsReport> {
    let n = input.displacements.len();
    if n < 2 {
        return Err(Error::arg("displacements", "need >= 2 fields"));
    }
    let mask = input.mask;
    let grid = mask.grid();
    for u in input.displacements {
        grid.ensure_matches(u.grid(), "evaluation field")?;
    }
    let check_len = |name: &'static str, k: usize| {
        if k == n {
            Ok(())
        } else {
            Err(Error::arg(name, format!("expected {n} entries (one per field), got {k}")))
        }
    };

    let (mut dice_csf, mut dice_gm, mut dice_wm, mut dice_tumor) = (None, None, None, None);
    if let Some(labels) = input.labels {
        check_len("labels", labels.len())?;
        let warped: Vec<Volume> = labels
            .iter()
            .zip(input.displacements)
            .map(|(l, u)| warp_labels(l, u))
            .collect::<Result<_>>()?;
        dice_csf = Some(group_dice_masked(&warped, CLASS_CSF, Some(mask))?);
        dice_gm = Some(group_dice_masked(&warped, CLASS_GM, Some(mask))?);
        dice_wm = Some(group_dice_masked(&warped, CLASS_WM, Some(mask))?);
        dice_tumor = Some(group_dice_masked(&warped, CLASS_TUMOR, None)?);
    }

    let mut ssim = None;
    if let Some(images) = input.images {
        check_len("images", images.len())?;
        let warped: Vec<Volume> = images
            .iter()
            .zip(input.displacements)
            .map(|(im, u)| warp(im, u))
            .collect::<Result<_>>()?;
        let mean = mean_image(&warped)?;
        let mut s = 0.0;
        for w in &warped {
            s += ssim_masked(w, &mean, mask)?;
        }
        ssim = Some(s / n as f64);
    }

    let disp: Vec<VectorVolume> = input.displacements.iter().map(|u| u.field().clone()).collect();
    let centrality_displacement = centrality(&disp, mask)?;
    let centrality_value = match input.velocities {
        Some(v) => {
            check_len("velocities", v.len())?;
            centrality(v, mask)?
        }
        None => centrality_displacement,
    };

    let mut folding = 0.0;
    let mut sd = 0.0;
    for u in input.displacements {
        let s = smoothness(&jacobian_determinant(u)?, mask)?;
        folding += s.folding_percent;
        sd += s.jacobian_sd;
    }
    Ok(MetricsReport {
        group_id: input.group_id.clone(),
        n_members: n,
        dice_csf,
        dice_gm,
        dice_wm,
        dice_tumor,
        ssim,
        centrality: centrality_value,
        centrality_displacement,
        folding_percent: folding / n as f64,
        jacobian_sd: sd / n as f64,
        masked_voxels: mask.count(),
    })
}

/// Common normal-appearing region of a registered group: the intersection of
/// the members' masks warped into the mean space.
pub fn registered_common_mask(group: &Group, displacements: &[DisplacementField]) -> Result<Mask> {
    let masks = group
        .members()
        .iter()
        .zip(displacements)
        .map(|(m, u)| warp_mask(&m.mask, u))
        .collect::<Result<Vec<_>>>()?;
    common_mask(&masks)
}

/// Evaluates a registration result of `group` with its own labels and
/// images.
pub fn evaluate_registration(group_id: &str, group: &Group, result: &RegistrationResult) -> Result<MetricsReport> {
    let mask = registered_common_mask(group, &result.displacements)?;
    let images: Vec<Volume> = group.members().iter().map(|m| m.image.clone()).collect();
    let labels: Option<Vec<Volume>> = group.members().iter().map(|m| m.labels.clone()).collect();
    evaluate_group(&EvaluationInput {
        group_id: group_id.to_string(),
        displacements: &result.displacements,
        velocities: Some(&result.velocities),
        images: Some(&images),
        labels: labels.as_deref(),
        mask: &mask,
    })
}
