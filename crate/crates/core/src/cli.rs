//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
//! inconsistent inputs), 3 numerical failure (empty mask, folding,
//! non-finite values).
//!
//! `register` prints one progress line per evaluated iterate on stderr:
//! `PROG stage=<k> iter=<i> loss=<v>`.
//!
//! Output files use two-digit zero-padded member indices in input order:
//!
//! * `synth`: `image_NN.nii.gz`, `mask_NN.nii.gz`, `labels_NN.nii.gz`,
//!   `velocity_true_NN.nii.gz`, `phantom.nii.gz`, `phantom_clean.nii.gz`
//!   (noise-free), `phantom_labels.nii.gz`
//! * `register`: `velocity_NN.nii.gz`, `displacement_NN.nii.gz`,
//!   `warped_NN.nii.gz`, `mean_image.nii.gz`, `common_mask.nii.gz`,
//!   `loss_trace.csv`
//!
//! Images are float32 on disk; velocity and displacement fields are float64
//! so that centring and metric parity survive the round trip.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::image::{Mask, VectorVolume, Volume};
use crate::io::nifti::{self, Datatype, INTENT_DISPLACEMENT, INTENT_VECTOR};
use crate::io::{read_config, write_loss_trace, write_report};
use crate::loss::{mean_image, Group, Member};
use crate::metrics::{evaluate_group, registered_common_mask, EvaluationInput};
use crate::optimizer::{register_multistage_with_progress, RegistrationConfig};
use crate::synth::{make_group, make_phantom, GroupParams};
use crate::transform::{warp, warp_labels, DisplacementField};

/// Environment variable holding the worker thread count; `--threads` wins.
pub const THREADS_ENV: &str = "GROUPREG_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "groupreg", version, about = "Groupwise diffeomorphic registration of longitudinal volumes")]
struct Cli {
    /// Worker threads (default: the GROUPREG_THREADS variable, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic group with known deformations.
    Synth(SynthArgs),
    /// Register a group of images to their implicit mean space.
    Register(RegisterArgs),
    /// Warp an image or label map with a displacement field.
    Warp(WarpArgs),
    /// Evaluate deformation fields and write a CSV report.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Grid size: one value for a cube or `X,Y,Z`.
    #[arg(long, default_value = "64")]
    dims: String,
    /// Voxel spacing in mm.
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Peak velocity norm of the random member deformations (mm).
    #[arg(long, default_value_t = 6.0)]
    amplitude: f64,
    /// Gaussian smoothing of the random velocities (mm).
    #[arg(long, default_value_t = 8.0)]
    smoothness: f64,
    /// Tumor growth between the first and the last member (mm).
    #[arg(long, default_value_t = 0.0)]
    growth: f64,
    /// Tumor intensity change between the first and the last member, as a
    /// fraction of the intensity range.
    #[arg(long, default_value_t = 0.0)]
    shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RegisterArgs {
    /// TOML configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Member image, repeated once per member.
    #[arg(long = "image", required = true)]
    images: Vec<PathBuf>,
    /// Normal-appearing tissue mask, one per image in the same order.
    #[arg(long = "mask", required = true)]
    masks: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct WarpArgs {
    #[arg(long)]
    image: PathBuf,
    /// Displacement field (mm).
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Treat the image as a label map (class-wise interpolation).
    #[arg(long)]
    labels: bool,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Displacement field of each member (mm), mapping mean space to member.
    #[arg(long = "field", required = true)]
    fields: Vec<PathBuf>,
    /// Stationary velocity of each member; centrality is then measured on
    /// the velocities.
    #[arg(long = "velocity")]
    velocities: Vec<PathBuf>,
    /// Unwarped label map of each member.
    #[arg(long = "labels")]
    labels: Vec<PathBuf>,
    /// Unwarped image of each member.
    #[arg(long = "image")]
    images: Vec<PathBuf>,
    /// Normal-appearing tissue mask in the mean space.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "group")]
    group_id: String,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Messages go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = match thread_count(cli.threads, std::env::var(THREADS_ENV).ok()) {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_USAGE;
        }
    };
    let outcome = pool.install(|| match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Register(a) => cmd_register(&a),
        Command::Warp(a) => cmd_warp(&a),
        Command::Metrics(a) => cmd_metrics(&a),
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn thread_count(flag: Option<usize>, env: Option<String>) -> std::result::Result<Option<usize>, String> {
    let n = match (flag, env) {
        (Some(n), _) => n,
        (None, Some(v)) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?,
        _ => return Ok(None),
    };
    if n == 0 {
        return Err("thread count must be >= 1".into());
    }
    Ok(Some(n))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument { .. } => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

pub fn member_file(prefix: &str, index: usize) -> String {
    format!("{prefix}_{index:02}.nii.gz")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let parsed: std::result::Result<Vec<usize>, _> = parts.iter().map(|p| p.parse::<usize>()).collect();
    match (parts.len(), parsed) {
        (1, Ok(v)) => Ok([v[0]; 3]),
        (3, Ok(v)) => Ok([v[0], v[1], v[2]]),
        _ => Err(Error::arg("dims", format!("expected N or X,Y,Z, got `{s}`"))),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let dims = parse_dims(&a.dims)?;
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::arg("dims", "every axis needs >= 8 voxels"));
    }
    if !(a.spacing.is_finite() && a.spacing > 0.0) {
        return Err(Error::arg("spacing", "must be finite and > 0"));
    }
    let phantom = make_phantom(dims, [a.spacing; 3], a.seed)?;
    let params = GroupParams {
        n: a.n,
        amplitude_mm: a.amplitude,
        smoothness_sigma_mm: a.smoothness,
        tumor_growth_mm: a.growth,
        intensity_shift: a.shift,
    };
    let synthetic = make_group(&phantom, &params, a.seed)?;
    create_dir(&a.out)?;
    let out = |name: &str| a.out.join(name);
    nifti::write_scalar(out("phantom.nii.gz"), &phantom.image, Datatype::Float32)?;
    nifti::write_scalar(out("phantom_clean.nii.gz"), &phantom.clean, Datatype::Float32)?;
    nifti::write_scalar(out("phantom_labels.nii.gz"), &phantom.labels, Datatype::Uint8)?;
    for (i, m) in synthetic.group.members().iter().enumerate() {
        nifti::write_scalar(out(&member_file("image", i)), &m.image, Datatype::Float32)?;
        nifti::write_mask(out(&member_file("mask", i)), &m.mask)?;
        if let Some(l) = &m.labels {
            nifti::write_scalar(out(&member_file("labels", i)), l, Datatype::Uint8)?;
        }
        nifti::write_vector(
            out(&member_file("velocity_true", i)),
            &synthetic.true_velocities[i],
            Datatype::Float64,
            INTENT_VECTOR,
        )?;
    }
    Ok(())
}

fn cmd_register(a: &RegisterArgs) -> Result<()> {
    if a.images.len() != a.masks.len() {
        return Err(Error::arg(
            "mask",
            format!(
                "arity mismatch: {} images but {} masks (one --mask per --image)",
                a.images.len(),
                a.masks.len()
            ),
        ));
    }
    if a.images.len() < 2 {
        return Err(Error::arg("image", "at least two images are required"));
    }
    let config = match &a.config {
        Some(p) => read_config(p)?,
        None => RegistrationConfig::default(),
    };
    let members = a
        .images
        .iter()
        .zip(&a.masks)
        .map(|(img, mask)| {
            Ok(Member {
                image: nifti::read_scalar(img)?,
                mask: nifti::read_mask(mask)?,
                labels: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let group = Group::new(members)?;
    let result = register_multistage_with_progress(&group, &config, &mut |p| {
        eprintln!("PROG stage={} iter={} loss={:e}", p.stage, p.iteration, p.loss);
    })?;

    create_dir(&a.out)?;
    let out = |name: &str| a.out.join(name);
    let mut warped = Vec::with_capacity(group.len());
    for (i, (m, u)) in group.members().iter().zip(&result.displacements).enumerate() {
        nifti::write_vector(out(&member_file("velocity", i)), &result.velocities[i], Datatype::Float64, INTENT_VECTOR)?;
        nifti::write_vector(out(&member_file("displacement", i)), u.field(), Datatype::Float64, INTENT_DISPLACEMENT)?;
        let w = warp(&m.image, u)?;
        nifti::write_scalar(out(&member_file("warped", i)), &w, Datatype::Float32)?;
        warped.push(w);
    }
    nifti::write_scalar(out("mean_image.nii.gz"), &mean_image(&warped)?, Datatype::Float32)?;
    nifti::write_mask(out("common_mask.nii.gz"), &registered_common_mask(&group, &result.displacements)?)?;
    write_loss_trace(out("loss_trace.csv"), &result.stages)?;
    Ok(())
}

fn cmd_warp(a: &WarpArgs) -> Result<()> {
    let header = nifti::read_header(&a.image)?;
    let image = nifti::read_scalar(&a.image)?;
    let u = DisplacementField::new(nifti::read_vector(&a.field)?);
    image.grid().ensure_matches(u.grid(), "warp field")?;
    if a.labels {
        nifti::write_scalar(&a.out, &warp_labels(&image, &u)?, header.datatype)?;
    } else {
        nifti::write_scalar(&a.out, &warp(&image, &u)?, Datatype::Float32)?;
    }
    Ok(())
}

fn read_all<T>(paths: &[PathBuf], read: impl Fn(&Path) -> Result<T>) -> Result<Vec<T>> {
    paths.iter().map(|p| read(p)).collect()
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let n = a.fields.len();
    for (name, k) in [("velocity", a.velocities.len()), ("labels", a.labels.len()), ("image", a.images.len())] {
        if k != 0 && k != n {
            return Err(Error::arg(
                name,
                format!("arity mismatch: {n} fields but {k} --{name} entries"),
            ));
        }
    }
    let displacements = read_all(&a.fields, |p| Ok(DisplacementField::new(nifti::read_vector(p)?)))?;
    let velocities: Vec<VectorVolume> = read_all(&a.velocities, |p| Ok(nifti::read_vector(p)?))?;
    let labels: Vec<Volume> = read_all(&a.labels, |p| Ok(nifti::read_scalar(p)?))?;
    let images: Vec<Volume> = read_all(&a.images, |p| Ok(nifti::read_scalar(p)?))?;
    let mask: Mask = nifti::read_mask(&a.mask)?;
    let grid = mask.grid();
    for v in labels.iter().chain(&images) {
        grid.ensure_matches(v.grid(), "metrics input")?;
    }
    for v in &velocities {
        grid.ensure_matches(v.grid(), "metrics velocity")?;
    }
    let report = evaluate_group(&EvaluationInput {
        group_id: a.group_id.clone(),
        displacements: &displacements,
        velocities: (!velocities.is_empty()).then_some(velocities.as_slice()),
        images: (!images.is_empty()).then_some(images.as_slice()),
        labels: (!labels.is_empty()).then_some(labels.as_slice()),
        mask: &mask,
    })?;
    write_report(&a.out, &[report])
}
