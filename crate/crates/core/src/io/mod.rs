pub mod config;
pub mod nifti;

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{reports_to_csv, MetricsReport};
use crate::optimizer::StageTrace;

pub use config::{read_config, ConfigError, EXAMPLE_CONFIG};
pub use nifti::{
    read_header, read_mask, read_scalar, read_vector, read_volume, write_mask, write_scalar, write_vector, write_volume,
    Datatype, NiftiError, NiftiVolume, VolumeData, VolumeFileHeader,
};

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Metrics CSV: header, one row per group, then a cohort `mean` row when
/// there are several groups.
pub fn write_report(path: impl AsRef<Path>, reports: &[MetricsReport]) -> Result<()> {
    write_text(path.as_ref(), &reports_to_csv(reports))
}

/// `stage,iteration,loss,best_loss`, one line per evaluated iterate.
pub fn loss_trace_csv(stages: &[StageTrace]) -> String {
    let mut out = String::from("stage,iteration,loss,best_loss\n");
    for (k, s) in stages.iter().enumerate() {
        for (i, (l, b)) in s.losses.iter().zip(s.accepted_losses()).enumerate() {
            writeln!(out, "{k},{i},{l:e},{b:e}").unwrap();
        }
    }
    out
}

pub fn write_loss_trace(path: impl AsRef<Path>, stages: &[StageTrace]) -> Result<()> {
    write_text(path.as_ref(), &loss_trace_csv(stages))
}
