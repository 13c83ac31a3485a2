//! File formats, insertion scans and volume assembly.

pub mod container;
mod pgm;
mod scan;
mod volume;

pub use pgm::{encode_pgm, export_pgm};
pub use scan::{insertion_scan, Bead, Phantom, ScanConfig};
pub use volume::{
    assemble_volume, read_volume, sidecar_path, write_volume, Volume, DEFAULT_Z_STEP_UM,
};
