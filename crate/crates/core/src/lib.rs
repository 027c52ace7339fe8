//! Deformable registration of 3D volumes with adaptive tumor-volume preservation.
//!
//! The pipeline runs in two stages. Stage one registers the moving image to
//! the fixed image with a pure similarity objective and converts the
//! resulting local volume change into a soft tumor mask. Stage two registers
//! again with a volume-preserving penalty weighted by that mask and a
//! similarity term that down-weights the masked voxels.
//!
//! All grids are x-fastest, displacements are in voxel units and the sampling
//! map is `x + u(x)` (backward warping).

pub mod config;
pub mod error;
pub mod filter;
pub mod io;
pub mod jacobian;
pub mod metrics;
pub mod objective;
pub mod par;
pub mod pyramid;
pub mod register;
pub mod rng;
pub mod stage1;
pub mod synth;
pub mod volume;
pub mod warp;

pub use config::{RegistrationConfig, Transform};
pub use error::{Error, Result};
pub use volume::{BinaryMask, DisplacementField, GridInfo, Landmark, LandmarkSet, ScalarVolume, SoftMask, Space};
