//! The Conv/BN/FC classifier and its checkpoint format.

mod arch;
mod checkpoint;
mod network;

pub use arch::{Activation, ArchitectureSpec, ConvBlock};
pub use checkpoint::{
    validate_header, ModelCheckpoint, Provenance, CHECKPOINT_EXTENSION, CHECKPOINT_FORMAT_VERSION,
    HEADER_FIELDS,
};
pub use network::{ForwardPass, Model};
