//! Selective state-space (Mamba) block: discretization, sequential and
//! chunked scans, gating, SwiGLU, and directional traversal of token grids.

mod block;
mod direction;
mod scan;

pub use block::{reference_attention, swiglu, swiglu_hidden, BlockConfig, MambaBlock, SsmParams};
pub use direction::{inverse, ScanDirection, Traversal};
pub use scan::{discretize, selective_scan_chunked, selective_scan_sequential};

/// Default state size per channel.
pub const DEFAULT_STATE: usize = 16;
