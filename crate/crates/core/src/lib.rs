//! CPU inference engine and structural re-parameterization toolkit for
//! RepGhost-style networks.
//!
//! The crate builds the training-time multi-branch RepGhost module and full
//! RepGhostNet, fuses them in weight space into the deploy form (a plain
//! chain of convolutions and ReLU), verifies numerical equivalence between
//! the two forms, reproduces parameter/MAC accounting, and benchmarks
//! concat-vs-add feature reuse on the Ghost-module baseline.

pub mod archive;
pub mod bench;
pub mod error;
pub mod net;
pub mod ops;
pub mod profile;
pub mod reparam;
pub mod tensor;

pub use error::{Error, Result};
pub use net::{
    build_ghostnet, build_repghostnet, convert_network, count_flops, count_params,
    enumerate_concat_sites, make_divisible, network_forward, Arch, Network, NetworkSpec,
};
pub use reparam::{fuse_module, verify_equivalence, BranchSet, InferenceModel};
pub use tensor::{layout_convert, max_abs_diff, tensor_from_seed, Layout, Shape, Tensor};
