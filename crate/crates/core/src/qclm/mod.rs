//! Quaternion correlation learning: encapsulation of the aggregated support
//! subspace, Hamilton-product convolution, quaternion normalization and the
//! coarse-to-fine quaternion aggregation.

mod block;
mod conv;
mod norm;
mod tensor;

pub use block::{
    encapsulate_on, qcl_block, qcl_block_on, quat_aggregation, quat_aggregation_on, upsample_onto_on,
    BlockVariant, QclBlockParams, QclBlockVars,
};
pub use conv::{
    group_conv2d_ablation, quat_conv2d, quat_conv2d_on, quat_conv2d_with, real_replacement_conv2d, QuatConvParams,
    QuatKernel,
};
pub use norm::{augmented_covariance, quat_norm, quat_norm_on, NormKind, QuatNormParams};
pub use tensor::{decapsulate, encapsulate, QuatTensor};
