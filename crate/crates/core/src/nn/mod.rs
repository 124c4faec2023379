//! Building blocks: linear layers, transformer layers, the patch backbone
//! and token pooling.

mod backbone;
pub mod linear;
mod pool;
mod transformer;

pub use backbone::{extract_patches, BackboneConfig, PatchBackbone};
pub use linear::{broadcast_rows, normal_tensor, LinearLayer, INIT_STD};
pub use pool::{downsample_tokens, global_average_pool, BilinearUpsampler};
pub use transformer::{Attention, DecoderLayer, EncoderLayer, LayerNormParams, Mlp, LAYER_NORM_EPS};
