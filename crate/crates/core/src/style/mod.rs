//! Style statistics, AdaIN, and the attention controls that inject style
//! keys/values into content self-attention.

mod attention;
mod control;
mod stats;

pub use attention::{
    adain, apply_control, attention_weights, direct_add, direct_replace, mixed_attention,
    mixed_attention_weights, plain_attention, split_heads, style_mass, ControlOutput,
    LayerProjections,
};
pub use control::{AttentionControl, ControlMode};
pub use stats::{LayerStatistics, StyleStatistics, FORMAT_VERSION, MAGIC};
