use serde::Serialize;

/// Published full-scale U-Net configuration. Data only; nothing here is
/// instantiated at desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UNetPreset {
    pub name: &'static str,
    pub parameters: u64,
    pub in_channels: usize,
    pub out_channels: usize,
    pub down_up_blocks: usize,
    pub block_out_channels: [usize; 4],
    pub attention_heads: usize,
    pub cross_attention_dim: usize,
    pub activation: &'static str,
}

pub const EDITING_UNET: UNetPreset = UNetPreset {
    name: "editing",
    parameters: 859_000_000,
    in_channels: 8,
    out_channels: 4,
    down_up_blocks: 4,
    block_out_channels: [320, 640, 1280, 1280],
    attention_heads: 8,
    cross_attention_dim: 768,
    activation: "silu",
};

pub const GENERATIVE_UNET: UNetPreset = UNetPreset {
    name: "generative",
    in_channels: 4,
    ..EDITING_UNET
};

impl UNetPreset {
    /// Concatenated conditioning doubles the input width.
    pub fn takes_concat_condition(&self) -> bool {
        self.in_channels == 2 * self.out_channels
    }
}
