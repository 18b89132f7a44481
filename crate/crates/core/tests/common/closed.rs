use dsrlab::backbone::{DepthNetConfig, EncoderConfig};
use dsrlab::model::ModelConfig;

fn conv(ci: u64, co: u64, k: u64) -> u64 {
    ci * co * k * k + co
}

fn encoder_params(cin: u64, e: &EncoderConfig) -> u64 {
    let (c, n) = (e.base_channels as u64, e.res_blocks_per_stage as u64);
    conv(cin, c, 3) + 2 * conv(c, c, 3) + 3 * n * 2 * conv(c, c, 3)
}

/// Parameter count of the whole network from its layer arithmetic.
pub fn closed_form_params(cfg: &ModelConfig) -> u64 {
    let DepthNetConfig { unet_depth, base_channels } = cfg.depth_net;
    let w = |l: usize| (base_channels << l) as u64;
    let mut depth = conv(3, w(0), 3) + conv(w(0), 1, 3);
    for l in 1..=unet_depth {
        depth += conv(w(l - 1), w(l), 3) + conv(w(l), w(l), 3);
        depth += conv(w(l), w(l - 1), 3) + conv(2 * w(l - 1), w(l - 1), 3);
    }
    let c = cfg.encoder.base_channels as u64;
    let n = cfg.encoder.res_blocks_per_stage as u64;
    let dmm = encoder_params(1, &cfg.encoder)
        + 3 * conv(c, c, 1)
        + conv(2 * c, c, 3)
        + 2 * conv(3 * c, c, 3)
        + 3 * conv(c, c, 3);
    let decoder = 3 * (conv(2 * c, c, 3) + 2 * n * conv(c, c, 3)) + 2 * conv(c, 4 * c, 3) + conv(c, 3, 3);
    depth + encoder_params(3, &cfg.encoder) + dmm + decoder
}
