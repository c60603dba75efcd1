use super::UNetConfig;

/// Layer kinds that matter for receptive-field arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv {
        kernel: usize,
    },
    Pool {
        size: usize,
    },
    /// Transposed convolution with kernel equal to stride.
    UpConv {
        factor: usize,
    },
}

/// Receptive field along one axis of a layer path, using the usual
/// size/jump recurrence: a conv of width k grows the field by (k - 1) * jump,
/// a pool of size p grows it by (p - 1) * jump and multiplies the jump by p,
/// and an upconv divides the jump without growing the field.
pub fn receptive_field(layers: &[Layer]) -> usize {
    let mut size = 1.0f64;
    let mut jump = 1.0f64;
    for layer in layers {
        match *layer {
            Layer::Conv { kernel } => size += (kernel as f64 - 1.0) * jump,
            Layer::Pool { size: p } => {
                size += (p as f64 - 1.0) * jump;
                jump *= p as f64;
            }
            Layer::UpConv { factor } => jump /= factor as f64,
        }
    }
    size.round() as usize
}

/// Receptive field of the longest path (encoder, bottleneck, decoder) of
/// the configured U-Net.
pub fn compute_receptive_field(config: &UNetConfig) -> usize {
    let conv = Layer::Conv { kernel: config.kernel_size };
    let mut path = Vec::new();
    for _ in 0..config.levels.saturating_sub(1) {
        path.extend(std::iter::repeat_n(conv, config.convs_per_block));
        path.push(Layer::Pool { size: config.pool_size });
    }
    path.extend(std::iter::repeat_n(conv, config.convs_per_block));
    for _ in 0..config.levels.saturating_sub(1) {
        path.push(Layer::UpConv { factor: config.pool_size });
        path.extend(std::iter::repeat_n(conv, config.convs_per_block));
    }
    // 1x1x1 head
    path.push(Layer::Conv { kernel: 1 });
    receptive_field(&path)
}
