use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{ParamSet, ParamVars, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub levels: usize,
    pub convs_per_block: usize,
    pub kernel_size: usize,
    pub pool_size: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            convs_per_block: 2,
            kernel_size: 3,
            pool_size: 2,
            base_channels: 8,
            in_channels: 1,
            out_channels: 1,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_owned()));
        if self.levels < 2 {
            return bad("levels must be at least 2");
        }
        if self.convs_per_block == 0 {
            return bad("convs_per_block must be positive");
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd");
        }
        if self.pool_size != 2 {
            return bad("only 2x2x2 pooling is implemented");
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive");
        }
        if !matches!(self.in_channels, 1 | 4) {
            return bad("in_channels must be 1 or 4");
        }
        if self.out_channels != 1 {
            return bad("out_channels must be 1 (sigmoid foreground head)");
        }
        if self.levels > 12 {
            return bad("levels must be at most 12");
        }
        Ok(())
    }

    /// Spatial size divisor required of every input patch.
    pub fn size_divisor(&self) -> usize {
        self.pool_size.pow(self.levels as u32 - 1)
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// 3D U-Net: (levels - 1) encoder blocks with max pooling, a bottleneck
/// block, a mirrored decoder with transposed-conv upsampling and skip
/// concatenation, and a 1x1x1 sigmoid head.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
}

fn conv_name(block: &str, i: usize, part: &str) -> String {
    format!("{block}.conv{i}.{part}")
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Parameter names and shapes, in construction order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        let k = c.kernel_size;
        let mut out = Vec::new();
        let block = |name: &str, c_in: usize, c_out: usize, out: &mut Vec<(String, Vec<usize>)>| {
            let mut ci = c_in;
            for i in 0..c.convs_per_block {
                out.push((conv_name(name, i, "weight"), vec![c_out, ci, k, k, k]));
                out.push((conv_name(name, i, "bias"), vec![c_out]));
                ci = c_out;
            }
        };
        let mut c_in = c.in_channels;
        for level in 0..c.levels - 1 {
            block(&format!("enc{level}"), c_in, c.channels_at(level), &mut out);
            c_in = c.channels_at(level);
        }
        block("bottleneck", c_in, c.channels_at(c.levels - 1), &mut out);
        for level in (0..c.levels - 1).rev() {
            let below = c.channels_at(level + 1);
            let here = c.channels_at(level);
            out.push((format!("dec{level}.up.weight"), vec![below, here, 2, 2, 2]));
            block(&format!("dec{level}"), 2 * here, here, &mut out);
        }
        out.push(("head.weight".into(), vec![c.out_channels, c.channels_at(0), 1, 1, 1]));
        out.push(("head.bias".into(), vec![c.out_channels]));
        out
    }

    /// He (fan-in) normal initialisation, zero biases.
    pub fn init_params(&self) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut params = ParamSet::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("bias") {
                vec![0.0; n]
            } else {
                let fan_in = if name.ends_with("up.weight") { shape[0] } else { shape[1..].iter().product() };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::new(shape, data).expect("shape"));
        }
        params
    }

    fn p(params: &ParamVars, name: &str) -> Result<Var, ModelError> {
        params.get(name).copied().ok_or_else(|| ModelError::MissingParameter(name.to_owned()))
    }

    fn block(&self, tape: &mut Tape, params: &ParamVars, name: &str, mut x: Var) -> Result<Var, ModelError> {
        for i in 0..self.config.convs_per_block {
            let w = Self::p(params, &conv_name(name, i, "weight"))?;
            let b = Self::p(params, &conv_name(name, i, "bias"))?;
            let y = tape.conv3d(x, w, b)?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    /// Maps `[in_channels, x, y, z]` to foreground probabilities `[1, x, y, z]`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamVars, input: Var) -> Result<Var, ModelError> {
        let shape = tape.shape(input).to_vec();
        let div = self.config.size_divisor();
        if shape.len() != 4 || shape[0] != self.config.in_channels {
            return Err(ModelError::InvalidConfig(format!(
                "input shape {shape:?} does not match in_channels {}",
                self.config.in_channels
            )));
        }
        if shape[1..].iter().any(|&d| d == 0 || d % div != 0) {
            return Err(ModelError::IndivisiblePatch { dims: shape[1..].to_vec(), divisor: div });
        }
        let levels = self.config.levels;
        let mut skips = Vec::with_capacity(levels - 1);
        let mut x = input;
        for level in 0..levels - 1 {
            x = self.block(tape, params, &format!("enc{level}"), x)?;
            skips.push(x);
            x = tape.maxpool3d(x)?;
        }
        x = self.block(tape, params, "bottleneck", x)?;
        for level in (0..levels - 1).rev() {
            let up = tape.upconv3d(x, Self::p(params, &format!("dec{level}.up.weight"))?)?;
            let cat = tape.concat_channels(skips[level], up)?;
            x = self.block(tape, params, &format!("dec{level}"), cat)?;
        }
        let logits = tape.conv3d(x, Self::p(params, "head.weight")?, Self::p(params, "head.bias")?)?;
        Ok(tape.sigmoid(logits))
    }
}

/// Validates the config and returns the network with freshly initialised
/// parameters.
pub fn build_unet(config: &UNetConfig) -> Result<(UNet, ParamSet), ModelError> {
    let net = UNet::new(config.clone())?;
    let params = net.init_params();
    Ok((net, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(cfg: &UNetConfig, dims: [usize; 3]) -> Result<Vec<f64>, ModelError> {
        let (net, params) = build_unet(cfg)?;
        let mut tape = Tape::new();
        let vars = params.bind_frozen(&mut tape);
        let n = cfg.in_channels * dims.iter().product::<usize>();
        let data = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let x = tape.constant(Tensor::new(vec![cfg.in_channels, dims[0], dims[1], dims[2]], data).unwrap());
        let y = net.forward(&mut tape, &vars, x)?;
        assert_eq!(tape.shape(y), &[1, dims[0], dims[1], dims[2]]);
        Ok(tape.value(y).to_vec())
    }

    #[test]
    fn multi_sequence_shape() {
        let cfg = UNetConfig { in_channels: 4, ..Default::default() };
        let out = run(&cfg, [16, 16, 16]).unwrap();
        assert!(out.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = UNetConfig::default();
        assert!(matches!(run(&cfg, [6, 8, 8]), Err(ModelError::IndivisiblePatch { divisor: 4, .. })));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = UNetConfig { seed: 11, ..Default::default() };
        let (_, a) = build_unet(&cfg).unwrap();
        let (_, b) = build_unet(&cfg).unwrap();
        assert_eq!(a, b);
        let (_, c) = build_unet(&UNetConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.count(), c.count());
    }

    #[test]
    fn default_param_count() {
        // enc0 1960 + enc1 10400 + bottleneck 41536 + dec1 24864 + dec0 6224 + head 9
        let (_, p) = build_unet(&UNetConfig::default()).unwrap();
        assert_eq!(p.count(), 84_993);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            UNetConfig { levels: 1, ..Default::default() },
            UNetConfig { kernel_size: 2, ..Default::default() },
            UNetConfig { in_channels: 3, ..Default::default() },
            UNetConfig { base_channels: 0, ..Default::default() },
        ] {
            assert!(build_unet(&cfg).is_err(), "{cfg:?}");
        }
    }
}
