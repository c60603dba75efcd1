use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::infer::predict_with;
use super::sampler::CaseSampler;
use super::{
    adam_step, AdamConfig, AdamState, ChannelSelection, Checkpoint, InferenceConfig, PipelineError, SamplerConfig,
};
use crate::autodiff::{ParamSet, Tape};
use crate::evalstat::jaccard;
use crate::model::{build_unet, tversky_loss_batch, LossConfig, UNet, UNetConfig};
use crate::seed::mix_seed;
use crate::volgrid::Case;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iterations: usize,
    pub val_check_interval: usize,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 5,
            max_iterations: 1000,
            val_check_interval: 100,
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_size == 0 {
            return Err(PipelineError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.val_check_interval == 0 {
            return Err(PipelineError::InvalidConfig("val_check_interval must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

/// Mean Jaccard of thresholded predictions against the case masks.
pub fn mean_jaccard(
    net: &UNet,
    params: &ParamSet,
    cases: &[Case],
    selection: &ChannelSelection,
    cfg: &InferenceConfig,
) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    for case in cases {
        let truth = case.mask().ok_or_else(|| PipelineError::MissingMask(case.case_id().to_owned()))?;
        let (_, pred) = predict_with(net, params, case, selection, cfg)?;
        total += jaccard(&pred, truth).map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    }
    Ok(total / cases.len() as f64)
}

/// Trains a fresh network and returns the parameters with the best
/// validation Jaccard. Validation runs before the first update and after
/// every `val_check_interval` updates; only a strict improvement replaces
/// the kept parameters.
pub fn train(
    train_cases: &[Case],
    val_cases: &[Case],
    selection: &ChannelSelection,
    model_cfg: &UNetConfig,
    sampler_cfg: &SamplerConfig,
    train_cfg: &TrainConfig,
) -> Result<Checkpoint, PipelineError> {
    train_cfg.validate()?;
    sampler_cfg.validate()?;
    if train_cases.is_empty() || val_cases.is_empty() {
        return Err(PipelineError::InvalidConfig("training and validation sets must be non-empty".into()));
    }
    if selection.len() != model_cfg.in_channels {
        return Err(PipelineError::InvalidConfig(format!(
            "{} selected channels but the model takes {}",
            selection.len(),
            model_cfg.in_channels
        )));
    }
    let (net, mut params) = build_unet(model_cfg)?;
    let val_cfg =
        InferenceConfig { window: sampler_cfg.patch_size, overlap_fraction: 0.0, threshold: 0.5, ..Default::default() };
    val_cfg.validate(model_cfg.size_divisor())?;
    let samplers =
        train_cases.iter().map(|c| CaseSampler::new(c, sampler_cfg.patch_size)).collect::<Result<Vec<_>, _>>()?;

    let mut best = mean_jaccard(&net, &params, val_cases, selection, &val_cfg)?;
    let mut best_params = params.clone();
    let mut best_iter = 0;
    log::debug!("iteration 0: val jaccard {best:.4}");

    let quota = sampler_cfg.foreground_quota(train_cfg.batch_size);
    let mut adam = AdamState::new();
    for it in 1..=train_cfg.max_iterations {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let mut pairs = Vec::with_capacity(train_cfg.batch_size);
        for b in 0..train_cfg.batch_size {
            let slot = (it - 1) * train_cfg.batch_size + b;
            let sampler = &samplers[slot % samplers.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[train_cfg.seed, sampler_cfg.seed, it as u64, b as u64]));
            let patch = sampler.draw(selection, b < quota, &mut rng);
            let x = tape.constant(patch.input);
            let g = tape.constant(patch.label);
            let y = net.forward(&mut tape, &vars, x)?;
            pairs.push((y, g));
        }
        let loss = tversky_loss_batch(&mut tape, &pairs, &train_cfg.loss)?;
        let loss_value = tape.value(loss)[0];
        if !loss_value.is_finite() {
            return Err(PipelineError::NonFiniteLoss { iteration: it });
        }
        tape.backward(loss)?;
        params.zero_grad();
        params.accumulate_grads(&tape, &vars);
        adam_step(&mut params, &mut adam, &train_cfg.optimizer)?;

        if it % train_cfg.val_check_interval == 0 {
            let j = mean_jaccard(&net, &params, val_cases, selection, &val_cfg)?;
            log::debug!("iteration {it}: loss {loss_value:.4}, val jaccard {j:.4}");
            if j > best {
                best = j;
                best_params = params.clone();
                best_iter = it;
            }
        }
    }
    Checkpoint::new(
        model_cfg.clone(),
        selection.clone(),
        sampler_cfg.clone(),
        train_cfg.clone(),
        &best_params,
        best,
        best_iter,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_case, PhantomConfig};
    use crate::volgrid::SequenceId;

    fn tiny() -> (Vec<Case>, UNetConfig, SamplerConfig) {
        let pcfg = PhantomConfig { grid: [16, 16, 16], cavity_radius_range: [3.0, 4.0], ..Default::default() };
        let cases = vec![generate_case(&pcfg, 0, 0).unwrap(), generate_case(&pcfg, 1, 0).unwrap()];
        let model = UNetConfig { levels: 2, base_channels: 2, ..Default::default() };
        let sampler = SamplerConfig { patch_size: [8, 8, 8], ..Default::default() };
        (cases, model, sampler)
    }

    #[test]
    fn zero_iterations_keeps_initial_parameters() {
        let (cases, model, sampler) = tiny();
        let tc = TrainConfig { max_iterations: 0, ..Default::default() };
        let sel = ChannelSelection::single(SequenceId::T1C);
        let ckpt = train(&cases[..1], &cases[1..], &sel, &model, &sampler, &tc).unwrap();
        let (net, init) = build_unet(&model).unwrap();
        let j0 = mean_jaccard(
            &net,
            &init,
            &cases[1..],
            &sel,
            &InferenceConfig { window: [8, 8, 8], overlap_fraction: 0.0, ..Default::default() },
        )
        .unwrap();
        assert_eq!(ckpt.iteration_of_best, 0);
        assert_eq!(ckpt.best_val_jaccard, j0);
        for (name, t) in init.iter() {
            let kept = ckpt.params().get(name).unwrap();
            assert!(t.data().iter().zip(kept.data()).all(|(a, b)| (a - b).abs() <= a.abs() * 1e-7));
        }
    }

    #[test]
    fn short_run_is_deterministic_and_never_worse() {
        let (cases, model, sampler) = tiny();
        let tc = TrainConfig { max_iterations: 4, val_check_interval: 2, batch_size: 2, ..Default::default() };
        let sel = ChannelSelection::single(SequenceId::T1C);
        let a = train(&cases[..1], &cases[1..], &sel, &model, &sampler, &tc).unwrap();
        let b = train(&cases[..1], &cases[1..], &sel, &model, &sampler, &tc).unwrap();
        assert_eq!(a.encode(), b.encode());
        let zero =
            train(&cases[..1], &cases[1..], &sel, &model, &sampler, &TrainConfig { max_iterations: 0, ..tc }).unwrap();
        assert!(a.best_val_jaccard >= zero.best_val_jaccard);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (cases, model, sampler) = tiny();
        let sel = ChannelSelection::single(SequenceId::T1C);
        let tc = TrainConfig { max_iterations: 0, ..Default::default() };
        assert!(train(&[], &cases, &sel, &model, &sampler, &tc).is_err());
        assert!(train(&cases, &cases, &ChannelSelection::all(), &model, &sampler, &tc).is_err());
        let odd = SamplerConfig { patch_size: [7, 8, 8], ..sampler.clone() };
        assert!(train(&cases, &cases, &sel, &model, &odd, &tc).is_err());
        let zero_batch = TrainConfig { batch_size: 0, ..tc };
        assert!(train(&cases, &cases, &sel, &model, &sampler, &zero_batch).is_err());
    }
}
