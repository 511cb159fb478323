//! Noise-prediction training with prompt dropout for classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::optim::Adam;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::tokens::{null_prompt, tokenize, PromptPair, TokenizedPrompt, Vocabulary, BOS_ID, PAD_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub cfg_drop_rate: f64,
    pub seed: u64,
    /// Decay the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    /// Keep an exponential moving average of the weights with this decay
    /// and return it in place of the raw weights. 0 disables it.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            cfg_drop_rate: 0.1,
            seed: 0,
            cosine_decay: false,
            ema_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cfg_drop_rate) {
            return Err(Error::Parameter(format!(
                "cfg_drop_rate must be in [0, 1], got {}",
                self.cfg_drop_rate
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Parameter(format!("ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainingSample {
    /// `[C, H, W]` in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub prompt: PromptPair,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainStats {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub optimizer_steps: u64,
    pub null_prompts: usize,
    pub conditional_prompts: usize,
    /// Word tokens (neither bos nor pad) fed to the model.
    pub word_tokens_presented: usize,
}

/// Trains `model` in place on `data`.
pub fn train(
    model: &mut Denoiser<f32>,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    data: &[TrainingSample],
    config: &TrainConfig,
) -> Result<TrainStats> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let mc = model.config().clone();
    if schedule.t_train() != mc.t_train {
        return Err(Error::Parameter(format!(
            "schedule has {} steps but the model expects {}",
            schedule.t_train(),
            mc.t_train
        )));
    }
    let prompts = data
        .iter()
        .map(|s| tokenize(&s.prompt, vocab, mc.token_budget))
        .collect::<Result<Vec<_>>>()?;
    let null = null_prompt(mc.token_budget);

    let mut rng = SeededRng::derive(config.seed, 0x7EA1);
    let mut adam = Adam::new(config.lr, config.beta1, config.beta2);
    let mut stats = TrainStats::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    let total_steps = config.epochs * data.len().div_ceil(config.batch_size);
    let mut ema: Option<Vec<Vec<f32>>> =
        (config.ema_decay > 0.0).then(|| model.params().values().map(|p| p.to_vec()).collect());

    for epoch in 0..config.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Vec<f32>> = model.params().values().map(|p| vec![0.0; p.numel()]).collect();
            for &idx in batch {
                let sample = &data[idx];
                let t = 1 + rng.below(mc.t_train);
                let eps = rng.normal_tensor::<f32>(sample.image.shape(), 1.0);
                let drop = rng.uniform() < config.cfg_drop_rate;
                let tokens = if drop { &null } else { &prompts[idx] };
                if drop {
                    stats.null_prompts += 1;
                } else {
                    stats.conditional_prompts += 1;
                }
                stats.word_tokens_presented += count_words(tokens);

                let z_t = q_sample(schedule, &sample.image, t, &eps)?;
                let loss = sample_gradients(model, &z_t, t, tokens, &eps, &mut acc).map_err(|e| match e {
                    Error::NonFinite(_) => Error::Training { step, loss: f64::NAN },
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::Training { step, loss });
                }
                epoch_loss += loss;
                step += 1;
            }
            let scale = 1.0 / batch.len() as f32;
            let grads = acc
                .into_iter()
                .zip(model.params().values())
                .map(|(g, p)| Tensor::new(p.shape(), g.into_iter().map(|v| v * scale).collect()))
                .collect::<Result<Vec<_>>>()?;
            if config.cosine_decay {
                let progress = adam.steps_taken() as f64 / total_steps as f64;
                adam.lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            }
            let mut params: Vec<&mut Tensor<f32>> = model.params_mut().values_mut().collect();
            adam.step(&mut params, &grads)?;
            if let Some(avg) = &mut ema {
                let d = config.ema_decay as f32;
                for (a, p) in avg.iter_mut().zip(model.params().values()) {
                    for (x, y) in a.iter_mut().zip(p.data()) {
                        *x = d * *x + (1.0 - d) * *y;
                    }
                }
            }
        }
        let mean = epoch_loss / data.len() as f64;
        log::info!("epoch {} loss {:.5}", epoch + 1, mean);
        stats.epoch_losses.push(mean);
    }
    stats.optimizer_steps = adam.steps_taken();
    if let Some(avg) = ema {
        for (p, a) in model.params_mut().values_mut().zip(avg) {
            *p = Tensor::new(p.shape(), a)?;
        }
    }
    Ok(stats)
}

/// Runs one forward/backward pass and adds the parameter gradients to `acc`.
fn sample_gradients(
    model: &Denoiser<f32>,
    z_t: &Tensor<f32>,
    t: usize,
    tokens: &TokenizedPrompt,
    eps: &Tensor<f32>,
    acc: &mut [Vec<f32>],
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let z = tape.constant(z_t.clone());
    let target = tape.constant(eps.clone());
    let pred = model.forward_on_tape(&mut tape, &vars, z, t, tokens, None)?;
    let loss = tape.mse(pred, target)?;
    tape.backward(loss)?;
    for (a, v) in acc.iter_mut().zip(&vars) {
        if let Some(g) = tape.grad(*v) {
            for (x, y) in a.iter_mut().zip(g.data()) {
                *x += *y;
            }
        }
    }
    Ok(tape.value(loss).item()? as f64)
}

fn count_words(tokens: &TokenizedPrompt) -> usize {
    tokens.ids.iter().filter(|&&id| id != BOS_ID && id != PAD_ID).count()
}

fn shuffle(order: &mut [usize], rng: &mut SeededRng) {
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::scene::{default_vocabulary, generate_scene, SceneSpec};
    use crate::diffusion::ScheduleConfig;
    use crate::model::DenoiserConfig;

    fn tiny() -> (Denoiser, NoiseSchedule, Vocabulary, Vec<TrainingSample>) {
        let vocab = default_vocabulary();
        let config = DenoiserConfig {
            image_size: 8,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            token_budget: 2,
            vocab_size: vocab.len(),
            ..Default::default()
        };
        let model = Denoiser::new(config, 1).unwrap();
        let schedule = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let data = (0..12)
            .map(|seed| {
                let s = generate_scene(&SceneSpec::random(seed, 8)).unwrap();
                TrainingSample {
                    image: s.image,
                    prompt: s.p_src,
                }
            })
            .collect();
        (model, schedule, vocab, data)
    }

    #[test]
    fn loss_decreases() {
        let (mut model, schedule, vocab, data) = tiny();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 4,
            lr: 3e-3,
            ..Default::default()
        };
        let stats = train(&mut model, &schedule, &vocab, &data, &cfg).unwrap();
        assert_eq!(stats.epoch_losses.len(), 5);
        assert!(stats.epoch_losses[4] < stats.epoch_losses[0], "{:?}", stats.epoch_losses);
        assert_eq!(stats.optimizer_steps, 15);
    }

    #[test]
    fn drop_rate_extremes() {
        let (model, schedule, vocab, data) = tiny();
        let mut m = model.clone();
        let cfg = TrainConfig {
            epochs: 1,
            cfg_drop_rate: 0.0,
            ..Default::default()
        };
        let s = train(&mut m, &schedule, &vocab, &data, &cfg).unwrap();
        assert_eq!(s.null_prompts, 0);
        assert_eq!(s.conditional_prompts, data.len());

        let mut m = model.clone();
        let cfg = TrainConfig {
            cfg_drop_rate: 1.0,
            ..cfg
        };
        let s = train(&mut m, &schedule, &vocab, &data, &cfg).unwrap();
        assert_eq!(s.conditional_prompts, 0);
        assert_eq!(s.word_tokens_presented, 0);
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let (model, schedule, vocab, data) = tiny();
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let (mut a, mut b) = (model.clone(), model);
        train(&mut a, &schedule, &vocab, &data, &cfg).unwrap();
        train(&mut b, &schedule, &vocab, &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_empty_data_and_diverges_loudly() {
        let (mut model, schedule, vocab, data) = tiny();
        let cfg = TrainConfig::default();
        assert!(train(&mut model, &schedule, &vocab, &[], &cfg).is_err());
        let mut bad = data[..1].to_vec();
        bad[0].image = Tensor::full(bad[0].image.shape(), f32::NAN);
        assert!(matches!(
            train(&mut model, &schedule, &vocab, &bad, &cfg),
            Err(Error::Training { .. })
        ));
    }
}
