//! Training loops for AR and NAR models, and evaluation metrics.

pub mod metrics;

pub use metrics::{
    bleu, cm, cm_with, evaluate, exact_match, match_rate, ncm, ncm_with, predictions, EvalOptions,
    EvalReport,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, TokenId};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::substrate::{AdamConfig, AdamState, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Pairs per update.
    pub batch_size: usize,
    /// Steps between progress reports; 0 disables them.
    pub eval_interval: u64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// Weight of the length classifier's loss in NAR training.
    pub length_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 64,
            eval_interval: 1000,
            label_smoothing: 0.1,
            seed: 1,
            optimizer: AdamConfig::default(),
            length_loss_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "train.label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Mixes a base seed with a stream tag (splitmix64 finaliser), so that
/// derived seeds are decorrelated.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Transformer,
    /// Training loss of every step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// Mean loss over steps `[from, to)`.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let w = &self.losses[from..to];
        w.iter().sum::<f64>() / w.len() as f64
    }
}

/// Called every `eval_interval` steps and after the last step.
pub type Observer<'a> = dyn FnMut(u64, &Transformer) -> Result<()> + 'a;

pub fn train_ar(
    corpus: &ParallelCorpus,
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<TrainOutcome> {
    check_arch(model_config, true)?;
    train_model(corpus, config, model_config, None)
}

pub fn train_nar(
    corpus: &ParallelCorpus,
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<TrainOutcome> {
    check_arch(model_config, false)?;
    train_model(corpus, config, model_config, None)
}

fn check_arch(model_config: &ModelConfig, ar: bool) -> Result<()> {
    if model_config.autoregressive != ar {
        return Err(Error::Config(format!(
            "model config is {}, expected {}",
            if model_config.autoregressive {
                "AR"
            } else {
                "NAR"
            },
            if ar { "AR" } else { "NAR" }
        )));
    }
    Ok(())
}

/// Trains a freshly initialised model of either kind with label-smoothed
/// cross-entropy and Adam. Everything random derives from `config.seed`.
pub fn train_model(
    corpus: &ParallelCorpus,
    config: &TrainConfig,
    model_config: &ModelConfig,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    if model_config.vocab_size != corpus.vocab().len() {
        return Err(Error::Config(format!(
            "model vocabulary size {} does not match corpus vocabulary size {}",
            model_config.vocab_size,
            corpus.vocab().len()
        )));
    }
    let mut model = Transformer::new(model_config.clone(), derive_seed(config.seed, INIT_STREAM))?;
    let mut adam = AdamState::new(config.optimizer.clone(), model.params());
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, BATCH_STREAM));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, DROPOUT_STREAM));
    let pairs: Vec<(&[TokenId], &[TokenId])> = corpus
        .pairs()
        .iter()
        .map(|(x, y)| (x.tokens(), y.tokens()))
        .collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.steps as usize);

    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(pairs.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(pairs[order[cursor]]);
            cursor += 1;
        }
        let mut g = Graph::training(ChaCha8Rng::seed_from_u64(dropout_rng.gen()));
        let loss = if model.is_autoregressive() {
            model.ar_loss(&mut g, &batch, config.label_smoothing)?
        } else {
            model.nar_loss(
                &mut g,
                &batch,
                config.label_smoothing,
                config.length_loss_weight,
            )?
        };
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                name: "training loss".into(),
                step,
            });
        }
        losses.push(value);
        model.params_mut().zero_grad();
        g.backward(loss, model.params_mut());
        let lr = adam.step(model.params_mut())?;

        let report = config.eval_interval > 0 && step % config.eval_interval == 0;
        if report {
            let from = losses.len().saturating_sub(config.eval_interval as usize);
            let recent = losses[from..].iter().sum::<f64>() / (losses.len() - from) as f64;
            log::info!(target: "progress", "step {step}: loss {recent:.4} lr {lr:.2e}");
        }
        if let Some(obs) = observer.as_deref_mut() {
            if report || step == config.steps {
                obs(step, &model)?;
            }
        }
    }
    Ok(TrainOutcome { model, losses })
}
