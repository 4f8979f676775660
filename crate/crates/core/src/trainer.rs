//! Pre-training loop with epoch-wise re-sampling and perplexity early stop.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{make_pretrain_batch, split_and_sample, MaskConfig, MaskedBatch, SamplerConfig, SplitSample, TokenizedDialogue};
use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::objective::{loss_mlm, pretrain_step, AlignmentConfig, PretrainModel};
use crate::optim::{Adam, AdamConfig};
use crate::params::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    LinearDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
    /// Number of fixed dev batches scored at each evaluation.
    pub dev_batches: usize,
    pub lr_schedule: LrSchedule,
    /// Leading steps trained on the MLM term alone before alignment switches on.
    pub mlm_warmup_steps: usize,
    pub mask: MaskConfig,
    pub alignment: AlignmentConfig,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 16,
            max_steps: 500,
            eval_every: 50,
            patience: 3,
            seed: 0,
            dev_batches: 4,
            lr_schedule: LrSchedule::Constant,
            mlm_warmup_steps: 0,
            mask: MaskConfig::default(),
            alignment: AlignmentConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_layers: usize) -> Result<Vec<String>> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be positive");
        }
        if self.patience == 0 {
            return bad("train.patience must be at least 1");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.dev_batches == 0 {
            return bad("train.batch_size, train.eval_every and train.dev_batches must be positive");
        }
        if !(self.mask.ratio > 0.0 && self.mask.ratio <= 1.0) {
            return bad("mask.ratio must be in (0, 1]");
        }
        self.alignment.validate(num_layers)
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::LinearDecay => {
                let frac = (step - 1) as f64 / self.max_steps.max(1) as f64;
                self.lr * (1.0 - frac)
            }
        }
    }
}

/// Independent RNG stream for one purpose under a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_DEV: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step {
        step: usize,
        l_cls: Option<f64>,
        l_mask: Option<f64>,
        l_mlm: Option<f64>,
        total: f64,
    },
    Eval {
        step: usize,
        dev_ppl: f64,
    },
}

/// Seeded model initialization in 32-bit storage.
pub fn init_model(config: &EncoderConfig, seed: u64) -> Result<PretrainModel> {
    PretrainModel::init(config, Precision::F32, &mut stream_rng(seed, STREAM_INIT))
}

/// One fresh split per dialogue, shuffled.
pub fn epoch_samples<R: rand::Rng + ?Sized>(
    dialogues: &[TokenizedDialogue],
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Vec<SplitSample> {
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|i| split_and_sample(&dialogues[i], sampler.p_mode, rng))
        .collect()
}

/// Fixed, seeded dev batches for perplexity.
pub fn dev_batches(
    dev: &[TokenizedDialogue],
    cfg: &TrainConfig,
    vocab_size: usize,
    max_len: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<MaskedBatch>> {
    if dev.is_empty() {
        return Err(Error::Data("the dev split is empty".into()));
    }
    let mut rng = stream_rng(seed, STREAM_DEV);
    let mut pool: Vec<SplitSample> = Vec::new();
    let mut batches = Vec::with_capacity(count);
    for _ in 0..count {
        while pool.len() < cfg.batch_size {
            pool.extend(epoch_samples(dev, &cfg.sampler, &mut rng));
        }
        let take: Vec<SplitSample> = pool.drain(..cfg.batch_size).collect();
        batches.push(make_pretrain_batch(&take, &cfg.mask, vocab_size, max_len, &mut rng)?);
    }
    Ok(batches)
}

/// Mask-weighted mean eval-mode MLM loss over `batches`.
pub fn dev_mlm_loss(model: &PretrainModel, batches: &[MaskedBatch]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for b in batches {
        let m = b.mask_count();
        if m == 0 {
            continue;
        }
        let mut tape = Tape::new();
        tape.set_freeze_params(true);
        let states = encode(&mut tape, &model.store, &model.encoder, &b.context, false, &mut rng)?;
        let l = loss_mlm(
            &mut tape,
            &model.store,
            &states,
            &b.mask_positions,
            &b.mlm_labels,
            model.encoder.tok_emb,
            model.mlm_bias,
        )?;
        sum += tape.value(l).item() * m as f64;
        count += m;
    }
    if count == 0 {
        return Err(Error::Data("dev batches contain no masked tokens".into()));
    }
    Ok(sum / count as f64)
}

/// Patience-based early stopping on a lower-is-better metric.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    pub bad_evals: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            bad_evals: 0,
        }
    }

    pub fn observe(&mut self, step: usize, value: f64) -> StopDecision {
        let improved = self.best.is_none_or(|(_, b)| value < b);
        if improved {
            self.best = Some((step, value));
            self.bad_evals = 0;
        } else {
            self.bad_evals += 1;
        }
        StopDecision {
            improved,
            stop: self.bad_evals >= self.patience,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters at the evaluation with the lowest dev perplexity.
    pub model: PretrainModel,
    pub log: Vec<LogRecord>,
    pub best_step: usize,
    pub best_dev_ppl: f64,
    pub initial_dev_ppl: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

/// Runs the optimization loop from `model`; the outcome carries the best-perplexity parameters.
pub fn train(
    mut model: PretrainModel,
    train_set: &[TokenizedDialogue],
    dev_set: &[TokenizedDialogue],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let enc = model.config().clone();
    let warnings = cfg.validate(enc.num_layers)?;
    if train_set.is_empty() {
        return Err(Error::Data("the training split is empty".into()));
    }
    let dev = dev_batches(dev_set, cfg, enc.vocab_size, enc.max_len, cfg.dev_batches, cfg.seed)?;
    let sample_seed = cfg.seed ^ cfg.sampler.seed.rotate_left(32);
    let mut sample_rng = stream_rng(sample_seed, STREAM_SAMPLE);
    let mut mask_rng = stream_rng(cfg.seed, STREAM_MASK);
    let mut dropout_rng = stream_rng(cfg.seed, STREAM_DROPOUT);
    let mut adam = Adam::new(AdamConfig::default());

    let initial = dev_mlm_loss(&model, &dev)?.exp();
    let mut stopper = EarlyStopper::new(cfg.patience);
    stopper.observe(0, initial);
    let mut best = model.store.clone();
    let mut log = Vec::new();
    log.push(LogRecord::Eval { step: 0, dev_ppl: initial });
    info!("initial dev perplexity {initial:.3}");

    let warmup_align = AlignmentConfig {
        use_cls_align: false,
        use_mask_align: false,
        ..cfg.alignment.clone()
    };
    let mut queue: Vec<SplitSample> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    let mut stopped_early = false;
    let mut steps_run = 0;
    for step in 1..=cfg.max_steps {
        if cursor >= queue.len() {
            queue = epoch_samples(train_set, &cfg.sampler, &mut sample_rng);
            cursor = 0;
            epoch += 1;
            debug!("epoch {epoch} with {} samples", queue.len());
        }
        let end = (cursor + cfg.batch_size).min(queue.len());
        let batch = make_pretrain_batch(&queue[cursor..end], &cfg.mask, enc.vocab_size, enc.max_len, &mut mask_rng)?;
        cursor = end;
        let align = if step <= cfg.mlm_warmup_steps && cfg.alignment.use_mlm {
            &warmup_align
        } else {
            &cfg.alignment
        };
        let b = pretrain_step(&mut model, &mut adam, &batch, align, cfg.lr_at(step), &mut dropout_rng)?;
        steps_run = step;
        log.push(LogRecord::Step {
            step,
            l_cls: b.l_cls,
            l_mask: b.l_mask,
            l_mlm: b.l_mlm,
            total: b.total,
        });
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let ppl = dev_mlm_loss(&model, &dev)?.exp();
            if !ppl.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: "dev perplexity".into(),
                });
            }
            log.push(LogRecord::Eval { step, dev_ppl: ppl });
            info!("step {step}: total {:.4}, dev perplexity {ppl:.3}", b.total);
            let d = stopper.observe(step, ppl);
            if d.improved {
                best = model.store.clone();
            }
            if d.stop {
                stopped_early = true;
                info!("early stop at step {step}");
                break;
            }
        }
    }
    let (best_step, best_dev_ppl) = stopper.best.expect("initial evaluation recorded");
    model.store = best;
    Ok(TrainOutcome {
        model,
        log,
        best_step,
        best_dev_ppl,
        initial_dev_ppl: initial,
        steps_run,
        stopped_early,
        warnings,
    })
}
