//! Bootstrapped alignment objective: predictor head, [CLS] alignment,
//! masked-token alignment and MLM, summed into one loss.
//!
//! The context stream (with masking) is the online branch and passes through
//! the predictor `h`; the context+response stream is the target branch and is
//! detached with stop-gradient unless disabled. Alignment sums over the top-K
//! transformer layers and averages over examples and masked tokens.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::MaskedBatch;
use crate::encoder::{encode, EncoderConfig, EncoderWeights, LayerStates};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{ParamId, ParamStore, Precision};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Euclidean,
    Squared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Average over examples and masked tokens.
    #[default]
    Mean,
    /// Plain sum over examples and masked tokens.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    /// Number of topmost transformer layers aligned (embedding output excluded).
    pub k: usize,
    pub use_stop_gradient: bool,
    pub use_cls_align: bool,
    pub use_mask_align: bool,
    pub use_mlm: bool,
    pub use_predictor: bool,
    pub distance: Distance,
    pub reduction: Reduction,
    /// L2-normalize both sides before the distance.
    pub normalize: bool,
    /// Dropout on the target (context+response) branch.
    pub target_dropout: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            k: 2,
            use_stop_gradient: true,
            use_cls_align: true,
            use_mask_align: true,
            use_mlm: true,
            use_predictor: true,
            distance: Distance::Euclidean,
            reduction: Reduction::Mean,
            normalize: true,
            target_dropout: true,
        }
    }
}

pub const NO_MLM_WARNING: &str =
    "MLM disabled: training without the MLM term is expected not to converge";

impl AlignmentConfig {
    /// Validates against an encoder depth and returns warnings.
    pub fn validate(&self, num_layers: usize) -> Result<Vec<String>> {
        if self.k == 0 || self.k > num_layers {
            return Err(Error::Config(format!(
                "alignment.k must be in 1..={num_layers}, got {}",
                self.k
            )));
        }
        if !(self.use_cls_align || self.use_mask_align || self.use_mlm) {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        let mut warnings = Vec::new();
        if !self.use_mlm {
            warnings.push(NO_MLM_WARNING.to_string());
        }
        Ok(warnings)
    }

    fn needs_target(&self) -> bool {
        self.use_cls_align || self.use_mask_align
    }
}

/// Bottleneck width of the predictor for an encoder of width `d`.
pub fn predictor_hidden_dim(d: usize) -> usize {
    (2 * d / 3).max(8)
}

/// Two-layer MLP `d → hidden → d` with ReLU.
#[derive(Clone, Debug)]
pub struct PredictorWeights {
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

impl PredictorWeights {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        let mut lin = |name: &str, i: usize, o: usize, rng: &mut R| {
            let w = store.add(format!("{name}.weight"), Tensor::randn(&[i, o], std, rng));
            let b = store.add(format!("{name}.bias"), Tensor::zeros(&[o]));
            (w, b)
        };
        let fc1 = lin("predictor.fc1", d, hidden, rng);
        let fc2 = lin("predictor.fc2", hidden, d, rng);
        Self { fc1, fc2 }
    }
}

pub fn predictor_forward(tape: &mut Tape, store: &ParamStore, w: &PredictorWeights, x: Var) -> Result<Var> {
    let (w1, b1) = (tape.param(store, w.fc1.0), tape.param(store, w.fc1.1));
    let (w2, b2) = (tape.param(store, w.fc2.0), tape.param(store, w.fc2.1));
    let h = tape.linear(x, w1, Some(b1))?;
    let h = tape.relu(h)?;
    Ok(tape.linear(h, w2, Some(b2))?)
}

/// Encoder + predictor + MLM output bias sharing one parameter store.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub store: ParamStore,
    pub encoder: EncoderWeights,
    pub predictor: PredictorWeights,
    pub mlm_bias: ParamId,
}

impl PretrainModel {
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, precision: Precision, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new(precision);
        let encoder = EncoderWeights::init(&mut store, config, rng)?;
        let d = config.hidden_dim;
        let predictor = PredictorWeights::init(&mut store, d, predictor_hidden_dim(d), config.init_std, rng);
        let mlm_bias = store.add("mlm.bias", Tensor::zeros(&[config.vocab_size]));
        Ok(Self {
            store,
            encoder,
            predictor,
            mlm_bias,
        })
    }

    /// Rebuilds a model from a loaded parameter store; every parameter must be present.
    pub fn from_store(config: &EncoderConfig, loaded: &ParamStore) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::init(config, loaded.precision(), &mut rng)?;
        let copied = model.store.copy_matching(loaded);
        if copied != model.store.len() {
            return Err(Error::Data(format!(
                "parameter set mismatch: {copied} of {} parameters found",
                model.store.len()
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }
}

/// Indices (into `states.layers`) of the top `k` transformer layers.
pub fn aligned_layers(states: &LayerStates, k: usize) -> std::ops::RangeInclusive<usize> {
    let l = states.num_layers();
    (l + 1 - k)..=l
}

fn alignment_distance(
    tape: &mut Tape,
    store: &ParamStore,
    online: Var,
    target: Var,
    predictor: Option<&PredictorWeights>,
    cfg: &AlignmentConfig,
) -> Result<Var> {
    let mut target = target;
    if cfg.use_stop_gradient {
        target = tape.stop_gradient(target)?;
    }
    let mut online = match predictor {
        Some(p) => predictor_forward(tape, store, p, online)?,
        None => online,
    };
    if cfg.normalize {
        online = tape.row_normalize(online)?;
        target = tape.row_normalize(target)?;
    }
    let d = tape.row_distance(online, target, cfg.distance == Distance::Squared)?;
    Ok(match cfg.reduction {
        Reduction::Mean => tape.mean(d)?,
        Reduction::Sum => tape.sum(d)?,
    })
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

fn check_layers(ctx: &LayerStates, full: &LayerStates, k: usize) -> Result<()> {
    if ctx.layers.len() != full.layers.len() || ctx.batch != full.batch {
        return Err(Error::Data(format!(
            "layer states disagree: {} vs {} layers, batch {} vs {}",
            ctx.layers.len(),
            full.layers.len(),
            ctx.batch,
            full.batch
        )));
    }
    if k == 0 || k > ctx.num_layers() {
        return Err(Error::Config(format!("k={k} outside 1..={}", ctx.num_layers())));
    }
    Ok(())
}

/// Dialogue-level alignment: distance between `h(c_cls)` and `sg(r_cls)`,
/// averaged over the batch and summed over the top `k` layers.
pub fn loss_cls(
    tape: &mut Tape,
    store: &ParamStore,
    ctx: &LayerStates,
    full: &LayerStates,
    predictor: Option<&PredictorWeights>,
    cfg: &AlignmentConfig,
) -> Result<Var> {
    check_layers(ctx, full, cfg.k)?;
    let mut terms = Vec::with_capacity(cfg.k);
    for l in aligned_layers(ctx, cfg.k) {
        let c = tape.gather_rows(ctx.layers[l], &ctx.cls_rows())?;
        let r = tape.gather_rows(full.layers[l], &full.cls_rows())?;
        terms.push(alignment_distance(tape, store, c, r, predictor, cfg)?);
    }
    sum_vars(tape, &terms)
}

/// Token-level alignment of masked context positions with the same positions
/// of the unmasked target stream. Returns `None` when nothing is masked.
pub fn loss_mask(
    tape: &mut Tape,
    store: &ParamStore,
    ctx: &LayerStates,
    full: &LayerStates,
    mask_positions: &[Vec<usize>],
    predictor: Option<&PredictorWeights>,
    cfg: &AlignmentConfig,
) -> Result<Option<Var>> {
    check_layers(ctx, full, cfg.k)?;
    let mut ctx_rows = Vec::new();
    let mut full_rows = Vec::new();
    for (b, positions) in mask_positions.iter().enumerate() {
        for &p in positions {
            let limit = ctx.seq.min(full.seq);
            if p >= limit {
                return Err(TensorError::Index {
                    op: "loss_mask",
                    index: p,
                    size: limit,
                }
                .into());
            }
            ctx_rows.push(ctx.row(b, p));
            full_rows.push(full.row(b, p));
        }
    }
    if ctx_rows.is_empty() {
        return Ok(None);
    }
    let mut terms = Vec::with_capacity(cfg.k);
    for l in aligned_layers(ctx, cfg.k) {
        let c = tape.gather_rows(ctx.layers[l], &ctx_rows)?;
        let r = tape.gather_rows(full.layers[l], &full_rows)?;
        terms.push(alignment_distance(tape, store, c, r, predictor, cfg)?);
    }
    Ok(Some(sum_vars(tape, &terms)?))
}

/// Mean cross-entropy of the masked tokens, with the output projection tied
/// to the token embedding table.
pub fn loss_mlm(
    tape: &mut Tape,
    store: &ParamStore,
    top: &LayerStates,
    mask_positions: &[Vec<usize>],
    labels: &[Vec<u32>],
    tok_emb: ParamId,
    bias: ParamId,
) -> Result<Var> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, (pos, lab)) in mask_positions.iter().zip(labels).enumerate() {
        for (&p, &t) in pos.iter().zip(lab) {
            rows.push(top.row(b, p));
            targets.push(t as usize);
        }
    }
    if rows.is_empty() {
        return Err(Error::Data("MLM loss needs at least one masked token".into()));
    }
    let h = tape.gather_rows(top.top(), &rows)?;
    let emb = tape.param(store, tok_emb);
    let proj = tape.transpose(emb)?;
    let b = tape.param(store, bias);
    let logits = tape.linear(h, proj, Some(b))?;
    Ok(tape.softmax_cross_entropy(logits, &targets)?)
}

/// Per-term values of one batch; `None` means disabled or undefined.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_cls: Option<f64>,
    pub l_mask: Option<f64>,
    pub l_mlm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: Option<f64>,
    pub l_mask: Option<f64>,
    pub l_mlm: Option<f64>,
    pub total: f64,
    pub mask_count: usize,
    pub layer_count: usize,
}

/// Unweighted sum of the enabled terms that are present.
pub fn total_loss(parts: LossParts, cfg: &AlignmentConfig) -> LossBreakdown {
    let keep = |v: Option<f64>, on: bool| if on { v } else { None };
    let l_cls = keep(parts.l_cls, cfg.use_cls_align);
    let l_mask = keep(parts.l_mask, cfg.use_mask_align);
    let l_mlm = keep(parts.l_mlm, cfg.use_mlm);
    let total = [l_cls, l_mask, l_mlm].iter().flatten().sum();
    LossBreakdown {
        l_cls,
        l_mask,
        l_mlm,
        total,
        mask_count: 0,
        layer_count: cfg.k,
    }
}

pub struct ObjectiveOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Encodes both streams and builds the summed objective on `tape`.
pub fn compute_objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &PretrainModel,
    batch: &MaskedBatch,
    cfg: &AlignmentConfig,
    train: bool,
    detach_target: bool,
    rng: &mut R,
) -> Result<ObjectiveOutput> {
    let store = &model.store;
    let ctx = encode(tape, store, &model.encoder, &batch.context, train, rng)?;
    let full = if cfg.needs_target() {
        let prev = tape.set_freeze_params(detach_target);
        let full = encode(tape, store, &model.encoder, &batch.full, train && cfg.target_dropout, rng);
        tape.set_freeze_params(prev);
        Some(full?)
    } else {
        None
    };
    let predictor = cfg.use_predictor.then_some(&model.predictor);

    let mut vars = Vec::new();
    let mut parts = LossParts::default();
    if let (true, Some(full)) = (cfg.use_cls_align, &full) {
        let v = loss_cls(tape, store, &ctx, full, predictor, cfg)?;
        parts.l_cls = Some(tape.value(v).item());
        vars.push(v);
    }
    if let (true, Some(full)) = (cfg.use_mask_align, &full) {
        if let Some(v) = loss_mask(tape, store, &ctx, full, &batch.mask_positions, predictor, cfg)? {
            parts.l_mask = Some(tape.value(v).item());
            vars.push(v);
        }
    }
    if cfg.use_mlm && batch.mask_count() > 0 {
        let v = loss_mlm(
            tape,
            store,
            &ctx,
            &batch.mask_positions,
            &batch.mlm_labels,
            model.encoder.tok_emb,
            model.mlm_bias,
        )?;
        parts.l_mlm = Some(tape.value(v).item());
        vars.push(v);
    }
    if vars.is_empty() {
        return Err(Error::Data("no loss term could be computed for this batch".into()));
    }
    let total = sum_vars(tape, &vars)?;
    let mut breakdown = total_loss(parts, cfg);
    breakdown.mask_count = batch.mask_count();
    breakdown.total = tape.value(total).item();
    Ok(ObjectiveOutput { total, breakdown })
}

fn numeric_failure(step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss {
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// One optimization step: two-stream forward, one backward, one Adam update
/// over every parameter in the model.
pub fn pretrain_step<R: Rng + ?Sized>(
    model: &mut PretrainModel,
    optimizer: &mut Adam,
    batch: &MaskedBatch,
    cfg: &AlignmentConfig,
    lr: f64,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let step = optimizer.state.step as usize + 1;
    let mut tape = Tape::new();
    let out = compute_objective(&mut tape, model, batch, cfg, true, false, rng)
        .map_err(|e| numeric_failure(step, e))?;
    let grads = tape.backward(out.total).map_err(|e| numeric_failure(step, e.into()))?;
    let grads = tape.param_grads(&grads);
    optimizer.step(&mut model.store, &grads, lr)?;
    Ok(out.breakdown)
}

/// Gradients of `L_cls + L_mask` for every parameter. With `detach_target`
/// the target stream is encoded from frozen parameter copies.
pub fn alignment_param_grads<R: Rng + ?Sized>(
    model: &PretrainModel,
    batch: &MaskedBatch,
    cfg: &AlignmentConfig,
    detach_target: bool,
    train: bool,
    rng: &mut R,
) -> Result<Vec<(ParamId, Tensor)>> {
    let cfg = AlignmentConfig {
        use_mlm: false,
        ..cfg.clone()
    };
    let mut tape = Tape::new();
    let out = compute_objective(&mut tape, model, batch, &cfg, train, detach_target, rng)?;
    let grads = tape.backward(out.total)?;
    let mut all: Vec<(ParamId, Tensor)> = tape.param_grads(&grads);
    // Parameters never reached on this tape still get an explicit zero.
    for id in model.store.ids() {
        if !all.iter().any(|(p, _)| *p == id) {
            all.push((id, Tensor::zeros(model.store.get(id).shape())));
        }
    }
    all.sort_by_key(|(id, _)| *id);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn identity_predictor(d: usize) -> (ParamStore, PredictorWeights) {
        let mut store = ParamStore::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PredictorWeights::init(&mut store, d, d, 0.1, &mut rng);
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        *store.get_mut(p.fc1.0) = eye.clone();
        *store.get_mut(p.fc2.0) = eye;
        (store, p)
    }

    fn hand_states(tape: &mut Tape, rows: &[Vec<f64>]) -> LayerStates {
        let d = rows[0].len();
        let t = Tensor::new(vec![rows.len(), 1, d], rows.concat()).unwrap();
        let emb = tape.constant(Tensor::zeros(&[rows.len(), 1, d]));
        let top = tape.variable(t);
        LayerStates {
            layers: vec![emb, top],
            batch: rows.len(),
            seq: 1,
        }
    }

    #[test]
    fn predictor_identity_and_zero_cases() {
        let (store, p) = identity_predictor(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.5, 0.0, 2.0]]).unwrap());
        let y = predictor_forward(&mut tape, &store, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.0, 2.0]);

        let mut zero = store.clone();
        for id in [p.fc1.0, p.fc2.0] {
            zero.get_mut(id).data_mut().fill(0.0);
        }
        zero.get_mut(p.fc2.1).data_mut().copy_from_slice(&[1.0, -2.0, 3.0]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![9.0, -9.0, 4.0]]).unwrap());
        let y = predictor_forward(&mut tape, &zero, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn cls_three_four_five() {
        let (store, p) = identity_predictor(2);
        let mut tape = Tape::new();
        let ctx = hand_states(&mut tape, &[vec![3.0, 0.0]]);
        let full = hand_states(&mut tape, &[vec![0.0, 4.0]]);
        let cfg = AlignmentConfig {
            k: 1,
            normalize: false,
            ..AlignmentConfig::default()
        };
        let l = loss_cls(&mut tape, &store, &ctx, &full, Some(&p), &cfg).unwrap();
        assert!((tape.value(l).item() - 5.0).abs() < 1e-12);

        let sq = AlignmentConfig {
            distance: Distance::Squared,
            ..cfg.clone()
        };
        let l = loss_cls(&mut tape, &store, &ctx, &full, Some(&p), &sq).unwrap();
        assert!((tape.value(l).item() - 25.0).abs() < 1e-12);

        let unit = AlignmentConfig { normalize: true, ..cfg };
        let l = loss_cls(&mut tape, &store, &ctx, &full, Some(&p), &unit).unwrap();
        assert!((tape.value(l).item() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mask_loss_single_position_matches_scalar_loop() {
        let (store, p) = identity_predictor(4);
        let c = vec![0.2, 1.5, 0.0, 3.0];
        let r = vec![1.0, -1.0, 0.5, 2.0];
        let mut tape = Tape::new();
        let ctx = hand_states(&mut tape, std::slice::from_ref(&c));
        let full = hand_states(&mut tape, std::slice::from_ref(&r));
        let cfg = AlignmentConfig {
            k: 1,
            normalize: false,
            ..AlignmentConfig::default()
        };
        let l = loss_mask(&mut tape, &store, &ctx, &full, &[vec![0]], Some(&p), &cfg)
            .unwrap()
            .unwrap();
        // Identity predictor: relu leaves the non-negative entries alone.
        let hc: Vec<f64> = c.iter().map(|v| v.max(0.0)).collect();
        let mut ss = 0.0;
        for i in 0..4 {
            ss += (hc[i] - r[i]) * (hc[i] - r[i]);
        }
        assert!((tape.value(l).item() - ss.sqrt()).abs() < 1e-12);

        let none = loss_mask(&mut tape, &store, &ctx, &full, &[vec![]], Some(&p), &cfg).unwrap();
        assert!(none.is_none());
        let oob = loss_mask(&mut tape, &store, &ctx, &full, &[vec![1]], Some(&p), &cfg);
        assert!(oob.is_err());
    }

    #[test]
    fn total_loss_sums_enabled_terms() {
        let parts = LossParts {
            l_cls: Some(1.0),
            l_mask: Some(2.0),
            l_mlm: Some(3.0),
        };
        let all = total_loss(parts, &AlignmentConfig::default());
        assert_eq!(all.total, 6.0);
        let no_mask = AlignmentConfig {
            use_mask_align: false,
            ..AlignmentConfig::default()
        };
        let b = total_loss(parts, &no_mask);
        assert_eq!(b.total, 4.0);
        assert_eq!(b.l_mask, None);
    }

    #[test]
    fn config_validation() {
        let cfg = AlignmentConfig::default();
        assert!(cfg.validate(2).unwrap().is_empty());
        assert!(cfg.validate(1).is_err());
        let no_mlm = AlignmentConfig {
            use_mlm: false,
            ..cfg.clone()
        };
        assert_eq!(no_mlm.validate(2).unwrap(), vec![NO_MLM_WARNING.to_string()]);
        let none = AlignmentConfig {
            use_mlm: false,
            use_cls_align: false,
            use_mask_align: false,
            ..cfg
        };
        assert!(none.validate(2).is_err());
    }

    #[test]
    fn predictor_hidden_width() {
        assert_eq!(predictor_hidden_dim(768), 512);
        assert_eq!(predictor_hidden_dim(64), 42);
        assert_eq!(predictor_hidden_dim(8), 8);
    }
}
