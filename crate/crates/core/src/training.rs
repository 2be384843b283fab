//! Losses, optimizer, and the training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batches, sequential_batches, Batch, SentencePair, Vocabulary, PAD};
use crate::decoding::{greedy_decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::{bleu4, token_accuracy};
use crate::model::{teacher_forced, ForwardOptions, Model};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the future loss in the joint objective.
    pub lambda: f64,
    pub label_smoothing: f64,
    /// Apply label smoothing to the future loss as well.
    pub smooth_future: bool,
    /// Count `F_0`'s prediction of the first target word in the future loss.
    pub include_f0_loss: bool,
    /// Keep the future loss from updating the encoder-decoder through the
    /// states the cell reads.
    pub stop_gradient: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Multiplier on the warmup schedule.
    pub lr_scale: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub validate_every: usize,
    /// Dev sentences greedily decoded at each validation; 0 decodes all.
    pub validation_sentences: usize,
    /// Stop once dev token accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lambda: 0.7,
            label_smoothing: 0.1,
            smooth_future: true,
            include_f0_loss: false,
            stop_gradient: false,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            lr_scale: 1.0,
            warmup_steps: 400,
            max_steps: 3000,
            batch_size: 64,
            seed: 1,
            validate_every: 250,
            validation_sentences: 200,
            stop_at_accuracy: None,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            warmup_steps: 8000,
            max_steps: 300_000,
            validate_every: 1000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "lambda {} must be finite and non-negative",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0 && self.lr_scale > 0.0) {
            return Err(Error::config("adam_eps and lr_scale must be positive"));
        }
        for (name, v) in [
            ("warmup_steps", self.warmup_steps),
            ("batch_size", self.batch_size),
            ("validate_every", self.validate_every),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn future_eps(&self) -> f64 {
        if self.smooth_future {
            self.label_smoothing
        } else {
            0.0
        }
    }
}

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_schedule(step: usize, d_model: usize, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

/// Smoothed cross-entropy of `logits` `[B, L, V]` against `tgt_out`, averaged
/// over non-pad positions. Smoothing mass avoids the target and PAD.
pub fn ce_loss(g: &mut Graph, logits: Var, batch: &Batch, eps: f64) -> Result<Var> {
    let logp = g.log_softmax(logits);
    let active: Vec<bool> = batch.tgt_pad_mask.iter().map(|&p| !p).collect();
    g.smoothed_nll(logp, &batch.tgt_out_ids, &active, eps, Some(PAD))
}

/// Positions whose future prediction is scored: every non-pad position,
/// except the first unless `include_f0`.
pub fn future_mask(batch: &Batch, include_f0: bool) -> Vec<bool> {
    batch
        .tgt_pad_mask
        .iter()
        .enumerate()
        .map(|(i, &pad)| !pad && (include_f0 || i % batch.tgt_len != 0))
        .collect()
}

/// Smoothed cross-entropy of the future head. Position `t` holds the context
/// built from `y_t` and is scored against `y_{t+1}`, with EOS after the last word.
pub fn future_loss(
    g: &mut Graph,
    future_logits: Var,
    batch: &Batch,
    eps: f64,
    include_f0: bool,
) -> Result<Var> {
    let logp = g.log_softmax(future_logits);
    let active = future_mask(batch, include_f0);
    g.smoothed_nll(logp, &batch.tgt_out_ids, &active, eps, Some(PAD))
}

/// `ce + λ·future`. With `λ = 0` the future term is left out of the graph,
/// so it contributes exactly nothing to any gradient.
pub fn joint_loss(g: &mut Graph, ce: Var, future: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(ce);
    }
    let weighted = g.scale(future, lambda);
    g.add(ce, weighted)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    /// Zero for the baseline.
    pub future: f64,
    pub joint: f64,
    /// Positions scored by the translation loss.
    pub tokens: usize,
    /// Positions scored by the future loss.
    pub future_tokens: usize,
}

impl LossBreakdown {
    /// Token-weighted mean of several breakdowns.
    pub fn weighted_mean(parts: &[LossBreakdown], lambda: f64) -> LossBreakdown {
        let tokens: usize = parts.iter().map(|p| p.tokens).sum();
        let future_tokens: usize = parts.iter().map(|p| p.future_tokens).sum();
        let ce = parts.iter().map(|p| p.ce * p.tokens as f64).sum::<f64>() / tokens.max(1) as f64;
        let future = parts
            .iter()
            .map(|p| p.future * p.future_tokens as f64)
            .sum::<f64>()
            / future_tokens.max(1) as f64;
        LossBreakdown {
            ce,
            future,
            joint: ce + lambda * future,
            tokens,
            future_tokens,
        }
    }
}

/// Builds the training objective for `batch` on `g`.
pub fn forward_losses(
    g: &mut Graph,
    model: &Model,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let opts = ForwardOptions {
        stop_gradient: cfg.stop_gradient,
    };
    let out = teacher_forced(g, model, batch, opts)?;
    let ce = ce_loss(g, out.logits, batch, cfg.label_smoothing)?;
    let mut breakdown = LossBreakdown {
        ce: g.value(ce).item(),
        tokens: batch.target_tokens(),
        ..Default::default()
    };
    let objective = match out.future_logits {
        Some(fl) => {
            let future = future_loss(g, fl, batch, cfg.future_eps(), cfg.include_f0_loss)?;
            let joint = joint_loss(g, ce, future, cfg.lambda)?;
            breakdown.future = g.value(future).item();
            breakdown.future_tokens = future_mask(batch, cfg.include_f0_loss)
                .iter()
                .filter(|&&a| a)
                .count();
            joint
        }
        None => ce,
    };
    breakdown.joint = breakdown.ce + cfg.lambda * breakdown.future;
    if !breakdown.joint.is_finite() || !g.value(objective).item().is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss (ce {}, future {})",
            breakdown.ce, breakdown.future
        )));
    }
    Ok((objective, breakdown))
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with learning rate `rate`; `grads` are in store order.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], rate: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = store.get_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(Error::Contract(format!("gradient {k} has the wrong size")));
            }
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= rate * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One optimizer step on `batch`. `rng` drives dropout and is advanced.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &Batch,
    cfg: &TrainConfig,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let mut g = Graph::train(rng.clone());
    let (objective, breakdown) = forward_losses(&mut g, model, batch, cfg)?;
    let grads = g.backward(objective)?.param_grads(&model.params);
    *rng = g.take_rng().expect("training graph owns an rng");
    drop(g);
    adam.update(&mut model.params, &grads, rate)?;
    Ok(breakdown)
}

/// Losses over `batches` without dropout, token-weighted.
pub fn evaluate_losses(
    model: &Model,
    batches: &[Batch],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut parts = Vec::with_capacity(batches.len());
    for b in batches {
        let mut g = Graph::eval();
        parts.push(forward_losses(&mut g, model, b, cfg)?.1);
    }
    let lambda = if model.future.is_some() {
        cfg.lambda
    } else {
        0.0
    };
    Ok(LossBreakdown::weighted_mean(&parts, lambda))
}

/// Greedy token accuracy and corpus BLEU of `model` on `pairs`.
pub fn decode_metrics(
    model: &Model,
    pairs: &[SentencePair],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    decode: &DecodeConfig,
) -> Result<(f64, f64)> {
    let sources: Vec<Vec<usize>> = pairs.iter().map(|p| src_vocab.encode(&p.source)).collect();
    let hyps = greedy_decode(model, &sources, decode)?;
    let hyp_tokens: Vec<Vec<String>> = hyps.iter().map(|h| tgt_vocab.decode(&h.tokens)).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.target.clone()).collect();
    let acc = token_accuracy(&hyp_tokens, &refs)?;
    let hyp_lines: Vec<String> = hyp_tokens.iter().map(|t| t.join(" ")).collect();
    let ref_lines: Vec<String> = refs.iter().map(|t| t.join(" ")).collect();
    Ok((acc, bleu4(&hyp_lines, &ref_lines)?.bleu))
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean training losses since the previous record; absent at step 0.
    pub train: Option<LossBreakdown>,
    pub dev: LossBreakdown,
    pub accuracy: f64,
    pub bleu: f64,
}

pub const METRICS_HEADER: &str =
    "step\tlr\ttrain_ce\ttrain_future\ttrain_joint\tdev_ce\tdev_future\tdev_joint\tdev_accuracy\tdev_bleu";

impl ValidationRecord {
    /// Tab-separated row matching [`METRICS_HEADER`]. Future columns of the
    /// baseline and the train columns at step 0 are `-`.
    pub fn to_row(&self, has_future: bool) -> String {
        let f = |v: f64| format!("{v:.6}");
        let fut = |v: f64| if has_future { f(v) } else { "-".to_string() };
        let (tce, tfu, tjo) = match &self.train {
            Some(t) => (f(t.ce), fut(t.future), f(t.joint)),
            None => ("-".into(), "-".into(), "-".into()),
        };
        [
            self.step.to_string(),
            format!("{:.6e}", self.lr),
            tce,
            tfu,
            tjo,
            f(self.dev.ce),
            fut(self.dev.future),
            f(self.dev.joint),
            f(self.accuracy),
            format!("{:.4}", self.bleu),
        ]
        .join("\t")
    }
}

/// Where the next batch comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DataCursor {
    pub epoch: u64,
    pub batch: usize,
}

/// Mutable training state; everything a checkpoint needs to resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    pub step: usize,
    /// Dropout randomness.
    pub rng: ChaCha8Rng,
    pub cursor: DataCursor,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        let optimizer = Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        TrainState {
            model,
            optimizer,
            step: 0,
            rng,
            cursor: DataCursor::default(),
        }
    }
}

pub struct TrainData<'a> {
    pub train: &'a [SentencePair],
    pub dev: &'a [SentencePair],
    pub src_vocab: &'a Vocabulary,
    pub tgt_vocab: &'a Vocabulary,
}

/// Progress notifications from [`train`].
pub enum TrainEvent<'a> {
    Validated {
        record: &'a ValidationRecord,
        /// Lowest dev cross-entropy so far.
        is_best: bool,
        state: &'a TrainState,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<ValidationRecord>,
    /// Parameters at the record with the lowest dev cross-entropy.
    pub best: Model,
    pub best_step: usize,
    pub last: TrainState,
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch)
}

/// Trains until `max_steps` (or the accuracy target), validating at step 0,
/// every `validate_every` steps, and at the end.
pub fn train(
    mut state: TrainState,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    decode: &DecodeConfig,
    mut observer: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(Error::input(
            "training and dev corpora must both be non-empty",
        ));
    }
    let d_model = state.model.config.d_model;
    let dev_batches = sequential_batches(data.dev, data.src_vocab, data.tgt_vocab, cfg.batch_size)?;
    let n_decode = match cfg.validation_sentences {
        0 => data.dev.len(),
        n => n.min(data.dev.len()),
    };
    let dev_decode = &data.dev[..n_decode];
    let lambda = if state.model.future.is_some() {
        cfg.lambda
    } else {
        0.0
    };

    let mut records = Vec::new();
    let mut best: Option<(f64, Model, usize)> = None;
    let mut since_last: Vec<LossBreakdown> = Vec::new();
    let mut batches = make_batches(
        data.train,
        data.src_vocab,
        data.tgt_vocab,
        cfg.batch_size,
        epoch_seed(cfg.seed, state.cursor.epoch),
    )?;

    loop {
        let due = state.step.is_multiple_of(cfg.validate_every) || state.step >= cfg.max_steps;
        if due
            && records
                .last()
                .is_none_or(|r: &ValidationRecord| r.step != state.step)
        {
            let dev = evaluate_losses(&state.model, &dev_batches, cfg)?;
            let (accuracy, bleu) = decode_metrics(
                &state.model,
                dev_decode,
                data.src_vocab,
                data.tgt_vocab,
                decode,
            )?;
            let train =
                (!since_last.is_empty()).then(|| LossBreakdown::weighted_mean(&since_last, lambda));
            since_last.clear();
            let record = ValidationRecord {
                step: state.step,
                lr: cfg.lr_scale * lr_schedule(state.step.max(1), d_model, cfg.warmup_steps),
                train,
                dev,
                accuracy,
                bleu,
            };
            let is_best = best.as_ref().is_none_or(|(ce, _, _)| record.dev.ce < *ce);
            if is_best {
                best = Some((record.dev.ce, state.model.clone(), state.step));
            }
            observer(TrainEvent::Validated {
                record: &record,
                is_best,
                state: &state,
            })?;
            let reached = cfg.stop_at_accuracy.is_some_and(|t| record.accuracy >= t);
            records.push(record);
            if reached {
                break;
            }
        }
        if state.step >= cfg.max_steps {
            break;
        }
        if state.cursor.batch >= batches.len() {
            state.cursor = DataCursor {
                epoch: state.cursor.epoch + 1,
                batch: 0,
            };
            batches = make_batches(
                data.train,
                data.src_vocab,
                data.tgt_vocab,
                cfg.batch_size,
                epoch_seed(cfg.seed, state.cursor.epoch),
            )?;
        }
        let batch = &batches[state.cursor.batch];
        state.cursor.batch += 1;
        let rate = cfg.lr_scale * lr_schedule(state.step + 1, d_model, cfg.warmup_steps);
        let TrainState {
            model,
            optimizer,
            rng,
            step,
            ..
        } = &mut state;
        let loss = train_step(model, optimizer, batch, cfg, rate, rng).map_err(|e| match e {
            Error::Training(msg) => Error::Training(format!("step {}: {msg}", *step + 1)),
            other => other,
        })?;
        since_last.push(loss);
        state.step += 1;
    }
    let (_, best, best_step) = best.expect("at least one validation ran");
    Ok(TrainOutcome {
        records,
        best,
        best_step,
        last: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testutil::{set, tiny};
    use crate::model::Variant;

    #[test]
    fn schedule_peaks_at_warmup() {
        assert_eq!(lr_schedule(1, 64, 400), 1.5625e-5);
        assert_eq!(lr_schedule(400, 64, 400), 0.00625);
        assert_eq!(lr_schedule(1600, 64, 400), 0.003125);
        assert_eq!(lr_schedule(0, 64, 400), lr_schedule(1, 64, 400));
    }

    #[test]
    fn adam_two_scalar_steps() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0));
        let mut adam = Adam::new(&store, 0.9, 0.98, 1e-9);
        let want = [0.9000000001999999, 0.8732892289124211];
        for (g, w) in [0.5, -0.25].into_iter().zip(want) {
            adam.update(&mut store, &[Tensor::scalar(g)], 0.1).unwrap();
            assert!(
                (store.get(id).item() - w).abs() < 1e-15,
                "{} vs {w}",
                store.get(id).item()
            );
        }
    }

    fn hand_batch() -> (Batch, Tensor) {
        let batch = Batch::from_ids(&[vec![4]], &[vec![4]]).unwrap();
        let row = [0.0, 1.0, 2.0, -1.0, 0.5];
        (batch, Tensor::new(&[1, 2, 5], [row, row].concat()).unwrap())
    }

    #[test]
    fn smoothed_cross_entropy_hand_case() {
        let (batch, logits) = hand_batch();
        let mut g = Graph::eval();
        let l = g.constant(logits);
        let ce = ce_loss(&mut g, l, &batch, 0.1).unwrap();
        assert!((g.value(ce).item() - 1.4077712729611296).abs() < 1e-14);
    }

    #[test]
    fn future_loss_skips_the_first_position_by_default() {
        let (batch, logits) = hand_batch();
        assert_eq!(future_mask(&batch, false), vec![false, true]);
        assert_eq!(future_mask(&batch, true), vec![true, true]);
        let mut g = Graph::eval();
        let l = g.constant(logits);
        let without = future_loss(&mut g, l, &batch, 0.1, false).unwrap();
        let with = future_loss(&mut g, l, &batch, 0.1, true).unwrap();
        assert!((g.value(without).item() - 0.7577712729611294).abs() < 1e-14);
        assert!((g.value(with).item() - 1.4077712729611296).abs() < 1e-14);
    }

    #[test]
    fn zero_lambda_objective_is_the_cross_entropy_node() {
        let mut g = Graph::eval();
        let ce = g.constant(Tensor::scalar(2.0));
        let fut = g.constant(Tensor::scalar(5.0));
        assert_eq!(joint_loss(&mut g, ce, fut, 0.0).unwrap(), ce);
        let j = joint_loss(&mut g, ce, fut, 0.5).unwrap();
        assert_eq!(g.value(j).item(), 4.5);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut m = tiny(8, 2, 9, Variant::Model1, 0);
        let n = m.params.get(m.transformer.out_w).numel();
        set(&mut m, "out.w_w", &vec![f64::NAN; n]);
        let batch = Batch::from_ids(&[vec![4, 5]], &[vec![6]]).unwrap();
        let mut g = Graph::eval();
        let err = forward_losses(&mut g, &m, &batch, &TrainConfig::desk()).unwrap_err();
        assert!(matches!(err, Error::Training(_)), "{err}");
    }

    #[test]
    fn weighted_mean_weights_by_tokens() {
        let a = LossBreakdown {
            ce: 1.0,
            future: 2.0,
            joint: 0.0,
            tokens: 1,
            future_tokens: 1,
        };
        let b = LossBreakdown {
            ce: 4.0,
            future: 5.0,
            joint: 0.0,
            tokens: 3,
            future_tokens: 2,
        };
        let m = LossBreakdown::weighted_mean(&[a, b], 0.5);
        assert_eq!(m.ce, 13.0 / 4.0);
        assert_eq!(m.future, 4.0);
        assert_eq!(m.joint, 13.0 / 4.0 + 2.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::paper().validate().is_ok());
        let bad = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::desk()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            warmup_steps: 0,
            ..TrainConfig::desk()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
