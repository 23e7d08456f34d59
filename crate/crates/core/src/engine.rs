//! Session-incremental training engine.
//!
//! A protocol splits the session axis into an initial block plus fixed-size
//! increments. Each step warm-starts from the previous step's weights, holds
//! a frozen snapshot of them for distillation, trains on the step's sessions
//! only (optionally with a small rehearsal buffer), and is evaluated on the
//! cumulative held-out set of every session seen so far.

use std::ops::RangeInclusive;

use rand::Rng;
use thiserror::Error;

use crate::encoder::{self, EncoderConfig, EncoderError, EncoderParams, Snapshot};
use crate::losses::{self, DistillKind, LossConfig, LossError};
use crate::retrieval::{self, RetrievalConfig, RetrievalError, RetrievalRow};
use crate::rng;
use crate::synth::{Dataset, Sample, SessionMeta};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("protocol: {0}")]
    BadProtocol(String),
    #[error("training config: {0}")]
    BadTrainConfig(String),
    #[error("dataset is {got_n}×{got_d}-dimensional, encoder expects {want_n}×{want_d}")]
    DimensionMismatch {
        got_n: u32,
        got_d: u32,
        want_n: u32,
        want_d: u32,
    },
    #[error("step {step} has no training samples")]
    EmptyStep { step: u32 },
    #[error(
        "non-finite loss at step {step}, epoch {epoch}, batch {batch}: training aborted"
    )]
    NonFiniteLoss { step: u32, epoch: u32, batch: u32 },
    #[error("non-finite gradient in parameter {param} at flat index {index}")]
    NonFiniteGrad { param: usize, index: usize },
}

// ─── protocol planning ───────────────────────────────────────────────────────

/// `(N_init, N_s)`: first step trains on `n_init` sessions, every later step
/// on the next `n_step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Protocol {
    pub n_init: u32,
    pub n_step: u32,
    /// Non-incremental control: every step trains on all sessions from the
    /// first one, so nothing is ever dropped from the training set. Step
    /// boundaries and evaluation ranges are unchanged.
    #[serde(default)]
    pub joint: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            n_init: 20,
            n_step: 10,
            joint: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    /// 1-based step index.
    pub index: u32,
    /// Sessions trained on during this step (inclusive).
    pub train_sessions: (u32, u32),
    /// Cumulative evaluation range: always starts at session 1.
    pub eval_sessions: (u32, u32),
}

impl StepPlan {
    pub fn train_range(&self) -> RangeInclusive<u32> {
        self.train_sessions.0..=self.train_sessions.1
    }

    pub fn eval_range(&self) -> RangeInclusive<u32> {
        self.eval_sessions.0..=self.eval_sessions.1
    }
}

/// Expand a protocol over `n_sessions` sessions into per-step plans.
/// The step count comes out to `(n_sessions − n_init)/n_step + 1`.
pub fn plan_steps(protocol: Protocol, n_sessions: u32) -> Result<Vec<StepPlan>, EngineError> {
    if protocol.n_init == 0 || protocol.n_step == 0 {
        return Err(EngineError::BadProtocol(
            "n_init and n_step must be positive".into(),
        ));
    }
    if protocol.n_init > n_sessions {
        return Err(EngineError::BadProtocol(format!(
            "n_init {} exceeds the {} available sessions",
            protocol.n_init, n_sessions
        )));
    }
    if (n_sessions - protocol.n_init) % protocol.n_step != 0 {
        return Err(EngineError::BadProtocol(format!(
            "({n_sessions} − {}) is not divisible by the step size {}",
            protocol.n_init, protocol.n_step
        )));
    }
    let count = (n_sessions - protocol.n_init) / protocol.n_step + 1;
    let mut plans = Vec::with_capacity(count as usize);
    plans.push(StepPlan {
        index: 1,
        train_sessions: (1, protocol.n_init),
        eval_sessions: (1, protocol.n_init),
    });
    for k in 2..=count {
        let start = protocol.n_init + (k - 2) * protocol.n_step + 1;
        let end = protocol.n_init + (k - 1) * protocol.n_step;
        plans.push(StepPlan {
            index: k,
            train_sessions: (if protocol.joint { 1 } else { start }, end),
            eval_sessions: (1, end),
        });
    }
    Ok(plans)
}

// ─── optimizer ───────────────────────────────────────────────────────────────

/// Cosine decay from `lr0` at epoch 0 toward zero at `total`.
pub fn cosine_lr(epoch: u32, total: u32, lr0: f64) -> f64 {
    debug_assert!(total >= 1 && epoch <= total);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay: parameters shrink by `lr·wd` *before*
/// the bias-corrected adaptive step is applied.
pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, param_sizes: &[usize]) -> AdamW {
        AdamW {
            cfg,
            t: 0,
            m: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// One update over aligned parameter tensors and gradient slices.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&[f64]],
        lr: f64,
    ) -> Result<(), EngineError> {
        assert_eq!(params.len(), self.m.len(), "optimizer/param count mismatch");
        assert_eq!(grads.len(), self.m.len(), "optimizer/grad count mismatch");
        // reject the whole step before touching any parameter
        for (pi, g) in grads.iter().enumerate() {
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(EngineError::NonFiniteGrad { param: pi, index });
            }
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.data_mut();
            debug_assert_eq!(data.len(), g.len());
            for i in 0..data.len() {
                data[i] *= 1.0 - lr * self.cfg.weight_decay;
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
        }
        Ok(())
    }
}

// ─── training ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: u32,
    pub batch_size: u32,
    /// Fraction of the previous step's training set replayed alongside new
    /// sessions. Non-zero disables distillation.
    pub rehearsal_fraction: f64,
    pub run_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2.5e-4,
            epochs: 50,
            batch_size: 16,
            rehearsal_fraction: 0.0,
            run_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.lr0 > 0.0) {
            return Err(EngineError::BadTrainConfig("lr0 must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(EngineError::BadTrainConfig("epochs must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(EngineError::BadTrainConfig(
                "batch_size must be ≥ 2 (contrastive batches need a negative)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.rehearsal_fraction) {
            return Err(EngineError::BadTrainConfig(
                "rehearsal_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Uniform sample (without replacement) of `round(fraction·len)` items,
/// deterministic in `seed`. Returned in ascending index order.
pub fn rehearsal_sample(samples: &[Sample], fraction: f64, seed: u64) -> Vec<Sample> {
    let k = (fraction * samples.len() as f64).round() as usize;
    let k = k.min(samples.len());
    if k == 0 {
        return Vec::new();
    }
    let mut r = rng::stream(seed, &[0x7E]);
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    for j in 0..k {
        let pick = j + r.gen_range(0..idx.len() - j);
        idx.swap(j, pick);
    }
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| samples[i].clone()).collect()
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train the encoder in place on one step's samples.
///
/// Epoch order is shuffled from a stream derived from
/// `(run_seed, step, epoch)`; batches are consecutive chunks of that order.
/// A trailing single-sample chunk joins the previous batch, since a
/// contrastive batch needs at least one negative. When
/// `rehearsal_fraction > 0` the distillation term is disabled (the rehearsal
/// buffer already carries the old sessions' signal).
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut EncoderParams,
    enc_cfg: &EncoderConfig,
    snapshot: Option<&Snapshot>,
    data: &[Sample],
    sessions: &[SessionMeta],
    train: &TrainConfig,
    loss_cfg: &LossConfig,
    step_index: u32,
) -> Result<StepOutcome, EngineError> {
    train.validate()?;
    if data.len() < 2 {
        return Err(EngineError::EmptyStep { step: step_index });
    }
    let effective = if train.rehearsal_fraction > 0.0 {
        LossConfig {
            distill: DistillKind::None,
            ..loss_cfg.clone()
        }
    } else {
        loss_cfg.clone()
    };

    // per-sample weights are fixed for the whole step
    let weights: Vec<f64> = data
        .iter()
        .map(|s| losses::bias_weight(effective.bias, &sessions[(s.session - 1) as usize]))
        .collect::<Result<_, _>>()?;

    let n = data[0].x.len();
    let d = data[0].c.len();
    let batch = train.batch_size as usize;
    let mut opt = AdamW::new(
        AdamWConfig::default(),
        &params.tensors().iter().map(|t| t.numel()).collect::<Vec<_>>(),
    );

    let mut epoch_losses = Vec::with_capacity(train.epochs as usize);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..train.epochs {
        let lr = cosine_lr(epoch, train.epochs, train.lr0);
        let mut r = rng::stream(train.run_seed, &[0x5F, step_index as u64, epoch as u64]);
        // Fisher–Yates over the sample order
        for i in (1..order.len()).rev() {
            let j = r.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut ranges: Vec<(usize, usize)> = Vec::with_capacity(order.len() / batch + 1);
        let mut start = 0;
        while start < order.len() {
            let end = (start + batch).min(order.len());
            ranges.push((start, end));
            start = end;
        }
        if let [.., prev, last] = ranges.as_mut_slice() {
            if last.1 - last.0 < 2 {
                prev.1 = last.1;
                ranges.pop();
            }
        }

        let mut loss_acc = 0.0;
        for (bi, &(lo, hi)) in ranges.iter().enumerate() {
            let members = &order[lo..hi];
            let mut x = Vec::with_capacity(members.len() * n);
            let mut c = Vec::with_capacity(members.len() * d);
            let mut w = Vec::with_capacity(members.len());
            for &si in members {
                x.extend_from_slice(&data[si].x);
                c.extend_from_slice(&data[si].c);
                w.push(weights[si]);
            }
            let x = Tensor::from_vec(vec![members.len(), n], x)?;
            let c = Tensor::from_vec(vec![members.len(), d], c)?;

            let mut tape = Tape::new();
            let tracked = params.track(&mut tape);
            let loss = losses::total_loss(
                &mut tape, &tracked, enc_cfg, snapshot, &x, &c, &w, &effective,
            )?;
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                return Err(EngineError::NonFiniteLoss {
                    step: step_index,
                    epoch,
                    batch: bi as u32,
                });
            }
            tape.backward(&loss)?;
            let grads: Vec<Vec<f64>> = tracked
                .tensors()
                .iter()
                .map(|t| tape.grad(t).map(|g| g.to_vec()))
                .collect::<Result<_, _>>()?;
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            let mut tensors = params.tensors_mut();
            opt.step(&mut tensors, &grad_refs, lr)?;
            loss_acc += loss_value;
        }
        epoch_losses.push(loss_acc / ranges.len() as f64);
    }
    Ok(StepOutcome { epoch_losses })
}

// ─── protocol runner ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub retrieval: RetrievalConfig,
}

#[derive(Debug)]
pub struct StepRecord {
    pub plan: StepPlan,
    pub epoch_losses: Vec<f64>,
    /// Both retrieval directions on the cumulative test set.
    pub reports: [RetrievalRow; 2],
    /// Weights as they stood when the step finished.
    pub params: EncoderParams,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub steps: Vec<StepRecord>,
}

impl RunOutcome {
    pub fn rows(&self) -> Vec<RetrievalRow> {
        self.steps
            .iter()
            .flat_map(|s| s.reports.iter().cloned())
            .collect()
    }
}

/// Run the full session-incremental protocol over a dataset.
pub fn run_protocol(dataset: &Dataset, cfg: &RunConfig) -> Result<RunOutcome, EngineError> {
    if dataset.header.input_dim as usize != cfg.encoder.input_dim
        || dataset.header.embed_dim as usize != cfg.encoder.output_dim
    {
        return Err(EngineError::DimensionMismatch {
            got_n: dataset.header.input_dim,
            got_d: dataset.header.embed_dim,
            want_n: cfg.encoder.input_dim as u32,
            want_d: cfg.encoder.output_dim as u32,
        });
    }
    let plans = plan_steps(cfg.protocol, dataset.header.n_sessions)?;
    let mut params = encoder::init_encoder(&cfg.encoder)?;
    let mut snapshot: Option<Snapshot> = None;
    let mut prev_train: Vec<Sample> = Vec::new();
    let mut steps = Vec::with_capacity(plans.len());

    for plan in plans {
        let mut data: Vec<Sample> = dataset
            .train_indices(plan.train_range())
            .into_iter()
            .map(|i| dataset.samples[i].clone())
            .collect();
        if cfg.train.rehearsal_fraction > 0.0 && !prev_train.is_empty() {
            let seed = rng::derive_seed(cfg.train.run_seed, &[0x4E, plan.index as u64]);
            let mut retained =
                rehearsal_sample(&prev_train, cfg.train.rehearsal_fraction, seed);
            data.append(&mut retained);
        }
        if data.is_empty() {
            return Err(EngineError::EmptyStep { step: plan.index });
        }

        let outcome = train_step(
            &mut params,
            &cfg.encoder,
            snapshot.as_ref(),
            &data,
            &dataset.sessions,
            &cfg.train,
            &cfg.loss,
            plan.index,
        )?;
        snapshot = Some(Snapshot::of(&params, &cfg.encoder, plan.index));
        prev_train = data;

        let reports = retrieval::evaluate_step(
            &params,
            &cfg.encoder,
            dataset,
            plan.eval_range(),
            plan.index,
            &cfg.retrieval,
        )?;
        steps.push(StepRecord {
            plan,
            epoch_losses: outcome.epoch_losses,
            reports,
            params: params.clone(),
        });
    }
    Ok(RunOutcome { steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_counts_for_the_reference_setups() {
        // over 40 sessions: (15,5) → 6, (20,10) → 3, (20,2) → 11, (20,5) → 5
        for (n_init, n_step, want) in [(15, 5, 6), (20, 10, 3), (20, 2, 11), (20, 5, 5)] {
            let plans = plan_steps(Protocol { n_init, n_step, joint: false }, 40).unwrap();
            assert_eq!(plans.len(), want, "({n_init},{n_step})");
        }
    }

    #[test]
    fn plans_tile_the_session_axis() {
        let plans = plan_steps(Protocol { n_init: 20, n_step: 10, joint: false }, 40).unwrap();
        assert_eq!(plans[0].train_sessions, (1, 20));
        assert_eq!(plans[1].train_sessions, (21, 30));
        assert_eq!(plans[2].train_sessions, (31, 40));
        for (i, p) in plans.iter().enumerate() {
            assert_eq!(p.index as usize, i + 1);
            assert_eq!(p.eval_sessions, (1, p.train_sessions.1));
        }
        // contiguity
        for w in plans.windows(2) {
            assert_eq!(w[0].train_sessions.1 + 1, w[1].train_sessions.0);
        }
    }

    #[test]
    fn joint_mode_trains_on_everything_seen_so_far() {
        let plans = plan_steps(
            Protocol { n_init: 20, n_step: 10, joint: true },
            40,
        )
        .unwrap();
        assert_eq!(plans.len(), 3);
        for p in &plans {
            assert_eq!(p.train_sessions.0, 1);
            assert_eq!(p.train_sessions, p.eval_sessions);
        }
        assert_eq!(plans[2].train_sessions, (1, 40));
    }

    #[test]
    fn indivisible_protocols_are_rejected() {
        assert!(matches!(
            plan_steps(Protocol { n_init: 20, n_step: 3, joint: false }, 40),
            Err(EngineError::BadProtocol(_))
        ));
        assert!(matches!(
            plan_steps(Protocol { n_init: 50, n_step: 5, joint: false }, 40),
            Err(EngineError::BadProtocol(_))
        ));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(0, 50, 2.5e-4) - 2.5e-4).abs() < 1e-18);
        assert!((cosine_lr(25, 50, 2.5e-4) - 1.25e-4).abs() < 1e-18);
        assert!(cosine_lr(50, 50, 2.5e-4).abs() < 1e-18);
        // monotone decreasing
        let mut last = f64::INFINITY;
        for e in 0..=50 {
            let lr = cosine_lr(e, 50, 1.0);
            assert!(lr < last);
            last = lr;
        }
    }

    #[test]
    fn adamw_drives_a_quadratic_to_zero() {
        // f(θ) = θ₀² + θ₁², ∇f = 2θ, from (1, −1)
        let mut theta = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[2]);
        for _ in 0..200 {
            let g: Vec<f64> = theta.data().iter().map(|v| 2.0 * v).collect();
            opt.step(&mut [&mut theta], &[&g], 0.05).unwrap();
        }
        let norm: f64 = theta.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "‖θ‖ = {norm}");
    }

    #[test]
    fn adamw_zero_grad_zero_decay_leaves_params_untouched() {
        let mut theta = Tensor::from_rows(&[vec![0.7, -0.2, 1.5]]).unwrap();
        let before: Vec<u64> = theta.data().iter().map(|v| v.to_bits()).collect();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[3]);
        for _ in 0..5 {
            opt.step(&mut [&mut theta], &[&[0.0, 0.0, 0.0]], 0.1).unwrap();
        }
        let after: Vec<u64> = theta.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn adamw_decay_alone_shrinks_params() {
        let mut theta = Tensor::from_rows(&[vec![2.0]]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[1]);
        opt.step(&mut [&mut theta], &[&[0.0]], 0.1).unwrap();
        // decoupled decay: ×(1 − 0.1·0.01); zero grads add nothing
        assert!((theta.data()[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_non_finite_gradients() {
        let mut theta = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[2]);
        let err = opt
            .step(&mut [&mut theta], &[&[0.1, f64::NAN]], 0.1)
            .unwrap_err();
        assert!(matches!(
            err,
            EngineError::NonFiniteGrad { param: 0, index: 1 }
        ));
        // the step was rejected before mutating anything
        assert_eq!(theta.data(), &[1.0, 2.0]);
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        let cfg = crate::synth::GenConfig {
            n_sessions: 4,
            samples_per_session: 20,
            input_dim: 8,
            embed_dim: 4,
            seed,
            ..Default::default()
        };
        crate::synth::generate(&cfg).unwrap()
    }

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            input_dim: 8,
            hidden_dim: 16,
            tap_count: 2,
            output_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn training_reduces_loss_and_replays_bit_identically() {
        let data = tiny_dataset(7);
        let enc = tiny_encoder();
        let train = TrainConfig {
            epochs: 12,
            batch_size: 8,
            run_seed: 3,
            ..Default::default()
        };
        let samples: Vec<Sample> = data
            .train_indices(1..=4)
            .into_iter()
            .map(|i| data.samples[i].clone())
            .collect();
        let loss_cfg = LossConfig::default();

        let run = || {
            let mut params = encoder::init_encoder(&enc).unwrap();
            let out = train_step(
                &mut params, &enc, None, &samples, &data.sessions, &train, &loss_cfg, 1,
            )
            .unwrap();
            (params, out)
        };
        let (p1, o1) = run();
        let (p2, o2) = run();

        let first = o1.epoch_losses[0];
        let last = *o1.epoch_losses.last().unwrap();
        assert!(last < first, "loss did not drop: {first} → {last}");
        assert_eq!(o1.epoch_losses.len(), 12);
        let bits = |p: &EncoderParams| -> Vec<u64> {
            p.tensors()
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&p1), bits(&p2));
        assert_eq!(
            o1.epoch_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            o2.epoch_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn protocol_run_chains_steps_and_evaluates_cumulatively() {
        let data = tiny_dataset(11);
        let cfg = RunConfig {
            protocol: Protocol { n_init: 2, n_step: 1, joint: false },
            train: TrainConfig {
                epochs: 4,
                batch_size: 8,
                run_seed: 5,
                ..Default::default()
            },
            loss: LossConfig {
                distill: crate::losses::DistillKind::Afm,
                ..Default::default()
            },
            encoder: tiny_encoder(),
            retrieval: RetrievalConfig {
                n_way: 4,
                trials: 3,
                seed: 2,
            },
        };
        let out = run_protocol(&data, &cfg).unwrap();
        assert_eq!(out.steps.len(), 3);
        for (i, s) in out.steps.iter().enumerate() {
            assert_eq!(s.plan.index as usize, i + 1);
            assert_eq!(s.plan.eval_sessions, (1, (i + 2) as u32));
            assert_eq!(s.reports[0].step, s.plan.index);
            assert_eq!(s.reports[0].range_end, s.plan.eval_sessions.1);
            assert_ne!(s.reports[0].direction, s.reports[1].direction);
            for r in &s.reports {
                assert!((0.0..=1.0).contains(&r.top1));
            }
        }
        // step params differ (training actually moved the weights per step)
        let flat = |p: &EncoderParams| -> Vec<u64> {
            p.tensors()
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_ne!(flat(&out.steps[0].params), flat(&out.steps[1].params));
        assert_ne!(flat(&out.steps[1].params), flat(&out.steps[2].params));
    }

    #[test]
    fn dimension_mismatch_is_rejected_before_training() {
        let data = tiny_dataset(1);
        let mut enc = tiny_encoder();
        enc.input_dim = 9;
        let cfg = RunConfig {
            protocol: Protocol { n_init: 2, n_step: 2, joint: false },
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            encoder: enc,
            retrieval: RetrievalConfig::default(),
        };
        assert!(matches!(
            run_protocol(&data, &cfg),
            Err(EngineError::DimensionMismatch { got_n: 8, want_n: 9, .. })
        ));
    }

    #[test]
    fn rehearsal_sampling_is_deterministic_and_sized() {
        let cfg = crate::synth::GenConfig {
            n_sessions: 4,
            samples_per_session: 25,
            input_dim: 6,
            embed_dim: 3,
            seed: 5,
            ..Default::default()
        };
        let data = crate::synth::generate(&cfg).unwrap();
        let a = rehearsal_sample(&data.samples, 0.1, 99);
        let b = rehearsal_sample(&data.samples, 0.1, 99);
        let c = rehearsal_sample(&data.samples, 0.1, 100);
        assert_eq!(a.len(), 10); // round(0.1·100)
        let key = |v: &[Sample]| -> Vec<(u32, u64)> {
            v.iter().map(|s| (s.session, s.x[0].to_bits())).collect()
        };
        assert_eq!(key(&a), key(&b));
        assert_ne!(key(&a), key(&c));
        // metadata rides along
        assert!(a.iter().all(|s| (1..=4).contains(&s.session)));
        assert!(rehearsal_sample(&data.samples, 0.0, 1).is_empty());
    }
}
