//! Training objective: bias-weighted contrastive alignment between brain
//! embeddings and image embeddings, optionally regularized by feature
//! distillation against a frozen snapshot of the encoder.
//!
//! The contrastive term treats matching (z, c) pairs as positives and every
//! other embedding in the batch as a negative; each sample's loss is scaled
//! by a weight that grows as the behavioral signal for its session decays,
//! so late, unreliable sessions cannot dominate training. Distillation
//! compares current hidden features to the snapshot's, either by squared
//! Euclidean distance or by a scale-free angular distance.

use thiserror::Error;

use crate::encoder::{self, EncoderConfig, EncoderError, EncoderParams, Snapshot};
use crate::synth::SessionMeta;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("contrastive batch needs at least 2 samples, got {got}")]
    BatchTooSmall { got: usize },
    #[error("{which} must lie in [0, 1], got {value}")]
    RateOutOfRange { which: &'static str, value: f64 },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("got {got} weights for a batch of {batch}")]
    WeightCount { got: usize, batch: usize },
    #[error("embedding shapes differ: {lhs:?} vs {rhs:?}")]
    EmbeddingShape { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("snapshot exposes {prev} taps, current encoder {cur}")]
    TapMismatch { prev: usize, cur: usize },
    #[error("cl_loss called with DistillKind::None")]
    DistillDisabled,
}

/// Which decaying behavioral signal drives the per-sample weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasModel {
    /// Unweighted: plain contrastive loss.
    None,
    /// Weight by response accuracy: w = e^(1 − r(t)).
    ResponseAccuracy,
    /// Weight by activation fraction: w = e^(1 − a(t)).
    BrainActivation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillKind {
    None,
    /// Mean squared Euclidean distance between features.
    L2,
    /// Angular feature matching: per row, (1 − cosine)², mean over the batch.
    Afm,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda_cl: f64,
    pub bias: BiasModel,
    pub distill: DistillKind,
    /// Also average in the transposed contrastive direction.
    pub symmetric_contrastive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            lambda_cl: 1.0,
            bias: BiasModel::None,
            distill: DistillKind::None,
            symmetric_contrastive: false,
        }
    }
}

/// Per-sample de-biasing weight from one session's metadata.
pub fn bias_weight(model: BiasModel, meta: &SessionMeta) -> Result<f64, LossError> {
    let check = |which: &'static str, v: f64| -> Result<f64, LossError> {
        if !(0.0..=1.0).contains(&v) {
            return Err(LossError::RateOutOfRange { which, value: v });
        }
        Ok(v)
    };
    Ok(match model {
        BiasModel::None => 1.0,
        BiasModel::ResponseAccuracy => {
            (1.0 - check("response_rate", meta.response_rate)?).exp()
        }
        BiasModel::BrainActivation => (1.0 - check("activation", meta.activation)?).exp(),
    })
}

/// De-biased contrastive loss.
///
/// Both embedding sets are normalized internally; similarities are scaled by
/// 1/temperature, the log-softmax for each image embedding runs over all
/// brain embeddings in the batch, and sample i's negative log-likelihood at
/// the matching entry is multiplied by `weights[i]`. Returns the mean over
/// the batch (a scalar tracked on `tape`).
pub fn dcl_loss(
    tape: &mut Tape,
    z: &Tensor,
    c: &Tensor,
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<Tensor, LossError> {
    if z.shape() != c.shape() {
        return Err(LossError::EmbeddingShape {
            lhs: z.shape().to_vec(),
            rhs: c.shape().to_vec(),
        });
    }
    if z.shape().len() != 2 {
        return Err(TensorError::NotMatrix {
            op: "dcl_loss",
            shape: z.shape().to_vec(),
        }
        .into());
    }
    let batch = z.rows();
    if batch < 2 {
        return Err(LossError::BatchTooSmall { got: batch });
    }
    if weights.len() != batch {
        return Err(LossError::WeightCount {
            got: weights.len(),
            batch,
        });
    }
    if !(cfg.temperature > 0.0) {
        return Err(LossError::BadTemperature(cfg.temperature));
    }

    let z_hat = tape.rowwise_l2_normalize(z)?;
    let c_hat = tape.rowwise_l2_normalize(c)?;

    // −(1/B) Σ_i w_i · log softmax over brain embeddings at the matching
    // entry, written as an elementwise mask so the whole thing stays on the
    // tape: mask[i,i] = −w_i/B.
    let mask = Tensor::from_fn(batch, batch, |i, j| {
        if i == j {
            -weights[i] / batch as f64
        } else {
            0.0
        }
    })?;

    // rows of `sim` are one image embedding against every brain embedding
    let z_t = tape.transpose(&z_hat)?;
    let sim = tape.matmul(&c_hat, &z_t)?;
    let logits = tape.scale(&sim, 1.0 / cfg.temperature)?;
    let log_probs = tape.log_softmax_rows(&logits)?;
    let masked = tape.mul(&log_probs, &mask)?;
    let loss = tape.sum(&masked)?;

    if !cfg.symmetric_contrastive {
        return Ok(loss);
    }
    // transposed direction: each brain embedding against every image embedding
    let c_t = tape.transpose(&c_hat)?;
    let sim_t = tape.matmul(&z_hat, &c_t)?;
    let logits_t = tape.scale(&sim_t, 1.0 / cfg.temperature)?;
    let log_probs_t = tape.log_softmax_rows(&logits_t)?;
    let masked_t = tape.mul(&log_probs_t, &mask)?;
    let loss_t = tape.sum(&masked_t)?;
    let both = tape.add(&loss, &loss_t)?;
    Ok(tape.scale(&both, 0.5)?)
}

/// Angular feature distance: rows are normalized, and each row contributes
/// (1 − cosine)²; the result is the batch mean. Gradient flows only into
/// `cur` — `prev` comes from a frozen snapshot and is treated as a constant.
pub fn afm_distance(tape: &mut Tape, prev: &Tensor, cur: &Tensor) -> Result<Tensor, LossError> {
    check_feature_pair(prev, cur)?;
    let prev_hat = prev.rowwise_l2_normalize()?; // constant: plain value op
    let cur_hat = tape.rowwise_l2_normalize(cur)?;
    let prod = tape.mul(&cur_hat, &prev_hat)?;
    let cosine = tape.row_sum(&prod)?;
    let ones = Tensor::from_fn(prev.rows(), 1, |_, _| 1.0)?;
    let gap = tape.sub(&ones, &cosine)?;
    let sq = tape.square(&gap)?;
    Ok(tape.mean(&sq)?)
}

/// Mean (over rows) squared Euclidean distance. Same gradient discipline as
/// [`afm_distance`]: `prev` is constant.
pub fn l2_distill_distance(
    tape: &mut Tape,
    prev: &Tensor,
    cur: &Tensor,
) -> Result<Tensor, LossError> {
    check_feature_pair(prev, cur)?;
    let diff = tape.sub(cur, &prev.detached())?;
    let sq = tape.square(&diff)?;
    let total = tape.sum(&sq)?;
    Ok(tape.scale(&total, 1.0 / prev.rows() as f64)?)
}

fn check_feature_pair(prev: &Tensor, cur: &Tensor) -> Result<(), LossError> {
    if prev.shape().len() != 2 {
        return Err(TensorError::NotMatrix {
            op: "distill distance",
            shape: prev.shape().to_vec(),
        }
        .into());
    }
    if prev.shape() != cur.shape() {
        return Err(LossError::EmbeddingShape {
            lhs: prev.shape().to_vec(),
            rhs: cur.shape().to_vec(),
        });
    }
    Ok(())
}

/// Distillation term: the chosen distance averaged over corresponding
/// intermediate feature taps.
pub fn cl_loss(
    tape: &mut Tape,
    prev_taps: &[Tensor],
    cur_taps: &[Tensor],
    kind: DistillKind,
) -> Result<Tensor, LossError> {
    if kind == DistillKind::None {
        return Err(LossError::DistillDisabled);
    }
    if prev_taps.len() != cur_taps.len() || prev_taps.is_empty() {
        return Err(LossError::TapMismatch {
            prev: prev_taps.len(),
            cur: cur_taps.len(),
        });
    }
    let mut acc: Option<Tensor> = None;
    for (prev, cur) in prev_taps.iter().zip(cur_taps) {
        let d = match kind {
            DistillKind::Afm => afm_distance(tape, prev, cur)?,
            DistillKind::L2 => l2_distill_distance(tape, prev, cur)?,
            DistillKind::None => unreachable!(),
        };
        acc = Some(match acc {
            None => d,
            Some(a) => tape.add(&a, &d)?,
        });
    }
    Ok(tape.scale(&acc.expect("at least one tap"), 1.0 / prev_taps.len() as f64)?)
}

/// Full training objective for one batch: contrastive term, plus
/// `lambda_cl ×` the distillation term when a snapshot is present and
/// distillation is enabled. Runs the encoder forward on `tape` (track the
/// params first if their gradients are needed) and the snapshot forward with
/// no recording.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    params: &EncoderParams,
    enc_cfg: &EncoderConfig,
    snapshot: Option<&Snapshot>,
    x: &Tensor,
    c: &Tensor,
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<Tensor, LossError> {
    let trace = encoder::forward(params, enc_cfg, x, Some(tape))?;
    let dcl = dcl_loss(tape, &trace.output, c, weights, cfg)?;
    match snapshot {
        Some(snap) if cfg.distill != DistillKind::None => {
            let prev = snap.forward(x)?;
            let cl = cl_loss(tape, &prev.taps, &trace.taps, cfg.distill)?;
            let scaled = tape.scale(&cl, cfg.lambda_cl)?;
            Ok(tape.add(&dcl, &scaled)?)
        }
        _ => Ok(dcl),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn meta(r: f64, a: f64) -> SessionMeta {
        SessionMeta {
            session: 1,
            response_rate: r,
            consistency: r,
            activation: a,
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[0xAB]);
        Tensor::from_vec(
            vec![rows, cols],
            (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Scalar-loop reference for the weighted contrastive loss: no tensor
    /// ops, just explicit sums, kept deliberately naive.
    fn dcl_oracle(z: &Tensor, c: &Tensor, weights: &[f64], tau: f64, symmetric: bool) -> f64 {
        let b = z.rows();
        let d = z.cols();
        let normalize = |m: &Tensor| -> Vec<Vec<f64>> {
            (0..b)
                .map(|i| {
                    let norm: f64 = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    m.row(i).iter().map(|v| v / norm).collect()
                })
                .collect()
        };
        let zs = normalize(z);
        let cs = normalize(c);
        let dot = |a: &[f64], b: &[f64]| -> f64 { (0..d).map(|k| a[k] * b[k]).sum() };
        let direction = |qs: &[Vec<f64>], gs: &[Vec<f64>]| -> f64 {
            // for each anchor i, softmax over gallery entries j of exp(q_i·g_j/τ)
            let mut total = 0.0;
            for i in 0..b {
                let mut denom = 0.0;
                for g in gs.iter() {
                    denom += (dot(&qs[i], g) / tau).exp();
                }
                let p = (dot(&qs[i], &gs[i]) / tau).exp() / denom;
                total += -p.ln() * weights[i];
            }
            total / b as f64
        };
        // primary: anchor is the image embedding, gallery is brain embeddings
        let forward = direction(&cs, &zs);
        if !symmetric {
            return forward;
        }
        0.5 * (forward + direction(&zs, &cs))
    }

    #[test]
    fn bias_weight_closed_forms() {
        assert_eq!(bias_weight(BiasModel::None, &meta(0.2, 0.3)).unwrap(), 1.0);
        let w = bias_weight(BiasModel::ResponseAccuracy, &meta(1.0, 0.5)).unwrap();
        assert!((w - 1.0).abs() < 1e-15);
        let w = bias_weight(BiasModel::ResponseAccuracy, &meta(0.75, 0.5)).unwrap();
        assert!((w - 0.25_f64.exp()).abs() < 1e-12, "{w}");
        let w = bias_weight(BiasModel::BrainActivation, &meta(0.5, 0.8)).unwrap();
        assert!((w - 0.2_f64.exp()).abs() < 1e-12, "{w}");
    }

    #[test]
    fn bias_weight_rejects_out_of_range_rates() {
        assert!(matches!(
            bias_weight(BiasModel::ResponseAccuracy, &meta(1.2, 0.5)),
            Err(LossError::RateOutOfRange { .. })
        ));
        assert!(matches!(
            bias_weight(BiasModel::BrainActivation, &meta(0.5, -0.1)),
            Err(LossError::RateOutOfRange { .. })
        ));
    }

    #[test]
    fn bias_weight_grows_as_signal_decays() {
        let mut last = 0.0;
        for r in [1.0, 0.9, 0.7, 0.5, 0.2, 0.0] {
            let w = bias_weight(BiasModel::ResponseAccuracy, &meta(r, 0.5)).unwrap();
            assert!(w > last);
            last = w;
        }
        assert!((last - 1.0_f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn dcl_on_two_equal_similarity_pairs_is_ln_2() {
        // two orthogonal pairs arranged so all four similarities are equal
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let cfg = LossConfig {
            temperature: 1.0,
            ..Default::default()
        };
        let mut tape = Tape::new();
        let loss = dcl_loss(&mut tape, &z, &c, &[1.0, 1.0], &cfg).unwrap();
        assert!((loss.item() - 2.0_f64.ln()).abs() < 1e-12, "{}", loss.item());
    }

    #[test]
    fn dcl_with_unit_weights_is_plain_infonce() {
        let cfg = LossConfig {
            temperature: 0.1,
            ..Default::default()
        };
        for seed in 0..5 {
            let z = random_matrix(6, 8, seed);
            let c = random_matrix(6, 8, seed + 100);
            let mut tape = Tape::new();
            let loss = dcl_loss(&mut tape, &z, &c, &[1.0; 6], &cfg).unwrap();
            let oracle = dcl_oracle(&z, &c, &[1.0; 6], 0.1, false);
            assert!((loss.item() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn dcl_matches_scalar_oracle_on_random_batches() {
        for seed in 0..50u64 {
            let mut r = rng::stream(seed, &[0xD0]);
            let b = r.gen_range(2..=8);
            let d = r.gen_range(2..=16);
            let z = random_matrix(b, d, seed * 3 + 1);
            let c = random_matrix(b, d, seed * 3 + 2);
            let weights: Vec<f64> = (0..b).map(|_| r.gen_range(0.5..2.8)).collect();
            let symmetric = r.gen_bool(0.5);
            let cfg = LossConfig {
                temperature: r.gen_range(0.05..1.0),
                symmetric_contrastive: symmetric,
                ..Default::default()
            };
            let mut tape = Tape::new();
            let loss = dcl_loss(&mut tape, &z, &c, &weights, &cfg).unwrap();
            let oracle = dcl_oracle(&z, &c, &weights, cfg.temperature, symmetric);
            assert!(
                (loss.item() - oracle).abs() < 1e-10,
                "seed {seed}: {} vs {oracle}",
                loss.item()
            );
        }
    }

    #[test]
    fn dcl_is_linear_in_weights() {
        // weighted loss == (1/B) Σ w_i ℓ_i where ℓ_i are per-sample losses
        let z = random_matrix(5, 7, 21);
        let c = random_matrix(5, 7, 22);
        let weights = [1.3, 0.7, 2.0, 0.1, 1.0];
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let weighted = dcl_loss(&mut tape, &z, &c, &weights, &cfg).unwrap().item();
        let mut acc = 0.0;
        for i in 0..5 {
            let mut e = [0.0; 5];
            e[i] = 5.0; // isolates ℓ_i: mean over batch of (B·δ_ij)·ℓ_j = ℓ_i
            let mut t = Tape::new();
            acc += weights[i] * dcl_loss(&mut t, &z, &c, &e, &cfg).unwrap().item();
        }
        assert!((weighted - acc / 5.0).abs() < 1e-12);
    }

    #[test]
    fn dcl_refuses_degenerate_batches() {
        let z = random_matrix(1, 4, 1);
        let c = random_matrix(1, 4, 2);
        let mut tape = Tape::new();
        assert!(matches!(
            dcl_loss(&mut tape, &z, &c, &[1.0], &LossConfig::default()),
            Err(LossError::BatchTooSmall { got: 1 })
        ));
        let z = random_matrix(3, 4, 1);
        let c = random_matrix(3, 4, 2);
        let mut tape = Tape::new();
        assert!(matches!(
            dcl_loss(&mut tape, &z, &c, &[1.0; 2], &LossConfig::default()),
            Err(LossError::WeightCount { .. })
        ));
    }

    #[test]
    fn afm_closed_form_values() {
        let z = random_matrix(4, 6, 31);
        let neg = z.scale(-1.0);
        let mut tape = Tape::new();
        let same = afm_distance(&mut tape, &z, &z).unwrap();
        assert!(same.item().abs() < 1e-12);
        let mut tape = Tape::new();
        let opposite = afm_distance(&mut tape, &z, &neg).unwrap();
        assert!((opposite.item() - 4.0).abs() < 1e-12);
        // orthogonal rows → exactly 1
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 3.0], vec![-1.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let orth = afm_distance(&mut tape, &a, &b).unwrap();
        assert!((orth.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn afm_is_scale_invariant() {
        let z = random_matrix(5, 8, 32);
        let mut tape = Tape::new();
        let d = afm_distance(&mut tape, &z.scale(2.0), &z.scale(3.0)).unwrap();
        assert!(d.item().abs() < 1e-12);
        for seed in 0..10 {
            let a = random_matrix(4, 6, seed);
            let b = random_matrix(4, 6, seed + 50);
            let mut t1 = Tape::new();
            let base = afm_distance(&mut t1, &a, &b).unwrap().item();
            let mut t2 = Tape::new();
            let scaled = afm_distance(&mut t2, &a.scale(7.5), &b.scale(0.03)).unwrap().item();
            assert!((base - scaled).abs() < 1e-12);
            assert!((0.0..=4.0).contains(&base));
        }
    }

    #[test]
    fn afm_gradient_skips_the_snapshot_side() {
        let prev = random_matrix(3, 4, 77);
        let cur = random_matrix(3, 4, 78);
        let mut tape = Tape::new();
        let tracked_prev = tape.leaf(&prev);
        let tracked_cur = tape.leaf(&cur);
        let d = afm_distance(&mut tape, &tracked_prev, &tracked_cur).unwrap();
        tape.backward(&d).unwrap();
        // prev side went through value ops only — its leaf never joins the graph
        assert!(tape.grad(&tracked_prev).unwrap().iter().all(|&g| g == 0.0));
        assert!(tape.grad(&tracked_cur).unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn l2_distill_closed_form_values() {
        let prev = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let cur = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let mut tape = Tape::new();
        let d = l2_distill_distance(&mut tape, &prev, &cur).unwrap();
        assert!((d.item() - 25.0).abs() < 1e-12);
        // not scale-invariant: (z, 2z) with ‖z‖=1 gives exactly 1
        let z = Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let mut tape = Tape::new();
        let d = l2_distill_distance(&mut tape, &z, &z.scale(2.0)).unwrap();
        assert!((d.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cl_loss_averages_tap_distances() {
        // three taps engineered to give distances 0, 1, 4 → mean 5/3
        let z = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let orth = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let prev = vec![z.clone(), z.clone(), z.clone()];
        let cur = vec![z.clone(), orth, z.scale(-1.0)];
        let mut tape = Tape::new();
        let l = cl_loss(&mut tape, &prev, &cur, DistillKind::Afm).unwrap();
        assert!((l.item() - 5.0 / 3.0).abs() < 1e-12, "{}", l.item());
    }

    #[test]
    fn cl_loss_rejects_mismatch_and_none() {
        let z = random_matrix(2, 3, 1);
        let mut tape = Tape::new();
        assert!(matches!(
            cl_loss(&mut tape, &[z.clone()], &[z.clone(), z.clone()], DistillKind::Afm),
            Err(LossError::TapMismatch { .. })
        ));
        assert!(matches!(
            cl_loss(&mut tape, &[z.clone()], &[z.clone()], DistillKind::None),
            Err(LossError::DistillDisabled)
        ));
    }

    #[test]
    fn total_loss_composes_terms() {
        use crate::encoder::{init_encoder, Snapshot};
        let enc_cfg = EncoderConfig {
            input_dim: 6,
            hidden_dim: 8,
            tap_count: 3,
            output_dim: 4,
            init_seed: 5,
            ..Default::default()
        };
        let params = init_encoder(&enc_cfg).unwrap();
        let drifted = {
            let mut p = params.clone();
            for t in p.tensors_mut() {
                for v in t.data_mut() {
                    *v += 0.05;
                }
            }
            p
        };
        let snap = Snapshot::of(&params, &enc_cfg, 1);
        let x = random_matrix(4, 6, 61);
        let c = random_matrix(4, 4, 62);
        let w = [1.0; 4];

        let cfg_afm = LossConfig {
            distill: DistillKind::Afm,
            ..Default::default()
        };
        // components computed separately…
        let mut t = Tape::new();
        let trace = encoder::forward(&drifted, &enc_cfg, &x, Some(&mut t)).unwrap();
        let dcl = dcl_loss(&mut t, &trace.output, &c, &w, &cfg_afm).unwrap().item();
        let prev = snap.forward(&x).unwrap();
        let cl = cl_loss(&mut t, &prev.taps, &trace.taps, DistillKind::Afm)
            .unwrap()
            .item();
        assert!(cl > 0.0);
        // …must sum to the composed objective (λ = 1)
        let mut t2 = Tape::new();
        let total = total_loss(&mut t2, &drifted, &enc_cfg, Some(&snap), &x, &c, &w, &cfg_afm)
            .unwrap()
            .item();
        assert!((total - (dcl + cl)).abs() < 1e-12);

        // no snapshot → the contrastive term alone
        let mut t3 = Tape::new();
        let alone = total_loss(&mut t3, &drifted, &enc_cfg, None, &x, &c, &w, &cfg_afm)
            .unwrap()
            .item();
        assert!((alone - dcl).abs() < 1e-12);

        // λ = 0 → matches the contrastive term within 1e-15
        let cfg_zero = LossConfig {
            lambda_cl: 0.0,
            distill: DistillKind::Afm,
            ..Default::default()
        };
        let mut t4 = Tape::new();
        let zero =
            total_loss(&mut t4, &drifted, &enc_cfg, Some(&snap), &x, &c, &w, &cfg_zero)
                .unwrap()
                .item();
        assert!((zero - dcl).abs() < 1e-15);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        use crate::tensor::grad_check;
        // DCL through the raw embeddings
        for seed in 0..6u64 {
            let z = random_matrix(4, 5, seed + 300);
            let c = random_matrix(4, 5, seed + 400);
            let weights = [1.1, 0.6, 1.7, 0.9];
            let cfg = LossConfig {
                temperature: 0.2,
                symmetric_contrastive: seed % 2 == 0,
                ..Default::default()
            };
            let report =
                grad_check(|tape, ps| dcl_loss(tape, &ps[0], &ps[1], &weights, &cfg), &[z, c], 1e-6)
                    .unwrap();
            assert!(report.max_rel_err < 1e-5, "seed {seed}: {:e}", report.max_rel_err);
        }
        // AFM and L2 through the current features
        for seed in 0..6u64 {
            let prev = random_matrix(3, 6, seed + 500);
            let cur = random_matrix(3, 6, seed + 600);
            let prev_for_afm = prev.clone();
            let report = grad_check(
                |tape, ps| afm_distance(tape, &prev_for_afm, &ps[0]),
                &[cur.clone()],
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "afm seed {seed}: {:e}", report.max_rel_err);
            let report = grad_check(
                |tape, ps| l2_distill_distance(tape, &prev, &ps[0]),
                &[cur],
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "l2 seed {seed}: {:e}", report.max_rel_err);
        }
    }
}
