//! End-to-end gradient verification: every differentiable objective the
//! engine optimizes, checked against central finite differences on small
//! random instances. The CLI's `grad-check` command and the acceptance
//! harness both run this.

use rand::Rng;

use crate::encoder::{self, EncoderConfig, Snapshot};
use crate::losses::{self, BiasModel, DistillKind, LossConfig, LossError};
use crate::rng;
use crate::tensor::{grad_check, Tensor};

/// Worst observed relative error for one checked objective family.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub instances: u32,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

/// Analytic gradients must agree with finite differences to this bound.
pub const TOLERANCE: f64 = 1e-5;
const EPSILON: f64 = 1e-6;

fn rand_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(vec![rows, cols], data).expect("non-empty")
}

fn rand_weights(r: &mut impl Rng, b: usize) -> Vec<f64> {
    (0..b).map(|_| (1.0 - r.gen_range(0.0..1.0_f64)).exp()).collect()
}

/// Run every family `instances` times and report the worst error seen.
pub fn run(instances: u32) -> Result<Vec<SuiteEntry>, LossError> {
    let mut out = Vec::new();

    // ─── contrastive loss, both bias models ─────────────────────────────────
    for (name, label) in [
        ("dcl_response_accuracy", 0x01u64),
        ("dcl_brain_activation", 0x02),
    ] {
        let mut worst: f64 = 0.0;
        let mut entries = 0;
        for k in 0..instances {
            let mut r = rng::stream(0xD0, &[label, k as u64]);
            let b = r.gen_range(2..=6);
            let d = r.gen_range(2..=8);
            let cfg = LossConfig {
                temperature: [0.07, 0.1, 0.5, 1.0][r.gen_range(0..4)],
                symmetric_contrastive: k % 2 == 0,
                ..Default::default()
            };
            let z = rand_matrix(&mut r, b, d);
            let c = rand_matrix(&mut r, b, d);
            let weights = rand_weights(&mut r, b);
            let report = grad_check::<_, LossError>(
                |tape, params| losses::dcl_loss(tape, &params[0], &params[1], &weights, &cfg),
                &[z, c],
                EPSILON,
            )?;
            worst = worst.max(report.max_rel_err);
            entries += report.entries_checked;
        }
        out.push(SuiteEntry {
            name,
            instances,
            max_rel_err: worst,
            entries_checked: entries,
        });
    }

    // ─── distillation distances (gradient flows into current features only) ─
    for (name, kind) in [("afm_distill", DistillKind::Afm), ("l2_distill", DistillKind::L2)] {
        let mut worst: f64 = 0.0;
        let mut entries = 0;
        for k in 0..instances {
            let mut r = rng::stream(0xD1, &[k as u64, kind as u64]);
            let b = r.gen_range(2..=6);
            let h = r.gen_range(2..=10);
            let prev = rand_matrix(&mut r, b, h);
            let cur = rand_matrix(&mut r, b, h);
            let report = grad_check::<_, LossError>(
                |tape, params| match kind {
                    DistillKind::Afm => losses::afm_distance(tape, &prev, &params[0]),
                    DistillKind::L2 => losses::l2_distill_distance(tape, &prev, &params[0]),
                    DistillKind::None => unreachable!(),
                },
                &[cur],
                EPSILON,
            )?;
            worst = worst.max(report.max_rel_err);
            entries += report.entries_checked;
        }
        out.push(SuiteEntry {
            name,
            instances,
            max_rel_err: worst,
            entries_checked: entries,
        });
    }

    // ─── encoder forward pass, gradients w.r.t. every parameter tensor ──────
    {
        let mut worst: f64 = 0.0;
        let mut entries = 0;
        for k in 0..instances {
            let mut r = rng::stream(0xD2, &[k as u64]);
            let cfg = EncoderConfig {
                input_dim: r.gen_range(2..=6),
                hidden_dim: r.gen_range(3..=8),
                tap_count: r.gen_range(1..=3),
                output_dim: r.gen_range(2..=4),
                activation: if k % 2 == 0 {
                    crate::encoder::Activation::Tanh
                } else {
                    crate::encoder::Activation::Relu
                },
                init_seed: rng::derive_seed(0xD2, &[k as u64, 1]),
            };
            let params = encoder::init_encoder(&cfg)?;
            let batch = r.gen_range(2..=5);
            let x = rand_matrix(&mut r, batch, cfg.input_dim);
            let flat: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
            let report = grad_check::<_, LossError>(
                |tape, leaves| {
                    let p = rebuild(&cfg, leaves);
                    let trace = encoder::forward(&p, &cfg, &x, Some(tape))?;
                    let sq = tape.square(&trace.output)?;
                    Ok(tape.mean(&sq)?)
                },
                &flat,
                EPSILON,
            )?;
            worst = worst.max(report.max_rel_err);
            entries += report.entries_checked;
        }
        out.push(SuiteEntry {
            name: "encoder_forward",
            instances,
            max_rel_err: worst,
            entries_checked: entries,
        });
    }

    // ─── full training objective: contrastive + weighted distillation ───────
    {
        let mut worst: f64 = 0.0;
        let mut entries = 0;
        for k in 0..instances {
            let mut r = rng::stream(0xD3, &[k as u64]);
            let cfg = EncoderConfig {
                input_dim: r.gen_range(2..=5),
                hidden_dim: r.gen_range(3..=6),
                tap_count: r.gen_range(1..=2),
                output_dim: r.gen_range(2..=4),
                activation: crate::encoder::Activation::Tanh,
                init_seed: rng::derive_seed(0xD3, &[k as u64, 1]),
            };
            let params = encoder::init_encoder(&cfg)?;
            // snapshot of a perturbed copy stands in for the previous step
            let mut old = params.clone();
            for t in old.tensors_mut() {
                for v in t.data_mut() {
                    *v += r.gen_range(-0.3..0.3);
                }
            }
            let snapshot = Snapshot::of(&old, &cfg, 1);
            let b = r.gen_range(2..=5);
            let x = rand_matrix(&mut r, b, cfg.input_dim);
            let c = rand_matrix(&mut r, b, cfg.output_dim);
            let weights = rand_weights(&mut r, b);
            let loss_cfg = LossConfig {
                temperature: 0.1,
                lambda_cl: r.gen_range(0.2..2.0),
                bias: if k % 2 == 0 {
                    BiasModel::ResponseAccuracy
                } else {
                    BiasModel::BrainActivation
                },
                distill: if k % 2 == 0 { DistillKind::Afm } else { DistillKind::L2 },
                symmetric_contrastive: k % 3 == 0,
            };
            let flat: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
            let report = grad_check::<_, LossError>(
                |tape, leaves| {
                    let p = rebuild(&cfg, leaves);
                    losses::total_loss(
                        tape,
                        &p,
                        &cfg,
                        Some(&snapshot),
                        &x,
                        &c,
                        &weights,
                        &loss_cfg,
                    )
                },
                &flat,
                EPSILON,
            )?;
            worst = worst.max(report.max_rel_err);
            entries += report.entries_checked;
        }
        out.push(SuiteEntry {
            name: "combined_objective",
            instances,
            max_rel_err: worst,
            entries_checked: entries,
        });
    }

    Ok(out)
}

/// Reassemble encoder parameters from the flat tensor list grad_check hands
/// back (canonical layer order: weight, bias per layer, output last).
fn rebuild(cfg: &EncoderConfig, flat: &[Tensor]) -> encoder::EncoderParams {
    assert_eq!(flat.len(), 2 * cfg.tap_count + 2);
    let mut hidden = Vec::with_capacity(cfg.tap_count);
    for l in 0..cfg.tap_count {
        hidden.push(encoder::Linear {
            weight: flat[2 * l].clone(),
            bias: flat[2 * l + 1].clone(),
        });
    }
    encoder::EncoderParams {
        hidden,
        output: encoder::Linear {
            weight: flat[flat.len() - 2].clone(),
            bias: flat[flat.len() - 1].clone(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_beats_the_tolerance() {
        let entries = run(4).unwrap();
        assert_eq!(entries.len(), 6);
        for e in &entries {
            assert!(
                e.max_rel_err < TOLERANCE,
                "{}: max rel err {}",
                e.name,
                e.max_rel_err
            );
            assert!(e.entries_checked > 0);
        }
        let names: Vec<_> = entries.iter().map(|e| e.name).collect();
        assert!(names.contains(&"dcl_response_accuracy"));
        assert!(names.contains(&"combined_objective"));
    }
}
