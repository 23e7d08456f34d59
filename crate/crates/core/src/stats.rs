//! Decline quantification: rank correlations and fitted slopes over
//! behavioral session metadata and over per-window retrieval accuracy.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::encoder::{self, EncoderConfig};
use crate::engine::{self, TrainConfig};
use crate::losses::LossConfig;
use crate::retrieval::{self, RetrievalConfig};
use crate::rng;
use crate::synth::{Dataset, Sample, SessionMeta};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least {want} points, got {got}")]
    TooFewPoints { want: usize, got: usize },
    #[error("window analysis: {0}")]
    BadWindow(String),
    #[error("report i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Engine(#[from] Box<crate::engine::EngineError>),
}

/// Least-squares slope of y against x.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        var += (x - mx) * (x - mx);
    }
    if var == 0.0 {
        0.0
    } else {
        cov / var
    }
}

/// Spearman rank correlation with average ranks for ties.
///
/// Returns `(rho, degenerate)`; a series whose ranks have zero variance
/// (all values tied) cannot be correlated, so rho is reported as 0 with the
/// flag set.
pub fn spearman(xs: &[f64], ys: &[f64]) -> (f64, bool) {
    debug_assert_eq!(xs.len(), ys.len());
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in rx.iter().zip(&ry) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return (0.0, true);
    }
    (cov / (vx.sqrt() * vy.sqrt()), false)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("NaN in rank input"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // tied block [i, j] gets the average of ranks i+1..=j+1
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One analyzed series: observations against their index plus the fitted
/// decline statistics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricDecline {
    pub metric: String,
    /// (index, value) pairs — session number or window number.
    pub points: Vec<(u32, f64)>,
    pub slope: f64,
    pub spearman: f64,
    /// Set when ranks were fully tied and rho is reported as 0.
    pub tied: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DeclineReport {
    pub metrics: Vec<MetricDecline>,
}

impl DeclineReport {
    pub fn metric(&self, name: &str) -> Option<&MetricDecline> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    /// Long-form CSV: one row per observation. Statistics are derivable from
    /// these rows alone.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,metric,value\n");
        for m in &self.metrics {
            for (i, v) in &m.points {
                out.push_str(&format!("{i},{},{v:.6}\n", m.metric));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), StatsError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), StatsError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text)?;
        Ok(())
    }

    /// Static SVG line chart of every metric (one polyline each).
    pub fn write_svg(&self, path: &Path) -> Result<(), StatsError> {
        fs::write(path, self.to_svg())?;
        Ok(())
    }

    pub fn to_svg(&self) -> String {
        const W: f64 = 720.0;
        const H: f64 = 400.0;
        const PAD: f64 = 50.0;
        let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

        let all: Vec<f64> = self
            .metrics
            .iter()
            .flat_map(|m| m.points.iter().map(|&(_, v)| v))
            .collect();
        let (mut lo, mut hi) = all
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if !lo.is_finite() || lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }
        let span = hi - lo;
        lo -= 0.05 * span;
        hi += 0.05 * span;

        let imax = self
            .metrics
            .iter()
            .flat_map(|m| m.points.iter().map(|&(i, _)| i))
            .max()
            .unwrap_or(1)
            .max(2) as f64;
        let imin = self
            .metrics
            .iter()
            .flat_map(|m| m.points.iter().map(|&(i, _)| i))
            .min()
            .unwrap_or(1) as f64;

        let sx = |i: f64| PAD + (i - imin) / (imax - imin).max(1.0) * (W - 2.0 * PAD);
        let sy = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);

        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
             viewBox=\"0 0 {W} {H}\">\n\
             <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
             <line x1=\"{PAD}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"#333\"/>\n\
             <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{y0}\" stroke=\"#333\"/>\n",
            y0 = H - PAD,
            x1 = W - PAD,
        );
        for (k, m) in self.metrics.iter().enumerate() {
            let color = palette[k % palette.len()];
            let pts: Vec<String> = m
                .points
                .iter()
                .map(|&(i, v)| format!("{:.2},{:.2}", sx(i as f64), sy(v)))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{} (slope {:.4}, ρ {:.3})</text>\n",
                PAD + 8.0,
                PAD + 16.0 * (k as f64 + 1.0),
                m.metric,
                m.slope,
                m.spearman,
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn decline_of(metric: &str, points: Vec<(u32, f64)>) -> MetricDecline {
    let xs: Vec<f64> = points.iter().map(|&(i, _)| i as f64).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, v)| v).collect();
    let slope = fit_slope(&xs, &ys);
    let (rho, tied) = spearman(&xs, &ys);
    MetricDecline {
        metric: metric.to_string(),
        points,
        slope,
        spearman: rho,
        tied,
    }
}

/// Per-window retrieval probe: train an independent, freshly initialized
/// encoder on each consecutive block of `window` sessions and evaluate it
/// inside that block only. No weights are shared across windows, so an
/// accuracy decline here can only come from the data itself — this is the
/// control that separates signal decay from forgetting.
///
/// Every window uses the same architecture and training hyperparameters;
/// only the initialization seed is re-derived per window. Reports one metric
/// per retrieval direction, with one point per window (1-based index).
pub fn per_window_models(
    dataset: &Dataset,
    window: u32,
    encoder_cfg: &EncoderConfig,
    train: &TrainConfig,
    loss_cfg: &LossConfig,
    retrieval_cfg: &RetrievalConfig,
) -> Result<DeclineReport, StatsError> {
    let s = dataset.header.n_sessions;
    if window == 0 || s % window != 0 {
        return Err(StatsError::BadWindow(format!(
            "window size {window} does not evenly divide the {s} sessions"
        )));
    }
    let n_windows = s / window;
    let mut per_direction: [Vec<(u32, f64)>; 2] = [
        Vec::with_capacity(n_windows as usize),
        Vec::with_capacity(n_windows as usize),
    ];
    let mut names: [Option<String>; 2] = [None, None];
    for w in 1..=n_windows {
        let range = ((w - 1) * window + 1)..=(w * window);
        let mut cfg_w = encoder_cfg.clone();
        cfg_w.init_seed = rng::derive_seed(encoder_cfg.init_seed, &[0x57, w as u64]);
        let mut params = encoder::init_encoder(&cfg_w).map_err(boxed)?;
        let samples: Vec<Sample> = dataset
            .train_indices(range.clone())
            .into_iter()
            .map(|i| dataset.samples[i].clone())
            .collect();
        engine::train_step(
            &mut params,
            &cfg_w,
            None,
            &samples,
            &dataset.sessions,
            train,
            loss_cfg,
            w,
        )
        .map_err(|e| StatsError::Engine(Box::new(e)))?;
        let rows =
            retrieval::evaluate_step(&params, &cfg_w, dataset, range, w, retrieval_cfg)
                .map_err(boxed)?;
        for (slot, row) in rows.iter().enumerate() {
            per_direction[slot].push((w, row.top1));
            names[slot].get_or_insert_with(|| format!("window_top1_{}", row.direction));
        }
    }
    Ok(DeclineReport {
        metrics: names
            .into_iter()
            .zip(per_direction)
            .map(|(name, points)| decline_of(&name.expect("≥1 window"), points))
            .collect(),
    })
}

fn boxed<E: Into<crate::engine::EngineError>>(e: E) -> StatsError {
    StatsError::Engine(Box::new(e.into()))
}

/// Decline statistics for the three behavioral series (response rate,
/// consistency, activation fraction) against session index.
pub fn behavioral_curves(sessions: &[SessionMeta]) -> Result<DeclineReport, StatsError> {
    if sessions.len() < 3 {
        return Err(StatsError::TooFewPoints {
            want: 3,
            got: sessions.len(),
        });
    }
    let series = |f: fn(&SessionMeta) -> f64| -> Vec<(u32, f64)> {
        sessions.iter().map(|m| (m.session, f(m))).collect()
    };
    Ok(DeclineReport {
        metrics: vec![
            decline_of("response_rate", series(|m| m.response_rate)),
            decline_of("consistency", series(|m| m.consistency)),
            decline_of("activation", series(|m| m.activation)),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_line() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 0.25 * x).collect();
        assert!((fit_slope(&xs, &ys) + 0.25).abs() < 1e-12);
    }

    #[test]
    fn spearman_detects_monotone_series() {
        let xs: Vec<f64> = (1..=20).map(f64::from).collect();
        let decreasing: Vec<f64> = xs.iter().map(|x| 1.0 / x).collect();
        let (rho, tied) = spearman(&xs, &decreasing);
        assert!(!tied);
        assert!((rho + 1.0).abs() < 1e-12, "rho = {rho}");
        let increasing: Vec<f64> = xs.iter().map(|x| x.powi(3)).collect();
        let (rho, _) = spearman(&xs, &increasing);
        assert!((rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties_with_average_ranks() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [1.0, 1.0, 2.0, 2.0];
        let (rho, tied) = spearman(&xs, &ys);
        assert!(!tied);
        assert!(rho > 0.8 && rho <= 1.0);
    }

    #[test]
    fn fully_tied_series_is_flagged() {
        let xs = [1.0, 2.0, 3.0];
        let ys = [5.0, 5.0, 5.0];
        let (rho, tied) = spearman(&xs, &ys);
        assert_eq!(rho, 0.0);
        assert!(tied);
        assert_eq!(fit_slope(&xs, &ys), 0.0);
    }

    #[test]
    fn behavioral_curves_on_reference_schedule() {
        let cfg = crate::synth::GenConfig {
            seed: 42,
            ..Default::default()
        };
        let data = crate::synth::generate(&cfg).unwrap();
        let report = behavioral_curves(&data.sessions).unwrap();
        let r = report.metric("response_rate").unwrap();
        assert!(r.spearman <= -0.99, "rho = {}", r.spearman);
        assert!(r.slope < 0.0);
        let a = report.metric("activation").unwrap();
        assert!(a.spearman < -0.9);
    }

    #[test]
    fn behavioral_curves_on_constant_schedule_flags_ties() {
        let cfg = crate::synth::GenConfig {
            r_max: 0.8,
            r_min: 0.8,
            seed: 1,
            ..Default::default()
        };
        let data = crate::synth::generate(&cfg).unwrap();
        let report = behavioral_curves(&data.sessions).unwrap();
        let r = report.metric("response_rate").unwrap();
        assert_eq!(r.slope, 0.0);
        assert_eq!(r.spearman, 0.0);
        assert!(r.tied);
    }

    #[test]
    fn too_few_sessions_is_an_error() {
        let cfg = crate::synth::GenConfig {
            n_sessions: 2,
            seed: 1,
            ..Default::default()
        };
        let data = crate::synth::generate(&cfg).unwrap();
        assert!(matches!(
            behavioral_curves(&data.sessions),
            Err(StatsError::TooFewPoints { .. })
        ));
    }

    fn probe_train() -> TrainConfig {
        TrainConfig {
            lr0: 0.01,
            epochs: 10,
            batch_size: 8,
            run_seed: 3,
            ..Default::default()
        }
    }

    fn probe_encoder() -> EncoderConfig {
        EncoderConfig {
            input_dim: 12,
            hidden_dim: 24,
            tap_count: 2,
            output_dim: 6,
            init_seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn window_probe_declines_on_decaying_data() {
        // steep decay so even a small probe separates the first window from
        // the last one
        let cfg = crate::synth::GenConfig {
            n_sessions: 12,
            samples_per_session: 30,
            input_dim: 12,
            embed_dim: 6,
            r_min: 0.40,
            gain_floor: 0.25,
            noise_growth: 2.5,
            seed: 9,
            ..Default::default()
        };
        let data = crate::synth::generate(&cfg).unwrap();
        let report = per_window_models(
            &data,
            3,
            &probe_encoder(),
            &probe_train(),
            &LossConfig::default(),
            &RetrievalConfig { n_way: 4, trials: 10, seed: 1 },
        )
        .unwrap();
        assert_eq!(report.metrics.len(), 2);
        let b2i = report.metric("window_top1_brain_to_image").unwrap();
        assert_eq!(b2i.points.len(), 4);
        assert_eq!(
            b2i.points.iter().map(|&(i, _)| i).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        assert!(b2i.slope < 0.0, "slope = {}", b2i.slope);
        assert!(
            b2i.points[0].1 > b2i.points[3].1,
            "first window {} ≤ last window {}",
            b2i.points[0].1,
            b2i.points[3].1
        );
        // 4 windows × 2 directions → 8 accuracy rows in the CSV
        assert_eq!(report.to_csv().lines().count(), 1 + 8);
    }

    #[test]
    fn window_probe_is_flat_without_decay() {
        let mut rhos = Vec::new();
        for seed in [9, 10, 11, 12, 13] {
            let cfg = crate::synth::GenConfig {
                n_sessions: 12,
                samples_per_session: 30,
                input_dim: 12,
                embed_dim: 6,
                r_max: 0.9,
                r_min: 0.9,
                gain_floor: 1.0,
                noise_growth: 0.0,
                seed,
                ..Default::default()
            };
            let data = crate::synth::generate(&cfg).unwrap();
            let report = per_window_models(
                &data,
                2,
                &probe_encoder(),
                &probe_train(),
                &LossConfig::default(),
                &RetrievalConfig { n_way: 4, trials: 10, seed: 1 },
            )
            .unwrap();
            let b2i = report.metric("window_top1_brain_to_image").unwrap();
            assert_eq!(b2i.points.len(), 6);
            rhos.push(if b2i.tied { 0.0 } else { b2i.spearman });
        }
        // Any single ρ over 6 exchangeable windows is noisy (sd ≈ 0.45); the
        // mean over five independent datasets is the stable null check.
        let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
        assert!(mean.abs() < 0.4, "flat data produced mean ρ = {mean} ({rhos:?})");
        assert!(
            rhos.iter().any(|r| *r < 0.0) && rhos.iter().any(|r| *r > 0.0),
            "flat data produced one-sided ρ values: {rhos:?}"
        );
    }

    #[test]
    fn indivisible_window_is_rejected() {
        let cfg = crate::synth::GenConfig {
            n_sessions: 10,
            samples_per_session: 10,
            input_dim: 4,
            embed_dim: 2,
            seed: 2,
            ..Default::default()
        };
        let data = crate::synth::generate(&cfg).unwrap();
        let enc = EncoderConfig {
            input_dim: 4,
            hidden_dim: 8,
            tap_count: 1,
            output_dim: 2,
            ..Default::default()
        };
        assert!(matches!(
            per_window_models(
                &data,
                3,
                &enc,
                &probe_train(),
                &LossConfig::default(),
                &RetrievalConfig::default(),
            ),
            Err(StatsError::BadWindow(_))
        ));
    }

    #[test]
    fn csv_is_recomputable() {
        let report = DeclineReport {
            metrics: vec![decline_of("demo", vec![(1, 1.0), (2, 0.5), (3, 0.25)])],
        };
        let csv = report.to_csv();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for line in csv.lines().skip(1) {
            let mut parts = line.split(',');
            xs.push(parts.next().unwrap().parse::<f64>().unwrap());
            assert_eq!(parts.next().unwrap(), "demo");
            ys.push(parts.next().unwrap().parse::<f64>().unwrap());
        }
        let slope = fit_slope(&xs, &ys);
        assert!((slope - report.metrics[0].slope).abs() < 1e-9);
    }
}
