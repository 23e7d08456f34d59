//! Central finite-difference gradient checking.
//!
//! The analytic gradient from one backward pass is compared against
//! `(f(θ+ε) − f(θ−ε)) / 2ε` for every parameter entry. The relative error is
//! `|a − n| / max(1, |a|, |n|)` so tiny gradients don't blow up the ratio.

use super::{Tape, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, flat entry index) of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Check the gradient of a scalar-valued function of several tensors.
///
/// `f` receives a tape plus tensors already tracked on it and must build a
/// scalar loss through tape operations. `epsilon` is the central-difference
/// step (1e-6 is the conventional choice at f64). The error type is anything
/// tensor errors convert into, so loss-level functions plug in directly.
pub fn grad_check<F, E>(f: F, params: &[Tensor], epsilon: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, E>,
    E: From<TensorError>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let tracked: Vec<Tensor> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &tracked)?;
    if !loss.item().is_finite() {
        return Err(TensorError::NonFinite {
            op: "grad_check loss",
            index: 0,
        }
        .into());
    }
    tape.backward(&loss).map_err(E::from)?;
    let analytic: Vec<Vec<f64>> = tracked
        .iter()
        .map(|t| tape.grad(t).map(|g| g.to_vec()))
        .collect::<Result<_, TensorError>>()
        .map_err(E::from)?;

    // Numeric pass, one entry at a time.
    let eval = |perturbed: &[Tensor]| -> Result<f64, E> {
        let mut t = Tape::new();
        let tracked: Vec<Tensor> = perturbed.iter().map(|p| t.leaf(p)).collect();
        let loss = f(&mut t, &tracked)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                op: "grad_check perturbed loss",
                index: 0,
            }
            .into());
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_err = 0.0_f64;
    let mut worst = (0, 0);
    let mut entries = 0;
    for pi in 0..work.len() {
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + epsilon;
            let up = eval(&work)?;
            work[pi].data_mut()[ei] = orig - epsilon;
            let down = eval(&work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (pi, ei);
            }
            entries += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        entries_checked: entries,
    })
}
