//! Central finite differences for verifying analytic gradients.
//!
//! Only the forward loss is evaluated here; nothing on the backward path is
//! consulted, so agreement with [`crate::Graph::backward`] is an independent check.

use rand::Rng;

use crate::graph::Matrix;
use crate::params::{ParamId, ParamStore};

pub const FD_STEP: f64 = 1e-4;

/// One checked coordinate.
#[derive(Clone, Debug)]
pub struct Probe {
    pub param: ParamId,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of comparing analytic gradients with central differences on a set
/// of coordinates.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub probes: Vec<Probe>,
    /// Coordinates rejected because the loss has a kink within one step.
    pub skipped: usize,
}

impl GradCheck {
    /// `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖)` over all probes;
    /// zero when both vectors vanish.
    pub fn relative_error(&self) -> f64 {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for p in &self.probes {
            diff += (p.analytic - p.numeric).powi(2);
            na += p.analytic * p.analytic;
            nn += p.numeric * p.numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale == 0.0 {
            0.0
        } else {
            diff.sqrt() / scale
        }
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| {
            (a.analytic - a.numeric)
                .abs()
                .total_cmp(&(b.analytic - b.numeric).abs())
        })
    }
}

/// Central difference of `loss` with respect to one coordinate of `store`.
pub fn central_difference(
    store: &mut ParamStore,
    id: ParamId,
    row: usize,
    col: usize,
    step: f64,
    loss: &mut impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.get(id)[[row, col]];
    store.get_mut(id)[[row, col]] = orig + step;
    let plus = loss(store);
    store.get_mut(id)[[row, col]] = orig - step;
    let minus = loss(store);
    store.get_mut(id)[[row, col]] = orig;
    (plus - minus) / (2.0 * step)
}

/// Compares `analytic` (indexed like `store`) with central differences on
/// `per_param` randomly chosen coordinates of every parameter.
pub fn check_sampled<R: Rng + ?Sized>(
    store: &mut ParamStore,
    analytic: &dyn Fn(ParamId) -> Matrix,
    per_param: usize,
    rng: &mut R,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheck {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut probes = Vec::new();
    for id in ids {
        let grad = analytic(id);
        let (rows, cols) = store.get(id).dim();
        let picks = per_param.min(rows * cols);
        for _ in 0..picks {
            let row = rng.gen_range(0..rows);
            let col = rng.gen_range(0..cols);
            let numeric = central_difference(store, id, row, col, FD_STEP, &mut loss);
            probes.push(Probe { param: id, row, col, analytic: grad[[row, col]], numeric });
        }
    }
    GradCheck { probes, skipped: 0 }
}

/// Like [`check_sampled`], but for losses built from piecewise-linear units.
///
/// A coordinate is kept only when the central differences at `FD_STEP` and
/// `FD_STEP / 10` agree to `1e-6` relative, which fails when a ReLU or `abs`
/// switches inside the step. Rejected coordinates are redrawn, up to
/// `10 * per_param` attempts per parameter, and counted in `skipped`.
pub fn check_sampled_smooth<R: Rng + ?Sized>(
    store: &mut ParamStore,
    analytic: &dyn Fn(ParamId) -> Matrix,
    per_param: usize,
    rng: &mut R,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheck {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut probes = Vec::new();
    let mut skipped = 0;
    for id in ids {
        let grad = analytic(id);
        let (rows, cols) = store.get(id).dim();
        let want = per_param.min(rows * cols);
        let mut kept = 0;
        for _ in 0..10 * want {
            if kept == want {
                break;
            }
            let row = rng.gen_range(0..rows);
            let col = rng.gen_range(0..cols);
            let coarse = central_difference(store, id, row, col, FD_STEP, &mut loss);
            let fine = central_difference(store, id, row, col, FD_STEP / 10.0, &mut loss);
            if (coarse - fine).abs() > 1e-6 * coarse.abs().max(1.0) {
                skipped += 1;
                continue;
            }
            probes.push(Probe { param: id, row, col, analytic: grad[[row, col]], numeric: coarse });
            kept += 1;
        }
    }
    GradCheck { probes, skipped }
}
