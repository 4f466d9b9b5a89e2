use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Entries compared (all entries when the store has fewer).
    pub samples: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, samples: 200, floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and entry of the worst mismatch.
    pub worst: Option<(String, usize, usize)>,
    pub checked: usize,
    /// Entries excluded because a perturbation crossed a relu/abs kink.
    pub skipped_kinks: usize,
}

/// Compares analytic gradients of `build` against central differences
/// `(L(w + h) - L(w - h)) / 2h` on a sample of parameter entries.
///
/// Entries whose `+h` and `-h` evaluations land on different sides of any
/// relu/abs kink (or within [`KINK_GUARD`](super::KINK_GUARD) of one) are
/// skipped. `store` is restored to its original values on return and its
/// gradients hold the analytic result.
pub fn grad_check<F>(store: &mut ParamStore, mut build: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore, build: &mut F| -> Result<(f64, Vec<u8>)> {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {value}")));
        }
        Ok((value, g.kink_signature().to_vec()))
    };

    store.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {}", g.scalar(loss))));
    }
    g.backward(loss, store)?;

    let entries: Vec<(ParamId, usize)> =
        store.ids().flat_map(|id| (0..store.value(id).len()).map(move |k| (id, k))).collect();
    let chosen: Vec<usize> = if entries.len() <= opts.samples {
        (0..entries.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, entries.len(), opts.samples).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, checked: 0, skipped_kinks: 0 };
    for &e in &chosen {
        let (id, k) = entries[e];
        let cols = store.value(id).ncols();
        let (r, c) = (k / cols, k % cols);
        let original = store.value(id)[[r, c]];
        let analytic = store.grad(id)[[r, c]];

        store.value_mut(id)[[r, c]] = original + opts.eps;
        let plus = eval(store, &mut build);
        store.value_mut(id)[[r, c]] = original - opts.eps;
        let minus = eval(store, &mut build);
        store.value_mut(id)[[r, c]] = original;
        let ((lp, sp), (lm, sm)) = (plus?, minus?);

        if sp != sm {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * opts.eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
        report.checked += 1;
        if rel > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = rel;
            report.worst = Some((store.name(id).to_string(), r, c));
        }
    }
    Ok(report)
}
