use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, ParamStore, Tape, Var};

/// Settings for a central finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub eps: f64,
    /// Check at most this many coordinates per parameter (chosen at random).
    pub max_coords_per_param: Option<usize>,
    /// Seed for coordinate sampling and, when `dropout_seed` is set, the
    /// dropout masks of every evaluation.
    pub seed: u64,
    pub dropout_seed: Option<u64>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-4, max_coords_per_param: None, seed: 0, dropout_seed: None }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// The error per coordinate is `|g_ad - g_fd| / max(1, |g_ad| + |g_fd|)`.
pub fn grad_check<E, F>(store: &mut ParamStore, opts: &GradCheck, mut f: F) -> Result<GradCheckReport, E>
where
    E: From<AutodiffError>,
    F: FnMut(&mut Tape<'_>) -> Result<Var, E>,
{
    let grads = {
        let mut tape = new_tape(store, opts);
        let loss = f(&mut tape)?;
        tape.backward(loss)?.param_grads(store)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), worst_coord: 0, coords_checked: 0 };
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.tensor(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.tensor(id).data()[c];
            store.get_mut(id).tensor.data_mut()[c] = orig + opts.eps;
            let plus = forward_only(store, opts, &mut f)?;
            store.get_mut(id).tensor.data_mut()[c] = orig - opts.eps;
            let minus = forward_only(store, opts, &mut f)?;
            store.get_mut(id).tensor.data_mut()[c] = orig;
            let fd = (plus - minus) / (2.0 * opts.eps);
            let ad = grads.get(id)[c];
            let err = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1.0);
            report.coords_checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst_param = store.get(id).name.clone();
                report.worst_coord = c;
            }
        }
    }
    Ok(report)
}

fn forward_only<E, F>(store: &ParamStore, opts: &GradCheck, f: &mut F) -> Result<f64, E>
where
    E: From<AutodiffError>,
    F: FnMut(&mut Tape<'_>) -> Result<Var, E>,
{
    let mut tape = new_tape(store, opts);
    let loss = f(&mut tape)?;
    Ok(tape.item(loss))
}

fn new_tape<'s>(store: &'s ParamStore, opts: &GradCheck) -> Tape<'s> {
    match opts.dropout_seed {
        Some(s) => Tape::training(store, ChaCha8Rng::seed_from_u64(s)),
        None => Tape::new(store),
    }
}
