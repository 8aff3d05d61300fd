//! Central-difference gradient verification.
//!
//! The oracle rebuilds the forward pass from scratch for every probe, so it
//! shares no code path with the reverse-mode gradients it checks.

use super::graph::{Graph, TensorId};
use super::mat::NumericsError;
use super::params::ParamStore;

/// Default probe step for double precision.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Worst error found for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub path: String,
    pub max_rel_err: f64,
    /// Flat element index where the worst error occurred.
    pub worst_index: usize,
    pub reverse_grad: f64,
    pub central_diff: f64,
}

/// Per-parameter report of reverse-mode vs central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_err >= self.tol)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Normalized gradient error: absolute for small gradients, relative for
/// large ones.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Compare reverse-mode gradients of a scalar-valued function against
/// central differences `(f(p+h) - f(p-h)) / 2h` for every element of every
/// parameter in the store.
///
/// `build` must construct the full forward pass on the given graph and
/// return the scalar loss. It is run twice up front; if the two losses
/// differ bitwise the function is not a valid oracle subject and an error
/// is returned. The store is probed in place and restored bit-exactly.
pub fn finite_difference_check<E, F>(
    store: &mut ParamStore,
    mut build: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    E: From<NumericsError>,
    F: FnMut(&mut Graph, &ParamStore) -> Result<TensorId, E>,
{
    let eval = |build: &mut F, store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        let v = g.value(loss).item().map_err(E::from)?;
        if !v.is_finite() {
            return Err(E::from(NumericsError::NonFinite {
                what: "loss under finite-difference check".to_string(),
            }));
        }
        Ok(v)
    };

    let first = eval(&mut build, store)?;

    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let second = g.value(loss).item().map_err(E::from)?;
    if first.to_bits() != second.to_bits() {
        return Err(E::from(NumericsError::NondeterministicFunction { first, second }));
    }
    g.backward(loss).map_err(E::from)?;
    store.zero_grads();
    g.write_grads(store).map_err(E::from)?;

    let paths: Vec<String> = store.paths().map(str::to_string).collect();
    let mut entries = Vec::with_capacity(paths.len());
    for path in paths {
        let reverse: Vec<f64> = match store.grad(&path) {
            Some(m) => m.data().to_vec(),
            // Parameter never leased by `build`: its gradient is zero.
            None => vec![0.0; store.value(&path).map_err(E::from)?.len()],
        };
        let mut entry = GradCheckEntry {
            path: path.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            reverse_grad: 0.0,
            central_diff: 0.0,
        };
        for (idx, &ad) in reverse.iter().enumerate() {
            let orig = store.value(&path).map_err(E::from)?.data()[idx];
            store.set_elem(&path, idx, orig + h).map_err(E::from)?;
            let plus = eval(&mut build, store)?;
            store.set_elem(&path, idx, orig - h).map_err(E::from)?;
            let minus = eval(&mut build, store)?;
            store.set_elem(&path, idx, orig).map_err(E::from)?;
            let fd = (plus - minus) / (2.0 * h);
            let err = rel_err(ad, fd);
            if err > entry.max_rel_err {
                entry.max_rel_err = err;
                entry.worst_index = idx;
                entry.reverse_grad = ad;
                entry.central_diff = fd;
            }
        }
        entries.push(entry);
    }
    store.zero_grads();
    Ok(GradCheckReport { entries, tol })
}
