//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Probes whose analytic or numeric gradient is not negligible.
    pub fn nonzero_probes(&self) -> usize {
        self.probes
            .iter()
            .filter(|p| p.analytic.abs().max(p.numeric.abs()) > GRAD_FLOOR)
            .count()
    }
}

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares the backward gradient of the scalar `f` against central
/// differences at `probes` randomly chosen scalar parameters.
///
/// Probes are drawn among entries whose analytic gradient exceeds
/// [`GRAD_FLOOR`] when enough of them exist, so the check is not dominated by
/// parameters that the function ignores.
pub fn check_gradients<F>(store: &ParamStore, f: F, probes: usize, eps: f64, seed: u64) -> GradCheckReport
where
    F: Fn(&Graph, &Bound) -> Var,
{
    let g = Graph::new();
    let bound = store.bind(&g);
    let out = f(&g, &bound);
    let grads = g.backward(out);
    let analytic = bound.gradients(&grads);

    let mut candidates: Vec<(String, usize)> = Vec::new();
    let mut all: Vec<(String, usize)> = Vec::new();
    for (name, grad) in &analytic {
        for (i, v) in grad.data().iter().enumerate() {
            all.push((name.clone(), i));
            if v.abs() > GRAD_FLOOR {
                candidates.push((name.clone(), i));
            }
        }
    }
    let pool = if candidates.len() >= probes { candidates } else { all };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<(String, usize)> = Vec::with_capacity(probes);
    let mut remaining = pool;
    while chosen.len() < probes && !remaining.is_empty() {
        let k = rng.random_range(0..remaining.len());
        chosen.push(remaining.swap_remove(k));
    }

    let eval = |s: &ParamStore| {
        let g = Graph::new();
        let b = s.bind_frozen(&g);
        let out = f(&g, &b);
        g.scalar(out)
    };

    let probes = chosen
        .into_iter()
        .map(|(name, index)| {
            let mut plus = store.clone();
            plus.get_mut(&name).unwrap().data_mut()[index] += eps;
            let mut minus = store.clone();
            minus.get_mut(&name).unwrap().data_mut()[index] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[&name].data()[index];
            Probe {
                rel_err: relative_error(a, numeric),
                name,
                index,
                analytic: a,
                numeric,
            }
        })
        .collect();
    GradCheckReport { probes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[3], vec![0.3, -1.2, 2.0]));
        // Correct gradient.
        let ok = check_gradients(
            &store,
            |g, p| {
                let x = p.get("x");
                let y = g.mul(x, x);
                g.sum(y)
            },
            3,
            1e-5,
            0,
        );
        assert!(ok.max_rel_err() < 1e-8);
        // A function whose forward differs from the differentiated path: the
        // oracle must see the mismatch.
        let bad = check_gradients(
            &store,
            |g, p| {
                let x = p.get("x");
                let v = g.value_of(x).clone();
                let frozen = g.constant(v);
                let y = g.mul(x, frozen);
                g.sum(y)
            },
            3,
            1e-5,
            0,
        );
        assert!(bad.max_rel_err() > 0.4);
    }
}
