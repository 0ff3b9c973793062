//! Central finite-difference audit of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bindings, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per tensor; tensors at most this large are checked
    /// exhaustively.
    pub max_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_per_tensor: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    /// `max |analytic − numeric|` over the probed coordinates, divided by the
    /// largest magnitude of either gradient over the same tensor.
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorReport> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compares `backward` against central differences of `loss` for every
/// tensor in `store`. `loss` builds a scalar from bound parameters.
pub fn check<F>(store: &ParamStore<f64>, opts: GradCheckOptions, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let l = loss(&mut g, &b)?;
    g.backward(l)?;
    let analytic = b.grads(&g);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = s.bind_frozen(&mut g);
        let l = loss(&mut g, &b)?;
        Ok(g.scalar(l))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut tensors = Vec::new();
    for (name, t) in store.iter() {
        let n = t.numel();
        let idx: Vec<usize> = if n <= opts.max_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_per_tensor).into_vec()
        };
        let an = analytic[name].data();
        let mut max_diff = 0.0f64;
        let mut scale = an.iter().fold(1e-8f64, |m, x| m.max(x.abs()));
        for &i in &idx {
            let orig = t.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + opts.step;
            let up = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - opts.step;
            let dn = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - dn) / (2.0 * opts.step);
            scale = scale.max(numeric.abs());
            max_diff = max_diff.max((numeric - an[i]).abs());
        }
        tensors.push(TensorReport {
            name: name.clone(),
            checked: idx.len(),
            rel_err: max_diff / scale,
        });
    }
    Ok(GradCheckReport { tensors })
}
