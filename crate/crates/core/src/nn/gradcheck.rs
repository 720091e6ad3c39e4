//! Central finite-difference verification of [`Graph::backward`].

use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

/// Worst relative error of one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Options for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Entries probed per tensor; `None` probes all of them.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_entries: None,
        }
    }
}

/// Compares analytic gradients of the scalar `loss` against central
/// differences for every parameter of `store`.
///
/// The relative error of a tensor is `|a - n| / max(|a|, |n|)` over the probed
/// entries (Euclidean norms); tensors whose gradients are both below `1e-10`
/// count as exact.
pub fn check_gradients<F>(store: &mut ParamStore, cfg: GradCheckConfig, rng: &mut impl Rng, loss: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store);
    let grads = g.backward(l, store);
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let l = loss(&mut g, store);
        g.value(l).item()
    };

    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).len();
        let entries: Vec<usize> = match cfg.max_entries {
            Some(k) if k < n => {
                let mut e = sample(rng, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.get(id);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &j in &entries {
            let orig = store.get(id).data[j];
            store.get_mut(id).data[j] = orig + cfg.step;
            let up = eval(store);
            store.get_mut(id).data[j] = orig - cfg.step;
            let down = eval(store);
            store.get_mut(id).data[j] = orig;
            let num = (up - down) / (2.0 * cfg.step);
            let ana = analytic.map_or(0.0, |t| t.data[j]);
            diff2 += (ana - num) * (ana - num);
            a2 += ana * ana;
            n2 += num * num;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel_error = if denom < 1e-10 { 0.0 } else { diff2.sqrt() / denom };
        tensors.push(TensorCheck {
            name: store.param(id).name.clone(),
            checked: entries.len(),
            rel_error,
            analytic_norm: a2.sqrt(),
        });
    }
    GradCheckReport { tensors }
}

/// Overwrites every parameter with `N(0, std)` noise, so zero-initialized
/// tensors (biases, gated adapters) also carry non-trivial gradients.
pub fn randomize(store: &mut ParamStore, std: f64, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in &mut store.get_mut(id).data {
            *v = std * (rng.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{dense_spec, masked_spec, CrossAttentionBlock, FeedForward, Linear};
    use crate::nn::params::Init;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_ok(report: &GradCheckReport) {
        let worst = report.worst().unwrap();
        assert!(worst.rel_error <= 1e-3, "{worst:?}");
    }

    #[test]
    fn linear_gelu_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let x = store.add("x", 3, 4, Init::Normal(1.0), &mut rng);
        let l1 = Linear::new(&mut store, &mut rng, "l1", 4, 5);
        let ff = FeedForward::new(&mut store, &mut rng, "ff", 5, 6);
        randomize(&mut store, 0.5, &mut rng);
        let report = check_gradients(&mut store, GradCheckConfig::default(), &mut rng, |g, s| {
            let x = g.param(s, x);
            let h = l1.forward(g, s, x);
            let h = ff.forward(g, s, h);
            g.cross_entropy(h, vec![Some(1), None, Some(4)])
        });
        assert_ok(&report);
    }

    #[test]
    fn masked_cross_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let q = store.add("q", 4, 4, Init::Normal(1.0), &mut rng);
        let kv = store.add("kv", 6, 6, Init::Normal(1.0), &mut rng);
        let block = CrossAttentionBlock::new(&mut store, &mut rng, "blk", 4, 6, 2, 8);
        randomize(&mut store, 0.5, &mut rng);
        // Two batch items of 2 queries x 3 keys; one query sees nothing.
        let mask = vec![
            true, true, false, //
            true, false, false, //
            false, false, false, //
            true, true, true,
        ];
        let report = check_gradients(&mut store, GradCheckConfig::default(), &mut rng, |g, s| {
            let q = g.param(s, q);
            let kv = g.param(s, kv);
            let out = block.forward(g, s, q, kv, masked_spec(2, 2, 3, mask.clone())).unwrap();
            let w = g.constant(Tensor::from_vec(4, 1, vec![0.3, -0.7, 1.1, 0.2]));
            let y = g.linear(out, w, None);
            let y = g.reshape(y, 1, 4);
            g.cross_entropy(y, vec![Some(2)])
        });
        assert_ok(&report);
    }

    #[test]
    fn attention_matmul_bt_and_asymmetric_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let x = store.add("x", 6, 4, Init::Normal(1.0), &mut rng);
        let e = store.add("e", 5, 4, Init::Normal(1.0), &mut rng);
        let w = store.add("w", 6, 4, Init::Normal(1.0), &mut rng);
        let b = store.add("b", 1, 6, Init::Normal(1.0), &mut rng);
        let params = crate::nn::AslParams {
            gamma_pos: 1.0,
            gamma_neg: 2.0,
            margin: 0.0,
            eps: 1e-7,
        };
        let report = check_gradients(&mut store, GradCheckConfig::default(), &mut rng, |g, s| {
            let xv = g.param(s, x);
            let a = g.attention(xv, xv, xv, crate::nn::AttnSpec { heads: 2, ..dense_spec(2, 3, 3) });
            let ev = g.param(s, e);
            let logits = g.matmul_bt(a, ev);
            let ce = g.cross_entropy(logits, vec![Some(0), Some(1), Some(2), Some(3), Some(4), Some(0)]);
            let wv = g.param(s, w);
            let bv = g.param(s, b);
            let z = g.row_dot(a, wv, bv);
            let asl = g.asymmetric_loss(z, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0], &params);
            g.add(ce, asl)
        });
        assert_ok(&report);
    }
}
