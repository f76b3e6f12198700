use super::graph::{Graph, NodeId};
use crate::error::Result;
use crate::rng::SplitMix64;

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Compares reverse-mode gradients against central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every parameter entry and returns
/// the largest relative error `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
///
/// The graph is restored to its original parameter values before returning.
/// A graph without parameters yields 0.
pub fn finite_diff_check(graph: &mut Graph, loss: NodeId, epsilon: f64) -> Result<f64> {
    check(graph, loss, epsilon, None)
}

/// Like [`finite_diff_check`], but probes at most `per_param` entries of each
/// parameter, chosen deterministically from `seed`.
pub fn finite_diff_check_sampled(
    graph: &mut Graph,
    loss: NodeId,
    epsilon: f64,
    per_param: usize,
    seed: u64,
) -> Result<f64> {
    check(graph, loss, epsilon, Some((per_param, seed)))
}

fn check(graph: &mut Graph, loss: NodeId, epsilon: f64, sample: Option<(usize, u64)>) -> Result<f64> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let grads = graph.backward(loss)?;
    let params: Vec<NodeId> = graph.params().iter().map(|&(_, id)| id).collect();
    let mut rng = sample.map(|(_, seed)| SplitMix64::new(seed));
    let mut worst = 0.0f64;

    for id in params {
        let original = graph.value(id).clone();
        let analytic = grads.of(id).expect("parameter gradient").data().to_vec();
        let entries: Vec<usize> = match (sample, rng.as_mut()) {
            (Some((per_param, _)), Some(rng)) if per_param < original.len() => {
                let mut all: Vec<usize> = (0..original.len()).collect();
                rng.shuffle(&mut all);
                all.truncate(per_param);
                all
            }
            _ => (0..original.len()).collect(),
        };

        for i in entries {
            let probe = |graph: &mut Graph, delta: f64| -> Result<f64> {
                let mut data = original.data().to_vec();
                data[i] += delta;
                graph.set_param(id, super::Tensor::new(original.shape().to_vec(), data)?)?;
                graph.recompute()?;
                Ok(graph.scalar(loss))
            };
            let plus = probe(graph, epsilon)?;
            let minus = probe(graph, -epsilon)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
        graph.set_param(id, original)?;
        graph.recompute()?;
    }
    Ok(worst)
}
