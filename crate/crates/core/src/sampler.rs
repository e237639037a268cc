//! Adaptive memory task sampling for replay.
//!
//! Replay batches are drawn hierarchically: first a cluster with probability
//! Z_i ∝ n_i·G_i (size times gradient-norm importance), then a task uniformly
//! within the cluster. Each drawn task carries the importance weight
//! w = 1/(n·q) that keeps the replayed gradient estimator unbiased. The
//! module also carries the variance machinery the scheme approximates: the
//! gradient-norm-proportional optimal distribution and the exact covariance
//! trace of the weighted estimator on a discrete support.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{episode_gradient, Episode, Model};
use crate::memory::{ClusterImportance, MemoryBuffer, TaskRecord};

/// Variance-optimal sampling distribution over a discrete task set, or the
/// prior when every norm vanishes.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalDistribution {
    pub probs: Vec<f64>,
    /// True when all norms were zero and the prior was returned unchanged.
    pub used_prior_fallback: bool,
}

fn validate_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid(format!("{name} distribution is empty")));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("{name} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// q*_i = p_i·g_i / Σ_j p_j·g_j: the distribution minimizing the trace of
/// the weighted gradient estimator's covariance. `prior` defaults to
/// uniform.
pub fn optimal_task_distribution(
    norms: &[f64],
    prior: Option<&[f64]>,
) -> Result<OptimalDistribution> {
    if norms.is_empty() {
        return Err(Error::invalid("need at least one task norm"));
    }
    if norms.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
        return Err(Error::invalid("norms must be non-negative and finite"));
    }
    let uniform = vec![1.0 / norms.len() as f64; norms.len()];
    let p = match prior {
        Some(p) => {
            if p.len() != norms.len() {
                return Err(Error::DimensionMismatch(norms.len(), p.len()));
            }
            validate_distribution(p, "prior")?;
            p.to_vec()
        }
        None => uniform,
    };
    let weighted: Vec<f64> = p.iter().zip(norms).map(|(pi, gi)| pi * gi).collect();
    let total: f64 = weighted.iter().sum();
    if total <= 0.0 {
        return Ok(OptimalDistribution {
            probs: p,
            used_prior_fallback: true,
        });
    }
    Ok(OptimalDistribution {
        probs: weighted.iter().map(|w| w / total).collect(),
        used_prior_fallback: false,
    })
}

/// Exact covariance trace of the importance-weighted gradient estimator on
/// a discrete support: Σ_i q_i·||(p_i/q_i)·g_i||² - ||Σ_i p_i·g_i||².
pub fn estimator_covariance_trace(
    prior: &[f64],
    q: &[f64],
    grads: &[Vec<f64>],
) -> Result<f64> {
    if prior.len() != q.len() || prior.len() != grads.len() {
        return Err(Error::invalid("prior, q, and grads must share one length"));
    }
    validate_distribution(prior, "prior")?;
    validate_distribution(q, "q")?;
    let dim = grads.first().map_or(0, Vec::len);
    if grads.iter().any(|g| g.len() != dim) {
        return Err(Error::invalid("gradient vectors must share one dimension"));
    }
    let mut second_moment = 0.0;
    let mut mean = vec![0.0; dim];
    for i in 0..prior.len() {
        if prior[i] > 0.0 && q[i] == 0.0 {
            return Err(Error::invalid(
                "q assigns zero probability inside the prior's support",
            ));
        }
        if q[i] > 0.0 {
            let ratio = prior[i] / q[i];
            let norm2: f64 = grads[i].iter().map(|v| v * v).sum();
            second_moment += q[i] * ratio * ratio * norm2;
        }
        for (m, g) in mean.iter_mut().zip(&grads[i]) {
            *m += prior[i] * g;
        }
    }
    let mean_norm2: f64 = mean.iter().map(|v| v * v).sum();
    Ok(second_moment - mean_norm2)
}

/// Cluster-level replay distribution Z_i = n_i·G_i / Σ_j n_j·G_j, frozen at
/// `computed_at` and reusable for `refresh_every` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub cluster_probs: BTreeMap<u64, f64>,
    pub computed_at: u64,
    pub refresh_every: u64,
    /// True when every cluster importance was zero and probabilities fell
    /// back to cluster sizes.
    pub size_fallback: bool,
}

impl SamplingPlan {
    pub fn is_stale(&self, current_step: u64) -> bool {
        current_step.saturating_sub(self.computed_at) >= self.refresh_every
    }

    /// Effective per-task probability for a task in `label`, given that
    /// cluster's current size.
    pub fn per_task_prob(&self, label: u64, cluster_size: usize) -> Option<f64> {
        let z = self.cluster_probs.get(&label)?;
        if cluster_size == 0 {
            return None;
        }
        Some(z / cluster_size as f64)
    }
}

/// Builds the replay plan from cluster sizes and importances. When every
/// G_i is zero the plan degrades to size-proportional sampling, which makes
/// every stored task equally likely (uniform replay, weights 1).
pub fn build_sampling_plan(
    buf: &MemoryBuffer,
    imp: &ClusterImportance,
    step: u64,
    refresh_every: u64,
) -> Result<SamplingPlan> {
    if buf.is_empty() {
        return Err(Error::NotReady("cannot build a sampling plan over an empty buffer"));
    }
    let sizes = buf.cluster_sizes();
    let mut weights: BTreeMap<u64, f64> = BTreeMap::new();
    let mut total = 0.0;
    for (&label, &size) in &sizes {
        let w = size as f64 * imp.get(label);
        total += w;
        weights.insert(label, w);
    }
    let size_fallback = total <= 0.0;
    if size_fallback {
        let n = buf.len() as f64;
        for (&label, &size) in &sizes {
            weights.insert(label, size as f64 / n);
        }
    } else {
        for w in weights.values_mut() {
            *w /= total;
        }
    }
    Ok(SamplingPlan {
        cluster_probs: weights,
        computed_at: step,
        refresh_every,
        size_fallback,
    })
}

/// A replay batch: sampled task records with their importance weights.
#[derive(Debug)]
pub struct WeightedBatch<'a> {
    pub tasks: Vec<&'a TaskRecord>,
    pub weights: Vec<f64>,
}

impl WeightedBatch<'_> {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn mean_weight(&self) -> f64 {
        if self.weights.is_empty() {
            0.0
        } else {
            self.weights.iter().sum::<f64>() / self.weights.len() as f64
        }
    }
}

/// Draws `batch_size` tasks with replacement: a cluster per Z, then a task
/// uniformly within it. Weights are 1/(n·q) with q the effective per-task
/// probability under the buffer's current contents. Refuses plans older
/// than their refresh interval.
pub fn pets_sample<'a>(
    buf: &'a MemoryBuffer,
    plan: &SamplingPlan,
    batch_size: usize,
    current_step: u64,
    rng: &mut impl Rng,
) -> Result<WeightedBatch<'a>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    if buf.is_empty() {
        return Err(Error::invalid("cannot sample from an empty buffer"));
    }
    if plan.is_stale(current_step) {
        return Err(Error::invalid(format!(
            "sampling plan from step {} is stale at step {} (refresh every {})",
            plan.computed_at, current_step, plan.refresh_every
        )));
    }
    // Restrict the plan to clusters that still hold tasks; clusters created
    // after the plan was built are invisible until the next refresh.
    let sizes = buf.cluster_sizes();
    let live: Vec<(u64, f64)> = plan
        .cluster_probs
        .iter()
        .filter(|(label, _)| sizes.contains_key(label))
        .map(|(l, p)| (*l, *p))
        .collect();
    let live_total: f64 = live.iter().map(|(_, p)| p).sum();
    if live.is_empty() || live_total <= 0.0 {
        return Err(Error::invalid("sampling plan covers no populated cluster"));
    }
    let n = buf.len() as f64;
    let mut tasks = Vec::with_capacity(batch_size);
    let mut weights = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let draw: f64 = rng.gen_range(0.0..live_total);
        let mut acc = 0.0;
        let mut chosen = live[live.len() - 1].0;
        for (label, p) in &live {
            acc += p;
            if draw < acc {
                chosen = *label;
                break;
            }
        }
        let cluster = buf.cluster(chosen).expect("live cluster");
        let idx = rng.gen_range(0..cluster.len());
        let z = plan.cluster_probs[&chosen] / live_total;
        let q = z / cluster.len() as f64;
        tasks.push(&cluster[idx]);
        weights.push(1.0 / (n * q));
    }
    Ok(WeightedBatch { tasks, weights })
}

/// Diagnostics from one meta-training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaStepInfo {
    pub replay_count: usize,
    pub mean_weight: f64,
    pub stream_loss: f64,
}

/// One SGD step on the sum of (a) the unweighted mean gradient over the
/// current stream tasks and (b) the importance-weighted mean gradient over
/// a replay batch sampled from the plan. With no plan or an empty buffer
/// the step reduces to plain stream SGD.
#[allow(clippy::too_many_arguments)]
pub fn meta_train_step(
    model: &mut Model,
    current_tasks: &[Episode],
    buf: &MemoryBuffer,
    plan: Option<&SamplingPlan>,
    replay_batch: usize,
    eta: f64,
    current_step: u64,
    rng: &mut impl Rng,
) -> Result<MetaStepInfo> {
    if current_tasks.is_empty() {
        return Err(Error::invalid("meta step needs at least one stream task"));
    }
    if !model.all_finite() {
        return Err(Error::RunAbort {
            step: current_step,
            detail: "model parameters are non-finite".into(),
        });
    }
    let mut total = vec![0.0; model.params.len()];
    let mut stream_loss = 0.0;
    for ep in current_tasks {
        let (grad, _) = episode_gradient(model, ep)?;
        stream_loss += crate::learner::episode_loss(model, ep)?;
        for (t, g) in total.iter_mut().zip(&grad) {
            *t += g / current_tasks.len() as f64;
        }
    }
    stream_loss /= current_tasks.len() as f64;

    let mut replay_count = 0;
    let mut mean_weight = 0.0;
    if let Some(plan) = plan {
        if !buf.is_empty() && replay_batch > 0 {
            let batch = pets_sample(buf, plan, replay_batch, current_step, rng)?;
            for (record, &w) in batch.tasks.iter().zip(&batch.weights) {
                let (grad, _) = episode_gradient(model, &record.episode)?;
                for (t, g) in total.iter_mut().zip(&grad) {
                    *t += w * g / batch.len() as f64;
                }
            }
            replay_count = batch.len();
            mean_weight = batch.mean_weight();
        }
    }

    if total.iter().any(|g| !g.is_finite()) {
        return Err(Error::RunAbort {
            step: current_step,
            detail: "non-finite gradient in meta step".into(),
        });
    }
    for (p, g) in model.params.iter_mut().zip(&total) {
        *p -= eta * g;
    }
    Ok(MetaStepInfo {
        replay_count,
        mean_weight,
        stream_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::Example;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ex(x: Vec<f64>, y: usize) -> Example {
        Example { x, y }
    }

    fn tiny_episode(shift: f64) -> Episode {
        Episode {
            support: vec![ex(vec![-1.0 + shift], 0), ex(vec![1.0 + shift], 1)],
            query: vec![ex(vec![-0.6 + shift], 0), ex(vec![0.8 + shift], 1)],
            n_way: 2,
            k_shot: 1,
            domain_truth: None,
        }
    }

    fn buffer_with_sizes(sizes: &[(u64, usize)]) -> MemoryBuffer {
        let total: usize = sizes.iter().map(|(_, s)| s).sum();
        let mut buf = MemoryBuffer::new(total).unwrap();
        for &(label, count) in sizes {
            for i in 0..count {
                buf.insert(TaskRecord {
                    episode: tiny_episode(i as f64 * 0.1),
                    label,
                    importance: 1.0,
                    arrival_step: i as u64,
                });
            }
        }
        buf
    }

    fn importances(entries: &[(u64, f64)]) -> ClusterImportance {
        ClusterImportance {
            values: entries.iter().copied().collect(),
            refreshed_at: 0,
        }
    }

    #[test]
    fn optimal_distribution_uniform_norms() {
        let d = optimal_task_distribution(&[1.0, 1.0, 1.0, 1.0], None).unwrap();
        assert!(!d.used_prior_fallback);
        for p in d.probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn optimal_distribution_direct_normalization() {
        let d = optimal_task_distribution(&[1.0, 3.0], None).unwrap();
        assert!((d.probs[0] - 0.25).abs() < 1e-12);
        assert!((d.probs[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn optimal_distribution_with_prior() {
        let d = optimal_task_distribution(&[2.0, 2.0, 4.0], Some(&[0.5, 0.25, 0.25])).unwrap();
        assert!((d.probs[0] - 0.4).abs() < 1e-12);
        assert!((d.probs[1] - 0.2).abs() < 1e-12);
        assert!((d.probs[2] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn optimal_distribution_zero_norms_falls_back() {
        let prior = [0.7, 0.3];
        let d = optimal_task_distribution(&[0.0, 0.0], Some(&prior)).unwrap();
        assert!(d.used_prior_fallback);
        assert_eq!(d.probs, prior.to_vec());
    }

    #[test]
    fn trace_zero_for_point_mass() {
        let t = estimator_covariance_trace(&[1.0], &[1.0], &[vec![3.0, -2.0]]).unwrap();
        assert!(t.abs() < 1e-12);
    }

    #[test]
    fn trace_matches_hand_computation() {
        // p uniform, orthonormal gradients, q uniform:
        // Σ q||g||² = 1, ||mean||² = 0.5, trace = 0.5.
        let grads = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let t = estimator_covariance_trace(&[0.5, 0.5], &[0.5, 0.5], &grads).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
    }

    #[test]
    fn trace_minimized_at_optimal_distribution() {
        let grads = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let prior = [0.5, 0.5];
        let at_optimal = estimator_covariance_trace(&prior, &[0.5, 0.5], &grads).unwrap();
        let skewed = estimator_covariance_trace(&prior, &[0.9, 0.1], &grads).unwrap();
        assert!(at_optimal < skewed);
    }

    #[test]
    fn trace_rejects_zero_q_inside_support() {
        let grads = vec![vec![1.0], vec![1.0]];
        assert!(estimator_covariance_trace(&[0.5, 0.5], &[1.0, 0.0], &grads).is_err());
    }

    #[test]
    fn plan_even_split() {
        let buf = buffer_with_sizes(&[(0, 2), (1, 2)]);
        let plan = build_sampling_plan(&buf, &importances(&[(0, 1.0), (1, 1.0)]), 0, 10).unwrap();
        assert!((plan.cluster_probs[&0] - 0.5).abs() < 1e-12);
        assert!((plan.cluster_probs[&1] - 0.5).abs() < 1e-12);
        assert!(!plan.size_fallback);
    }

    #[test]
    fn plan_weighted_by_size_and_importance() {
        let buf = buffer_with_sizes(&[(0, 3), (1, 1)]);
        let plan = build_sampling_plan(&buf, &importances(&[(0, 1.0), (1, 2.0)]), 0, 10).unwrap();
        assert!((plan.cluster_probs[&0] - 0.6).abs() < 1e-12);
        assert!((plan.cluster_probs[&1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn plan_zero_importance_falls_back_to_sizes() {
        let buf = buffer_with_sizes(&[(0, 5), (1, 5), (2, 10)]);
        let plan = build_sampling_plan(&buf, &importances(&[]), 0, 10).unwrap();
        assert!(plan.size_fallback);
        assert!((plan.cluster_probs[&0] - 0.25).abs() < 1e-12);
        assert!((plan.cluster_probs[&1] - 0.25).abs() < 1e-12);
        assert!((plan.cluster_probs[&2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn plan_scale_invariant_in_importance() {
        let buf = buffer_with_sizes(&[(0, 3), (1, 2), (2, 5)]);
        let base = build_sampling_plan(&buf, &importances(&[(0, 0.5), (1, 1.5), (2, 0.2)]), 0, 10).unwrap();
        for c in [0.1, 3.0, 1e6] {
            let scaled = build_sampling_plan(
                &buf,
                &importances(&[(0, 0.5 * c), (1, 1.5 * c), (2, 0.2 * c)]),
                0,
                10,
            )
            .unwrap();
            for (label, p) in &base.cluster_probs {
                assert!((p - scaled.cluster_probs[label]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pets_single_task_weight_one() {
        let buf = buffer_with_sizes(&[(0, 1)]);
        let plan = build_sampling_plan(&buf, &importances(&[(0, 2.0)]), 0, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = pets_sample(&buf, &plan, 1, 0, &mut rng).unwrap();
        assert_eq!(batch.len(), 1);
        assert!((batch.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pets_uniform_plan_weights_all_one() {
        let buf = buffer_with_sizes(&[(0, 4), (1, 6)]);
        let plan = build_sampling_plan(&buf, &importances(&[]), 0, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = pets_sample(&buf, &plan, 32, 3, &mut rng).unwrap();
        for w in &batch.weights {
            assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pets_weights_match_closed_form() {
        // Sizes (3,1), G = (1,2): Z = (0.6, 0.4). Small-cluster tasks have
        // q = 0.4 and weight 1/(4·0.4) = 0.625; large-cluster tasks have
        // q = 0.2 and weight 1.25.
        let buf = buffer_with_sizes(&[(0, 3), (1, 1)]);
        let plan = build_sampling_plan(&buf, &importances(&[(0, 1.0), (1, 2.0)]), 0, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = pets_sample(&buf, &plan, 200, 0, &mut rng).unwrap();
        let mut seen = [false, false];
        for (task, w) in batch.tasks.iter().zip(&batch.weights) {
            if task.label == 1 {
                assert!((w - 0.625).abs() < 1e-12);
                seen[1] = true;
            } else {
                assert!((w - 1.25).abs() < 1e-12);
                seen[0] = true;
            }
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn pets_refuses_stale_plan() {
        let buf = buffer_with_sizes(&[(0, 2)]);
        let plan = build_sampling_plan(&buf, &importances(&[(0, 1.0)]), 5, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(pets_sample(&buf, &plan, 1, 14, &mut rng).is_ok());
        assert!(pets_sample(&buf, &plan, 1, 15, &mut rng).is_err());
    }

    #[test]
    fn pets_rejects_empty_buffer() {
        let buf = MemoryBuffer::new(4).unwrap();
        let plan = SamplingPlan {
            cluster_probs: BTreeMap::new(),
            computed_at: 0,
            refresh_every: 10,
            size_fallback: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(pets_sample(&buf, &plan, 1, 0, &mut rng).is_err());
    }

    // Unbiasedness identity: Σ over all stored tasks of q·(w·g) equals the
    // plain buffer mean of g, exactly, for any plan with full support.
    #[test]
    fn weighted_estimator_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..50 {
            let sizes: Vec<(u64, usize)> = (0..2 + trial % 4)
                .map(|l| (l as u64, 1 + (rng.gen::<u64>() % 5) as usize))
                .collect();
            let buf = buffer_with_sizes(&sizes);
            let imps: Vec<(u64, f64)> = sizes
                .iter()
                .map(|(l, _)| (*l, rng.gen_range(0.1..3.0)))
                .collect();
            let plan = build_sampling_plan(&buf, &importances(&imps), 0, 10).unwrap();
            let n = buf.len() as f64;
            // Synthetic per-task scalar "gradients".
            let mut weighted_sum = 0.0;
            let mut plain_sum = 0.0;
            for record in buf.records() {
                let g = record.arrival_step as f64 + 0.7 * record.label as f64 + 1.0;
                let cluster_size = buf.cluster(record.label).unwrap().len();
                let q = plan.per_task_prob(record.label, cluster_size).unwrap();
                let w = 1.0 / (n * q);
                weighted_sum += q * w * g;
                plain_sum += g / n;
            }
            assert!(
                (weighted_sum - plain_sum).abs() < 1e-10,
                "trial {trial}: {weighted_sum} vs {plain_sum}"
            );
        }
    }

    #[test]
    fn meta_step_zero_eta_leaves_model_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = Model::identity(1);
        let before = model.params.clone();
        let buf = buffer_with_sizes(&[(0, 3)]);
        let plan = build_sampling_plan(&buf, &importances(&[(0, 1.0)]), 0, 10).unwrap();
        meta_train_step(
            &mut model,
            &[tiny_episode(0.2)],
            &buf,
            Some(&plan),
            2,
            0.0,
            0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(model.params, before);
    }

    // Side-by-side oracle: with no memory the step equals plain SGD on the
    // stream episodes.
    #[test]
    fn meta_step_empty_memory_equals_plain_sgd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let episodes = vec![tiny_episode(0.1), tiny_episode(-0.4)];
        let eta = 0.05;

        let mut updated = Model::identity(1);
        let buf = MemoryBuffer::new(4).unwrap();
        meta_train_step(&mut updated, &episodes, &buf, None, 2, eta, 0, &mut rng).unwrap();

        let mut reference = Model::identity(1);
        let mut total = vec![0.0; reference.params.len()];
        for ep in &episodes {
            let (g, _) = episode_gradient(&reference, ep).unwrap();
            for (t, gi) in total.iter_mut().zip(&g) {
                *t += gi / episodes.len() as f64;
            }
        }
        for (p, g) in reference.params.iter_mut().zip(&total) {
            *p -= eta * g;
        }
        assert_eq!(updated.params, reference.params);
    }
}
