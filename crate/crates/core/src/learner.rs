//! Desk-scale episodic learner: a small embedding network with analytic
//! gradients and a prototype-based classifier.
//!
//! Queries are classified by softmax over negative squared Euclidean
//! distances to class prototypes (the mean support embedding per class);
//! the episode loss is mean query cross-entropy. Everything is exact: the
//! backward pass is hand-derived and checked against finite differences in
//! the tests.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One labelled feature vector. `y` is a class index local to its episode,
/// in `[0, n_way)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

/// One few-shot task: a support set used to form prototypes and a query set
/// used for the loss. `domain_truth` carries the generator's ground-truth
/// domain id and is only read by the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<Example>,
    pub query: Vec<Example>,
    pub n_way: usize,
    pub k_shot: usize,
    pub domain_truth: Option<u64>,
}

impl Episode {
    /// Checks the episode contract: exactly `k_shot` support examples for
    /// each of the `n_way` classes, a non-empty query set, and query labels
    /// drawn from the support label set.
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(Error::invalid("n_way and k_shot must be positive"));
        }
        if self.support.len() != self.n_way * self.k_shot {
            return Err(Error::invalid(format!(
                "support size {} != n_way*k_shot = {}",
                self.support.len(),
                self.n_way * self.k_shot
            )));
        }
        let mut counts = vec![0usize; self.n_way];
        for ex in &self.support {
            if ex.y >= self.n_way {
                return Err(Error::invalid(format!("support label {} out of range", ex.y)));
            }
            counts[ex.y] += 1;
        }
        if counts.iter().any(|&c| c != self.k_shot) {
            return Err(Error::invalid("support is not exactly k_shot per class"));
        }
        if self.query.is_empty() {
            return Err(Error::invalid("query set is empty"));
        }
        if self.query.iter().any(|ex| ex.y >= self.n_way) {
            return Err(Error::invalid("query label outside support label set"));
        }
        Ok(())
    }
}

/// Embedding architecture: a plain linear map or one tanh hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "hidden")]
pub enum Arch {
    Linear,
    Mlp(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub arch: Arch,
}

impl ModelConfig {
    pub fn param_count(&self) -> usize {
        match self.arch {
            Arch::Linear => self.embed_dim * self.input_dim + self.embed_dim,
            Arch::Mlp(h) => {
                h * self.input_dim + h + self.embed_dim * h + self.embed_dim
            }
        }
    }
}

/// Embedding network f_θ: R^d -> R^e with a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<f64>,
}

/// Checkpoint file wrapper: flat parameter array plus config header.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    config: ModelConfig,
    params: Vec<f64>,
}

impl Model {
    /// Seeded uniform(-0.1, 0.1) initialization.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Self {
        let params = (0..config.param_count())
            .map(|_| rng.gen_range(-0.1..0.1))
            .collect();
        Model { config, params }
    }

    /// Linear model with W = I and b = 0; embeds inputs unchanged.
    pub fn identity(dim: usize) -> Self {
        let config = ModelConfig {
            input_dim: dim,
            embed_dim: dim,
            arch: Arch::Linear,
        };
        let mut params = vec![0.0; config.param_count()];
        for i in 0..dim {
            params[i * dim + i] = 1.0;
        }
        Model { config, params }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let ckpt = Checkpoint {
            schema_version: 1,
            config: self.config,
            params: self.params.clone(),
        };
        let json = serde_json::to_string(&ckpt)
            .map_err(|e| Error::invalid(format!("checkpoint serialize: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            detail: format!("checkpoint: {e}"),
        })?;
        if ckpt.params.len() != ckpt.config.param_count() {
            return Err(Error::invalid("checkpoint parameter count mismatch"));
        }
        Ok(Model {
            config: ckpt.config,
            params: ckpt.params,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    // Parameter block offsets. Linear: [W (e×d), b (e)].
    // Mlp: [W1 (h×d), b1 (h), W2 (e×h), b2 (e)].
    fn forward_into(&self, x: &[f64], hidden_out: Option<&mut Vec<f64>>) -> Result<Vec<f64>> {
        let d = self.config.input_dim;
        let e = self.config.embed_dim;
        if x.len() != d {
            return Err(Error::DimensionMismatch(d, x.len()));
        }
        match self.config.arch {
            Arch::Linear => {
                let w = &self.params[..e * d];
                let b = &self.params[e * d..];
                let mut out = vec![0.0; e];
                for i in 0..e {
                    let row = &w[i * d..(i + 1) * d];
                    out[i] = b[i] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
                }
                Ok(out)
            }
            Arch::Mlp(h) => {
                let (w1, rest) = self.params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(e * h);
                let mut hid = vec![0.0; h];
                for i in 0..h {
                    let row = &w1[i * d..(i + 1) * d];
                    let pre = b1[i] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
                    hid[i] = pre.tanh();
                }
                let mut out = vec![0.0; e];
                for i in 0..e {
                    let row = &w2[i * h..(i + 1) * h];
                    out[i] = b2[i] + row.iter().zip(&hid).map(|(wi, hi)| wi * hi).sum::<f64>();
                }
                if let Some(slot) = hidden_out {
                    *slot = hid;
                }
                Ok(out)
            }
        }
    }

    /// Accumulates dL/dθ into `grad` given dL/d(embedding) for one input.
    fn backprop_example(
        &self,
        x: &[f64],
        hidden: &[f64],
        g_embed: &[f64],
        grad: &mut [f64],
    ) {
        let d = self.config.input_dim;
        let e = self.config.embed_dim;
        match self.config.arch {
            Arch::Linear => {
                for i in 0..e {
                    let row = &mut grad[i * d..(i + 1) * d];
                    for (slot, xi) in row.iter_mut().zip(x) {
                        *slot += g_embed[i] * xi;
                    }
                    grad[e * d + i] += g_embed[i];
                }
            }
            Arch::Mlp(h) => {
                let w2_off = h * d + h;
                let b2_off = w2_off + e * h;
                // Output layer.
                for i in 0..e {
                    for j in 0..h {
                        grad[w2_off + i * h + j] += g_embed[i] * hidden[j];
                    }
                    grad[b2_off + i] += g_embed[i];
                }
                // Backprop through tanh into the first layer.
                let w2 = &self.params[w2_off..w2_off + e * h];
                for j in 0..h {
                    let mut gh = 0.0;
                    for i in 0..e {
                        gh += w2[i * h + j] * g_embed[i];
                    }
                    gh *= 1.0 - hidden[j] * hidden[j];
                    for (slot, xi) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *slot += gh * xi;
                    }
                    grad[h * d + j] += gh;
                }
            }
        }
    }
}

/// Deterministic embedding of one input.
pub fn forward_embed(model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    model.forward_into(x, None)
}

struct EpisodeForward {
    support_embeds: Vec<Vec<f64>>,
    support_hiddens: Vec<Vec<f64>>,
    query_embeds: Vec<Vec<f64>>,
    query_hiddens: Vec<Vec<f64>>,
    prototypes: Vec<Vec<f64>>,
    /// softmax probabilities per query
    probs: Vec<Vec<f64>>,
    loss: f64,
}

fn episode_forward(model: &Model, ep: &Episode) -> Result<EpisodeForward> {
    ep.validate()?;
    let e = model.config.embed_dim;
    let is_mlp = matches!(model.config.arch, Arch::Mlp(_));
    let mut support_embeds = Vec::with_capacity(ep.support.len());
    let mut support_hiddens = Vec::with_capacity(ep.support.len());
    for ex in &ep.support {
        let mut hid = Vec::new();
        let emb = model.forward_into(&ex.x, if is_mlp { Some(&mut hid) } else { None })?;
        support_embeds.push(emb);
        support_hiddens.push(hid);
    }
    let mut prototypes = vec![vec![0.0; e]; ep.n_way];
    for (ex, emb) in ep.support.iter().zip(&support_embeds) {
        for (p, v) in prototypes[ex.y].iter_mut().zip(emb) {
            *p += v / ep.k_shot as f64;
        }
    }
    let mut query_embeds = Vec::with_capacity(ep.query.len());
    let mut query_hiddens = Vec::with_capacity(ep.query.len());
    let mut probs = Vec::with_capacity(ep.query.len());
    let mut loss = 0.0;
    for ex in &ep.query {
        let mut hid = Vec::new();
        let emb = model.forward_into(&ex.x, if is_mlp { Some(&mut hid) } else { None })?;
        let mut logits = vec![0.0; ep.n_way];
        for (c, proto) in prototypes.iter().enumerate() {
            let d2: f64 = emb.iter().zip(proto).map(|(a, b)| (a - b) * (a - b)).sum();
            logits[c] = -d2;
        }
        // Max-subtracted softmax.
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let p: Vec<f64> = exps.iter().map(|v| v / z).collect();
        loss -= p[ex.y].ln();
        probs.push(p);
        query_embeds.push(emb);
        query_hiddens.push(hid);
    }
    loss /= ep.query.len() as f64;
    Ok(EpisodeForward {
        support_embeds,
        support_hiddens,
        query_embeds,
        query_hiddens,
        prototypes,
        probs,
        loss,
    })
}

/// Mean query cross-entropy of the prototype classifier.
pub fn episode_loss(model: &Model, ep: &Episode) -> Result<f64> {
    episode_forward(model, ep).map(|f| f.loss)
}

/// Analytic gradient of [`episode_loss`] over the flat parameter vector,
/// plus the last-layer pre-activation proxy norm: the mean over queries of
/// ||∂ℓ_q/∂(embedding of q)||₂, each query differentiating its own
/// cross-entropy term.
pub fn episode_gradient(model: &Model, ep: &Episode) -> Result<(Vec<f64>, f64)> {
    let fwd = episode_forward(model, ep)?;
    let e = model.config.embed_dim;
    let q_count = ep.query.len() as f64;
    let mut grad = vec![0.0; model.params.len()];
    let mut proto_grads = vec![vec![0.0; e]; ep.n_way];
    let mut proxy_sum = 0.0;

    for (qi, ex) in ep.query.iter().enumerate() {
        let emb = &fwd.query_embeds[qi];
        // delta_c = softmax_c - 1{c == y}; own-loss embedding gradient is
        // Σ_c delta_c * (-2)(emb - proto_c).
        let mut g_emb = vec![0.0; e];
        for c in 0..ep.n_way {
            let mut delta = fwd.probs[qi][c];
            if c == ex.y {
                delta -= 1.0;
            }
            for k in 0..e {
                let diff = emb[k] - fwd.prototypes[c][k];
                g_emb[k] += delta * (-2.0) * diff;
                proto_grads[c][k] += delta * 2.0 * diff / q_count;
            }
        }
        proxy_sum += g_emb.iter().map(|v| v * v).sum::<f64>().sqrt();
        let g_scaled: Vec<f64> = g_emb.iter().map(|v| v / q_count).collect();
        model.backprop_example(&ex.x, &fwd.query_hiddens[qi], &g_scaled, &mut grad);
    }

    // Prototype gradients flow back into each class's support embeddings.
    for (si, ex) in ep.support.iter().enumerate() {
        let g: Vec<f64> = proto_grads[ex.y]
            .iter()
            .map(|v| v / ep.k_shot as f64)
            .collect();
        model.backprop_example(&ex.x, &fwd.support_hiddens[si], &g, &mut grad);
    }
    let _ = fwd.support_embeds;
    Ok((grad, proxy_sum / q_count))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub stderr: f64,
    pub episodes: usize,
}

/// Nearest-prototype accuracy averaged per episode, then across episodes;
/// stderr is the across-episode standard error.
pub fn evaluate(model: &Model, episodes: &[Episode]) -> Result<Evaluation> {
    if episodes.is_empty() {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let mut per_episode = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let fwd = episode_forward(model, ep)?;
        let mut correct = 0usize;
        for (qi, ex) in ep.query.iter().enumerate() {
            let pred = fwd.probs[qi]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                .map(|(c, _)| c)
                .unwrap();
            if pred == ex.y {
                correct += 1;
            }
        }
        per_episode.push(correct as f64 / ep.query.len() as f64);
    }
    let n = per_episode.len() as f64;
    let mean = per_episode.iter().sum::<f64>() / n;
    let stderr = if per_episode.len() > 1 {
        let var = per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(Evaluation {
        accuracy: mean,
        stderr,
        episodes: episodes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ex(x: Vec<f64>, y: usize) -> Example {
        Example { x, y }
    }

    fn toy_episode() -> Episode {
        Episode {
            support: vec![ex(vec![-1.0, 0.0], 0), ex(vec![1.0, 0.0], 1)],
            query: vec![ex(vec![-0.8, 0.2], 0), ex(vec![0.9, -0.1], 1)],
            n_way: 2,
            k_shot: 1,
            domain_truth: None,
        }
    }

    fn random_episode(rng: &mut ChaCha8Rng, d: usize, n_way: usize, k_shot: usize, q: usize) -> Episode {
        let mut support = Vec::new();
        let mut query = Vec::new();
        let centers: Vec<Vec<f64>> = (0..n_way)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..k_shot {
                let x = center.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
                support.push(ex(x, c));
            }
            for _ in 0..q {
                let x = center.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect();
                query.push(ex(x, c));
            }
        }
        Episode { support, query, n_way, k_shot, domain_truth: None }
    }

    #[test]
    fn identity_forward_is_identity() {
        let m = Model::identity(2);
        assert_eq!(forward_embed(&m, &[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn linear_scaling_forward() {
        let mut m = Model::identity(2);
        for p in m.params.iter_mut().take(4) {
            *p *= 2.0;
        }
        assert_eq!(forward_embed(&m, &[1.0, -1.0]).unwrap(), vec![2.0, -2.0]);
    }

    #[test]
    fn mlp_at_zero_outputs_second_layer_bias() {
        let config = ModelConfig { input_dim: 3, embed_dim: 2, arch: Arch::Mlp(4) };
        let mut m = Model { config, params: vec![0.0; config.param_count()] };
        let b2_off = 4 * 3 + 4 + 2 * 4;
        m.params[b2_off] = 0.7;
        m.params[b2_off + 1] = -0.3;
        assert_eq!(forward_embed(&m, &[1.0, 2.0, 3.0]).unwrap(), vec![0.7, -0.3]);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let m = Model::identity(2);
        assert!(forward_embed(&m, &[1.0]).is_err());
    }

    #[test]
    fn loss_ln2_for_equidistant_query() {
        let m = Model::identity(2);
        let ep = Episode {
            support: vec![ex(vec![-1.0, 0.0], 0), ex(vec![1.0, 0.0], 1)],
            query: vec![ex(vec![0.0, 1.0], 0)],
            n_way: 2,
            k_shot: 1,
            domain_truth: None,
        };
        let loss = episode_loss(&m, &ep).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_vanishes_with_saturated_prototypes() {
        let m = Model::identity(1);
        let ep = Episode {
            support: vec![ex(vec![0.0], 0), ex(vec![25.0], 1)],
            query: vec![ex(vec![0.0], 0), ex(vec![25.0], 1)],
            n_way: 2,
            k_shot: 1,
            domain_truth: None,
        };
        assert!(episode_loss(&m, &ep).unwrap() < 1e-8);
    }

    // Brute-force oracle: an independently coded loss over the same episode.
    #[test]
    fn loss_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let config = ModelConfig { input_dim: 4, embed_dim: 3, arch: Arch::Linear };
        let m = Model::init(config, &mut rng);
        let ep = random_episode(&mut rng, 4, 3, 2, 4);

        // Oracle path: recompute embeddings through explicit matrix algebra.
        let embed = |x: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; 3];
            for i in 0..3 {
                out[i] = m.params[3 * 4 + i];
                for j in 0..4 {
                    out[i] += m.params[i * 4 + j] * x[j];
                }
            }
            out
        };
        let mut protos = vec![vec![0.0; 3]; 3];
        let mut counts = vec![0usize; 3];
        for s in &ep.support {
            let e = embed(&s.x);
            for k in 0..3 {
                protos[s.y][k] += e[k];
            }
            counts[s.y] += 1;
        }
        for c in 0..3 {
            for k in 0..3 {
                protos[c][k] /= counts[c] as f64;
            }
        }
        let mut oracle_loss = 0.0;
        for q in &ep.query {
            let e = embed(&q.x);
            let logits: Vec<f64> = protos
                .iter()
                .map(|p| -e.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            oracle_loss -= (logits[q.y].exp() / z).ln();
        }
        oracle_loss /= ep.query.len() as f64;

        let loss = episode_loss(&m, &ep).unwrap();
        assert!((loss - oracle_loss).abs() < 1e-10);
    }

    fn finite_difference_grad(model: &Model, ep: &Episode) -> Vec<f64> {
        let step = 1e-5;
        let mut g = vec![0.0; model.params.len()];
        let mut m = model.clone();
        for i in 0..g.len() {
            let orig = m.params[i];
            m.params[i] = orig + step;
            let plus = episode_loss(&m, ep).unwrap();
            m.params[i] = orig - step;
            let minus = episode_loss(&m, ep).unwrap();
            m.params[i] = orig;
            g[i] = (plus - minus) / (2.0 * step);
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..20 {
            let arch = if trial % 2 == 0 { Arch::Linear } else { Arch::Mlp(5) };
            let config = ModelConfig { input_dim: 4, embed_dim: 3, arch };
            let m = Model::init(config, &mut rng);
            let ep = random_episode(&mut rng, 4, 3, 2, 3);
            let (grad, _) = episode_gradient(&m, &ep).unwrap();
            let fd = finite_difference_grad(&m, &ep);
            let scale = fd.iter().map(|v| v.abs()).fold(1e-8f64, f64::max);
            for (i, (a, b)) in grad.iter().zip(&fd).enumerate() {
                let rel = (a - b).abs() / scale.max(a.abs()).max(b.abs());
                assert!(rel < 1e-4, "trial {trial} coord {i}: analytic={a} fd={b}");
            }
        }
    }

    #[test]
    fn gradient_zero_at_symmetric_stationary_point() {
        let m = Model::identity(2);
        // Queries sit equidistant from both prototypes with opposite labels,
        // so the class deltas cancel exactly.
        let ep = Episode {
            support: vec![ex(vec![-1.0, 0.0], 0), ex(vec![1.0, 0.0], 1)],
            query: vec![ex(vec![0.0, 1.0], 0), ex(vec![0.0, 1.0], 1)],
            n_way: 2,
            k_shot: 1,
            domain_truth: None,
        };
        let (grad, _) = episode_gradient(&m, &ep).unwrap();
        let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "gradient norm {norm}");
    }

    #[test]
    fn gradient_invariant_under_query_duplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = ModelConfig { input_dim: 3, embed_dim: 2, arch: Arch::Linear };
        let m = Model::init(config, &mut rng);
        let ep = random_episode(&mut rng, 3, 2, 2, 3);
        let mut doubled = ep.clone();
        doubled.query.extend(ep.query.iter().cloned());
        let (g1, p1) = episode_gradient(&m, &ep).unwrap();
        let (g2, p2) = episode_gradient(&m, &doubled).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn proxy_norm_near_zero_when_predictions_exact() {
        // Far-separated prototypes with queries on top of them: softmax
        // saturates to one-hot, so the embedding gradient vanishes.
        let m = Model::identity(1);
        let ep = Episode {
            support: vec![ex(vec![0.0], 0), ex(vec![30.0], 1)],
            query: vec![ex(vec![0.0], 0), ex(vec![30.0], 1)],
            n_way: 2,
            k_shot: 1,
            domain_truth: None,
        };
        let (_, proxy) = episode_gradient(&m, &ep).unwrap();
        assert!(proxy < 1e-8);
    }

    #[test]
    fn prediction_invariant_under_common_translation() {
        let m = Model::identity(2);
        let base = toy_episode();
        let shifted = Episode {
            support: base.support.iter().map(|e0| ex(e0.x.iter().map(|v| v + 13.0).collect(), e0.y)).collect(),
            query: base.query.iter().map(|e0| ex(e0.x.iter().map(|v| v + 13.0).collect(), e0.y)).collect(),
            ..base.clone()
        };
        let a = evaluate(&m, &[base]).unwrap();
        let b = evaluate(&m, &[shifted]).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn evaluate_perfect_separation() {
        let m = Model::identity(2);
        let ep = toy_episode();
        let eval = evaluate(&m, &[ep]).unwrap();
        assert_eq!(eval.accuracy, 1.0);
    }

    #[test]
    fn evaluate_chance_level_on_permuted_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let m = Model::identity(4);
        let mut episodes = Vec::new();
        for _ in 0..750 {
            let mut ep = random_episode(&mut rng, 4, 5, 1, 2);
            // Uniformly random query labels sever the label-feature link.
            for q in ep.query.iter_mut() {
                q.y = rng.gen_range(0..5);
            }
            episodes.push(ep);
        }
        let eval = evaluate(&m, &episodes).unwrap();
        assert!((eval.accuracy - 0.2).abs() < 0.02, "accuracy {}", eval.accuracy);
    }

    #[test]
    fn sgd_decreases_smoothed_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let config = ModelConfig { input_dim: 6, embed_dim: 4, arch: Arch::Linear };
        let mut m = Model::init(config, &mut rng);
        let eta = 0.05;
        let mut first_avg = 0.0;
        let mut last_avg = 0.0;
        for step in 0..200 {
            let ep = random_episode(&mut rng, 6, 3, 2, 4);
            let loss = episode_loss(&m, &ep).unwrap();
            let (grad, _) = episode_gradient(&m, &ep).unwrap();
            for (p, g) in m.params.iter_mut().zip(&grad) {
                *p -= eta * g;
            }
            if step < 40 {
                first_avg += loss / 40.0;
            }
            if step >= 160 {
                last_avg += loss / 40.0;
            }
        }
        assert!(last_avg < first_avg, "{last_avg} !< {first_avg}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let config = ModelConfig { input_dim: 3, embed_dim: 2, arch: Arch::Mlp(4) };
        let m = Model::init(config, &mut rng);
        let dir = std::env::temp_dir().join("metastream_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        m.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(m, loaded);
    }

    #[test]
    fn episode_validation_catches_bad_shapes() {
        let mut ep = toy_episode();
        ep.query.clear();
        assert!(ep.validate().is_err());
        let mut ep = toy_episode();
        ep.support.pop();
        assert!(ep.validate().is_err());
        let mut ep = toy_episode();
        ep.query[0].y = 5;
        assert!(ep.validate().is_err());
    }
}
