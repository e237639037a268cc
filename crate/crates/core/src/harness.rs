//! Experiment orchestration: full-method and baseline runs over synthetic
//! schedules, detection-only replays of stream files, and paired
//! comparisons across seeds.
//!
//! Per step the pipeline follows the replay-training loop: refresh the
//! sampling plan (every s steps), sample replay tasks, take the meta
//! update, run the change detector, then update memory. Runs are
//! deterministic given (config, seed); multi-seed comparisons parallelize
//! across seeds only, each run being single-threaded.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Method, RunConfig};
use crate::detector::{Detector, DetectorConfig, DetectorStep};
use crate::error::{Error, Result};
use crate::learner::{episode_gradient, evaluate, Episode, Model};
use crate::memory::{m2d3_step, reservoir_step, ClusterImportance, MemoryBuffer};
use crate::sampler::{build_sampling_plan, estimator_covariance_trace, meta_train_step, SamplingPlan};
use crate::stream::{sample_episode, write_stream_file, Split, Stream, StreamItem};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TRACE_SCHEMA_VERSION: u32 = 1;

// Independent ChaCha streams per subsystem so method variants consume
// identical episode/eval randomness.
const RNG_STREAM_INIT: u64 = 1;
const RNG_STREAM_MEMORY: u64 = 2;
const RNG_STREAM_SAMPLER: u64 = 3;
const RNG_STREAM_EVAL: u64 = 4;

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    pub domain: u64,
    pub accuracy: f64,
    pub stderr: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub true_points: Vec<u64>,
    pub detections: Vec<u64>,
    pub matched: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub mean_delay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySummary {
    pub final_size: usize,
    pub label_counts: BTreeMap<u64, usize>,
    pub truth_counts: BTreeMap<u64, usize>,
    pub truth_proportions: BTreeMap<u64, f64>,
    /// ln(domain count) minus the entropy of truth proportions; 0 is a
    /// perfectly balanced buffer.
    pub entropy_deficit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariancePoint {
    pub step: u64,
    pub plan_trace: f64,
    pub uniform_trace: f64,
}

/// Which mechanisms actually executed, for pathway audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodePath {
    pub detector: bool,
    pub m2d3: bool,
    pub adaptive_sampling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    pub total_steps: u64,
    pub average_accuracy: f64,
    pub per_domain: Vec<DomainResult>,
    pub detection: DetectionSummary,
    pub memory: MemorySummary,
    pub gradient_variance: Vec<VariancePoint>,
    pub code_path: CodePath,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One trace row per stream step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub statistic: Option<f64>,
    pub threshold: Option<f64>,
    pub detected: bool,
    pub label: u64,
    pub buffer_size: usize,
    pub label_counts: Vec<(u64, usize)>,
    pub truth_counts: Vec<(u64, usize)>,
    pub mean_weight: f64,
}

fn pack_counts(counts: &BTreeMap<u64, usize>) -> String {
    counts
        .iter()
        .map(|(k, v)| format!("{k}:{v}"))
        .collect::<Vec<_>>()
        .join("|")
}

fn unpack_counts(field: &str) -> Option<Vec<(u64, usize)>> {
    if field.is_empty() {
        return Some(Vec::new());
    }
    field
        .split('|')
        .map(|pair| {
            let (k, v) = pair.split_once(':')?;
            Some((k.parse().ok()?, v.parse().ok()?))
        })
        .collect()
}

pub fn write_trace(path: &Path, method: Method, seed: u64, rows: &[TraceRow]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(
        out,
        "# schema_version={TRACE_SCHEMA_VERSION} method={} seed={seed}",
        method.as_str()
    )?;
    writeln!(
        out,
        "step,statistic,threshold,detected,label,buffer_size,label_counts,truth_counts,mean_weight"
    )?;
    for row in rows {
        let stat = row.statistic.map_or(String::new(), |v| format!("{v}"));
        let thr = row.threshold.map_or(String::new(), |v| format!("{v}"));
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            row.step,
            stat,
            thr,
            row.detected,
            row.label,
            row.buffer_size,
            pack_counts(&row.label_counts.iter().copied().collect()),
            pack_counts(&row.truth_counts.iter().copied().collect()),
            row.mean_weight
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("step,") || line.trim().is_empty() {
            continue;
        }
        let parse_err = |detail: &str| Error::Parse {
            line: idx + 1,
            detail: detail.to_string(),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(parse_err(&format!("expected 9 fields, got {}", fields.len())));
        }
        let opt_f64 = |s: &str| -> std::result::Result<Option<f64>, Error> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| parse_err("bad float"))
            }
        };
        rows.push(TraceRow {
            step: fields[0].parse().map_err(|_| parse_err("bad step"))?,
            statistic: opt_f64(fields[1])?,
            threshold: opt_f64(fields[2])?,
            detected: fields[3].parse().map_err(|_| parse_err("bad bool"))?,
            label: fields[4].parse().map_err(|_| parse_err("bad label"))?,
            buffer_size: fields[5].parse().map_err(|_| parse_err("bad size"))?,
            label_counts: unpack_counts(fields[6]).ok_or_else(|| parse_err("bad label_counts"))?,
            truth_counts: unpack_counts(fields[7]).ok_or_else(|| parse_err("bad truth_counts"))?,
            mean_weight: fields[8].parse().map_err(|_| parse_err("bad weight"))?,
        });
    }
    Ok(rows)
}

/// Greedy one-to-one matching of detections to true change points within
/// ±window steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMetrics {
    pub matched: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub mean_delay: Option<f64>,
}

pub fn match_detections(truths: &[u64], detections: &[u64], window: u64) -> DetectionMetrics {
    let mut used = vec![false; detections.len()];
    let mut matched = 0usize;
    let mut delay_sum = 0.0;
    for &t in truths {
        let mut best: Option<(usize, u64)> = None;
        for (i, &d) in detections.iter().enumerate() {
            if used[i] {
                continue;
            }
            let gap = d.abs_diff(t);
            if gap <= window && best.map_or(true, |(_, g)| gap < g) {
                best = Some((i, gap));
            }
        }
        if let Some((i, _)) = best {
            used[i] = true;
            matched += 1;
            delay_sum += detections[i] as f64 - t as f64;
        }
    }
    DetectionMetrics {
        matched,
        precision: if detections.is_empty() {
            None
        } else {
            Some(matched as f64 / detections.len() as f64)
        },
        recall: if truths.is_empty() {
            None
        } else {
            Some(matched as f64 / truths.len() as f64)
        },
        mean_delay: if matched > 0 {
            Some(delay_sum / matched as f64)
        } else {
            None
        },
    }
}

fn truth_counts(buf: &MemoryBuffer) -> BTreeMap<u64, usize> {
    let mut counts = BTreeMap::new();
    for record in buf.records() {
        if let Some(truth) = record.episode.domain_truth {
            *counts.entry(truth).or_insert(0) += 1;
        }
    }
    counts
}

fn memory_summary(buf: Option<&MemoryBuffer>, domain_count: usize) -> MemorySummary {
    let max_entropy = (domain_count as f64).ln();
    match buf {
        None => MemorySummary {
            final_size: 0,
            label_counts: BTreeMap::new(),
            truth_counts: BTreeMap::new(),
            truth_proportions: BTreeMap::new(),
            entropy_deficit: max_entropy,
        },
        Some(buf) => {
            let truth = truth_counts(buf);
            let total: usize = truth.values().sum();
            let mut proportions = BTreeMap::new();
            let mut entropy = 0.0;
            for (&domain, &count) in &truth {
                let p = count as f64 / total.max(1) as f64;
                proportions.insert(domain, p);
                if p > 0.0 {
                    entropy -= p * p.ln();
                }
            }
            MemorySummary {
                final_size: buf.len(),
                label_counts: buf.cluster_sizes(),
                truth_counts: truth,
                truth_proportions: proportions,
                entropy_deficit: max_entropy - entropy,
            }
        }
    }
}

/// Extra artifacts a run may emit.
#[derive(Debug, Default, Clone)]
pub struct RunOutputs {
    pub out_dir: Option<PathBuf>,
    pub export_stream: Option<PathBuf>,
}

/// Executes the configured pipeline over the schedule and meta-tests on
/// unseen tasks from every domain. Deterministic per (config, seed).
pub fn run(config: &RunConfig) -> Result<RunReport> {
    run_with_outputs(config, &RunOutputs::default())
}

pub fn run_with_outputs(config: &RunConfig, outputs: &RunOutputs) -> Result<RunReport> {
    config.validate()?;
    let schedule = config.schedule.build(config.model.input_dim)?;
    let params = config.episodes.to_params();
    let method = config.method;
    let eta = config.model.learning_rate;
    let replay_batch = config.effective_replay_batch();
    let refresh_every = config.sampler.refresh_every;
    let memory_policy = config.memory.policy();

    let mut init_rng = sub_rng(config.seed, RNG_STREAM_INIT);
    let mut memory_rng = sub_rng(config.seed, RNG_STREAM_MEMORY);
    let mut sampler_rng = sub_rng(config.seed, RNG_STREAM_SAMPLER);
    let mut eval_rng = sub_rng(config.seed, RNG_STREAM_EVAL);

    let mut model = Model::init(config.model.to_model_config(), &mut init_rng);
    let mut detector = if method.uses_detector() {
        Some(Detector::new(config.detector.to_detector_config())?)
    } else {
        None
    };
    let mut buffer = if method.uses_memory() && config.memory.capacity > 0 {
        Some(MemoryBuffer::new(config.memory.capacity)?)
    } else {
        None
    };
    let mut importance = ClusterImportance::default();
    let zero_importance = ClusterImportance::default();
    let mut plan: Option<SamplingPlan> = None;

    let mut stream = Stream::new(&schedule, params, config.seed)?;
    let extra_per_step = config.episodes.stream_batch - 1;
    let mut trace: Vec<TraceRow> = Vec::with_capacity(schedule.total_steps());
    let mut exported: Vec<StreamItem> = Vec::new();
    let mut variance_series = Vec::new();
    let mut detections = Vec::new();
    let mut current_label = 0u64;

    while let Some((item, extras)) = stream.next_batch(extra_per_step) {
        let step = item.step;
        if outputs.export_stream.is_some() {
            exported.push(item.clone());
        }
        let mut batch = Vec::with_capacity(1 + extras.len());
        batch.push(item.episode.clone());
        batch.extend(extras);

        // 1. Plan refresh every s steps (replay methods, non-empty memory).
        let mut refreshed_now = false;
        if method.uses_memory() && replay_batch > 0 {
            if let Some(buf) = &buffer {
                if !buf.is_empty()
                    && plan.as_ref().map_or(true, |p| p.is_stale(step))
                {
                    let imp = if method.uses_adaptive_sampling() {
                        importance.refresh(
                            buf,
                            &model,
                            config.sampler.tasks_per_cluster,
                            step,
                            &mut sampler_rng,
                        )?;
                        &importance
                    } else {
                        &zero_importance
                    };
                    plan = Some(build_sampling_plan(buf, imp, step, refresh_every)?);
                    refreshed_now = true;
                }
            }
        }

        // 2-3. Replay sample + one meta-training update.
        let info = match &buffer {
            Some(buf) => meta_train_step(
                &mut model,
                &batch,
                buf,
                plan.as_ref(),
                replay_batch,
                eta,
                step,
                &mut sampler_rng,
            )?,
            None => {
                let empty = MemoryBuffer::new(1)?;
                meta_train_step(
                    &mut model,
                    &batch,
                    &empty,
                    None,
                    0,
                    eta,
                    step,
                    &mut sampler_rng,
                )?
            }
        };

        // Gradient-variance diagnostic at plan refresh points.
        if refreshed_now {
            if let (Some(buf), Some(p)) = (&buffer, &plan) {
                if let Some(point) = variance_point(buf, p, &model, step)? {
                    variance_series.push(point);
                }
            }
        }

        // 4. Detector step (embeds the batch mean with the updated model).
        let mut det_out: Option<DetectorStep> = None;
        if let Some(det) = detector.as_mut() {
            let mut embedding = vec![0.0; model.config.embed_dim];
            for ep in &batch {
                let o = crate::detector::embed_task(ep, &model)?;
                for (acc, v) in embedding.iter_mut().zip(&o) {
                    *acc += v / batch.len() as f64;
                }
            }
            let out = det.step_embedding(&embedding).map_err(|e| match e {
                Error::RunAbort { detail, .. } => Error::RunAbort { step, detail },
                other => other,
            })?;
            if out.changed {
                detections.push(step);
            }
            current_label = out.label;
            det_out = Some(out);
        }

        // 5. Memory update.
        if let Some(buf) = buffer.as_mut() {
            for ep in &batch {
                match method {
                    Method::Ours => {
                        m2d3_step(
                            buf,
                            ep,
                            &model,
                            det_out.map_or(false, |o| o.changed),
                            current_label,
                            &importance,
                            &memory_policy,
                            step,
                            &mut memory_rng,
                        )?;
                    }
                    Method::Reservoir | Method::UniformReplay => {
                        reservoir_step(buf, ep, step, &mut memory_rng);
                    }
                    Method::Sequential => {}
                }
            }
        }

        trace.push(TraceRow {
            step,
            statistic: det_out.and_then(|o| o.statistic),
            threshold: det_out.and_then(|o| o.threshold),
            detected: det_out.map_or(false, |o| o.changed),
            label: current_label,
            buffer_size: buffer.as_ref().map_or(0, MemoryBuffer::len),
            label_counts: buffer
                .as_ref()
                .map_or_else(Vec::new, |b| b.cluster_sizes().into_iter().collect()),
            truth_counts: buffer
                .as_ref()
                .map_or_else(Vec::new, |b| truth_counts(b).into_iter().collect()),
            mean_weight: info.mean_weight,
        });
    }

    // Meta-test on unseen (test-split) tasks from every domain.
    let mut per_domain = Vec::new();
    let mut accuracy_sum = 0.0;
    for (index, (spec, _)) in schedule.segments.iter().enumerate() {
        let domain = crate::stream::make_domain(spec)?;
        let episodes: Vec<Episode> = (0..config.eval.episodes_per_domain)
            .map(|_| sample_episode(&domain, &params, Split::Test, &mut eval_rng))
            .collect::<Result<_>>()?;
        let eval = evaluate(&model, &episodes)?;
        accuracy_sum += eval.accuracy;
        per_domain.push(DomainResult {
            domain: index as u64,
            accuracy: eval.accuracy,
            stderr: eval.stderr,
            episodes: eval.episodes,
        });
    }
    let average_accuracy = accuracy_sum / schedule.segments.len() as f64;

    let window = (config.detector.window_size + config.detector.history_len) as u64;
    let truths = schedule.boundaries();
    let metrics = match_detections(&truths, &detections, window);
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method,
        seed: config.seed,
        total_steps: schedule.total_steps() as u64,
        average_accuracy,
        per_domain,
        detection: DetectionSummary {
            true_points: truths,
            detections,
            matched: metrics.matched,
            precision: metrics.precision,
            recall: metrics.recall,
            mean_delay: metrics.mean_delay,
        },
        memory: memory_summary(buffer.as_ref(), schedule.segments.len()),
        gradient_variance: variance_series,
        code_path: CodePath {
            detector: method.uses_detector(),
            m2d3: matches!(method, Method::Ours) && buffer.is_some(),
            adaptive_sampling: method.uses_adaptive_sampling() && buffer.is_some(),
        },
    };

    if let Some(dir) = &outputs.out_dir {
        std::fs::create_dir_all(dir)?;
        write_trace(
            &dir.join(format!("trace_seed{}.csv", config.seed)),
            method,
            config.seed,
            &trace,
        )?;
        let mut json = report.to_json();
        json.push('\n');
        std::fs::write(dir.join(format!("report_seed{}.json", config.seed)), json)?;
        if let Some(buf) = &buffer {
            std::fs::write(
                dir.join(format!("memory_seed{}.json", config.seed)),
                buf.snapshot_json(),
            )?;
        }
        model.save(&dir.join(format!("model_seed{}.json", config.seed)))?;
    }
    if let Some(path) = &outputs.export_stream {
        write_stream_file(path, exported.into_iter())?;
    }
    Ok(report)
}

/// Exact covariance traces under the plan vs uniform sampling over the
/// buffer's full gradient set.
fn variance_point(
    buf: &MemoryBuffer,
    plan: &SamplingPlan,
    model: &Model,
    step: u64,
) -> Result<Option<VariancePoint>> {
    let n = buf.len();
    if n == 0 {
        return Ok(None);
    }
    let sizes = buf.cluster_sizes();
    let mut grads = Vec::with_capacity(n);
    let mut q_plan = Vec::with_capacity(n);
    for record in buf.records() {
        let (g, _) = episode_gradient(model, &record.episode)?;
        grads.push(g);
        let q = plan
            .per_task_prob(record.label, sizes[&record.label])
            .unwrap_or(0.0);
        q_plan.push(q);
    }
    let q_total: f64 = q_plan.iter().sum();
    if q_total <= 0.0 {
        return Ok(None);
    }
    for q in q_plan.iter_mut() {
        *q /= q_total;
    }
    let uniform = vec![1.0 / n as f64; n];
    let plan_trace = estimator_covariance_trace(&uniform, &q_plan, &grads)?;
    let uniform_trace = estimator_covariance_trace(&uniform, &uniform, &grads)?;
    Ok(Some(VariancePoint {
        step,
        plan_trace,
        uniform_trace,
    }))
}

/// Standalone change-point detection over a stream file: embedding
/// (identity unless a model is given) plus the online detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectReport {
    pub schema_version: u32,
    pub steps: u64,
    pub true_points: Vec<u64>,
    pub detections: Vec<u64>,
    pub matched: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub mean_delay: Option<f64>,
    pub post_burn_in_steps: u64,
    pub false_alarm_step_rate: f64,
}

pub fn detect(
    items: &[StreamItem],
    cfg: DetectorConfig,
    model: Option<&Model>,
    trace_out: Option<&Path>,
) -> Result<DetectReport> {
    let mut writer = match trace_out {
        Some(path) => {
            let file = std::fs::File::create(path)?;
            let mut out = std::io::BufWriter::new(file);
            writeln!(out, "# schema_version={TRACE_SCHEMA_VERSION}")?;
            writeln!(out, "step,statistic,threshold,detected,label")?;
            Some(out)
        }
        None => None,
    };
    let mut report = DetectReport {
        schema_version: REPORT_SCHEMA_VERSION,
        steps: 0,
        true_points: Vec::new(),
        detections: Vec::new(),
        matched: 0,
        precision: None,
        recall: None,
        mean_delay: None,
        post_burn_in_steps: 0,
        false_alarm_step_rate: 0.0,
    };
    if items.is_empty() {
        return Ok(report);
    }
    let identity;
    let model = match model {
        Some(m) => m,
        None => {
            let dim = items[0].episode.support[0].x.len();
            identity = Model::identity(dim);
            &identity
        }
    };
    let mut detector = Detector::new(cfg)?;
    for item in items {
        let out = detector.step(&item.episode, model)?;
        report.steps += 1;
        if item.boundary {
            report.true_points.push(item.step);
        }
        if out.changed {
            report.detections.push(item.step);
        }
        if out.step > cfg.burn_in_steps() {
            report.post_burn_in_steps += 1;
        }
        if let Some(w) = writer.as_mut() {
            let stat = out.statistic.map_or(String::new(), |v| format!("{v}"));
            let thr = out.threshold.map_or(String::new(), |v| format!("{v}"));
            writeln!(w, "{},{},{},{},{}", item.step, stat, thr, out.changed, out.label)?;
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    let window = (cfg.window_size + cfg.history_len) as u64;
    let metrics = match_detections(&report.true_points, &report.detections, window);
    report.matched = metrics.matched;
    report.precision = metrics.precision;
    report.recall = metrics.recall;
    report.mean_delay = metrics.mean_delay;
    let false_alarms = report.detections.len() - report.matched;
    if report.post_burn_in_steps > 0 {
        report.false_alarm_step_rate = false_alarms as f64 / report.post_burn_in_steps as f64;
    }
    Ok(report)
}

/// Paired multi-seed comparison of configurations sharing one schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub seed: u64,
    pub average_accuracy: Vec<f64>,
    pub entropy_deficit: Vec<f64>,
    pub per_domain_accuracy: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub labels: Vec<String>,
    pub rows: Vec<ComparisonEntry>,
    /// Two-sided exact sign-test p-value of each non-baseline config's
    /// average-accuracy deltas against config 0.
    pub sign_test_p: Vec<Option<f64>>,
    pub mean_delta: Vec<f64>,
}

/// Exact two-sided binomial sign test on the signs of `deltas`.
pub fn sign_test_p_value(deltas: &[f64]) -> Option<f64> {
    let positive = deltas.iter().filter(|&&d| d > 0.0).count();
    let negative = deltas.iter().filter(|&&d| d < 0.0).count();
    let n = positive + negative;
    if n == 0 {
        return None;
    }
    let pmf = |k: usize| -> f64 {
        let mut log_c = 0.0;
        for i in 0..k {
            log_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        }
        (log_c - n as f64 * std::f64::consts::LN_2).exp()
    };
    let cdf_le: f64 = (0..=positive).map(pmf).sum();
    let cdf_ge: f64 = (positive..=n).map(pmf).sum();
    Some((2.0 * cdf_le.min(cdf_ge)).min(1.0))
}

pub fn compare(
    configs: &[RunConfig],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Comparison> {
    if configs.len() < 2 {
        return Err(Error::invalid("compare needs at least two configs"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("compare needs at least one seed"));
    }
    let key = configs[0].shared_setup_key();
    for cfg in &configs[1..] {
        if cfg.shared_setup_key() != key {
            return Err(Error::invalid(
                "compared configs must share schedule, episode, model, and eval settings",
            ));
        }
    }
    let labels: Vec<String> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| format!("cfg{i}-{}", c.method.as_str()))
        .collect();

    // Seed-level parallelism; each seed runs its configs sequentially so
    // deltas stay paired.
    let mut rows: Vec<ComparisonEntry> = Vec::with_capacity(seeds.len());
    let results: Vec<Result<ComparisonEntry>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let configs = &configs;
                let out_dir = out_dir.map(Path::to_path_buf);
                let labels = &labels;
                scope.spawn(move || -> Result<ComparisonEntry> {
                    let mut entry = ComparisonEntry {
                        seed,
                        average_accuracy: Vec::new(),
                        entropy_deficit: Vec::new(),
                        per_domain_accuracy: Vec::new(),
                    };
                    for (i, cfg) in configs.iter().enumerate() {
                        let mut cfg = cfg.clone();
                        cfg.seed = seed;
                        let outputs = RunOutputs {
                            out_dir: out_dir.as_ref().map(|d| d.join(&labels[i])),
                            export_stream: None,
                        };
                        let report = run_with_outputs(&cfg, &outputs)?;
                        entry.average_accuracy.push(report.average_accuracy);
                        entry.entropy_deficit.push(report.memory.entropy_deficit);
                        entry
                            .per_domain_accuracy
                            .push(report.per_domain.iter().map(|d| d.accuracy).collect());
                    }
                    Ok(entry)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("no panic")).collect()
    });
    for result in results {
        rows.push(result?);
    }
    rows.sort_by_key(|r| r.seed);

    let mut sign_test_p = vec![None];
    let mut mean_delta = vec![0.0];
    for i in 1..configs.len() {
        let deltas: Vec<f64> = rows
            .iter()
            .map(|r| r.average_accuracy[i] - r.average_accuracy[0])
            .collect();
        sign_test_p.push(sign_test_p_value(&deltas));
        mean_delta.push(deltas.iter().sum::<f64>() / deltas.len() as f64);
    }
    let comparison = Comparison {
        schema_version: REPORT_SCHEMA_VERSION,
        labels,
        rows,
        sign_test_p,
        mean_delta,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_comparison_csv(&dir.join("comparison.csv"), &comparison)?;
        let mut json = serde_json::to_string_pretty(&comparison)
            .expect("comparison serializes");
        json.push('\n');
        std::fs::write(dir.join("comparison.json"), json)?;
    }
    Ok(comparison)
}

fn write_comparison_csv(path: &Path, cmp: &Comparison) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "# schema_version={}", cmp.schema_version)?;
    let mut header = String::from("seed");
    for label in &cmp.labels {
        header.push_str(&format!(",avg_accuracy_{label}"));
    }
    for label in &cmp.labels[1..] {
        header.push_str(&format!(",delta_{label}"));
    }
    for label in &cmp.labels {
        header.push_str(&format!(",entropy_deficit_{label}"));
    }
    writeln!(out, "{header}")?;
    for row in &cmp.rows {
        let mut line = format!("{}", row.seed);
        for acc in &row.average_accuracy {
            line.push_str(&format!(",{acc}"));
        }
        for acc in &row.average_accuracy[1..] {
            line.push_str(&format!(",{}", acc - row.average_accuracy[0]));
        }
        for e in &row.entropy_deficit {
            line.push_str(&format!(",{e}"));
        }
        writeln!(out, "{line}")?;
    }
    let mut summary = String::from("sign_test_p");
    for p in &cmp.sign_test_p[1..] {
        summary.push_str(&format!(",{}", p.map_or(String::from("n/a"), |v| v.to_string())));
    }
    writeln!(out, "# {summary}")?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_pairs_each_truth_once() {
        let m = match_detections(&[100, 300], &[105, 104, 301], 10);
        assert_eq!(m.matched, 2);
        assert_eq!(m.precision, Some(2.0 / 3.0));
        assert_eq!(m.recall, Some(1.0));
        // Nearest detection 104 matches 100 (delay 4), 301 matches 300.
        assert!((m.mean_delay.unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn matching_respects_window() {
        let m = match_detections(&[100], &[150], 10);
        assert_eq!(m.matched, 0);
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(m.mean_delay, None);
    }

    #[test]
    fn sign_test_extremes() {
        assert_eq!(sign_test_p_value(&[0.0, 0.0]), None);
        let p = sign_test_p_value(&[1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((p - 2.0 * 0.03125).abs() < 1e-12);
        let p = sign_test_p_value(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert!(p > 0.5);
    }

    #[test]
    fn trace_roundtrip() {
        let rows = vec![
            TraceRow {
                step: 1,
                statistic: None,
                threshold: None,
                detected: false,
                label: 0,
                buffer_size: 1,
                label_counts: vec![(0, 1)],
                truth_counts: vec![(0, 1)],
                mean_weight: 0.0,
            },
            TraceRow {
                step: 2,
                statistic: Some(0.125),
                threshold: Some(0.5),
                detected: true,
                label: 1,
                buffer_size: 2,
                label_counts: vec![(0, 1), (1, 1)],
                truth_counts: vec![(0, 2)],
                mean_weight: 1.25,
            },
        ];
        let dir = std::env::temp_dir().join("metastream_trace_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.csv");
        write_trace(&path, Method::Ours, 7, &rows).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(rows, back);
    }
}
