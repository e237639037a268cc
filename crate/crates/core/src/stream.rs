//! Synthetic imbalanced-domain episode streams with ground-truth change
//! points.
//!
//! A domain is a Gaussian mixture: class means drawn around a domain center,
//! examples drawn around class means. Center separation controls domain
//! similarity; within-class noise controls difficulty. Classes are split
//! 70/30 into train/test so evaluation uses classes never seen in training
//! episodes.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{Episode, Example};

pub const STREAM_SCHEMA_VERSION: u32 = 1;

/// Generator parameters for one latent domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: u64,
    pub class_count: usize,
    /// Spread of class means around the center.
    pub class_mean_scale: f64,
    pub center: Vec<f64>,
    /// Within-class standard deviation; larger means harder.
    pub within_class_std: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::invalid("domain needs at least 2 classes"));
        }
        if !(self.within_class_std >= 0.0) || !(self.class_mean_scale >= 0.0) {
            return Err(Error::invalid("scales must be non-negative"));
        }
        if self.center.is_empty() {
            return Err(Error::invalid("domain center must have positive dimension"));
        }
        Ok(())
    }
}

/// Materialized domain: class means plus the train/test class split.
#[derive(Debug, Clone)]
pub struct Domain {
    pub spec: DomainSpec,
    class_means: Vec<Vec<f64>>,
    train_classes: Vec<usize>,
    test_classes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Episode shape shared across a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeParams {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        EpisodeParams {
            n_way: 5,
            k_shot: 5,
            query_per_class: 10,
        }
    }
}

/// Draws class means and splits classes 70/30 into train/test.
/// Deterministic given the spec's seed.
pub fn make_domain(spec: &DomainSpec) -> Result<Domain> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let dim = spec.center.len();
    let class_means: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| {
            (0..dim)
                .map(|d| spec.center[d] + spec.class_mean_scale * normal.sample(&mut rng))
                .collect()
        })
        .collect();
    let mut indices: Vec<usize> = (0..spec.class_count).collect();
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let train_count = ((0.7 * spec.class_count as f64).round() as usize)
        .clamp(1, spec.class_count - 1);
    let train_classes = indices[..train_count].to_vec();
    let test_classes = indices[train_count..].to_vec();
    Ok(Domain {
        spec: spec.clone(),
        class_means,
        train_classes,
        test_classes,
    })
}

impl Domain {
    pub fn split_classes(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_classes,
            Split::Test => &self.test_classes,
        }
    }

    pub fn class_mean(&self, class: usize) -> &[f64] {
        &self.class_means[class]
    }

    pub fn dim(&self) -> usize {
        self.spec.center.len()
    }
}

/// Samples one episode: `n_way` classes without replacement from the split,
/// then `k_shot` support and `query_per_class` query examples per class from
/// N(class mean, within_class_std²·I). Class indices are remapped to
/// episode-local labels; `domain_truth` carries the domain id.
pub fn sample_episode(
    domain: &Domain,
    params: &EpisodeParams,
    split: Split,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let classes = domain.split_classes(split);
    if classes.len() < params.n_way {
        return Err(Error::invalid(format!(
            "{split:?} split has {} classes, need n_way = {}",
            classes.len(),
            params.n_way
        )));
    }
    if params.n_way == 0 || params.k_shot == 0 || params.query_per_class == 0 {
        return Err(Error::invalid("episode shape parameters must be positive"));
    }
    // Partial Fisher-Yates over the split's class list.
    let mut pool: Vec<usize> = classes.to_vec();
    for i in 0..params.n_way {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let std = domain.spec.within_class_std;
    let mut support = Vec::with_capacity(params.n_way * params.k_shot);
    let mut query = Vec::with_capacity(params.n_way * params.query_per_class);
    for (label, &class) in pool[..params.n_way].iter().enumerate() {
        let mean = domain.class_mean(class);
        for _ in 0..params.k_shot {
            let x = mean.iter().map(|m| m + std * normal.sample(rng)).collect();
            support.push(Example { x, y: label });
        }
        for _ in 0..params.query_per_class {
            let x = mean.iter().map(|m| m + std * normal.sample(rng)).collect();
            query.push(Example { x, y: label });
        }
    }
    Ok(Episode {
        support,
        query,
        n_way: params.n_way,
        k_shot: params.k_shot,
        domain_truth: Some(domain.spec.id),
    })
}

/// Ordered domain segments with per-segment step counts. Ground-truth change
/// points sit at the cumulative boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub segments: Vec<(DomainSpec, usize)>,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::invalid("schedule has no segments"));
        }
        for (spec, steps) in &self.segments {
            spec.validate()?;
            if *steps == 0 {
                return Err(Error::invalid("segment step counts must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.segments.iter().map(|(_, s)| s).sum()
    }

    /// 1-based first steps of every segment after the first.
    pub fn boundaries(&self) -> Vec<u64> {
        let mut bounds = Vec::new();
        let mut acc = 0u64;
        for (i, (_, steps)) in self.segments.iter().enumerate() {
            if i > 0 {
                bounds.push(acc + 1);
            }
            acc += *steps as u64;
        }
        bounds
    }
}

/// One stream position: the episode plus ground truth only the harness may
/// consult.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamItem {
    pub step: u64,
    pub episode: Episode,
    pub truth_label: u64,
    pub boundary: bool,
}

/// Deterministic episode stream over a schedule: episodes come from each
/// segment's domain for its step count, in order, with no revisits.
pub struct Stream {
    domains: Vec<(Domain, usize)>,
    params: EpisodeParams,
    rng: ChaCha8Rng,
    segment: usize,
    step_in_segment: usize,
    step: u64,
}

impl Stream {
    pub fn new(schedule: &Schedule, params: EpisodeParams, seed: u64) -> Result<Self> {
        schedule.validate()?;
        let mut domains = Vec::with_capacity(schedule.segments.len());
        for (spec, steps) in &schedule.segments {
            let domain = make_domain(spec)?;
            if domain.split_classes(Split::Train).len() < params.n_way {
                return Err(Error::invalid(format!(
                    "domain {} train split too small for n_way {}",
                    spec.id, params.n_way
                )));
            }
            domains.push((domain, *steps));
        }
        Ok(Stream {
            domains,
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            segment: 0,
            step_in_segment: 0,
            step: 0,
        })
    }

    pub fn params(&self) -> &EpisodeParams {
        &self.params
    }

    /// Advances one step and draws `extra` additional episodes from the same
    /// segment's domain, for mini-batched steps.
    pub fn next_batch(&mut self, extra: usize) -> Option<(StreamItem, Vec<Episode>)> {
        let item = self.next()?;
        let (domain, _) = &self.domains[self.segment];
        let extras = (0..extra)
            .map(|_| {
                sample_episode(domain, &self.params, Split::Train, &mut self.rng)
                    .expect("validated at construction")
            })
            .collect();
        Some((item, extras))
    }
}

impl Iterator for Stream {
    type Item = StreamItem;

    fn next(&mut self) -> Option<StreamItem> {
        while self.segment < self.domains.len() {
            if self.step_in_segment >= self.domains[self.segment].1 {
                self.segment += 1;
                self.step_in_segment = 0;
                continue;
            }
            let boundary = self.segment > 0 && self.step_in_segment == 0;
            self.step += 1;
            self.step_in_segment += 1;
            let (domain, _) = &self.domains[self.segment];
            let episode = sample_episode(domain, &self.params, Split::Train, &mut self.rng)
                .expect("validated at construction");
            return Some(StreamItem {
                step: self.step,
                episode,
                truth_label: self.segment as u64,
                boundary,
            });
        }
        None
    }
}

#[derive(Serialize, Deserialize)]
struct StreamRecord {
    v: u32,
    step: u64,
    support: Vec<(Vec<f64>, usize)>,
    query: Vec<(Vec<f64>, usize)>,
    domain_truth: Option<u64>,
    truth_label: u64,
    boundary: bool,
}

/// Writes a stream as newline-delimited JSON, one record per step.
pub fn write_stream_file(
    path: &std::path::Path,
    items: impl Iterator<Item = StreamItem>,
) -> Result<usize> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    let mut count = 0;
    for item in items {
        let record = StreamRecord {
            v: STREAM_SCHEMA_VERSION,
            step: item.step,
            support: item
                .episode
                .support
                .iter()
                .map(|e| (e.x.clone(), e.y))
                .collect(),
            query: item
                .episode
                .query
                .iter()
                .map(|e| (e.x.clone(), e.y))
                .collect(),
            domain_truth: item.episode.domain_truth,
            truth_label: item.truth_label,
            boundary: item.boundary,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::invalid(format!("stream record serialize: {e}")))?;
        writeln!(out, "{line}")?;
        count += 1;
    }
    out.flush()?;
    Ok(count)
}

/// Reads a stream file back into items. Episode shape is recovered from the
/// records (n_way from distinct labels, k_shot from the support count).
pub fn read_stream_file(path: &std::path::Path) -> Result<Vec<StreamItem>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: StreamRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            detail: e.to_string(),
        })?;
        if record.v != STREAM_SCHEMA_VERSION {
            return Err(Error::Parse {
                line: idx + 1,
                detail: format!("unsupported stream schema version {}", record.v),
            });
        }
        let n_way = record
            .support
            .iter()
            .map(|(_, y)| *y)
            .max()
            .map_or(0, |m| m + 1);
        if n_way == 0 || record.support.len() % n_way != 0 {
            return Err(Error::Parse {
                line: idx + 1,
                detail: "support set is not k_shot per class".into(),
            });
        }
        let episode = Episode {
            k_shot: record.support.len() / n_way,
            support: record
                .support
                .into_iter()
                .map(|(x, y)| Example { x, y })
                .collect(),
            query: record
                .query
                .into_iter()
                .map(|(x, y)| Example { x, y })
                .collect(),
            n_way,
            domain_truth: record.domain_truth,
        };
        episode.validate().map_err(|e| Error::Parse {
            line: idx + 1,
            detail: e.to_string(),
        })?;
        items.push(StreamItem {
            step: record.step,
            episode,
            truth_label: record.truth_label,
            boundary: record.boundary,
        });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{evaluate, Model};

    fn spec(id: u64, seed: u64) -> DomainSpec {
        DomainSpec {
            id,
            class_count: 10,
            class_mean_scale: 3.0,
            center: vec![0.0; 4],
            within_class_std: 1.0,
            seed,
        }
    }

    #[test]
    fn domain_deterministic_given_seed() {
        let s = spec(0, 42);
        let a = make_domain(&s).unwrap();
        let b = make_domain(&s).unwrap();
        assert_eq!(a.class_means, b.class_means);
        assert_eq!(a.train_classes, b.train_classes);
    }

    #[test]
    fn zero_scale_collapses_means_to_center() {
        let mut s = spec(0, 1);
        s.class_mean_scale = 0.0;
        s.center = vec![2.0, -1.0, 0.5, 3.0];
        let d = make_domain(&s).unwrap();
        for mean in &d.class_means {
            assert_eq!(mean, &s.center);
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover_all_classes() {
        let d = make_domain(&spec(0, 7)).unwrap();
        let mut all: Vec<usize> = d.train_classes.iter().chain(&d.test_classes).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(d.train_classes.len(), 7);
        assert_eq!(d.test_classes.len(), 3);
    }

    #[test]
    fn episode_counts_match_parameters() {
        let d = make_domain(&spec(0, 3)).unwrap();
        let params = EpisodeParams { n_way: 2, k_shot: 1, query_per_class: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ep = sample_episode(&d, &params, Split::Train, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 2);
        assert_eq!(ep.query.len(), 2);
        ep.validate().unwrap();
        assert_eq!(ep.domain_truth, Some(0));
    }

    #[test]
    fn zero_noise_pins_examples_to_class_means() {
        let mut s = spec(0, 9);
        s.within_class_std = 0.0;
        let d = make_domain(&s).unwrap();
        let params = EpisodeParams { n_way: 3, k_shot: 2, query_per_class: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = sample_episode(&d, &params, Split::Train, &mut rng).unwrap();
        for e in ep.support.iter().chain(&ep.query) {
            assert!(d.class_means.iter().any(|m| m == &e.x));
        }
    }

    #[test]
    fn insufficient_classes_rejected() {
        let d = make_domain(&spec(0, 3)).unwrap();
        let params = EpisodeParams { n_way: 8, k_shot: 1, query_per_class: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Train split has 7 classes, test split 3.
        assert!(sample_episode(&d, &params, Split::Train, &mut rng).is_err());
    }

    // Monte-Carlo oracle: at scale/std ratio 10 the identity embedding
    // solves 5-way 5-shot nearly perfectly.
    #[test]
    fn well_separated_domain_is_easy() {
        let mut s = spec(0, 11);
        s.class_mean_scale = 10.0;
        s.within_class_std = 1.0;
        s.center = vec![0.0; 8];
        let d = make_domain(&s).unwrap();
        let params = EpisodeParams { n_way: 5, k_shot: 5, query_per_class: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let episodes: Vec<Episode> = (0..100)
            .map(|_| sample_episode(&d, &params, Split::Train, &mut rng).unwrap())
            .collect();
        let model = Model::identity(8);
        let eval = evaluate(&model, &episodes).unwrap();
        assert!(eval.accuracy > 0.95, "accuracy {}", eval.accuracy);
    }

    // Uniformity oracle: chi-square test over class selection counts.
    #[test]
    fn class_selection_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let d = make_domain(&spec(0, 17)).unwrap();
        let params = EpisodeParams { n_way: 2, k_shot: 1, query_per_class: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut counts = std::collections::BTreeMap::new();
        let episodes = 10_000;
        for _ in 0..episodes {
            let ep = sample_episode(&d, &params, Split::Train, &mut rng).unwrap();
            // Recover which global classes were drawn via nearest mean.
            for e in &ep.support {
                let class = d
                    .train_classes
                    .iter()
                    .copied()
                    .min_by(|&a, &b| {
                        let da: f64 = d.class_means[a].iter().zip(&e.x).map(|(m, x)| (m - x).powi(2)).sum();
                        let db: f64 = d.class_means[b].iter().zip(&e.x).map(|(m, x)| (m - x).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                *counts.entry(class).or_insert(0usize) += 1;
            }
        }
        let k = d.train_classes.len();
        let total: usize = counts.values().sum();
        let expected = total as f64 / k as f64;
        let chi2: f64 = d
            .train_classes
            .iter()
            .map(|c| {
                let obs = *counts.get(c).unwrap_or(&0) as f64;
                (obs - expected) * (obs - expected) / expected
            })
            .sum();
        let dist = ChiSquared::new((k - 1) as f64).unwrap();
        let p = 1.0 - dist.cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
    }

    fn two_segment_schedule() -> Schedule {
        Schedule {
            segments: vec![(spec(0, 21), 5), (spec(1, 22), 5)],
        }
    }

    #[test]
    fn single_segment_stream_has_no_boundaries() {
        let schedule = Schedule { segments: vec![(spec(0, 2), 10)] };
        let items: Vec<StreamItem> =
            Stream::new(&schedule, EpisodeParams::default(), 1).unwrap().collect();
        assert_eq!(items.len(), 10);
        assert!(items.iter().all(|i| !i.boundary));
        assert!(items.iter().all(|i| i.truth_label == 0));
    }

    #[test]
    fn boundary_flag_at_segment_start() {
        let items: Vec<StreamItem> =
            Stream::new(&two_segment_schedule(), EpisodeParams::default(), 1)
                .unwrap()
                .collect();
        assert_eq!(items.len(), 10);
        for item in &items {
            assert_eq!(item.boundary, item.step == 6, "step {}", item.step);
        }
        assert_eq!(two_segment_schedule().boundaries(), vec![6]);
    }

    #[test]
    fn truth_labels_piecewise_constant_increasing() {
        let items: Vec<StreamItem> =
            Stream::new(&two_segment_schedule(), EpisodeParams::default(), 1)
                .unwrap()
                .collect();
        let labels: Vec<u64> = items.iter().map(|i| i.truth_label).collect();
        assert_eq!(labels, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn stream_deterministic_given_seed() {
        let a: Vec<StreamItem> =
            Stream::new(&two_segment_schedule(), EpisodeParams::default(), 9).unwrap().collect();
        let b: Vec<StreamItem> =
            Stream::new(&two_segment_schedule(), EpisodeParams::default(), 9).unwrap().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn stream_file_roundtrip() {
        let dir = std::env::temp_dir().join("metastream_stream_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("stream.ndjson");
        let items: Vec<StreamItem> =
            Stream::new(&two_segment_schedule(), EpisodeParams::default(), 4).unwrap().collect();
        let written = write_stream_file(&path, items.iter().cloned()).unwrap();
        assert_eq!(written, 10);
        let back = read_stream_file(&path).unwrap();
        assert_eq!(items, back);
    }

    #[test]
    fn empty_stream_file_is_empty_report() {
        let dir = std::env::temp_dir().join("metastream_stream_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.ndjson");
        std::fs::write(&path, "").unwrap();
        assert!(read_stream_file(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_stream_file_reports_line() {
        let dir = std::env::temp_dir().join("metastream_stream_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ndjson");
        std::fs::write(&path, "{\"v\":1,\"step\":1\n").unwrap();
        match read_stream_file(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
