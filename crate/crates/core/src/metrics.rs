//! Dice scores and per-domain evaluation reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::geometry::binarize;
use crate::mask::{BinaryMask, Image};
use crate::refine::{refine_batch, RefineOptions, Segmenter};

pub const VERSION: &str = concat!("cosam-core ", env!("CARGO_PKG_VERSION"));

/// `2|P ∩ L| / (|P| + |L|)`, with two empty masks scoring 1.
pub fn dsc(pred: &BinaryMask, label: &BinaryMask) -> Result<f64> {
    pred.dims().ensure_same(label.dims(), "dsc")?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &l) in pred.as_slice().iter().zip(label.as_slice()) {
        inter += usize::from(p && l);
        total += usize::from(p) + usize::from(l);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl RunMeta {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            version: VERSION.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    /// Prompt-free mask score.
    pub coarse_dsc: Option<f64>,
    /// Final (refined) mask score; `None` when the sample failed.
    pub dsc: Option<f64>,
    pub iterations: usize,
    /// Predicted error counts of the accepted iterations.
    #[serde(default)]
    pub n_w: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: String,
    pub mean_dsc: Option<f64>,
    pub mean_coarse_dsc: Option<f64>,
    pub scored: usize,
    pub missing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: RunMeta,
    pub grouped: bool,
    pub samples: Vec<SampleScore>,
    /// In first-appearance order of the samples.
    pub domains: Vec<DomainScore>,
    /// Unweighted mean of the per-domain means.
    pub average: f64,
    pub coarse_average: f64,
}

impl MetricsReport {
    /// Aggregates sample scores. With `grouped`, samples sharing a group key
    /// are averaged first and each group counts once in its domain's mean;
    /// samples without a key form their own group.
    pub fn from_samples(meta: RunMeta, samples: Vec<SampleScore>, grouped: bool) -> Self {
        let mut order: Vec<String> = Vec::new();
        for s in &samples {
            if !order.contains(&s.domain) {
                order.push(s.domain.clone());
            }
        }
        let domains: Vec<DomainScore> = order
            .iter()
            .map(|d| {
                let members: Vec<&SampleScore> = samples.iter().filter(|s| &s.domain == d).collect();
                let scored = members.iter().filter(|s| s.dsc.is_some()).count();
                DomainScore {
                    domain: d.clone(),
                    mean_dsc: domain_mean(&members, grouped, |s| s.dsc),
                    mean_coarse_dsc: domain_mean(&members, grouped, |s| s.coarse_dsc),
                    scored,
                    missing: members.len() - scored,
                }
            })
            .collect();
        let average = mean(domains.iter().filter_map(|d| d.mean_dsc)).unwrap_or(0.0);
        let coarse_average = mean(domains.iter().filter_map(|d| d.mean_coarse_dsc)).unwrap_or(0.0);
        Self {
            meta,
            grouped,
            samples,
            domains,
            average,
            coarse_average,
        }
    }

    pub fn domain(&self, name: &str) -> Option<&DomainScore> {
        self.domains.iter().find(|d| d.domain == name)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn domain_mean(members: &[&SampleScore], grouped: bool, value: impl Fn(&SampleScore) -> Option<f64>) -> Option<f64> {
    if !grouped {
        return mean(members.iter().filter_map(|s| value(s)));
    }
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in members {
        if let Some(v) = value(s) {
            let key = s.group.clone().unwrap_or_else(|| format!("\u{0}{}", s.id));
            groups.entry(key).or_default().push(v);
        }
    }
    mean(groups.values().filter_map(|vs| mean(vs.iter().copied())))
}

/// Runs the refinement loop on every target sample and scores the final
/// and coarse masks against the labels.
pub fn evaluate<S: Segmenter>(
    seg: &S,
    targets: &[DomainDataset],
    opts: &RefineOptions,
    grouped: bool,
    parallelism: usize,
    meta: RunMeta,
) -> Result<MetricsReport> {
    if targets.is_empty() {
        return Err(Error::input("evaluation needs at least one target domain"));
    }
    let mut scores = Vec::new();
    for domain in targets {
        let images: Vec<Image> = domain.samples.iter().map(|s| s.image.clone()).collect();
        let traces = refine_batch(seg, &images, opts, parallelism)?;
        for (s, trace) in domain.samples.iter().zip(traces) {
            let mut score = SampleScore {
                id: s.id.clone(),
                domain: s.domain.clone(),
                group: s.group.clone(),
                coarse_dsc: None,
                dsc: None,
                iterations: 0,
                n_w: Vec::new(),
                failure: None,
            };
            match trace {
                Ok(t) => {
                    score.coarse_dsc = Some(dsc(&binarize(&t.coarse, opts.threshold), &s.label)?);
                    score.dsc = Some(dsc(&binarize(t.final_mask(), opts.threshold), &s.label)?);
                    score.iterations = t.iterations.len();
                    score.n_w = t.n_w();
                    if let crate::refine::StopReason::Aborted(m) = &t.stop_reason {
                        score.failure = Some(m.clone());
                    }
                }
                Err(e) => score.failure = Some(e.to_string()),
            }
            scores.push(score);
        }
    }
    Ok(MetricsReport::from_samples(meta, scores, grouped))
}

/// Per-class reports of the same targets combined by averaging each
/// domain's mean over the classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiClassReport {
    pub classes: Vec<String>,
    pub domains: Vec<(String, f64)>,
    pub average: f64,
}

pub fn combine_classes(classes: &[(String, MetricsReport)]) -> Result<MultiClassReport> {
    let Some((_, first)) = classes.first() else {
        return Err(Error::input("no class reports to combine"));
    };
    let mut domains = Vec::new();
    for d in &first.domains {
        let mut values = Vec::new();
        for (name, r) in classes {
            let v = r
                .domain(&d.domain)
                .and_then(|s| s.mean_dsc)
                .ok_or_else(|| Error::input(format!("class {name} has no score for domain {}", d.domain)))?;
            values.push(v);
        }
        domains.push((d.domain.clone(), values.iter().sum::<f64>() / values.len() as f64));
    }
    let average = mean(domains.iter().map(|(_, v)| *v)).unwrap_or(0.0);
    Ok(MultiClassReport {
        classes: classes.iter().map(|(n, _)| n.clone()).collect(),
        domains,
        average,
    })
}
