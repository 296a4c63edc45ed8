//! Verification back-end: cosine scoring, adaptive symmetric score
//! normalization, EER and minDCF.
//!
//! Decisions accept a trial when `score >= threshold`. Operating points are
//! evaluated at every distinct score plus `+inf` (reject everything).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::audio::FbankExtractor;
use crate::backbones::Backbone;
use crate::error::{Error, Result};
use crate::trainer::{Manifest, ManifestEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn is_target(self) -> bool {
        self == TrialLabel::Target
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
        })
    }
}

impl FromStr for TrialLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(TrialLabel::Target),
            "nontarget" => Ok(TrialLabel::Nontarget),
            other => Err(Error::format("trial list", format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: TrialLabel,
}

/// Trial list, one `<enroll> <test> <target|nontarget>` per line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn parse(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::format(
                    "trial list",
                    format!("line {}: expected 3 fields, found {}", lineno + 1, parts.len()),
                ));
            }
            trials.push(Trial {
                enroll: parts[0].to_string(),
                test: parts[1].to_string(),
                label: parts[2].parse()?,
            });
        }
        Ok(Self { trials })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.trials
            .iter()
            .map(|t| format!("{} {} {}\n", t.enroll, t.test, t.label))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn count(&self, label: TrialLabel) -> usize {
        self.trials.iter().filter(|t| t.label == label).count()
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_score(e1: &Array1<f64>, e2: &Array1<f64>) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} dimensional embeddings", e1.len(), e2.len())));
    }
    let n1 = e1.dot(e1).sqrt();
    let n2 = e2.dot(e2).sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Degenerate("zero-norm embedding".into()));
    }
    Ok((e1.dot(e2) / (n1 * n2)).clamp(-1.0, 1.0))
}

/// Mean and population standard deviation of the `k` largest cohort scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CohortStats {
    pub mean: f64,
    pub std: f64,
}

impl CohortStats {
    pub fn top_k(scores: &[f64], k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("cohort top-k must be at least 2, got {k}")));
        }
        if scores.len() < k {
            return Err(Error::invalid(format!(
                "cohort has {} scores, fewer than top-k {k}",
                scores.len()
            )));
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let top = &sorted[..k];
        let mean = top.iter().sum::<f64>() / k as f64;
        let var = top.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        Ok(Self { mean, std: var.sqrt() })
    }
}

/// Normalized score and whether normalization had to fall back to the raw score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedScore {
    pub score: f64,
    pub degenerate: bool,
}

fn asnorm_from_stats(raw: f64, e: CohortStats, t: CohortStats) -> NormalizedScore {
    if e.std == 0.0 || t.std == 0.0 {
        log::warn!("AS-norm cohort has zero spread; keeping raw score");
        return NormalizedScore {
            score: raw,
            degenerate: true,
        };
    }
    NormalizedScore {
        score: 0.5 * ((raw - e.mean) / e.std + (raw - t.mean) / t.std),
        degenerate: false,
    }
}

/// Adaptive symmetric normalization with the top-`k` scores of each cohort.
pub fn asnorm(raw: f64, enroll_cohort: &[f64], test_cohort: &[f64], k: usize) -> Result<NormalizedScore> {
    let e = CohortStats::top_k(enroll_cohort, k)?;
    let t = CohortStats::top_k(test_cohort, k)?;
    Ok(asnorm_from_stats(raw, e, t))
}

fn check_two_classes(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let nt = labels.iter().filter(|l| **l).count();
    let nn = labels.len() - nt;
    if nt == 0 || nn == 0 {
        return Err(Error::invalid(format!(
            "need both target and nontarget trials, got {nt} targets and {nn} nontargets"
        )));
    }
    Ok((nt, nn))
}

/// Operating point: threshold, miss rate (false rejects) and false-alarm rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points at every distinct score (ascending) followed by `+inf`.
pub fn operating_points(scores: &[f64], labels: &[bool]) -> Result<Vec<OperatingPoint>> {
    let (nt, nn) = check_two_classes(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut points = Vec::new();
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let tau = scores[order[i]];
        points.push(OperatingPoint {
            threshold: tau,
            p_miss: tar_below as f64 / nt as f64,
            p_fa: (nn - non_below) as f64 / nn as f64,
        });
        while i < order.len() && scores[order[i]] == tau {
            if labels[order[i]] {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// EER from an ascending list of operating points: the first crossing of
/// miss and false-alarm rates, linearly interpolated between the two points
/// that bracket it.
pub fn eer_from_points(points: &[OperatingPoint]) -> (f64, f64) {
    for i in 0..points.len() {
        let p = points[i];
        let d = p.p_miss - p.p_fa;
        if d < 0.0 {
            continue;
        }
        if d == 0.0 || i == 0 {
            return (p.p_miss, p.threshold);
        }
        let q = points[i - 1];
        let dq = q.p_miss - q.p_fa;
        let alpha = -dq / (d - dq);
        let eer = q.p_miss + alpha * (p.p_miss - q.p_miss);
        let thr = if p.threshold.is_finite() {
            q.threshold + alpha * (p.threshold - q.threshold)
        } else {
            q.threshold
        };
        return (eer, thr);
    }
    unreachable!("the +inf operating point always has p_miss >= p_fa")
}

/// Equal error rate in `[0, 1]` and the threshold at the crossover.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    Ok(eer_from_points(&operating_points(scores, labels)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::invalid(format!("p_target {} outside (0, 1)", self.p_target)));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::invalid("detection costs must be positive"));
        }
        Ok(())
    }

    /// Normalized cost of one operating point.
    pub fn cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        let c = self.c_miss * self.p_target * p_miss + self.c_fa * (1.0 - self.p_target) * p_fa;
        c / (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// Normalized minimum detection cost and the (lowest) threshold achieving it.
pub fn compute_min_dcf(scores: &[f64], labels: &[bool], params: &DcfParams) -> Result<(f64, f64)> {
    params.validate()?;
    let points = operating_points(scores, labels)?;
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in &points {
        let c = params.cost(p.p_miss, p.p_fa);
        if c < best.0 {
            best = (c, p.threshold);
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub min_dcf_threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

pub fn compute_metrics(scores: &[f64], labels: &[bool], params: &DcfParams) -> Result<Metrics> {
    let (nt, nn) = check_two_classes(scores, labels)?;
    let (eer, eer_threshold) = compute_eer(scores, labels)?;
    let (min_dcf, min_dcf_threshold) = compute_min_dcf(scores, labels, params)?;
    Ok(Metrics {
        eer,
        eer_threshold,
        min_dcf,
        min_dcf_threshold,
        n_target: nt,
        n_nontarget: nn,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub raw: f64,
    pub normalized: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub scored: Vec<ScoredTrial>,
}

impl ScoreSet {
    pub fn labels(&self) -> Vec<bool> {
        self.scored.iter().map(|s| s.trial.label.is_target()).collect()
    }

    pub fn raw_scores(&self) -> Vec<f64> {
        self.scored.iter().map(|s| s.raw).collect()
    }

    pub fn normalized_scores(&self) -> Option<Vec<f64>> {
        self.scored.iter().map(|s| s.normalized).collect()
    }

    /// CSV with header `enroll,test,raw_score,norm_score,label`; `norm_score`
    /// is empty when no cohort was used.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "enroll,test,raw_score,norm_score,label")?;
        for s in &self.scored {
            let norm = s.normalized.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", s.trial.enroll, s.trial.test, s.raw, norm, s.trial.label)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialReport {
    pub scores: ScoreSet,
    pub raw: Metrics,
    pub normalized: Option<Metrics>,
}

impl TrialReport {
    /// Metrics of the normalized column when present, else the raw column.
    pub fn selected(&self) -> &Metrics {
        self.normalized.as_ref().unwrap_or(&self.raw)
    }
}

/// Cohort used for AS-norm: embeddings plus the top-k size.
pub struct Cohort<'a> {
    pub embeddings: &'a [Array1<f64>],
    pub top_k: usize,
}

/// Scores every trial, optionally AS-normalizes against a cohort, and
/// computes metrics on the raw and normalized columns.
pub fn run_trials(
    trials: &TrialList,
    embeddings: &HashMap<String, Array1<f64>>,
    cohort: Option<Cohort<'_>>,
    dcf: &DcfParams,
) -> Result<TrialReport> {
    if trials.is_empty() {
        return Err(Error::invalid("trial list is empty"));
    }
    let lookup = |utt: &str| {
        embeddings.get(utt).ok_or_else(|| Error::Missing {
            kind: "embedding for utterance",
            name: utt.to_string(),
        })
    };
    let mut stats: BTreeMap<&str, CohortStats> = BTreeMap::new();
    if let Some(c) = &cohort {
        for t in &trials.trials {
            for utt in [t.enroll.as_str(), t.test.as_str()] {
                if stats.contains_key(utt) {
                    continue;
                }
                let e = lookup(utt)?;
                let cs: Vec<f64> = c
                    .embeddings
                    .iter()
                    .map(|ce| cosine_score(e, ce))
                    .collect::<Result<_>>()?;
                stats.insert(utt, CohortStats::top_k(&cs, c.top_k)?);
            }
        }
    }
    let mut scored = Vec::with_capacity(trials.len());
    for t in &trials.trials {
        let raw = cosine_score(lookup(&t.enroll)?, lookup(&t.test)?)?;
        let normalized = cohort
            .as_ref()
            .map(|_| asnorm_from_stats(raw, stats[t.enroll.as_str()], stats[t.test.as_str()]).score);
        scored.push(ScoredTrial {
            trial: t.clone(),
            raw,
            normalized,
        });
    }
    let scores = ScoreSet { scored };
    let labels = scores.labels();
    let raw = compute_metrics(&scores.raw_scores(), &labels, dcf)?;
    let normalized = scores
        .normalized_scores()
        .map(|n| compute_metrics(&n, &labels, dcf))
        .transpose()?;
    Ok(TrialReport {
        scores,
        raw,
        normalized,
    })
}

/// Inference-mode embeddings for every utterance of `manifest`, batching
/// utterances of equal length.
pub fn extract_embeddings(encoder: &Backbone, manifest: &Manifest) -> Result<HashMap<String, Array1<f64>>> {
    let fbank = FbankExtractor::new(encoder.config().num_mels)?;
    let mut by_len: BTreeMap<usize, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in &manifest.entries {
        by_len.entry(e.n_samples).or_default().push(e);
    }
    let mut out = HashMap::with_capacity(manifest.len());
    for group in by_len.values() {
        for chunk in group.chunks(EMBED_BATCH) {
            let feats = chunk
                .iter()
                .map(|e| fbank.compute(&manifest.load_waveform(e)?))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = feats.iter().collect();
            for (e, emb) in chunk.iter().zip(encoder.embed_batch(&refs)?) {
                if out.insert(e.utt_id.clone(), emb).is_some() {
                    return Err(Error::invalid(format!("duplicate utterance id {}", e.utt_id)));
                }
            }
        }
    }
    Ok(out)
}

const EMBED_BATCH: usize = 32;
