//! Biometric evaluation: pair selection, FMR threshold calibration, MMPMR
//! and APCER/BPCER/EER.
//!
//! Polarity is fixed project-wide: recognition scores are cosine
//! similarities (higher means same identity), detector scores are attack
//! likelihoods (higher means attack).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::conditioning::{IdentityEmbedding, IdentityModel};
use crate::error::{param_err, Error, Result};

pub const FR_POLARITY: &str = "recognition scores: cosine similarity, higher = same identity; match if score >= tau";
pub const MAD_POLARITY: &str = "detector scores: attack likelihood, higher = attack; attack if score >= tau";

/// Serializes non-finite thresholds as the strings `"inf"` / `"-inf"`.
pub mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(serde::Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad threshold {t:?}"))),
        }
    }
}

fn check_similarity(v: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&v) {
        return param_err(format!("similarity score {v} outside [-1, 1]"));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        for &v in genuine.iter().chain(&impostor) {
            check_similarity(v)?;
        }
        Ok(Self { genuine, impostor })
    }

    pub fn mean_genuine(&self) -> f64 {
        mean(&self.genuine)
    }

    pub fn mean_impostor(&self) -> f64 {
        mean(&self.impostor)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores of one morph against the references of both its sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphComparisonRecord {
    pub morph_id: String,
    pub embedder_id: String,
    pub score_vs_a: f64,
    pub score_vs_b: f64,
}

impl MorphComparisonRecord {
    pub fn new(
        morph_id: impl Into<String>,
        embedder_id: impl Into<String>,
        score_vs_a: f64,
        score_vs_b: f64,
    ) -> Result<Self> {
        check_similarity(score_vs_a)?;
        check_similarity(score_vs_b)?;
        Ok(Self {
            morph_id: morph_id.into(),
            embedder_id: embedder_id.into(),
            score_vs_a,
            score_vs_b,
        })
    }

    /// Per-subject score is the maximum over that subject's probes.
    pub fn from_probes(
        morph_id: impl Into<String>,
        embedder_id: impl Into<String>,
        probes_a: &[f64],
        probes_b: &[f64],
    ) -> Result<Self> {
        let best = |p: &[f64]| p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if probes_a.is_empty() || probes_b.is_empty() {
            return Err(Error::Data("every source needs at least one probe".into()));
        }
        Self::new(morph_id, embedder_id, best(probes_a), best(probes_b))
    }

    pub fn min_score(&self) -> f64 {
        self.score_vs_a.min(self.score_vs_b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbedding {
    pub id: String,
    pub group: String,
    pub embedding: IdentityEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphPair {
    /// Lexicographically smaller id.
    pub id_a: String,
    pub id_b: String,
    pub group: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSelection {
    pub pairs: Vec<MorphPair>,
    /// Set when some group had fewer than `k` candidate pairs.
    pub saturated: bool,
}

fn pair_order(x: &MorphPair, y: &MorphPair) -> Ordering {
    y.similarity
        .total_cmp(&x.similarity)
        .then_with(|| x.id_a.cmp(&y.id_a))
        .then_with(|| x.id_b.cmp(&y.id_b))
}

/// Top-`k` most similar cross-identity pairs within each attribute group.
pub fn select_pairs(items: &[LabeledEmbedding], k: usize) -> Result<PairSelection> {
    let mut groups: BTreeMap<&str, Vec<&LabeledEmbedding>> = BTreeMap::new();
    for item in items {
        groups.entry(item.group.as_str()).or_default().push(item);
    }
    let mut pairs = Vec::new();
    let mut saturated = false;
    for (group, members) in groups {
        if members.len() < 2 {
            return param_err(format!("group {group:?} has fewer than two identities"));
        }
        let mut candidates = Vec::new();
        for (i, x) in members.iter().enumerate() {
            for y in &members[i + 1..] {
                if x.id == y.id {
                    return param_err(format!("duplicate identity {:?}", x.id));
                }
                if x.embedding.dim() != y.embedding.dim() {
                    return param_err("embedding dimensions differ");
                }
                let (a, b) = if x.id < y.id { (x, y) } else { (y, x) };
                candidates.push(MorphPair {
                    id_a: a.id.clone(),
                    id_b: b.id.clone(),
                    group: group.to_owned(),
                    similarity: a.embedding.cosine(&b.embedding),
                });
            }
        }
        candidates.sort_by(pair_order);
        if candidates.len() < k {
            saturated = true;
        }
        candidates.truncate(k);
        pairs.extend(candidates);
    }
    pairs.sort_by(pair_order);
    Ok(PairSelection { pairs, saturated })
}

fn sorted(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.iter().any(|v| v.is_nan()) {
        return param_err("scores contain NaN");
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Number of sorted scores `>= tau`.
fn count_at_least(sorted: &[f64], tau: f64) -> usize {
    sorted.len() - sorted.partition_point(|&v| v < tau)
}

fn rate_within(count: usize, n: usize, target: f64) -> bool {
    count as f64 <= target * n as f64 + 1e-9
}

fn candidate_thresholds(sorted_scores: &[&[f64]]) -> Vec<f64> {
    let mut all: Vec<f64> = sorted_scores.iter().flat_map(|s| s.iter().copied()).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all.push(f64::INFINITY);
    all
}

/// Smallest threshold drawn from the observed scores plus `+∞` whose false
/// match rate `fraction(impostor >= τ)` does not exceed `fmr_target`.
pub fn calibrate_threshold(impostor_scores: &[f64], fmr_target: f64) -> Result<f64> {
    if impostor_scores.is_empty() {
        return param_err("threshold calibration needs impostor scores");
    }
    if !(fmr_target > 0.0 && fmr_target < 1.0) {
        return param_err(format!("FMR target must lie in (0, 1), got {fmr_target}"));
    }
    let s = sorted(impostor_scores)?;
    let n = s.len();
    Ok(candidate_thresholds(&[&s])
        .into_iter()
        .find(|&t| rate_within(count_at_least(&s, t), n, fmr_target))
        .expect("+inf always qualifies"))
}

/// Min-rule MMPMR: fraction of morphs whose lower source score reaches τ.
pub fn compute_mmpmr(records: &[MorphComparisonRecord], tau: f64) -> Result<f64> {
    if records.is_empty() {
        return param_err("MMPMR needs at least one morph record");
    }
    let hits = records.iter().filter(|r| r.min_score() >= tau).count();
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    /// Percentages.
    pub apcer: f64,
    pub bpcer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApcerAtBpcer {
    /// Target BPCER in percent.
    pub bpcer_target: f64,
    pub point: OperatingPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub polarity: String,
    pub n_bona: usize,
    pub n_attack: usize,
    /// Percent.
    pub eer: f64,
    pub eer_point: OperatingPoint,
    pub apcer_at_bpcer: Vec<ApcerAtBpcer>,
    /// Every observed threshold plus `+∞`, ascending.
    pub trace: Vec<OperatingPoint>,
}

impl DetectionReport {
    pub fn apcer_at(&self, bpcer_target: f64) -> Option<f64> {
        self.apcer_at_bpcer
            .iter()
            .find(|p| p.bpcer_target == bpcer_target)
            .map(|p| p.point.apcer)
    }
}

pub const DEFAULT_BPCER_POINTS: [f64; 3] = [1.0, 10.0, 20.0];

pub fn compute_detection_metrics(bona: &[f64], attack: &[f64]) -> Result<DetectionReport> {
    compute_detection_metrics_at(bona, attack, &DEFAULT_BPCER_POINTS)
}

/// Threshold sweep under the rule "attack if score >= τ". APCER at a BPCER
/// target uses the lowest threshold whose BPCER stays within the target,
/// i.e. the operating point spending as much of the BPCER budget as allowed.
pub fn compute_detection_metrics_at(
    bona: &[f64],
    attack: &[f64],
    bpcer_points_percent: &[f64],
) -> Result<DetectionReport> {
    if bona.is_empty() || attack.is_empty() {
        return param_err("detection metrics need bona fide and attack scores");
    }
    if let Some(p) = bpcer_points_percent.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return param_err(format!("BPCER operating point {p} outside [0, 100]"));
    }
    let (b, a) = (sorted(bona)?, sorted(attack)?);
    let trace: Vec<OperatingPoint> = candidate_thresholds(&[&b, &a])
        .into_iter()
        .map(|t| OperatingPoint {
            threshold: t,
            bpcer: 100.0 * count_at_least(&b, t) as f64 / b.len() as f64,
            apcer: 100.0 * (a.len() - count_at_least(&a, t)) as f64 / a.len() as f64,
        })
        .collect();
    let eer_point = *trace
        .iter()
        .min_by(|x, y| (x.apcer - x.bpcer).abs().total_cmp(&(y.apcer - y.bpcer).abs()))
        .expect("non-empty trace");
    let apcer_at_bpcer = bpcer_points_percent
        .iter()
        .map(|&target| ApcerAtBpcer {
            bpcer_target: target,
            point: *trace
                .iter()
                .find(|p| rate_within(count_at_least(&b, p.threshold), b.len(), target / 100.0))
                .expect("+inf has zero BPCER"),
        })
        .collect();
    Ok(DetectionReport {
        polarity: MAD_POLARITY.into(),
        n_bona: b.len(),
        n_attack: a.len(),
        eer: 0.5 * (eer_point.apcer + eer_point.bpcer),
        eer_point,
        apcer_at_bpcer,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FmrTargets {
    pub high: f64,
    pub low: f64,
}

impl Default for FmrTargets {
    fn default() -> Self {
        Self {
            high: 0.01,
            low: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderThresholds {
    pub embedder_id: String,
    pub n_impostor: usize,
    pub mean_impostor: f64,
    pub mean_genuine: f64,
    #[serde(with = "threshold_serde")]
    pub tau_fmr100: f64,
    #[serde(with = "threshold_serde")]
    pub tau_fmr1000: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityRow {
    pub embedder_id: String,
    pub variant: String,
    pub n_morphs: usize,
    pub mmpmr_at_fmr100: f64,
    pub mmpmr_at_fmr1000: f64,
    /// Mean over morphs of the lower source similarity.
    pub mean_min_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityReport {
    pub polarity: String,
    pub fmr: FmrTargets,
    pub thresholds: Vec<EmbedderThresholds>,
    pub rows: Vec<VulnerabilityRow>,
}

impl VulnerabilityReport {
    pub fn row(&self, embedder_id: &str, variant: &str) -> Option<&VulnerabilityRow> {
        self.rows
            .iter()
            .find(|r| r.embedder_id == embedder_id && r.variant == variant)
    }

    pub fn thresholds_for(&self, embedder_id: &str) -> Option<&EmbedderThresholds> {
        self.thresholds.iter().find(|t| t.embedder_id == embedder_id)
    }

    /// One row per variant, MMPMR100/MMPMR1000 column pairs per embedder.
    pub fn to_table(&self) -> String {
        let embedders: Vec<&str> = self.thresholds.iter().map(|t| t.embedder_id.as_str()).collect();
        let mut variants: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant.as_str()) {
                variants.push(&r.variant);
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.polarity);
        let _ = write!(out, "{:<24}", "variant");
        for e in &embedders {
            let _ = write!(out, " | {:^21}", e);
        }
        let _ = writeln!(out);
        let _ = write!(out, "{:<24}", "");
        for _ in &embedders {
            let _ = write!(out, " | {:>10} {:>10}", "MMPMR100", "MMPMR1000");
        }
        let _ = writeln!(out);
        for v in variants {
            let _ = write!(out, "{v:<24}");
            for e in &embedders {
                match self.row(e, v) {
                    Some(r) => {
                        let _ = write!(out, " | {:>10.3} {:>10.3}", r.mmpmr_at_fmr100, r.mmpmr_at_fmr1000);
                    }
                    None => {
                        let _ = write!(out, " | {:>10} {:>10}", "-", "-");
                    }
                }
            }
            let _ = writeln!(out);
        }
        for t in &self.thresholds {
            let _ = writeln!(
                out,
                "# {}: tau@FMR{}={:.4} tau@FMR{}={:.4} impostor mean={:.4} genuine mean={:.4} (n_impostor={})",
                t.embedder_id,
                self.fmr.high,
                t.tau_fmr100,
                self.fmr.low,
                t.tau_fmr1000,
                t.mean_impostor,
                t.mean_genuine,
                t.n_impostor
            );
        }
        out
    }
}

/// Detection table: one row per (detector, attack variant).
pub fn detection_table(rows: &[(String, String, DetectionReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {MAD_POLARITY}");
    let points: Vec<f64> = rows
        .first()
        .map(|r| r.2.apcer_at_bpcer.iter().map(|p| p.bpcer_target).collect())
        .unwrap_or_default();
    let _ = write!(out, "{:<12} {:<24} {:>8}", "detector", "attack", "EER%");
    for p in &points {
        let _ = write!(out, " {:>16}", format!("APCER@BPCER{p}%"));
    }
    let _ = writeln!(out);
    for (det, attack, r) in rows {
        let _ = write!(out, "{det:<12} {attack:<24} {:>8.2}", r.eer);
        for p in &r.apcer_at_bpcer {
            let _ = write!(out, " {:>16.2}", p.point.apcer);
        }
        let _ = writeln!(out);
    }
    out
}

/// Genuine and impostor similarities over every unordered pair of images.
pub fn score_set(embeddings: &[(u32, IdentityEmbedding)]) -> Result<ScoreSet> {
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (i, (la, ea)) in embeddings.iter().enumerate() {
        for (lb, eb) in &embeddings[i + 1..] {
            let s = ea.cosine(eb);
            if la == lb {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    ScoreSet::new(genuine, impostor)
}

pub fn embed_all(embedder: &dyn IdentityModel, images: &[&Array3<f32>]) -> Result<Vec<IdentityEmbedding>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(256) {
        out.extend(embedder.embed_batch(chunk)?);
    }
    Ok(out)
}

/// One generated morph with the reference probes of both sources.
#[derive(Debug, Clone, Copy)]
pub struct MorphProbe<'a> {
    pub morph_id: &'a str,
    pub variant: &'a str,
    pub image: &'a Array3<f32>,
    pub refs_a: &'a [&'a Array3<f32>],
    pub refs_b: &'a [&'a Array3<f32>],
}

/// Scores of every morph for one embedder.
pub fn score_morphs(embedder: &dyn IdentityModel, morphs: &[MorphProbe<'_>]) -> Result<Vec<MorphComparisonRecord>> {
    let mut records = Vec::with_capacity(morphs.len());
    for m in morphs {
        if m.refs_a.is_empty() || m.refs_b.is_empty() {
            return Err(Error::Data(format!("morph {} is missing source references", m.morph_id)));
        }
        let e = embedder.embed_batch(&[m.image])?.remove(0);
        let sims = |refs: &[&Array3<f32>]| -> Result<Vec<f64>> {
            Ok(embedder.embed_batch(refs)?.iter().map(|r| e.cosine(r)).collect())
        };
        records.push(MorphComparisonRecord::from_probes(
            m.morph_id,
            embedder.id(),
            &sims(m.refs_a)?,
            &sims(m.refs_b)?,
        )?);
    }
    Ok(records)
}

/// Scores gathered for one embedder: its genuine/impostor distribution on
/// the evaluation split and its morph records tagged by variant.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderScores {
    pub embedder_id: String,
    pub scores: ScoreSet,
    pub records: Vec<(String, MorphComparisonRecord)>,
}

/// Calibrates both FMR thresholds per embedder and reports MMPMR per
/// variant. Variants keep their first-seen order.
pub fn vulnerability_from_scores(per_embedder: &[EmbedderScores], fmr: FmrTargets) -> Result<VulnerabilityReport> {
    if fmr.low > fmr.high {
        return param_err("the low FMR target must not exceed the high one");
    }
    let mut thresholds = Vec::new();
    let mut rows = Vec::new();
    for e in per_embedder {
        if e.records.is_empty() {
            return Err(Error::Data(format!("no morph scores for embedder {}", e.embedder_id)));
        }
        let tau_high = calibrate_threshold(&e.scores.impostor, fmr.high)?;
        let tau_low = calibrate_threshold(&e.scores.impostor, fmr.low)?;
        thresholds.push(EmbedderThresholds {
            embedder_id: e.embedder_id.clone(),
            n_impostor: e.scores.impostor.len(),
            mean_impostor: e.scores.mean_impostor(),
            mean_genuine: e.scores.mean_genuine(),
            tau_fmr100: tau_high,
            tau_fmr1000: tau_low,
        });
        let mut variants: Vec<&str> = Vec::new();
        for (v, _) in &e.records {
            if !variants.contains(&v.as_str()) {
                variants.push(v);
            }
        }
        for v in variants {
            let recs: Vec<MorphComparisonRecord> = e
                .records
                .iter()
                .filter(|(rv, _)| rv == v)
                .map(|(_, r)| r.clone())
                .collect();
            rows.push(VulnerabilityRow {
                embedder_id: e.embedder_id.clone(),
                variant: v.to_owned(),
                n_morphs: recs.len(),
                mmpmr_at_fmr100: compute_mmpmr(&recs, tau_high)?,
                mmpmr_at_fmr1000: compute_mmpmr(&recs, tau_low)?,
                mean_min_similarity: mean(&recs.iter().map(|r| r.min_score()).collect::<Vec<_>>()),
            });
        }
    }
    Ok(VulnerabilityReport {
        polarity: FR_POLARITY.into(),
        fmr,
        thresholds,
        rows,
    })
}

/// End to end: impostor distribution on the evaluation images, threshold
/// calibration and morph scoring for every embedder.
pub fn build_vulnerability_report(
    morphs: &[MorphProbe<'_>],
    embedders: &[&dyn IdentityModel],
    eval_images: &[(u32, &Array3<f32>)],
    fmr: FmrTargets,
) -> Result<(VulnerabilityReport, Vec<EmbedderScores>)> {
    if morphs.is_empty() {
        return Err(Error::Data("no morphs to evaluate".into()));
    }
    let images: Vec<&Array3<f32>> = eval_images.iter().map(|(_, x)| *x).collect();
    let mut per_embedder = Vec::with_capacity(embedders.len());
    for emb in embedders {
        let embedded = embed_all(*emb, &images)?;
        let labeled: Vec<(u32, IdentityEmbedding)> = eval_images.iter().map(|(l, _)| *l).zip(embedded).collect();
        let scores = score_set(&labeled)?;
        let records = score_morphs(*emb, morphs)?;
        per_embedder.push(EmbedderScores {
            embedder_id: emb.id().to_owned(),
            scores,
            records: morphs.iter().map(|m| m.variant.to_owned()).zip(records).collect(),
        });
    }
    Ok((vulnerability_from_scores(&per_embedder, fmr)?, per_embedder))
}
