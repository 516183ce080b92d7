//! Evaluation report assembly and rendering.
//!
//! [`build_report`] turns a finished batch of attacks into an [`EvalReport`];
//! [`write_report`] emits it as `report.json` plus optional CSV tables and
//! standalone SVG charts. Every output is a pure function of its inputs, so
//! reruns are byte-identical.
//!
//! `report.json` keys:
//!
//! - `experiment`, `attack`: run name and the attack spec used.
//! - `summary`: success, flip and retention rates and mean quality.
//! - `confusion`: per attribute, `before` (originals) and `after` (anonymized)
//!   matrices over the attacked samples, counts and row percentages.
//! - `histograms`: per attribute, true-class probability histograms before
//!   and after.
//! - `quality`: squared-L2 and PSNR of successful samples.
//! - `identity`: per embedder, CMC and ROC for original and anonymized probes.
//!   ROC curves are thinned to at most [`ROC_JSON_POINTS`] points here; the CSV
//!   files carry every point.
//! - `published_reference`: values published for the original method on real
//!   face data. They are annotations for side-by-side reading and are not
//!   produced by this code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anonymize::{AttackSpec, BatchOutcome, BatchSummary, RoleTag};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    cmc_curve, confusion_matrix, quality_stats, roc_curve, score_histogram, CmcCurve, ConfusionMatrix,
    Histogram, QualityStats, RocCurve,
};
use crate::nn::{identity_distance, IdentityModel};
use crate::tensor::Tensor;

pub const ROC_JSON_POINTS: usize = 201;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionPair {
    pub attribute: String,
    pub role: RoleTag,
    pub before: ConfusionMatrix,
    pub after: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    pub attribute: String,
    pub role: RoleTag,
    pub before: Histogram,
    pub after: Histogram,
    /// Share of anonymized samples whose true-class probability is below 0.5.
    pub after_fraction_below_half: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub name: String,
    pub threshold: Option<f64>,
    pub gallery: usize,
    pub probes: usize,
    pub cmc_original: CmcCurve,
    pub cmc_anonymized: CmcCurve,
    pub rank1_original: f64,
    pub rank1_anonymized: f64,
    pub rank1_drop: f64,
    pub roc_original: RocCurve,
    pub roc_anonymized: RocCurve,
    pub auc_original: f64,
    pub auc_anonymized: f64,
    pub auc_drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfusion {
    pub attribute: String,
    pub classes: [String; 2],
    /// Row percentages, `[true][predicted]`.
    pub before: [[f64; 2]; 2],
    pub after: [[f64; 2]; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCounts {
    pub method: String,
    pub classes: [String; 2],
    /// Counts, `[true][predicted]`.
    pub before: [[u64; 2]; 2],
    pub after: [[u64; 2]; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub note: String,
    /// Three attributes suppressed together on a large celebrity face set.
    pub three_attribute_suppression: Vec<ReferenceConfusion>,
    /// Gender suppression on a small frontal face set. The first entry is a
    /// prior method quoted for comparison only.
    pub gender_suppression: Vec<ReferenceCounts>,
}

impl PublishedReference {
    pub fn new() -> Self {
        let rc = |attribute: &str, pos: &str, neg: &str, before, after| ReferenceConfusion {
            attribute: attribute.into(),
            classes: [pos.into(), neg.into()],
            before,
            after,
        };
        let counts = |method: &str, before, after| ReferenceCounts {
            method: method.into(),
            classes: ["male".into(), "female".into()],
            before,
            after,
        };
        Self {
            note: "Published values for the original method on real face images with \
                   large pretrained networks. Reference annotations only; not reproduced here."
                .into(),
            three_attribute_suppression: vec![
                rc("male", "male", "not male", [[87.70, 12.30], [19.64, 80.36]], [[3.89, 96.11], [100.0, 0.0]]),
                rc(
                    "smiling",
                    "smiling",
                    "not smiling",
                    [[64.59, 35.41], [24.66, 75.34]],
                    [[0.02, 99.98], [99.90, 0.10]],
                ),
                rc(
                    "attractive",
                    "attractive",
                    "not attractive",
                    [[89.31, 10.69], [28.41, 71.59]],
                    [[0.28, 99.72], [99.59, 0.41]],
                ),
            ],
            gender_suppression: vec![
                counts("prior-baseline", [[1762, 17], [521, 1300]], [[276, 1503], [1255, 566]]),
                counts("proposed", [[1741, 87], [252, 1626]], [[0, 1828], [1878, 0]]),
            ],
        }
    }
}

impl Default for PublishedReference {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub attack: AttackSpec,
    pub summary: BatchSummary,
    pub confusion: Vec<ConfusionPair>,
    pub histograms: Vec<HistogramPair>,
    pub quality: Option<QualityStats>,
    pub identity: Vec<EmbedderReport>,
    pub published_reference: PublishedReference,
}

/// An identity model to evaluate, with its calibrated match threshold.
#[derive(Clone, Copy)]
pub struct EmbedderEval<'a> {
    pub name: &'a str,
    pub model: &'a dyn IdentityModel,
    pub threshold: Option<f64>,
}

pub struct ReportInputs<'a> {
    pub experiment: &'a str,
    pub dataset: &'a Dataset,
    pub spec: &'a AttackSpec,
    pub outcome: &'a BatchOutcome,
    pub embedders: Vec<EmbedderEval<'a>>,
    pub histogram_bins: usize,
}

/// Identification and verification of anonymized probes against original
/// gallery images, compared with the original probes.
///
/// Probes are the attacked samples outside the gallery split. Verification
/// pairs are all unordered probe pairs `a < b`; the anonymized condition
/// compares anonymized `a` with original `b`.
pub fn identity_report(
    embedder: EmbedderEval<'_>,
    dataset: &Dataset,
    outcome: &BatchOutcome,
) -> Result<Option<EmbedderReport>> {
    let gallery: Vec<(usize, Tensor)> = dataset
        .split(Split::Gallery)
        .iter()
        .map(|s| Ok((s.subject, embedder.model.embed(&s.image)?)))
        .collect::<Result<_>>()?;
    let mut original = Vec::new();
    let mut anonymized = Vec::new();
    for r in &outcome.results {
        let sample = dataset
            .by_id(r.record.sample_id)
            .ok_or_else(|| Error::Precondition(format!("sample {} not in dataset", r.record.sample_id)))?;
        if sample.split == Split::Gallery {
            continue;
        }
        original.push((sample.subject, embedder.model.embed(&sample.image)?));
        anonymized.push((sample.subject, embedder.model.embed(&r.image)?));
    }
    if gallery.is_empty() || original.len() < 2 {
        return Ok(None);
    }
    let cmc_original = cmc_curve(&gallery, &original)?;
    let cmc_anonymized = cmc_curve(&gallery, &anonymized)?;

    let (mut gen_o, mut imp_o, mut gen_a, mut imp_a) = (vec![], vec![], vec![], vec![]);
    for a in 0..original.len() {
        for b in a + 1..original.len() {
            let d_o = identity_distance(&original[a].1, &original[b].1)?;
            let d_a = identity_distance(&anonymized[a].1, &original[b].1)?;
            if original[a].0 == original[b].0 {
                gen_o.push(d_o);
                gen_a.push(d_a);
            } else {
                imp_o.push(d_o);
                imp_a.push(d_a);
            }
        }
    }
    if gen_o.is_empty() || imp_o.is_empty() {
        return Ok(None);
    }
    let roc_original = roc_curve(&gen_o, &imp_o)?;
    let roc_anonymized = roc_curve(&gen_a, &imp_a)?;
    Ok(Some(EmbedderReport {
        name: embedder.name.to_string(),
        threshold: embedder.threshold,
        gallery: gallery.len(),
        probes: original.len(),
        rank1_original: cmc_original.rank1(),
        rank1_anonymized: cmc_anonymized.rank1(),
        rank1_drop: cmc_original.rank1() - cmc_anonymized.rank1(),
        auc_original: roc_original.auc,
        auc_anonymized: roc_anonymized.auc,
        auc_drop: roc_original.auc - roc_anonymized.auc,
        cmc_original,
        cmc_anonymized,
        roc_original,
        roc_anonymized,
    }))
}

pub fn build_report(inputs: &ReportInputs<'_>) -> Result<EvalReport> {
    let schema = inputs.dataset.schema();
    let results = &inputs.outcome.results;
    if results.is_empty() {
        return Err(Error::Precondition("no attack results to report".into()));
    }
    let mut confusion = Vec::new();
    let mut histograms = Vec::new();
    for i in 0..schema.len() {
        let outcomes: Vec<_> = results.iter().map(|r| &r.record.attributes[i]).collect();
        let truths: Vec<usize> = outcomes.iter().map(|a| a.true_class).collect();
        let before: Vec<usize> = outcomes.iter().map(|a| a.before_class).collect();
        let after: Vec<usize> = outcomes.iter().map(|a| a.after_class).collect();
        let name = schema.name(i);
        let role = outcomes[0].role;
        confusion.push(ConfusionPair {
            attribute: name.to_string(),
            role,
            before: confusion_matrix(name, schema.classes(i), &before, &truths)?,
            after: confusion_matrix(name, schema.classes(i), &after, &truths)?,
        });
        let before_scores: Vec<f64> = outcomes.iter().map(|a| a.before[a.true_class]).collect();
        let after_scores: Vec<f64> = outcomes.iter().map(|a| a.after[a.true_class]).collect();
        let after_hist = score_histogram(&format!("{name} after"), &after_scores, inputs.histogram_bins)?;
        histograms.push(HistogramPair {
            attribute: name.to_string(),
            role,
            before: score_histogram(&format!("{name} before"), &before_scores, inputs.histogram_bins)?,
            after_fraction_below_half: after_scores.iter().filter(|&&s| s < 0.5).count() as f64
                / after_scores.len() as f64,
            after: after_hist,
        });
    }

    let successes: Vec<_> = results.iter().filter(|r| r.record.success).collect();
    let quality = if successes.is_empty() {
        None
    } else {
        let originals = successes
            .iter()
            .map(|r| {
                inputs
                    .dataset
                    .by_id(r.record.sample_id)
                    .map(|s| &s.image)
                    .ok_or_else(|| Error::Precondition(format!("sample {} not in dataset", r.record.sample_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let anonymized: Vec<&Tensor> = successes.iter().map(|r| &r.image).collect();
        Some(quality_stats(&originals, &anonymized)?)
    };

    let mut identity = Vec::new();
    for e in &inputs.embedders {
        if let Some(r) = identity_report(*e, inputs.dataset, inputs.outcome)? {
            identity.push(r);
        }
    }

    Ok(EvalReport {
        experiment: inputs.experiment.to_string(),
        attack: inputs.spec.clone(),
        summary: inputs.outcome.summary.clone(),
        confusion,
        histograms,
        quality,
        identity,
        published_reference: PublishedReference::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReportFormats {
    pub csv: bool,
    pub svg: bool,
}

impl Default for ReportFormats {
    fn default() -> Self {
        Self { csv: true, svg: true }
    }
}

/// Keeps at most `n` evenly spaced points, always including both ends.
fn thin(curve: &RocCurve, n: usize) -> RocCurve {
    let len = curve.points.len();
    if len <= n {
        return curve.clone();
    }
    let points = (0..n)
        .map(|k| curve.points[(k * (len - 1) + (n - 1) / 2) / (n - 1)].clone())
        .collect();
    RocCurve {
        points,
        auc: curve.auc,
    }
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn put(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

pub fn cmc_csv(curve: &CmcCurve) -> String {
    let mut s = String::from("rank,rate\n");
    for (r, rate) in curve.rates.iter().enumerate() {
        let _ = writeln!(s, "{},{}", r + 1, rate);
    }
    s
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from("threshold,far,tar\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.far, p.tar);
    }
    s
}

pub fn confusion_csv(m: &ConfusionMatrix) -> String {
    let mut s = String::from("true_class,predicted_class,count,percent\n");
    for (t, row) in m.counts.iter().enumerate() {
        for (p, c) in row.iter().enumerate() {
            let _ = writeln!(s, "{t},{p},{c},{}", m.percent[t][p]);
        }
    }
    s
}

pub fn histogram_csv(pair: &HistogramPair) -> String {
    let bins = pair.before.bins;
    let mut s = String::from("bin_start,bin_end,before,after\n");
    for b in 0..bins {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            b as f64 / bins as f64,
            (b + 1) as f64 / bins as f64,
            pair.before.counts[b],
            pair.after.counts[b]
        );
    }
    s
}

/// Writes `report.json` and, per `formats`, CSV tables and SVG charts.
/// Returns the written paths in a fixed order.
pub fn write_report(report: &EvalReport, dir: &Path, formats: ReportFormats) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut json = report.clone();
    for e in &mut json.identity {
        e.roc_original = thin(&e.roc_original, ROC_JSON_POINTS);
        e.roc_anonymized = thin(&e.roc_anonymized, ROC_JSON_POINTS);
    }
    let path = dir.join("report.json");
    crate::write_json(&path, &json)?;
    let mut written = vec![path];

    if formats.csv {
        for c in &report.confusion {
            let stem = file_stem(&c.attribute);
            put(dir, &format!("confusion_{stem}_before.csv"), &confusion_csv(&c.before), &mut written)?;
            put(dir, &format!("confusion_{stem}_after.csv"), &confusion_csv(&c.after), &mut written)?;
        }
        for h in &report.histograms {
            put(dir, &format!("histogram_{}.csv", file_stem(&h.attribute)), &histogram_csv(h), &mut written)?;
        }
        for e in &report.identity {
            let stem = file_stem(&e.name);
            put(dir, &format!("cmc_{stem}_original.csv"), &cmc_csv(&e.cmc_original), &mut written)?;
            put(dir, &format!("cmc_{stem}_anonymized.csv"), &cmc_csv(&e.cmc_anonymized), &mut written)?;
            put(dir, &format!("roc_{stem}_original.csv"), &roc_csv(&e.roc_original), &mut written)?;
            put(dir, &format!("roc_{stem}_anonymized.csv"), &roc_csv(&e.roc_anonymized), &mut written)?;
        }
        if let Some(q) = &report.quality {
            let mut s = String::from("index,squared_l2,mse,psnr\n");
            for (k, p) in q.pairs.iter().enumerate() {
                let _ = writeln!(s, "{k},{},{},{}", p.squared_l2, p.mse, p.psnr);
            }
            put(dir, "quality.csv", &s, &mut written)?;
        }
    }

    if formats.svg {
        for h in &report.histograms {
            let svg = bar_chart(
                &format!("{}: true-class probability", h.attribute),
                &[("before", &h.before.counts), ("after", &h.after.counts)],
            );
            put(dir, &format!("histogram_{}.svg", file_stem(&h.attribute)), &svg, &mut written)?;
        }
        for e in &report.identity {
            let stem = file_stem(&e.name);
            let cmc = |c: &CmcCurve| -> Vec<(f64, f64)> {
                c.rates.iter().enumerate().map(|(r, &y)| ((r + 1) as f64, y)).collect()
            };
            let g = e.cmc_original.rates.len() as f64;
            let svg = line_chart(
                &format!("CMC ({})", e.name),
                ("rank", 1.0, g.max(2.0)),
                "identification rate",
                &[("original", cmc(&e.cmc_original)), ("anonymized", cmc(&e.cmc_anonymized))],
            );
            put(dir, &format!("cmc_{stem}.svg"), &svg, &mut written)?;
            let roc = |c: &RocCurve| -> Vec<(f64, f64)> {
                thin(c, 1001).points.iter().map(|p| (p.far, p.tar)).collect()
            };
            let svg = line_chart(
                &format!("ROC ({})", e.name),
                ("false accept rate", 0.0, 1.0),
                "true accept rate",
                &[("original", roc(&e.roc_original)), ("anonymized", roc(&e.roc_anonymized))],
            );
            put(dir, &format!("roc_{stem}.svg"), &svg, &mut written)?;
        }
    }
    Ok(written)
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN / 2.0,
        b = H - MARGIN,
        r = W - MARGIN / 2.0
    );
    s
}

fn legend(s: &mut String, names: &[&str]) {
    for (k, name) in names.iter().enumerate() {
        let y = MARGIN / 2.0 + 14.0 * (k as f64 + 1.0);
        let x = W - MARGIN / 2.0 - 90.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 9.0,
            PALETTE[k % PALETTE.len()],
            x + 14.0,
            y,
            escape(name)
        );
    }
}

/// Line chart with a `[0, 1]` y axis.
fn line_chart(title: &str, x_axis: (&str, f64, f64), y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let (x_label, x0, x1) = x_axis;
    let plot_w = W - 1.5 * MARGIN;
    let plot_h = H - 1.5 * MARGIN;
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * plot_w;
    let py = |y: f64| H - MARGIN - y * plot_h;
    let mut s = svg_open(title);
    for k in 0..=4 {
        let y = k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{y}</text>"#, MARGIN - 4.0, py(y) + 4.0);
        let x = x0 + (x1 - x0) * y;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            px(x),
            H - MARGIN + 14.0,
            (x * 100.0).round() / 100.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, MARGIN + plot_w / 2.0, H - 8.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text transform="translate(12 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        H / 2.0,
        escape(y_label)
    );
    for (k, (_, points)) in series.iter().enumerate() {
        let mut d = String::new();
        for (n, (x, y)) in points.iter().enumerate() {
            let _ = write!(d, "{}{:.2} {:.2}", if n == 0 { "M" } else { " L" }, px(*x), py(*y));
        }
        let _ = writeln!(
            s,
            r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            PALETTE[k % PALETTE.len()]
        );
    }
    legend(&mut s, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart of histogram counts over equal-width bins of `[0, 1]`.
fn bar_chart(title: &str, series: &[(&str, &[u64])]) -> String {
    let bins = series[0].1.len();
    let max = series
        .iter()
        .flat_map(|(_, c)| c.iter())
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let plot_w = W - 1.5 * MARGIN;
    let plot_h = H - 1.5 * MARGIN;
    let slot = plot_w / bins as f64;
    let bar = slot * 0.8 / series.len() as f64;
    let mut s = svg_open(title);
    for (k, (_, counts)) in series.iter().enumerate() {
        for (b, &c) in counts.iter().enumerate() {
            let h = c as f64 / max * plot_h;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                MARGIN + b as f64 * slot + slot * 0.1 + k as f64 * bar,
                H - MARGIN - h,
                bar,
                h,
                PALETTE[k % PALETTE.len()]
            );
        }
    }
    for k in 0..=bins {
        if k % (bins / 5).max(1) == 0 {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                MARGIN + k as f64 * slot,
                H - MARGIN + 14.0,
                k as f64 / bins as f64
            );
        }
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, MARGIN - 4.0, MARGIN / 2.0 + 8.0, max);
    legend(&mut s, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}
