//! Evaluation metrics: confusion matrices, score histograms, CMC and ROC
//! curves, equal-error thresholds and image quality statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::identity_distance;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub attribute: String,
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<u64>>,
    /// Row-normalized percentages; rows with no samples are all zero.
    pub percent: Vec<Vec<f64>>,
}

pub fn confusion_matrix(
    attribute: &str,
    classes: usize,
    predictions: &[usize],
    truths: &[usize],
) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::shape("confusion_matrix", &[predictions.len()], &[truths.len()]));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= classes || t >= classes {
            return Err(Error::Domain {
                op: "confusion_matrix",
                detail: format!("label ({t}, {p}) outside {classes} classes"),
            });
        }
        counts[t][p] += 1;
    }
    let percent = counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            row.iter()
                .map(|&c| if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 })
                .collect()
        })
        .collect();
    Ok(ConfusionMatrix {
        attribute: attribute.to_string(),
        counts,
        percent,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub label: String,
    pub bins: usize,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fraction of the mass in bins lying entirely below `x`.
    pub fn fraction_below(&self, x: f64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let below: u64 = self
            .counts
            .iter()
            .enumerate()
            .filter(|(i, _)| (*i as f64 + 1.0) / self.bins as f64 <= x)
            .map(|(_, c)| *c)
            .sum();
        below as f64 / total as f64
    }
}

/// Equal-width histogram over `[0, 1]`; a score of exactly 1 lands in the
/// last bin.
pub fn score_histogram(label: &str, scores: &[f64], bins: usize) -> Result<Histogram> {
    if scores.is_empty() {
        return Err(Error::Precondition("score histogram needs at least one score".into()));
    }
    if bins < 2 {
        return Err(Error::Config(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let mut counts = vec![0u64; bins];
    for &s in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Domain {
                op: "score_histogram",
                detail: format!("score {s} outside [0, 1]"),
            });
        }
        let bin = ((s * bins as f64).floor() as usize).min(bins - 1);
        counts[bin] += 1;
    }
    Ok(Histogram {
        label: label.to_string(),
        bins,
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    /// `rates[r - 1]` is the rank-`r` identification rate.
    pub rates: Vec<f64>,
}

impl CmcCurve {
    pub fn rank1(&self) -> f64 {
        self.rates[0]
    }
}

/// Closed-set identification against a single-image-per-subject gallery.
///
/// Gallery entries are ranked by Euclidean distance, ties broken by lower
/// gallery subject id.
pub fn cmc_curve(
    gallery: &[(usize, Tensor)],
    probes: &[(usize, Tensor)],
) -> Result<CmcCurve> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(Error::Precondition("CMC needs a nonempty gallery and probe set".into()));
    }
    let mut ids: Vec<usize> = gallery.iter().map(|(id, _)| *id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Precondition("gallery holds more than one entry per subject".into()));
    }
    let mut hits = vec![0usize; gallery.len()];
    for (subject, probe) in probes {
        if !ids.contains(subject) {
            return Err(Error::Precondition(format!(
                "probe subject {subject} has no gallery entry"
            )));
        }
        let mut ranked = gallery
            .iter()
            .map(|(id, g)| Ok((identity_distance(probe, g)?, *id)))
            .collect::<Result<Vec<(f64, usize)>>>()?;
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let rank = ranked.iter().position(|(_, id)| id == subject).unwrap();
        hits[rank] += 1;
    }
    let mut cumulative = 0;
    let rates = hits
        .iter()
        .map(|h| {
            cumulative += h;
            cumulative as f64 / probes.len() as f64
        })
        .collect();
    Ok(CmcCurve { rates })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    #[serde(with = "float_or_inf")]
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Starts at the origin (threshold below every distance) and ends at (1, 1).
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Number of entries `<= t` in an ascending list.
fn count_le(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|&x| x <= t)
}

/// Verification ROC over distance thresholds: a pair is accepted when its
/// distance is `<= t`, and `t` sweeps the union of observed distances.
pub fn roc_curve(genuine: &[f64], impostor: &[f64]) -> Result<RocCurve> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Precondition("ROC needs genuine and impostor distances".into()));
    }
    let g = sorted(genuine);
    let i = sorted(impostor);
    let mut thresholds: Vec<f64> = g.iter().chain(&i).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        far: 0.0,
        tar: 0.0,
    }];
    for t in thresholds {
        points.push(RocPoint {
            threshold: t,
            far: count_le(&i, t) as f64 / i.len() as f64,
            tar: count_le(&g, t) as f64 / g.len() as f64,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].far - w[0].far) * (w[1].tar + w[0].tar) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualErrorPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub eer: f64,
}

/// Threshold where false accepts and false rejects balance.
///
/// Candidates are the observed distances; the one minimizing `|FAR - FRR|`
/// wins, ties going to the lower threshold. The EER is the mean of the two
/// rates there.
pub fn equal_error_point(genuine: &[f64], impostor: &[f64]) -> Result<EqualErrorPoint> {
    if genuine.is_empty() {
        return Err(Error::Precondition("no genuine pairs to calibrate on".into()));
    }
    if impostor.is_empty() {
        return Err(Error::Precondition("no impostor pairs to calibrate on".into()));
    }
    let roc = roc_curve(genuine, impostor)?;
    let mut best: Option<EqualErrorPoint> = None;
    for p in &roc.points[1..] {
        let frr = 1.0 - p.tar;
        let gap = (p.far - frr).abs();
        let better = match &best {
            None => true,
            Some(b) => gap < (b.far - b.frr).abs(),
        };
        if better {
            best = Some(EqualErrorPoint {
                threshold: p.threshold,
                far: p.far,
                frr,
                eer: (p.far + frr) / 2.0,
            });
        }
    }
    Ok(best.expect("at least one threshold"))
}

/// PSNR in dB for unit dynamic range; `+inf` when `mse == 0`.
pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn squared_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape("squared_l2", a.dims(), b.dims()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairQuality {
    pub squared_l2: f64,
    pub mse: f64,
    #[serde(with = "float_or_inf")]
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "float_or_inf")]
    pub mean: f64,
    #[serde(with = "float_or_inf")]
    pub median: f64,
    #[serde(with = "float_or_inf")]
    pub min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrAggregate {
    #[serde(with = "float_or_inf")]
    pub mean: f64,
    #[serde(with = "float_or_inf")]
    pub median: f64,
    #[serde(with = "float_or_inf")]
    pub min: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityStats {
    pub pairs: Vec<PairQuality>,
    pub squared_l2: Aggregate,
    pub psnr: PsnrAggregate,
}

fn aggregate(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let s = sorted(values);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    };
    (s.iter().sum::<f64>() / n as f64, median, s[0])
}

pub fn quality_stats(originals: &[&Tensor], anonymized: &[&Tensor]) -> Result<QualityStats> {
    if originals.len() != anonymized.len() {
        return Err(Error::shape("quality_stats", &[originals.len()], &[anonymized.len()]));
    }
    let pairs = originals
        .iter()
        .zip(anonymized)
        .map(|(a, b)| {
            let sq = squared_l2(a, b)?;
            let mse = sq / a.len() as f64;
            Ok(PairQuality {
                squared_l2: sq,
                mse,
                psnr: psnr(mse),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, median, min) = aggregate(&pairs.iter().map(|p| p.squared_l2).collect::<Vec<_>>());
    let l2 = Aggregate { mean, median, min };
    let (mean, median, min) = aggregate(&pairs.iter().map(|p| p.psnr).collect::<Vec<_>>());
    Ok(QualityStats {
        pairs,
        squared_l2: l2,
        psnr: PsnrAggregate { mean, median, min },
    })
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
pub mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float {other:?}"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Mann-Whitney style estimate: P(genuine < impostor) + P(tie) / 2.
    fn pairwise_auc(genuine: &[f64], impostor: &[f64]) -> f64 {
        let mut score = 0.0;
        for g in genuine {
            for i in impostor {
                if g < i {
                    score += 1.0;
                } else if g == i {
                    score += 0.5;
                }
            }
        }
        score / (genuine.len() * impostor.len()) as f64
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let cm = confusion_matrix("a", 2, &[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!(cm.counts, vec![vec![2, 0], vec![0, 2]]);
        assert_eq!(cm.percent, vec![vec![100.0, 0.0], vec![0.0, 100.0]]);
    }

    #[test]
    fn constant_predictions_fill_first_column() {
        let cm = confusion_matrix("a", 3, &[0, 0, 0, 0], &[0, 1, 2, 1]).unwrap();
        for row in &cm.counts {
            assert_eq!(row[1] + row[2], 0);
        }
        assert_eq!(cm.counts.iter().map(|r| r[0]).sum::<u64>(), 4);
        assert!(confusion_matrix("a", 2, &[0], &[0, 1]).is_err());
        assert!(confusion_matrix("a", 2, &[2], &[0]).is_err());
    }

    #[test]
    fn histogram_bins() {
        let h = score_histogram("s", &[0.5; 7], 10).unwrap();
        assert_eq!(h.counts[5], 7);
        let h = score_histogram("s", &[0.0, 1.0, 0.999, 0.1], 10).unwrap();
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[9], 2);
        assert_eq!(h.counts[1], 1);
        assert!(score_histogram("s", &[], 10).is_err());
        assert!(score_histogram("s", &[0.2], 1).is_err());
        assert!(score_histogram("s", &[1.2], 4).is_err());
        let h = score_histogram("s", &[0.1, 0.2, 0.6], 2).unwrap();
        assert!((h.fraction_below(0.5) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_probes_rank_first() {
        let gallery: Vec<(usize, Tensor)> = (0..4)
            .map(|i| (i, Tensor::vector(vec![i as f64, 1.0])))
            .collect();
        let cmc = cmc_curve(&gallery, &gallery).unwrap();
        assert_eq!(cmc.rank1(), 1.0);
        assert_eq!(*cmc.rates.last().unwrap(), 1.0);
        let stranger = vec![(9, Tensor::vector(vec![0.0, 0.0]))];
        assert!(cmc_curve(&gallery, &stranger).is_err());
    }

    #[test]
    fn cmc_ties_go_to_lower_gallery_id() {
        let gallery = vec![
            (3, Tensor::vector(vec![1.0, 0.0])),
            (1, Tensor::vector(vec![-1.0, 0.0])),
        ];
        let probes = vec![(3, Tensor::vector(vec![0.0, 1.0]))];
        let cmc = cmc_curve(&gallery, &probes).unwrap();
        assert_eq!(cmc.rates, vec![0.0, 1.0]);
    }

    #[test]
    fn random_gallery_rank1_near_chance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g = 10;
        let mut rank1 = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let gallery: Vec<(usize, Tensor)> = (0..g)
                .map(|i| (i, Tensor::vector((0..4).map(|_| rng.random::<f64>()).collect())))
                .collect();
            let probes: Vec<(usize, Tensor)> = (0..g)
                .map(|i| (i, Tensor::vector((0..4).map(|_| rng.random::<f64>()).collect())))
                .collect();
            rank1 += cmc_curve(&gallery, &probes).unwrap().rank1();
        }
        let mean = rank1 / trials as f64;
        // Standard error over 2000 Bernoulli(0.1) draws is about 0.007.
        assert!((mean - 1.0 / g as f64).abs() < 0.03, "{mean}");
    }

    #[test]
    fn separated_distributions_have_unit_auc() {
        let roc = roc_curve(&[0.1, 0.2, 0.3], &[0.5, 0.9]).unwrap();
        assert_eq!(roc.auc, 1.0);
        let last = roc.points.last().unwrap();
        assert_eq!((last.far, last.tar), (1.0, 1.0));
        assert!(roc_curve(&[], &[1.0]).is_err());
    }

    #[test]
    fn identical_distributions_near_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 400;
        let g: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let i: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let auc = roc_curve(&g, &i).unwrap().auc;
        assert!((auc - 0.5).abs() <= 1.0 / (n as f64).sqrt(), "{auc}");
        assert!((roc_curve(&g, &g).unwrap().auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eer_examples() {
        let p = equal_error_point(&[0.1, 0.2], &[0.6, 0.7]).unwrap();
        assert_eq!(p.eer, 0.0);
        assert!(p.threshold >= 0.2 && p.threshold < 0.6);
        let same = [0.3, 0.4, 0.5];
        assert_eq!(equal_error_point(&same, &same).unwrap().eer, 0.5);
        assert!(equal_error_point(&[], &[0.1]).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(&[4, 4, 3], 0.5);
        let q = quality_stats(&[&a], &[&a]).unwrap();
        assert_eq!(q.pairs[0].mse, 0.0);
        assert_eq!(q.pairs[0].psnr, f64::INFINITY);

        let b = Tensor::full(&[4, 4, 3], 0.6);
        let q = quality_stats(&[&a], &[&b]).unwrap();
        assert!((q.pairs[0].mse - 0.01).abs() < 1e-15);
        assert!((q.pairs[0].psnr - 20.0).abs() < 1e-9);

        let a = Tensor::zeros(&[32, 32, 3]);
        let mut b = a.clone();
        b.data_mut()[17] = 0.5;
        let q = quality_stats(&[&a], &[&b]).unwrap();
        assert_eq!(q.pairs[0].mse, 0.25 / 3072.0);
        let expected = 10.0 * (3072.0f64 / 0.25).log10();
        assert!((q.pairs[0].psnr - expected).abs() < 1e-12);
        assert!((q.pairs[0].psnr - 40.89).abs() < 0.005);

        assert!(quality_stats(&[&a], &[&Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn infinite_psnr_serializes_as_string() {
        let q = PairQuality {
            squared_l2: 0.0,
            mse: 0.0,
            psnr: f64::INFINITY,
        };
        let json = serde_json::to_string(&q).unwrap();
        assert!(json.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<PairQuality>(&json).unwrap(), q);
    }

    proptest! {
        #[test]
        fn roc_auc_matches_pairwise_estimator(
            g in prop::collection::vec(0u8..20, 1..25),
            i in prop::collection::vec(0u8..20, 1..25),
        ) {
            // Coarse integer grid so ties are common.
            let g: Vec<f64> = g.into_iter().map(|x| x as f64 / 10.0).collect();
            let i: Vec<f64> = i.into_iter().map(|x| x as f64 / 10.0).collect();
            let roc = roc_curve(&g, &i).unwrap();
            prop_assert!((roc.auc - pairwise_auc(&g, &i)).abs() <= 1e-9);
            prop_assert!((0.0..=1.0).contains(&roc.auc));
            for w in roc.points.windows(2) {
                prop_assert!(w[1].far >= w[0].far && w[1].tar >= w[0].tar);
            }
        }

        #[test]
        fn histogram_conserves_mass(scores in prop::collection::vec(0.0f64..=1.0, 1..100), bins in 2usize..20) {
            let h = score_histogram("p", &scores, bins).unwrap();
            prop_assert_eq!(h.total(), scores.len() as u64);
        }

        #[test]
        fn confusion_rows_sum_to_100(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60)) {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let cm = confusion_matrix("x", 3, &p, &t).unwrap();
            for (row, counts) in cm.percent.iter().zip(&cm.counts) {
                if counts.iter().sum::<u64>() > 0 {
                    prop_assert!((row.iter().sum::<f64>() - 100.0).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn cmc_is_monotone_and_terminal(seed in any::<u64>(), g in 2usize..8) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let gallery: Vec<(usize, Tensor)> = (0..g)
                .map(|i| (i, Tensor::vector(vec![rng.random(), rng.random()])))
                .collect();
            let probes: Vec<(usize, Tensor)> = (0..3 * g)
                .map(|i| (i % g, Tensor::vector(vec![rng.random(), rng.random()])))
                .collect();
            let cmc = cmc_curve(&gallery, &probes).unwrap();
            for w in cmc.rates.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
            prop_assert_eq!(*cmc.rates.last().unwrap(), 1.0);
        }
    }
}
