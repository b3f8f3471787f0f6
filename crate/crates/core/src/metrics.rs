//! Multi-label classification metrics and IOU-based detection scoring.
//!
//! The label space treats the no-artifacts value as a singleton label, so
//! set arithmetic is total over [`LabelSet`]. The "All" row of a report uses
//! example-based averaging by default; micro-averaging is available behind
//! [`Averaging::Micro`] because the original table does not pin the scheme.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instructions::BoundingBox;
use crate::taxonomy::{LabelSet, Taxonomy};

/// One element of the extended label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    NoArtifacts,
    Category(usize),
}

/// The extended-set view of a label set: no-artifacts becomes a singleton.
pub fn label_elements(labels: &LabelSet) -> BTreeSet<Label> {
    match labels {
        LabelSet::NoArtifacts => [Label::NoArtifacts].into_iter().collect(),
        LabelSet::Artifacts(ids) => ids.iter().map(|&id| Label::Category(id)).collect(),
    }
}

fn check_paired(preds: &[LabelSet], golds: &[LabelSet]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Fraction of positions where the predicted set equals the gold set exactly.
pub fn exact_match_accuracy(preds: &[LabelSet], golds: &[LabelSet]) -> Result<f64> {
    check_paired(preds, golds)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Precision/recall/F1 triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Example-based precision/recall/F1, averaged over examples.
///
/// Per example with predicted set P and gold set G: precision is |P∩G|/|P|
/// (1 when both sides are empty, 0 when only P is empty), recall is the
/// dual, F1 the harmonic mean (0 when both are 0).
pub fn example_based_prf(preds: &[LabelSet], golds: &[LabelSet]) -> Result<Prf> {
    check_paired(preds, golds)?;
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut f_sum = 0.0;
    for (pred, gold) in preds.iter().zip(golds) {
        let p_set = label_elements(pred);
        let g_set = label_elements(gold);
        let inter = p_set.intersection(&g_set).count() as f64;
        let p = if p_set.is_empty() {
            if g_set.is_empty() {
                1.0
            } else {
                0.0
            }
        } else {
            inter / p_set.len() as f64
        };
        let r = if g_set.is_empty() {
            if p_set.is_empty() {
                1.0
            } else {
                0.0
            }
        } else {
            inter / g_set.len() as f64
        };
        p_sum += p;
        r_sum += r;
        f_sum += f1_of(p, r);
    }
    let n = preds.len() as f64;
    Ok(Prf {
        precision: p_sum / n,
        recall: r_sum / n,
        f1: f_sum / n,
    })
}

/// Mean Jaccard similarity |P∩G|/|P∪G| over examples — the looser "accuracy"
/// convention for multi-label outputs, reported next to exact match.
pub fn example_accuracy(preds: &[LabelSet], golds: &[LabelSet]) -> Result<f64> {
    check_paired(preds, golds)?;
    let mut sum = 0.0;
    for (pred, gold) in preds.iter().zip(golds) {
        let p_set = label_elements(pred);
        let g_set = label_elements(gold);
        let inter = p_set.intersection(&g_set).count() as f64;
        let union = p_set.union(&g_set).count() as f64;
        sum += if union > 0.0 { inter / union } else { 1.0 };
    }
    Ok(sum / preds.len() as f64)
}

/// Micro-averaged precision/recall/F1 over the pooled label decisions.
pub fn micro_prf(preds: &[LabelSet], golds: &[LabelSet]) -> Result<Prf> {
    check_paired(preds, golds)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (pred, gold) in preds.iter().zip(golds) {
        let p_set = label_elements(pred);
        let g_set = label_elements(gold);
        tp += p_set.intersection(&g_set).count();
        fp += p_set.difference(&g_set).count();
        fn_ += g_set.difference(&p_set).count();
    }
    let p = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let r = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    Ok(Prf {
        precision: p,
        recall: r,
        f1: f1_of(p, r),
    })
}

/// Binary metrics for one label, with explicit flags for the degenerate
/// cases (no predicted positives, no gold positives) that are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
}

/// Binarize every example on membership of `target` and compute standard
/// binary accuracy/precision/recall/F1.
pub fn per_category_metrics(
    preds: &[LabelSet],
    golds: &[LabelSet],
    target: Label,
) -> Result<BinaryMetrics> {
    check_paired(preds, golds)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut tn = 0usize;
    for (pred, gold) in preds.iter().zip(golds) {
        let p = label_elements(pred).contains(&target);
        let g = label_elements(gold).contains(&target);
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let n = preds.len() as f64;
    let precision_defined = tp + fp > 0;
    let recall_defined = tp + fn_ > 0;
    let precision = if precision_defined {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if recall_defined {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    Ok(BinaryMetrics {
        accuracy: (tp + tn) as f64 / n,
        precision,
        recall,
        f1: f1_of(precision, recall),
        precision_defined,
        recall_defined,
    })
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// One row of the detection matching table: a ground-truth box, the predicted
/// box greedily matched to it (if any), and their IOU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMatch {
    pub gt_index: usize,
    pub pred_index: Option<usize>,
    pub iou: f64,
}

/// Result of [`detection_score`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    /// Mean matched IOU per ground-truth box (0 for unmatched ones).
    pub mean_iou: f64,
    pub matches: Vec<DetectionMatch>,
}

/// Greedy one-to-one matching of predicted to ground-truth boxes of the same
/// category, by descending IOU; every ground-truth box scores its matched
/// IOU or 0, and the mean over ground-truth boxes is reported.
pub fn detection_score(
    preds: &[(usize, BoundingBox)],
    gts: &[(usize, BoundingBox)],
) -> Result<DetectionScore> {
    if gts.is_empty() {
        return Ok(DetectionScore {
            mean_iou: 0.0,
            matches: Vec::new(),
        });
    }
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (gi, (g_cat, g_box)) in gts.iter().enumerate() {
        for (pi, (p_cat, p_box)) in preds.iter().enumerate() {
            if p_cat == g_cat {
                let v = iou(p_box, g_box)?;
                if v > 0.0 {
                    pairs.push((gi, pi, v));
                }
            }
        }
    }
    // Descending IOU; ties broken by indices for determinism.
    pairs.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("iou is finite")
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut gt_iou = vec![0.0f64; gts.len()];
    let mut gt_pred = vec![None; gts.len()];
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    for (gi, pi, v) in pairs {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            gt_iou[gi] = v;
            gt_pred[gi] = Some(pi);
        }
    }
    let matches: Vec<DetectionMatch> = (0..gts.len())
        .map(|gi| DetectionMatch {
            gt_index: gi,
            pred_index: gt_pred[gi],
            iou: gt_iou[gi],
        })
        .collect();
    let mean_iou = gt_iou.iter().sum::<f64>() / gts.len() as f64;
    Ok(DetectionScore { mean_iou, matches })
}

/// Averaging scheme for the overall precision/recall/F1 of a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    ExampleBased,
    Micro,
}

/// Overall metrics: both accuracy conventions plus averaged P/R/F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverallMetrics {
    pub exact_match_accuracy: f64,
    pub example_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// The full classification report: one overall row plus one binary row per
/// category and one for the no-artifacts label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub overall: OverallMetrics,
    pub per_category: BTreeMap<usize, BinaryMetrics>,
    pub no_artifacts: BinaryMetrics,
    pub n_examples: usize,
    pub averaging: Averaging,
}

/// Compute the report for parallel prediction/gold sequences.
pub fn classification_report(
    preds: &[LabelSet],
    golds: &[LabelSet],
    taxonomy: &Taxonomy,
    averaging: Averaging,
) -> Result<ClassificationReport> {
    check_paired(preds, golds)?;
    for labels in preds.iter().chain(golds) {
        labels.validate_for(taxonomy)?;
    }
    let prf = match averaging {
        Averaging::ExampleBased => example_based_prf(preds, golds)?,
        Averaging::Micro => micro_prf(preds, golds)?,
    };
    let overall = OverallMetrics {
        exact_match_accuracy: exact_match_accuracy(preds, golds)?,
        example_accuracy: example_accuracy(preds, golds)?,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
    };
    let mut per_category = BTreeMap::new();
    for cat in taxonomy.categories() {
        per_category.insert(
            cat.id,
            per_category_metrics(preds, golds, Label::Category(cat.id))?,
        );
    }
    let no_artifacts = per_category_metrics(preds, golds, Label::NoArtifacts)?;
    Ok(ClassificationReport {
        overall,
        per_category,
        no_artifacts,
        n_examples: preds.len(),
        averaging,
    })
}

impl ClassificationReport {
    /// CSV rows in the table's column order (accuracy, precision, recall,
    /// F1 score); values are fractions in [0,1] with six decimals. The "All"
    /// accuracy column is exact-match.
    pub fn to_csv(&self, taxonomy: &Taxonomy) -> String {
        let mut out = String::from("category,accuracy,precision,recall,f1_score\n");
        let row = |name: &str, a: f64, p: f64, r: f64, f: f64| {
            format!("{},{:.6},{:.6},{:.6},{:.6}\n", name, a, p, r, f)
        };
        out.push_str(&row(
            "All",
            self.overall.exact_match_accuracy,
            self.overall.precision,
            self.overall.recall,
            self.overall.f1,
        ));
        for (id, m) in &self.per_category {
            let name = taxonomy
                .category(*id)
                .map(|c| c.name.clone())
                .unwrap_or_else(|_| format!("category-{}", id));
            out.push_str(&row(&name, m.accuracy, m.precision, m.recall, m.f1));
        }
        let m = &self.no_artifacts;
        out.push_str(&row("No artifacts", m.accuracy, m.precision, m.recall, m.f1));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::builtin_ids;
    use proptest::prelude::*;

    fn ls(ids: &[usize]) -> LabelSet {
        if ids.is_empty() {
            LabelSet::NoArtifacts
        } else {
            LabelSet::from_ids(ids.iter().copied()).unwrap()
        }
    }

    #[test]
    fn exact_match_examples() {
        let a = vec![ls(&[1]), ls(&[2, 3]), ls(&[])];
        assert_eq!(exact_match_accuracy(&a, &a).unwrap(), 1.0);
        let preds = vec![ls(&[1]), ls(&[2])];
        let golds = vec![ls(&[1]), ls(&[3])];
        assert_eq!(exact_match_accuracy(&preds, &golds).unwrap(), 0.5);
        let preds = vec![ls(&[1]), ls(&[2])];
        let golds = vec![ls(&[4]), ls(&[5])];
        assert_eq!(exact_match_accuracy(&preds, &golds).unwrap(), 0.0);
        assert!(matches!(
            exact_match_accuracy(&preds, &[ls(&[1])]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            exact_match_accuracy(&[], &[]),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn example_prf_partial_overlap() {
        let preds = vec![ls(&[1])];
        let golds = vec![ls(&[1, 2])];
        let prf = example_based_prf(&preds, &golds).unwrap();
        assert_eq!(prf.precision, 1.0);
        assert_eq!(prf.recall, 0.5);
        assert!((prf.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn example_prf_perfect() {
        let sets = vec![ls(&[1]), ls(&[]), ls(&[2, 5])];
        let prf = example_based_prf(&sets, &sets).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_artifacts_is_a_singleton_label() {
        let preds = vec![ls(&[])];
        let golds = vec![ls(&[3])];
        let prf = example_based_prf(&preds, &golds).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn per_category_confusion_arithmetic() {
        // TP, FP, FN, TN each once for category 1.
        let preds = vec![ls(&[1]), ls(&[1]), ls(&[2]), ls(&[3])];
        let golds = vec![ls(&[1]), ls(&[2]), ls(&[1]), ls(&[3])];
        let m = per_category_metrics(&preds, &golds, Label::Category(1)).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.5, 0.5, 0.5, 0.5));
        assert!(m.precision_defined && m.recall_defined);
    }

    #[test]
    fn per_category_all_correct() {
        let sets = vec![ls(&[1, 2]), ls(&[1]), ls(&[])];
        let m = per_category_metrics(&sets, &sets, Label::Category(1)).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn per_category_degenerate_flags() {
        let preds = vec![ls(&[2]), ls(&[2])];
        let golds = vec![ls(&[1]), ls(&[1])];
        let m = per_category_metrics(&preds, &golds, Label::Category(1)).unwrap();
        assert_eq!(m.precision, 0.0);
        assert!(!m.precision_defined);
        assert_eq!(m.recall, 0.0);
        assert!(m.recall_defined);
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = BoundingBox::new(3.0, 3.0, 4.0, 4.0).unwrap();
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let c = BoundingBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        assert!((iou(&a, &c).unwrap() - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn detection_perfect_and_empty() {
        let b1 = BoundingBox::new(0.1, 0.1, 0.4, 0.4).unwrap();
        let b2 = BoundingBox::new(0.5, 0.5, 0.9, 0.9).unwrap();
        let gt = vec![(1usize, b1), (2usize, b2)];
        let score = detection_score(&gt, &gt).unwrap();
        assert_eq!(score.mean_iou, 1.0);
        let none = detection_score(&[], &gt).unwrap();
        assert_eq!(none.mean_iou, 0.0);
        assert!(none.matches.iter().all(|m| m.pred_index.is_none()));
    }

    #[test]
    fn detection_requires_matching_category() {
        let b = BoundingBox::new(0.1, 0.1, 0.4, 0.4).unwrap();
        let score = detection_score(&[(2, b)], &[(1, b)]).unwrap();
        assert_eq!(score.mean_iou, 0.0);
    }

    /// Exhaustive one-to-one assignment oracle for small instances.
    fn best_assignment_mean(preds: &[(usize, BoundingBox)], gts: &[(usize, BoundingBox)]) -> f64 {
        fn recurse(
            gi: usize,
            used: &mut Vec<bool>,
            preds: &[(usize, BoundingBox)],
            gts: &[(usize, BoundingBox)],
        ) -> f64 {
            if gi == gts.len() {
                return 0.0;
            }
            // Option: leave this gt unmatched.
            let mut best = recurse(gi + 1, used, preds, gts);
            for pi in 0..preds.len() {
                if !used[pi] && preds[pi].0 == gts[gi].0 {
                    used[pi] = true;
                    let v = iou(&preds[pi].1, &gts[gi].1).unwrap()
                        + recurse(gi + 1, used, preds, gts);
                    used[pi] = false;
                    best = best.max(v);
                }
            }
            best
        }
        let mut used = vec![false; preds.len()];
        recurse(0, &mut used, preds, gts) / gts.len() as f64
    }

    #[test]
    fn detection_crossing_case_matches_assignment_oracle() {
        // Each prediction overlaps both gts, but clearly prefers its own.
        let g1 = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let g2 = BoundingBox::new(0.8, 0.0, 1.8, 1.0).unwrap();
        let p1 = BoundingBox::new(0.05, 0.0, 1.05, 1.0).unwrap();
        let p2 = BoundingBox::new(0.85, 0.0, 1.85, 1.0).unwrap();
        let gts = vec![(1usize, g1), (1usize, g2)];
        let preds = vec![(1usize, p1), (1usize, p2)];
        let score = detection_score(&preds, &gts).unwrap();
        let oracle = best_assignment_mean(&preds, &gts);
        assert!((score.mean_iou - oracle).abs() < 1e-12);
        // Both gts got distinct predictions.
        let assigned: Vec<_> = score.matches.iter().filter_map(|m| m.pred_index).collect();
        assert_eq!(assigned.len(), 2);
        assert_ne!(assigned[0], assigned[1]);
    }

    #[test]
    fn report_csv_shape() {
        let t = Taxonomy::builtin();
        let sets = vec![ls(&[builtin_ids::DISTORTION]), ls(&[])];
        let report = classification_report(&sets, &sets, &t, Averaging::ExampleBased).unwrap();
        assert_eq!(report.overall.exact_match_accuracy, 1.0);
        assert_eq!(report.overall.f1, 1.0);
        let csv = report.to_csv(&t);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "category,accuracy,precision,recall,f1_score");
        assert_eq!(lines.len(), 1 + 1 + 13 + 1);
        assert!(lines[1].starts_with("All,"));
        assert!(lines.last().unwrap().starts_with("No artifacts,"));
    }

    proptest! {
        #[test]
        fn iou_symmetry_translation_scale(
            ax1 in -5.0f64..5.0, ay1 in -5.0f64..5.0,
            aw in 0.1f64..4.0, ah in 0.1f64..4.0,
            bx1 in -5.0f64..5.0, by1 in -5.0f64..5.0,
            bw in 0.1f64..4.0, bh in 0.1f64..4.0,
            dx in -3.0f64..3.0, dy in -3.0f64..3.0,
            s in 0.1f64..10.0,
        ) {
            let a = BoundingBox::new(ax1, ay1, ax1 + aw, ay1 + ah).unwrap();
            let b = BoundingBox::new(bx1, by1, bx1 + bw, by1 + bh).unwrap();
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            let shift = |v: &BoundingBox| BoundingBox::new(v.x1 + dx, v.y1 + dy, v.x2 + dx, v.y2 + dy).unwrap();
            prop_assert!((iou(&shift(&a), &shift(&b)).unwrap() - ab).abs() < 1e-9);
            let scale = |v: &BoundingBox| BoundingBox::new(v.x1 * s, v.y1 * s, v.x2 * s, v.y2 * s).unwrap();
            prop_assert!((iou(&scale(&a), &scale(&b)).unwrap() - ab).abs() < 1e-9);
        }

        #[test]
        fn singleton_sets_collapse_to_binary(
            preds in proptest::collection::vec(0usize..5, 1..40),
            golds_seed in proptest::collection::vec(0usize..5, 1..40),
        ) {
            let n = preds.len().min(golds_seed.len());
            let p: Vec<LabelSet> = preds[..n].iter().map(|&i| ls(&[i])).collect();
            let g: Vec<LabelSet> = golds_seed[..n].iter().map(|&i| ls(&[i])).collect();
            let prf = example_based_prf(&p, &g).unwrap();
            let em = exact_match_accuracy(&p, &g).unwrap();
            let ea = example_accuracy(&p, &g).unwrap();
            prop_assert!((prf.precision - em).abs() < 1e-12);
            prop_assert!((prf.recall - em).abs() < 1e-12);
            prop_assert!((prf.f1 - em).abs() < 1e-12);
            prop_assert!((ea - em).abs() < 1e-12);
        }
    }
}
