//! Closed-vocabulary instance segmentation AP.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{read_json, FormatError};
use crate::proposals::{read_mask_file, InstanceMask3D, InstanceMaskSet, MaskProvenance, ProposalError};
use crate::query::ClassAssignment;

/// Mapping shipped for the ScanNet200 vocabulary (label → head/common/tail).
pub const SCANNET200_SUBSETS: &str = include_str!("../data/scannet200_subsets.json");

pub const DEFAULT_CONFIDENCE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground-truth label {0:?} is not in the class list")]
    UnknownGtLabel(String),
    #[error("class {0:?} has no subset in the subset map")]
    Unmapped(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// `|a ∩ b| / |a ∪ b|`, 0 when both are empty.
pub fn mask_iou(a: &InstanceMask3D, b: &InstanceMask3D) -> f64 {
    assert_eq!(a.num_points(), b.num_points(), "masks over different point sets");
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMask {
    pub mask: InstanceMask3D,
    pub label: String,
    pub confidence: f64,
}

/// Predictions and ground truth of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub scene_id: String,
    pub predictions: Vec<LabeledMask>,
    pub ground_truth: Vec<LabeledMask>,
}

impl SceneEval {
    pub fn new(scene_id: impl Into<String>, predictions: Vec<LabeledMask>, ground_truth: Vec<LabeledMask>) -> Result<Self, EvalError> {
        let all = predictions.iter().chain(&ground_truth);
        let n = predictions.first().or(ground_truth.first()).map(|m| m.mask.num_points());
        for m in all {
            if Some(m.mask.num_points()) != n {
                return Err(EvalError::Invalid("masks of one scene cover different point counts".into()));
            }
        }
        if let Some(p) = predictions.iter().find(|p| !(0.0..=1.0).contains(&p.confidence)) {
            return Err(EvalError::Invalid(format!("confidence {} outside [0, 1]", p.confidence)));
        }
        Ok(Self { scene_id: scene_id.into(), predictions, ground_truth })
    }
}

/// Reads a labeled mask file (proposal format with `labels` and optional
/// `confidences` in the manifest). Empty columns are kept.
pub fn read_labeled_masks(path: &Path) -> Result<(String, Vec<LabeledMask>), EvalError> {
    let file = read_mask_file(path)?;
    let labels = file
        .manifest
        .labels
        .clone()
        .ok_or_else(|| EvalError::Invalid(format!("{}: manifest has no labels", path.display())))?;
    let n = file.manifest.n;
    let confidences = file.manifest.confidences.clone().unwrap_or_else(|| vec![DEFAULT_CONFIDENCE; labels.len()]);
    let masks = file
        .columns
        .into_iter()
        .enumerate()
        .map(|(c, idx)| {
            let prov = MaskProvenance { proposal_id: c, cluster: None };
            Ok(LabeledMask { mask: InstanceMask3D::new(c, n, idx, prov)?, label: labels[c].clone(), confidence: confidences[c] })
        })
        .collect::<Result<Vec<_>, ProposalError>>()?;
    Ok((file.manifest.scene_id, masks))
}

/// Predictions from closed-vocabulary labels; unassigned masks are dropped.
pub fn predictions_from_assignments(masks: &InstanceMaskSet, assignments: &[ClassAssignment]) -> Result<Vec<LabeledMask>, EvalError> {
    let by_id: HashMap<usize, &InstanceMask3D> = masks.masks.iter().map(|m| (m.id, m)).collect();
    assignments
        .iter()
        .filter(|a| a.label_index.is_some())
        .map(|a| {
            let mask = by_id
                .get(&a.mask_id)
                .ok_or_else(|| EvalError::Invalid(format!("assignment for unknown mask {}", a.mask_id)))?;
            Ok(LabeledMask { mask: (*mask).clone(), label: a.label.clone(), confidence: DEFAULT_CONFIDENCE })
        })
        .collect()
}

/// Ground-truth masks stripped of labels, for use as the proposal set.
pub fn oracle_mask_mode(scene_id: &str, num_points: usize, gts: &[LabeledMask]) -> Result<InstanceMaskSet, EvalError> {
    let masks = gts
        .iter()
        .filter(|g| !g.mask.is_empty())
        .enumerate()
        .map(|(i, g)| InstanceMask3D::new(i, num_points, g.mask.indices().to_vec(), MaskProvenance { proposal_id: g.mask.id, cluster: None }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(InstanceMaskSet::new(scene_id, num_points, masks)?)
}

/// AP range thresholds 0.50, 0.55, ..., 0.95.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Area under the precision envelope: `Σ_k (r_k - r_{k-1}) · max_{j≥k} p_j`.
pub fn envelope_ap(is_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return f64::NAN;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut recall = Vec::with_capacity(is_tp.len());
    for (k, &hit) in is_tp.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

struct ClassData<'a> {
    /// (scene, prediction), in ranking order.
    preds: Vec<(usize, &'a LabeledMask)>,
    /// Ground truth per scene.
    gts: Vec<Vec<&'a LabeledMask>>,
    num_gt: usize,
    /// Cached IoU of each ranked prediction against its scene's GTs.
    ious: Vec<Vec<f64>>,
}

fn class_data<'a>(scenes: &'a [SceneEval], class: &str) -> ClassData<'a> {
    let gts: Vec<Vec<&LabeledMask>> = scenes.iter().map(|s| s.ground_truth.iter().filter(|g| g.label == class).collect()).collect();
    let mut preds: Vec<(usize, &LabeledMask)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| s.predictions.iter().filter(|p| p.label == class).map(move |p| (si, p)))
        .collect();
    // stable: ties keep scene order, then ingestion order
    preds.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    let ious = preds.iter().map(|(si, p)| gts[*si].iter().map(|g| mask_iou(&p.mask, &g.mask)).collect()).collect();
    let num_gt = gts.iter().map(Vec::len).sum();
    ClassData { preds, gts, num_gt, ious }
}

fn class_ap(data: &ClassData, threshold: f64) -> f64 {
    let mut matched: Vec<Vec<bool>> = data.gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(data.preds.len());
    for (k, (si, _)) in data.preds.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, &iou) in data.ious[k].iter().enumerate() {
            if !matched[*si][g] && iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched[*si][g] = true;
        }
        hits.push(best.is_some());
    }
    envelope_ap(&hits, data.num_gt)
}

/// Per-class AP at each threshold: `result[class][threshold]`, NaN for
/// classes without ground truth.
pub fn class_ap_table(scenes: &[SceneEval], classes: &[String], thresholds: &[f64]) -> Result<Vec<Vec<f64>>, EvalError> {
    let known: HashMap<&str, ()> = classes.iter().map(|c| (c.as_str(), ())).collect();
    for s in scenes {
        if let Some(g) = s.ground_truth.iter().find(|g| !known.contains_key(g.label.as_str())) {
            return Err(EvalError::UnknownGtLabel(g.label.clone()));
        }
        let unknown = s.predictions.iter().filter(|p| !known.contains_key(p.label.as_str())).count();
        if unknown > 0 {
            log::warn!("scene {}: {unknown} prediction(s) with labels outside the class list count as false positives", s.scene_id);
        }
    }
    Ok(classes
        .par_iter()
        .map(|c| {
            let data = class_data(scenes, c);
            thresholds.iter().map(|&t| class_ap(&data, t)).collect()
        })
        .collect())
}

fn nan_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.into_iter().filter(|v| !v.is_nan()) {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn defined(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub label: String,
    pub num_gt: usize,
    pub num_predictions: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap25: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetAp {
    pub subset: String,
    pub classes: usize,
    /// `None` when no class of the subset has ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap25: Option<f64>,
    pub per_class: Vec<ClassAp>,
    pub subsets: Vec<SubsetAp>,
    pub unknown_predictions: usize,
}

pub fn evaluate_ap(scenes: &[SceneEval], classes: &[String]) -> Result<ApReport, EvalError> {
    let mut thresholds = ap_thresholds();
    thresholds.push(0.25);
    let table = class_ap_table(scenes, classes, &thresholds)?;
    let per_class: Vec<ClassAp> = classes
        .iter()
        .zip(&table)
        .map(|(c, row)| {
            let count = |f: &dyn Fn(&SceneEval) -> usize| scenes.iter().map(f).sum::<usize>();
            ClassAp {
                label: c.clone(),
                num_gt: count(&|s| s.ground_truth.iter().filter(|g| &g.label == c).count()),
                num_predictions: count(&|s| s.predictions.iter().filter(|p| &p.label == c).count()),
                ap: defined(nan_mean(row[..10].iter().copied())),
                ap50: defined(row[0]),
                ap25: defined(row[10]),
            }
        })
        .collect();
    let mean_of = |f: fn(&ClassAp) -> Option<f64>| defined(nan_mean(per_class.iter().map(|c| f(c).unwrap_or(f64::NAN))));
    let known: HashMap<&str, ()> = classes.iter().map(|c| (c.as_str(), ())).collect();
    let unknown_predictions = scenes.iter().flat_map(|s| &s.predictions).filter(|p| !known.contains_key(p.label.as_str())).count();
    Ok(ApReport {
        ap: mean_of(|c| c.ap),
        ap50: mean_of(|c| c.ap50),
        ap25: mean_of(|c| c.ap25),
        per_class,
        subsets: Vec::new(),
        unknown_predictions,
    })
}

pub fn load_subset_map(path: &Path) -> Result<BTreeMap<String, String>, FormatError> {
    read_json(path)
}

pub fn scannet200_subset_map() -> BTreeMap<String, String> {
    serde_json::from_str(SCANNET200_SUBSETS).expect("bundled subset map is valid JSON")
}

/// Unweighted mean AP per subset over classes with ground truth. Subsets are
/// listed head, common, tail first, then any others alphabetically.
pub fn subset_breakdown(report: &ApReport, subset_map: &BTreeMap<String, String>) -> Result<Vec<SubsetAp>, EvalError> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for name in subset_map.values() {
        groups.entry(name.as_str()).or_default();
    }
    for c in &report.per_class {
        let subset = subset_map.get(&c.label).ok_or_else(|| EvalError::Unmapped(c.label.clone()))?;
        groups.get_mut(subset.as_str()).expect("subset registered").push(c.ap.unwrap_or(f64::NAN));
    }
    let rank = |s: &str| ["head", "common", "tail"].iter().position(|x| *x == s).unwrap_or(3);
    let mut out: Vec<SubsetAp> = groups
        .into_iter()
        .map(|(name, aps)| SubsetAp { subset: name.into(), classes: aps.len(), ap: defined(nan_mean(aps)) })
        .collect();
    out.sort_by(|a, b| rank(&a.subset).cmp(&rank(&b.subset)).then(a.subset.cmp(&b.subset)));
    Ok(out)
}

impl ApReport {
    pub fn with_subsets(mut self, subset_map: &BTreeMap<String, String>) -> Result<Self, EvalError> {
        self.subsets = subset_breakdown(&self, subset_map)?;
        Ok(self)
    }

    /// Aligned table of percentages, `n/a` for undefined values.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.1}", 100.0 * v));
        let mut header = vec!["AP".to_string(), "AP50".into(), "AP25".into()];
        let mut values = vec![fmt(self.ap), fmt(self.ap50), fmt(self.ap25)];
        for s in &self.subsets {
            header.push(s.subset.clone());
            values.push(fmt(s.ap));
        }
        let widths: Vec<usize> = header.iter().zip(&values).map(|(h, v)| h.len().max(v.len())).collect();
        let mut out = String::new();
        let line = |cells: &[String], out: &mut String| {
            let row: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(out, "{}", row.join("  "));
        };
        line(&header, &mut out);
        line(&values, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(n: usize, idx: &[u32]) -> InstanceMask3D {
        InstanceMask3D::new(0, n, idx.to_vec(), MaskProvenance { proposal_id: 0, cluster: None }).unwrap()
    }

    fn lm(n: usize, idx: &[u32], label: &str) -> LabeledMask {
        LabeledMask { mask: mask(n, idx), label: label.into(), confidence: 1.0 }
    }

    #[test]
    fn iou_examples() {
        let a = mask(30, &(0..10).collect::<Vec<_>>());
        let b = mask(30, &(5..15).collect::<Vec<_>>());
        let c = mask(30, &(20..25).collect::<Vec<_>>());
        assert_eq!(mask_iou(&a, &a), 1.0);
        assert_eq!(mask_iou(&a, &c), 0.0);
        assert!((mask_iou(&a, &b) - 5.0 / 15.0).abs() < 1e-12);
        assert_eq!(mask_iou(&mask(3, &[]), &mask(3, &[])), 0.0);
    }

    #[test]
    fn perfect_and_straddle() {
        let classes = vec!["chair".to_string()];
        let gt = lm(20, &(0..10).collect::<Vec<_>>(), "chair");
        let s = SceneEval::new("s", vec![gt.clone()], vec![gt.clone()]).unwrap();
        let r = evaluate_ap(&[s], &classes).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap25), (Some(1.0), Some(1.0), Some(1.0)));

        // 3 of the 10 GT points → IoU 0.3
        let p = lm(20, &[0, 1, 2], "chair");
        let gt = lm(20, &(0..10).collect::<Vec<_>>(), "chair");
        assert!((mask_iou(&p.mask, &gt.mask) - 0.3).abs() < 1e-12);
        let r = evaluate_ap(&[SceneEval::new("s", vec![p], vec![gt]).unwrap()], &classes).unwrap();
        assert_eq!((r.ap50, r.ap25), (Some(0.0), Some(1.0)));
    }

    #[test]
    fn envelope_examples() {
        assert_eq!(envelope_ap(&[true], 1), 1.0);
        assert_eq!(envelope_ap(&[false, true], 1), 0.5);
        // recall 0.5 at p=1, recall 1 at p=2/3
        assert!((envelope_ap(&[true, false, true], 2) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(envelope_ap(&[], 3), 0.0);
        assert!(envelope_ap(&[true], 0).is_nan());
    }

    #[test]
    fn classes_without_gt_are_excluded() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let s = SceneEval::new("s", vec![lm(5, &[0, 1], "a"), lm(5, &[3], "b")], vec![lm(5, &[0, 1], "a")]).unwrap();
        let r = evaluate_ap(&[s], &classes).unwrap();
        assert_eq!(r.per_class[1].ap, None);
        assert_eq!(r.ap, Some(1.0));
    }

    #[test]
    fn unknown_labels() {
        let classes = vec!["a".to_string()];
        let s = SceneEval::new("s", vec![lm(5, &[0], "zzz")], vec![lm(5, &[0], "a")]).unwrap();
        let r = evaluate_ap(&[s], &classes).unwrap();
        assert_eq!(r.unknown_predictions, 1);
        assert_eq!(r.ap, Some(0.0));
        let bad = SceneEval::new("s", vec![], vec![lm(5, &[0], "zzz")]).unwrap();
        assert!(matches!(evaluate_ap(&[bad], &classes), Err(EvalError::UnknownGtLabel(_))));
    }

    #[test]
    fn subset_means() {
        let report = ApReport {
            ap: None,
            ap50: None,
            ap25: None,
            per_class: vec![
                ClassAp { label: "x".into(), num_gt: 1, num_predictions: 1, ap: Some(0.2), ap50: None, ap25: None },
                ClassAp { label: "y".into(), num_gt: 1, num_predictions: 1, ap: Some(0.4), ap50: None, ap25: None },
                ClassAp { label: "z".into(), num_gt: 0, num_predictions: 1, ap: None, ap50: None, ap25: None },
            ],
            subsets: vec![],
            unknown_predictions: 0,
        };
        let map: BTreeMap<String, String> =
            [("x", "tail"), ("y", "tail"), ("z", "head")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let s = subset_breakdown(&report, &map).unwrap();
        assert_eq!(s[0].subset, "head");
        assert_eq!(s[0].ap, None);
        assert!((s[1].ap.unwrap() - 0.3).abs() < 1e-12);
        let mut partial = map.clone();
        partial.remove("x");
        assert!(matches!(subset_breakdown(&report, &partial), Err(EvalError::Unmapped(_))));
    }

    #[test]
    fn bundled_map_sizes() {
        let m = scannet200_subset_map();
        let count = |s: &str| m.values().filter(|v| *v == s).count();
        assert_eq!((count("head"), count("common"), count("tail")), (66, 68, 66));
    }

    #[test]
    fn oracle_strips_labels() {
        let gts: Vec<LabeledMask> = (0..7).map(|i| lm(10, &[i], "a")).collect();
        let set = oracle_mask_mode("s", 10, &gts).unwrap();
        assert_eq!(set.len(), 7);
        assert!(oracle_mask_mode("s", 10, &[]).unwrap().is_empty());
        let again: Vec<LabeledMask> = set.masks.iter().map(|m| LabeledMask { mask: m.clone(), label: String::new(), confidence: 1.0 }).collect();
        assert_eq!(oracle_mask_mode("s", 10, &again).unwrap().masks.iter().map(|m| m.indices().to_vec()).collect::<Vec<_>>(),
            set.masks.iter().map(|m| m.indices().to_vec()).collect::<Vec<_>>());
    }

    #[test]
    fn table_layout() {
        let r = ApReport {
            ap: Some(0.128),
            ap50: Some(0.168),
            ap25: None,
            per_class: vec![],
            subsets: vec![SubsetAp { subset: "head".into(), classes: 2, ap: Some(0.5) }],
            unknown_predictions: 0,
        };
        let t = r.to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "  AP  AP50  AP25  head");
        assert_eq!(lines[1], "12.8  16.8   n/a  50.0");
    }
}
