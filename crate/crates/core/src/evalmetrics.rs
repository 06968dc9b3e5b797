//! Voxelwise AUROC and average precision inside a tissue mask.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::volio::{boxes_to_mask, BoundingBox, Volume};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        bail!(
            Dimension,
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        );
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        bail!(Validation, "score {s} is not a number");
    }
    let p = labels.iter().filter(|&&l| l).count();
    Ok((p, labels.len() - p))
}

/// Indices sorted by descending score, then tie groups as index ranges.
fn tie_groups(scores: &[f64]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=idx.len() {
        if i == idx.len() || scores[idx[i]] != scores[idx[start]] {
            groups.push((start, i));
            start = i;
        }
    }
    (idx, groups)
}

/// Area under the ROC curve by midranks (ties count ½).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, n) = check_inputs(scores, labels)?;
    if p == 0 || n == 0 {
        bail!(
            UndefinedMetric,
            "AUROC needs both classes ({p} positives, {n} negatives)"
        );
    }
    let (idx, groups) = tie_groups(scores);
    // Count negatives below each positive; ties contribute half.
    let mut neg_below = n as f64;
    let mut wins = 0.0;
    for (s, e) in groups {
        let gp = idx[s..e].iter().filter(|&&i| labels[i]).count() as f64;
        let gn = (e - s) as f64 - gp;
        neg_below -= gn;
        wins += gp * (neg_below + 0.5 * gn);
    }
    Ok(wins / (p as f64 * n as f64))
}

/// Average precision `Σ (R_k − R_{k−1}) P_k`, one threshold per tie group.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, _) = check_inputs(scores, labels)?;
    if p == 0 {
        bail!(UndefinedMetric, "average precision needs at least one positive");
    }
    let (idx, groups) = tie_groups(scores);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (s, e) in groups {
        tp += idx[s..e].iter().filter(|&&i| labels[i]).count();
        seen += e - s;
        let recall = tp as f64 / p as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: String,
    /// `None` when the case has a single class inside the mask.
    pub auroc: Option<f64>,
    pub ap: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub ap: f64,
    /// Positives over all in-mask voxels: the AP of a random scorer.
    pub ap_baseline: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Voxels outside the tissue mask.
    pub excluded: usize,
    #[serde(default)]
    pub per_case: Vec<CaseReport>,
}

/// One test case: score map, ground-truth boxes and tissue mask.
#[derive(Clone, Debug)]
pub struct EvalCase<'a> {
    pub name: String,
    pub map: &'a Volume,
    pub boxes: &'a [BoundingBox],
    pub tissue_mask: &'a Volume,
}

/// In-mask scores and labels of one case, plus the excluded count.
fn case_voxels(c: &EvalCase) -> Result<(Vec<f64>, Vec<bool>, usize)> {
    let dims = c.map.dims();
    if c.map.channels() != 1 || c.tissue_mask.channels() != 1 || c.tissue_mask.dims() != dims {
        bail!(
            Dimension,
            "case {}: map {}×{:?} and mask {}×{:?} must be single-channel and equal in size",
            c.name,
            c.map.channels(),
            dims,
            c.tissue_mask.channels(),
            c.tissue_mask.dims()
        );
    }
    let labels = boxes_to_mask(c.boxes, dims, c.map.spacing())?;
    let (mut s, mut l) = (Vec::new(), Vec::new());
    let mut excluded = 0;
    for v in 0..c.map.voxels() {
        match c.tissue_mask.data()[v] {
            m if m == 1.0 => {
                s.push(c.map.data()[v]);
                l.push(labels.data()[v] == 1.0);
            }
            m if m == 0.0 => excluded += 1,
            m => bail!(Validation, "case {}: tissue mask is not binary (found {m})", c.name),
        }
    }
    Ok((s, l, excluded))
}

fn report(scores: &[f64], labels: &[bool], excluded: usize) -> Result<EvalReport> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 {
        bail!(UndefinedMetric, "no box voxel lies inside the tissue mask");
    }
    Ok(EvalReport {
        auroc: auroc(scores, labels)?,
        ap: average_precision(scores, labels)?,
        ap_baseline: positives as f64 / (positives + negatives) as f64,
        positives,
        negatives,
        excluded,
        per_case: Vec::new(),
    })
}

/// Metrics over the voxels inside `tissue_mask`, labelled by the union of
/// `boxes`.
pub fn evaluate(map: &Volume, boxes: &[BoundingBox], tissue_mask: &Volume) -> Result<EvalReport> {
    let (s, l, excluded) = case_voxels(&EvalCase {
        name: String::new(),
        map,
        boxes,
        tissue_mask,
    })?;
    report(&s, &l, excluded)
}

/// Metrics pooled over all in-mask voxels of all cases, with a per-case
/// breakdown.
pub fn evaluate_cases(cases: &[EvalCase]) -> Result<EvalReport> {
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    let mut excluded = 0;
    let mut per_case = Vec::with_capacity(cases.len());
    for c in cases {
        let (s, l, ex) = case_voxels(c)?;
        let positives = l.iter().filter(|&&v| v).count();
        let single = positives == 0 || positives == l.len();
        per_case.push(CaseReport {
            case: c.name.clone(),
            auroc: if single { None } else { Some(auroc(&s, &l)?) },
            ap: if positives == 0 { None } else { Some(average_precision(&s, &l)?) },
            positives,
            negatives: l.len() - positives,
            excluded: ex,
        });
        scores.extend(s);
        labels.extend(l);
        excluded += ex;
    }
    let mut r = report(&scores, &labels, excluded)?;
    r.per_case = per_case;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(
            auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(),
            0.75
        );
        assert_eq!(auroc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(crate::Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert!(matches!(
            average_precision(&[0.1], &[false]),
            Err(crate::Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ap_tie_group_is_one_threshold() {
        // Both tied at the top: one step to recall 1 at precision 2/3.
        let ap = average_precision(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap();
        assert!((ap - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn evaluate_oracle_and_constant() {
        let dims = [6, 5, 2];
        let b = BoundingBox::new([1, 1, 0], [2, 3, 1], "lesion").unwrap();
        let labels = boxes_to_mask(std::slice::from_ref(&b), dims, [1.0; 3]).unwrap();
        let mut mask = Volume::zeros(1, dims, [1.0; 3]).unwrap();
        for z in 0..2 {
            for y in 0..5 {
                for x in 0..5 {
                    mask.set(0, x, y, z, 1.0);
                }
            }
        }
        let r = evaluate(&labels, std::slice::from_ref(&b), &mask).unwrap();
        assert_eq!((r.auroc, r.ap), (1.0, 1.0));
        assert_eq!((r.positives, r.negatives, r.excluded), (12, 38, 10));
        assert_eq!(r.ap_baseline, 12.0 / 50.0);
        let flat = Volume::new(1, dims, [1.0; 3], vec![0.7; 60]).unwrap();
        assert_eq!(evaluate(&flat, std::slice::from_ref(&b), &mask).unwrap().auroc, 0.5);
        let none = Volume::zeros(1, dims, [1.0; 3]).unwrap();
        assert!(matches!(
            evaluate(&flat, std::slice::from_ref(&b), &none),
            Err(crate::Error::UndefinedMetric(_))
        ));
    }
}
