use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::pipeline::components;

use super::scene::{RegionKind, ToyScene};

fn metric_err(msg: impl Into<String>) -> Error {
    Error::Metric(msg.into())
}

/// Area under the ROC curve: `P(s₊ > s₋) + ½·P(s₊ = s₋)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(metric_err(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(metric_err("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(metric_err("ROC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // walk tie groups upward; each positive wins against every lower negative
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let p = group.iter().filter(|&&k| labels[k]).count();
        let q = group.len() - p;
        wins += p as f64 * neg_below as f64 + 0.5 * (p * q) as f64;
        neg_below += q;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// A connected supra-threshold region of a map.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    /// Pixels, indexed `x·h + y`, sorted.
    pub pixels: Vec<usize>,
    /// Maximum map value inside the component.
    pub score: f64,
}

/// Detections of one image at one threshold, in scan order of their first pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub threshold: f64,
    pub detections: Vec<Detection>,
}

/// Binarise at each threshold (`value > t`) and take 8-connected components.
pub fn heatmap_to_detections(map: &Heatmap, thresholds: &[f64]) -> Vec<DetectionSet> {
    thresholds
        .iter()
        .map(|&t| {
            let mask: Vec<bool> = map.values().iter().map(|&v| v > t).collect();
            let detections = components(&mask, map.width(), map.height())
                .into_iter()
                .map(|pixels| {
                    let score = pixels.iter().map(|&i| map.values()[i]).fold(0.0, f64::max);
                    Detection { pixels, score }
                })
                .collect();
            DetectionSet { threshold: t, detections }
        })
        .collect()
}

/// Ground truth of one image: target regions as sorted pixel lists.
pub type Truth = Vec<Vec<usize>>;

fn intersects(a: &[usize], b: &[usize]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => return true,
        }
    }
    false
}

/// Greedy matching of one image: detections by descending score (ties by
/// lower index); each claims the lowest-index unmatched region it touches.
/// Returns `(score, true positive)` per detection.
pub fn match_detections(dets: &[Detection], truth: &Truth) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; truth.len()];
    order
        .into_iter()
        .map(|k| {
            let hit = (0..truth.len()).find(|&g| !taken[g] && intersects(&dets[k].pixels, &truth[g]));
            if let Some(g) = hit {
                taken[g] = true;
            }
            (dets[k].score, hit.is_some())
        })
        .collect()
}

/// FROC operating points `(mean false positives per image, sensitivity)`,
/// one per distinct score, starting at `(0, 0)`.
pub fn froc_curve(detections: &[Vec<Detection>], truth: &[Truth]) -> Result<Vec<(f64, f64)>> {
    if detections.len() != truth.len() || truth.is_empty() {
        return Err(metric_err("FROC needs one detection list per ground-truth image"));
    }
    let total: usize = truth.iter().map(|t| t.len()).sum();
    if total == 0 {
        return Err(metric_err("no ground-truth lesions"));
    }
    let mut marks: Vec<(f64, bool)> = detections.iter().zip(truth).flat_map(|(d, t)| match_detections(d, t)).collect();
    marks.sort_by(|a, b| b.0.total_cmp(&a.0));
    let images = truth.len() as f64;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < marks.len() {
        let s = marks[i].0;
        while i < marks.len() && marks[i].0 == s {
            if marks[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / images, tp as f64 / total as f64));
    }
    Ok(points)
}

/// Trapezoid area of a FROC curve over `[0, μ]`, divided by `μ`. The curve
/// is held at its last sensitivity beyond its last point.
pub fn froc_area(detections: &[Vec<Detection>], truth: &[Truth], mu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(metric_err(format!("FROC range must be positive, got {mu}")));
    }
    let pts = froc_curve(detections, truth)?;
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= mu {
            break;
        }
        if x1 <= mu {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (mu - x0) / (x1 - x0);
            area += (mu - x0) * (y0 + y) / 2.0;
        }
    }
    let (xl, yl) = *pts.last().expect("curve has a start point");
    if xl < mu {
        area += (mu - xl) * yl;
    }
    Ok(area / mu)
}

/// Image-level ROC inputs for one lesion type: the label says whether the
/// scene has a region of `kind`, the score is the map maximum.
pub fn standardized_image_eval(maps: &[Heatmap], scenes: &[ToyScene], kind: RegionKind) -> Result<(Vec<f64>, Vec<bool>)> {
    if maps.len() != scenes.len() {
        return Err(metric_err(format!("{} maps for {} scenes", maps.len(), scenes.len())));
    }
    let scores = maps.iter().map(Heatmap::max).collect();
    let labels = scenes.iter().map(|s| s.regions_of(kind).next().is_some()).collect();
    Ok((scores, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(pixels: &[usize], score: f64) -> Detection {
        Detection { pixels: pixels.to_vec(), score }
    }

    #[test]
    fn auc_simple_cases() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
        assert!(roc_auc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn detections_basic() {
        let zero = Heatmap::new(6, 6, vec![0.0; 36], Vec::new()).unwrap();
        assert!(heatmap_to_detections(&zero, &[0.1, 0.0])[0].detections.is_empty());
        let mut v = vec![0.0; 36];
        v[0] = 1.0;
        v[7] = 0.5; // diagonal neighbour of 0
        v[35] = 2.0;
        let m = Heatmap::new(6, 6, v, Vec::new()).unwrap();
        let sets = heatmap_to_detections(&m, &[0.1, 0.7]);
        assert_eq!(sets[0].detections, vec![det(&[0, 7], 1.0), det(&[35], 2.0)]);
        assert_eq!(sets[1].detections, vec![det(&[0], 1.0), det(&[35], 2.0)]);
    }

    #[test]
    fn froc_perfect_and_empty() {
        let truth = vec![vec![vec![1, 2], vec![9]], vec![vec![4]]];
        let perfect = vec![vec![det(&[2], 1.0), det(&[9], 1.0)], vec![det(&[4, 5], 1.0)]];
        assert_eq!(froc_area(&perfect, &truth, 10.0).unwrap(), 1.0);
        assert_eq!(froc_area(&[vec![], vec![]], &truth, 10.0).unwrap(), 0.0);
        assert!(froc_area(&[vec![]], &[vec![]], 10.0).is_err());
        assert!(froc_area(&perfect, &truth, 0.0).is_err());
    }

    #[test]
    fn each_region_matched_once() {
        let truth = vec![vec![vec![3, 4]]];
        let m = match_detections(&[det(&[3], 0.5), det(&[4], 0.9)], &truth[0]);
        // higher score first claims the region, the other is a false positive
        assert_eq!(m, vec![(0.9, true), (0.5, false)]);
    }

    #[test]
    fn standardized_eval_labels() {
        let cfg = super::super::scene::SceneConfig::default();
        let scenes = super::super::scene::gen_toy_dataset(11, 8, &cfg).unwrap();
        let maps: Vec<Heatmap> = (0..8).map(|i| Heatmap::new(2, 2, vec![i as f64; 4], Vec::new()).unwrap()).collect();
        let (s, l) = standardized_image_eval(&maps, &scenes, RegionKind::DarkLesion).unwrap();
        assert_eq!(s, (0..8).map(|i| i as f64).collect::<Vec<_>>());
        for (sc, lab) in scenes.iter().zip(l) {
            assert_eq!(lab, sc.regions.iter().any(|r| r.kind == RegionKind::DarkLesion));
        }
    }
}
