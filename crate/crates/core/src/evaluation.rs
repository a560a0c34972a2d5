//! Matching predicted clusters to ground-truth classes and counting metrics.
//!
//! A cluster "shares" an instance with a class when one of its member masks
//! contains a ground-truth point of that class. Counting errors are taken per
//! (image, class) unit; precision/recall come from a greedy instance-to-point
//! claim and are aggregated by summing TP/FP/FN over images.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finch::Cluster;
use crate::maskproc::CandidateInstance;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAnnotation {
    pub label: String,
    /// Instance centres `[x, y]` in pixel coordinates.
    pub points: Vec<[f64; 2]>,
    /// Optional instance boxes `[x0, y0, x1, y1]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub classes: Vec<ClassAnnotation>,
}

impl GroundTruth {
    pub fn total(&self) -> usize {
        self.classes.iter().map(|c| c.points.len()).sum()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.label == label)
    }

    fn class_mut(&mut self, label: &str) -> &mut ClassAnnotation {
        let i = match self.class_index(label) {
            Some(i) => i,
            None => {
                self.classes.push(ClassAnnotation {
                    label: label.to_string(),
                    ..Default::default()
                });
                self.classes.len() - 1
            }
        };
        &mut self.classes[i]
    }

    pub fn add_point(&mut self, label: &str, p: [f64; 2]) {
        self.class_mut(label).points.push(p);
    }

    pub fn add_box(&mut self, label: &str, b: [f64; 4]) {
        let class = self.class_mut(label);
        class.boxes.push(b);
        class
            .points
            .push([(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0]);
    }

    /// Fails when a point lies outside `[0, width] x [0, height]`.
    pub fn check_bounds(&self, width: u32, height: u32) -> Result<()> {
        for c in &self.classes {
            for p in &c.points {
                if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= width as f64 && p[1] <= height as f64) {
                    return Err(Error::Data(format!(
                        "point ({}, {}) of class {:?} outside {width}x{height} image",
                        p[0], p[1], c.label
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Pixel holding an annotation point, clamped into the image.
fn point_pixel(p: [f64; 2], width: u32, height: u32) -> (u32, u32) {
    let x = (p[0].floor().max(0.0) as u32).min(width - 1);
    let y = (p[1].floor().max(0.0) as u32).min(height - 1);
    (x, y)
}

/// Number of points of each class lying inside the candidate mask.
pub fn cover_points(cand: &CandidateInstance, gt: &GroundTruth) -> Vec<usize> {
    let (w, h) = cand.mask.dims();
    gt.classes
        .iter()
        .map(|c| {
            c.points
                .iter()
                .filter(|p| {
                    let (x, y) = point_pixel(**p, w, h);
                    cand.mask.get(x, y)
                })
                .count()
        })
        .collect()
}

/// Class with the most covered points; lower index wins ties. `None` when the
/// mask covers no point.
fn dominant_class(covered: &[usize]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (i, &n) in covered.iter().enumerate() {
        if n > 0 && best.is_none_or(|(_, b)| n > b) {
            best = Some((i, n));
        }
    }
    best.map(|(i, _)| i)
}

/// Predicted clusters over one image's candidates.
#[derive(Clone, Copy, Debug)]
pub struct CountPrediction<'a> {
    pub candidates: &'a [CandidateInstance],
    pub clusters: &'a [Cluster],
}

impl<'a> CountPrediction<'a> {
    fn by_id(&self) -> Result<HashMap<usize, &'a CandidateInstance>> {
        let map: HashMap<usize, &CandidateInstance> =
            self.candidates.iter().map(|c| (c.id, c)).collect();
        for cl in self.clusters {
            if let Some(id) = cl.members.iter().find(|id| !map.contains_key(id)) {
                return Err(Error::Data(format!("cluster member {id} is not a candidate")));
            }
        }
        Ok(map)
    }
}

/// Class → matched cluster index, one-to-one.
///
/// Affinity between a cluster and a class is the number of members whose
/// dominant covered class is that class. Pairs are assigned greedily by
/// descending affinity, then larger cluster, then lower class index.
pub fn match_clusters(pred: &CountPrediction<'_>, gt: &GroundTruth) -> Result<Vec<Option<usize>>> {
    let by_id = pred.by_id()?;
    let n_classes = gt.classes.len();
    let mut dominant: HashMap<usize, Option<usize>> = HashMap::new();
    let mut pairs: Vec<(usize, usize, usize, usize)> = Vec::new(); // (affinity, size, class, cluster)
    for (k, cl) in pred.clusters.iter().enumerate() {
        let mut affinity = vec![0usize; n_classes];
        for id in &cl.members {
            let d = *dominant
                .entry(*id)
                .or_insert_with(|| dominant_class(&cover_points(by_id[id], gt)));
            if let Some(c) = d {
                affinity[c] += 1;
            }
        }
        for (c, &a) in affinity.iter().enumerate() {
            if a > 0 {
                pairs.push((a, cl.size(), c, k));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(b.1.cmp(&a.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut assignment = vec![None; n_classes];
    let mut taken = vec![false; pred.clusters.len()];
    for (_, _, c, k) in pairs {
        if assignment[c].is_none() && !taken[k] {
            assignment[c] = Some(k);
            taken[k] = true;
        }
    }
    Ok(assignment)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CountMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub nae: f64,
    pub sre: f64,
}

/// MAE, RMSE, NAE and SRE over `(predicted, ground truth)` count pairs.
///
/// NAE = mean |e| / gt and SRE = mean e² / gt, both over pairs with gt > 0
/// (0 when there are none); MAE and RMSE use every pair.
pub fn compute_count_metrics(pairs: &[(f64, f64)]) -> Result<CountMetrics> {
    if pairs.is_empty() {
        return Err(Error::Data("no count pairs to evaluate".into()));
    }
    let n = pairs.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut nae = 0.0;
    let mut sre = 0.0;
    let mut positive = 0usize;
    for &(pred, gt) in pairs {
        let e = pred - gt;
        abs += e.abs();
        sq += e * e;
        if gt > 0.0 {
            nae += e.abs() / gt;
            sre += e * e / gt;
            positive += 1;
        }
    }
    let norm = |v: f64| if positive > 0 { v / positive as f64 } else { 0.0 };
    Ok(CountMetrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        nae: norm(nae),
        sre: norm(sre),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrfCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PrfCounts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            // nothing to find: perfect only if nothing was predicted either
            if self.fp == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    pub fn add(&mut self, other: PrfCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Greedy instance matching for one image.
///
/// Instances are visited by descending mask area (ties by id). An instance
/// of a matched cluster is a TP when it covers an unclaimed point, claiming
/// one (its cluster's class first, then the lowest class index, in annotation
/// order); otherwise it is a FP. Instances of unmatched clusters are FPs.
pub fn compute_prf_counts(pred: &CountPrediction<'_>, gt: &GroundTruth) -> Result<PrfCounts> {
    let by_id = pred.by_id()?;
    let assignment = match_clusters(pred, gt)?;
    let mut class_of_cluster: Vec<Option<usize>> = vec![None; pred.clusters.len()];
    for (c, k) in assignment.iter().enumerate() {
        if let Some(k) = k {
            class_of_cluster[*k] = Some(c);
        }
    }
    let mut instances: Vec<(&CandidateInstance, Option<usize>)> = pred
        .clusters
        .iter()
        .enumerate()
        .flat_map(|(k, cl)| cl.members.iter().map(move |id| (id, k)))
        .map(|(id, k)| (by_id[id], class_of_cluster[k]))
        .collect();
    instances.sort_by(|a, b| b.0.mask.area().cmp(&a.0.mask.area()).then(a.0.id.cmp(&b.0.id)));

    let mut claimed: Vec<Vec<bool>> = gt.classes.iter().map(|c| vec![false; c.points.len()]).collect();
    let mut counts = PrfCounts::default();
    for (cand, class) in instances {
        let Some(class) = class else {
            counts.fp += 1;
            continue;
        };
        let (w, h) = cand.mask.dims();
        let order = std::iter::once(class).chain((0..gt.classes.len()).filter(|&c| c != class));
        let mut hit = None;
        'search: for c in order {
            for (i, p) in gt.classes[c].points.iter().enumerate() {
                let (x, y) = point_pixel(*p, w, h);
                if !claimed[c][i] && cand.mask.get(x, y) {
                    hit = Some((c, i));
                    break 'search;
                }
            }
        }
        match hit {
            Some((c, i)) => {
                claimed[c][i] = true;
                counts.tp += 1;
            }
            None => counts.fp += 1,
        }
    }
    counts.fn_ = claimed.iter().flatten().filter(|c| !**c).count();
    Ok(counts)
}

/// Precision, recall and F1 for one image.
pub fn compute_prf(pred: &CountPrediction<'_>, gt: &GroundTruth) -> Result<(f64, f64, f64)> {
    let c = compute_prf_counts(pred, gt)?;
    Ok((c.precision(), c.recall(), c.f1()))
}

/// Per-class (predicted, gt) count pairs for one image.
pub fn count_pairs(pred: &CountPrediction<'_>, gt: &GroundTruth) -> Result<Vec<(f64, f64)>> {
    let assignment = match_clusters(pred, gt)?;
    Ok(gt
        .classes
        .iter()
        .zip(assignment)
        .map(|(c, k)| {
            let predicted = k.map_or(0, |k| pred.clusters[k].size());
            (predicted as f64, c.points.len() as f64)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub label: String,
    pub predicted: usize,
    pub ground_truth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEvaluation {
    pub image: String,
    pub classes: Vec<ClassResult>,
    pub prf: PrfCounts,
    pub predicted_total: usize,
}

pub fn evaluate_image(image: &str, pred: &CountPrediction<'_>, gt: &GroundTruth) -> Result<ImageEvaluation> {
    let pairs = count_pairs(pred, gt)?;
    let classes = gt
        .classes
        .iter()
        .zip(&pairs)
        .map(|(c, (p, g))| ClassResult {
            label: c.label.clone(),
            predicted: *p as usize,
            ground_truth: *g as usize,
        })
        .collect();
    Ok(ImageEvaluation {
        image: image.to_string(),
        classes,
        prf: compute_prf_counts(pred, gt)?,
        predicted_total: pred.clusters.iter().map(|c| c.size()).sum(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub nae: f64,
    pub sre: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_units: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageEvaluation>,
}

/// Aggregate per-image results into one report.
pub fn aggregate(images: Vec<ImageEvaluation>) -> Result<MetricsReport> {
    let pairs: Vec<(f64, f64)> = images
        .iter()
        .flat_map(|im| im.classes.iter().map(|c| (c.predicted as f64, c.ground_truth as f64)))
        .collect();
    let counts = compute_count_metrics(&pairs)?;
    let mut prf = PrfCounts::default();
    for im in &images {
        prf.add(im.prf);
    }
    Ok(MetricsReport {
        mae: counts.mae,
        rmse: counts.rmse,
        nae: counts.nae,
        sre: counts.sre,
        precision: prf.precision(),
        recall: prf.recall(),
        f1: prf.f1(),
        n_units: pairs.len(),
        images,
    })
}
