//! Evaluation metrics: IoU, NoC@q, IoU@k and class-agnostic instance AP.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_CLICK_CAP: u32 = 20;
pub const NOC_TARGETS: [u32; 3] = [80, 85, 90];

/// `|a ∩ b| / |a ∪ b|`, or 1 when both masks are empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg(format!(
            "mask lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// IoU after each click of one simulated or human session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickCurve {
    pub scene_id: String,
    pub instance_id: u32,
    pub iou: Vec<f64>,
}

/// Clicks needed to reach `q` percent IoU, or `cap` if never reached within
/// the first `cap` clicks.
pub fn noc(curve: &[f64], q: f64, cap: u32) -> Result<u32> {
    if !(q > 0.0 && q <= 100.0) {
        return Err(Error::arg(format!("NoC target {q} outside (0, 100]")));
    }
    if curve.is_empty() {
        return Err(Error::arg("NoC of an empty curve"));
    }
    let target = q / 100.0;
    Ok(curve
        .iter()
        .take(cap as usize)
        .position(|&v| v >= target)
        .map_or(cap, |k| k as u32 + 1))
}

/// Mean IoU after `k` clicks; a curve shorter than `k` contributes its last
/// value.
pub fn iou_at_k(curves: &[&[f64]], k: u32) -> Result<f64> {
    if k == 0 {
        return Err(Error::arg("IoU@k needs k >= 1"));
    }
    if curves.is_empty() {
        return Err(Error::arg("IoU@k over no curves"));
    }
    let mut sum = 0.0;
    for c in curves {
        let last = c.len().min(k as usize);
        if last == 0 {
            return Err(Error::arg("IoU@k of an empty curve"));
        }
        sum += c[last - 1];
    }
    Ok(sum / curves.len() as f64)
}

/// IoU thresholds averaged into `ap`: 0.50, 0.55, ..., 0.95.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask: Vec<bool>,
    pub confidence: f64,
}

/// Predictions and ground truth of one scene reduced to what matching needs:
/// `ious[p][g]` is the IoU of prediction `p` with ground-truth instance `g`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredScene {
    pub confidences: Vec<f64>,
    pub ious: Vec<Vec<f64>>,
    pub n_gt: usize,
}

impl ScoredScene {
    pub fn from_masks(predictions: &[Prediction], gts: &[Vec<bool>]) -> Result<Self> {
        let mut ious = Vec::with_capacity(predictions.len());
        for p in predictions {
            ious.push(
                gts.iter()
                    .map(|g| iou(&p.mask, g))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self {
            confidences: predictions.iter().map(|p| p.confidence).collect(),
            ious,
            n_gt: gts.len(),
        })
    }

    fn check(&self) -> Result<()> {
        if self.ious.len() != self.confidences.len()
            || self.ious.iter().any(|row| row.len() != self.n_gt)
        {
            return Err(Error::arg(
                "IoU table does not match predictions and ground truth",
            ));
        }
        if let Some(c) = self.confidences.iter().find(|c| !c.is_finite()) {
            return Err(Error::arg(format!("non-finite confidence {c}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
}

/// Average precision at one IoU threshold, pooling predictions of all scenes
/// by confidence (ties by scene, then prediction index) and matching within
/// each scene. `None` when there is no ground truth at all.
pub fn average_precision(scenes: &[ScoredScene], threshold: f64) -> Result<Option<f64>> {
    for s in scenes {
        s.check()?;
    }
    let n_gt: usize = scenes.iter().map(|s| s.n_gt).sum();
    if n_gt == 0 {
        return Ok(None);
    }
    let mut order: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, scene)| (0..scene.confidences.len()).map(move |p| (s, p)))
        .collect();
    order.sort_by(|a, b| {
        scenes[b.0].confidences[b.1]
            .total_cmp(&scenes[a.0].confidences[a.1])
            .then(a.cmp(b))
    });

    let mut taken: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.n_gt]).collect();
    let mut tp = 0usize;
    // (is true positive, precision) after each prediction.
    let mut points = Vec::with_capacity(order.len());
    for (k, &(s, p)) in order.iter().enumerate() {
        let best = scenes[s].ious[p]
            .iter()
            .enumerate()
            .filter(|&(g, _)| !taken[s][g])
            .fold(None, |best: Option<(usize, f64)>, (g, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((g, v)),
            });
        let hit = matches!(best, Some((_, v)) if v >= threshold);
        if hit {
            taken[s][best.unwrap().0] = true;
            tp += 1;
        }
        points.push((hit, tp as f64 / (k + 1) as f64));
    }

    // Recall rises by 1/n_gt at each true positive; credit each rise with the
    // precision envelope taken from the right.
    let mut credited = 0.0;
    let mut envelope: f64 = 0.0;
    for &(hit, precision) in points.iter().rev() {
        envelope = envelope.max(precision);
        if hit {
            credited += envelope;
        }
    }
    Ok(Some(credited / n_gt as f64))
}

/// `ap` (mean over [`ap_thresholds`]), `ap50` and `ap25` over all scenes.
pub fn dataset_ap(scenes: &[ScoredScene]) -> Result<Option<ApSummary>> {
    let Some(ap50) = average_precision(scenes, 0.5)? else {
        return Ok(None);
    };
    let ap25 = average_precision(scenes, 0.25)?.unwrap();
    let thresholds = ap_thresholds();
    let mut sum = 0.0;
    for &t in &thresholds {
        sum += average_precision(scenes, t)?.unwrap();
    }
    Ok(Some(ApSummary {
        ap: sum / thresholds.len() as f64,
        ap50,
        ap25,
    }))
}

/// Class-agnostic AP of one scene's predictions against its ground truth.
pub fn instance_ap(predictions: &[Prediction], gts: &[Vec<bool>]) -> Result<Option<ApSummary>> {
    dataset_ap(&[ScoredScene::from_masks(predictions, gts)?])
}

/// Metric values of one group of instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub n_instances: usize,
    /// Mean NoC keyed by target percent.
    pub noc: BTreeMap<u32, f64>,
    /// Mean IoU keyed by click count.
    pub iou_at_k: BTreeMap<u32, f64>,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap25: Option<f64>,
}

impl MetricSet {
    pub fn set_ap(&mut self, summary: Option<ApSummary>) {
        self.ap = summary.map(|s| s.ap);
        self.ap50 = summary.map(|s| s.ap50);
        self.ap25 = summary.map(|s| s.ap25);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub overall: MetricSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<BTreeMap<String, MetricSet>>,
}

/// Instance classes as `{scene_id: {instance_id: class}}`.
pub type ClassMap = BTreeMap<String, BTreeMap<u32, String>>;

pub fn class_of<'a>(classes: &'a ClassMap, scene_id: &str, instance_id: u32) -> Option<&'a str> {
    classes.get(scene_id)?.get(&instance_id).map(String::as_str)
}

fn metric_set(curves: &[&ClickCurve], cap: u32) -> Result<MetricSet> {
    if curves.is_empty() {
        return Err(Error::arg("no curves to aggregate"));
    }
    let n = curves.len() as f64;
    let mut noc_means = BTreeMap::new();
    for q in NOC_TARGETS {
        let mut sum = 0.0;
        for c in curves {
            sum += noc(&c.iou, q as f64, cap)? as f64;
        }
        noc_means.insert(q, sum / n);
    }
    let slices: Vec<&[f64]> = curves.iter().map(|c| c.iou.as_slice()).collect();
    let mut at_k = BTreeMap::new();
    for k in 1..=cap {
        at_k.insert(k, iou_at_k(&slices, k)?);
    }
    Ok(MetricSet {
        n_instances: curves.len(),
        noc: noc_means,
        iou_at_k: at_k,
        ap: None,
        ap50: None,
        ap25: None,
    })
}

/// Means of NoC and IoU@k (k = 1..=cap) over all curves, plus per-class means
/// when a class map is given. Instances without a class only count overall.
/// AP fields are left absent; see [`dataset_ap`].
pub fn aggregate(
    curves: &[ClickCurve],
    classes: Option<&ClassMap>,
    cap: u32,
) -> Result<MetricsReport> {
    if cap == 0 {
        return Err(Error::arg("click cap must be at least 1"));
    }
    let all: Vec<&ClickCurve> = curves.iter().collect();
    let overall = metric_set(&all, cap)?;
    let per_class = match classes {
        None => None,
        Some(map) => {
            let mut groups: BTreeMap<&str, Vec<&ClickCurve>> = BTreeMap::new();
            for c in curves {
                if let Some(class) = class_of(map, &c.scene_id, c.instance_id) {
                    groups.entry(class).or_default().push(c);
                }
            }
            let mut out = BTreeMap::new();
            for (class, group) in groups {
                out.insert(class.to_string(), metric_set(&group, cap)?);
            }
            Some(out)
        }
    };
    Ok(MetricsReport { overall, per_class })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    /// One row per (class, metric); the overall group is labelled `all`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,metric,value\n");
        let mut rows = |class: &str, set: &MetricSet| {
            for (q, v) in &set.noc {
                let _ = writeln!(out, "{class},noc@{q},{v}");
            }
            for (k, v) in &set.iou_at_k {
                let _ = writeln!(out, "{class},iou@{k},{v}");
            }
            for (name, v) in [("ap", set.ap), ("ap50", set.ap50), ("ap25", set.ap25)] {
                let _ = writeln!(
                    out,
                    "{class},{name},{}",
                    v.map(|v| v.to_string()).unwrap_or_default()
                );
            }
            let _ = writeln!(out, "{class},n_instances,{}", set.n_instances);
        };
        rows("all", &self.overall);
        if let Some(per_class) = &self.per_class {
            for (class, set) in per_class {
                rows(&csv_field(class), set);
            }
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
