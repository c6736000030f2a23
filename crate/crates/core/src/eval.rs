//! Scoring an unsupervised cluster map against a reference: clusters are
//! named after the reference class they overlap most, then per-class F1/IoU
//! and their unweighted means are computed.

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::io::{LabelMap, SegmentationMap};

/// Class index per cluster; `None` for clusters with no scored pixels.
pub type ClusterMapping = Vec<Option<usize>>;

/// Pixel counts of `cluster x reference class`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub clusters: usize,
    pub classes: usize,
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn zeros(clusters: usize, classes: usize) -> Self {
        Self {
            clusters,
            classes,
            counts: vec![0; clusters * classes],
            ignored: 0,
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let classes = rows.first().map_or(0, Vec::len);
        Self {
            clusters: rows.len(),
            classes,
            counts: rows.iter().flatten().copied().collect(),
            ignored: 0,
        }
    }

    #[inline]
    pub fn get(&self, cluster: usize, class: usize) -> u64 {
        self.counts[cluster * self.classes + class]
    }

    pub fn row(&self, cluster: usize) -> &[u64] {
        &self.counts[cluster * self.classes..(cluster + 1) * self.classes]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.ignored
    }

    /// Sums several tiles' counts; cluster dimension grows to the widest.
    pub fn pool(tiles: &[ConfusionMatrix]) -> Result<Self> {
        let first = tiles.first().ok_or_else(|| Error::Input("no confusion matrices to pool".into()))?;
        let clusters = tiles.iter().map(|t| t.clusters).max().unwrap_or(0);
        let mut out = Self::zeros(clusters, first.classes);
        for t in tiles {
            if t.classes != first.classes {
                return Err(Error::shape("pool", "class count", first.classes, t.classes));
            }
            for k in 0..t.clusters {
                for m in 0..t.classes {
                    out.counts[k * out.classes + m] += t.get(k, m);
                }
            }
            out.ignored += t.ignored;
        }
        Ok(out)
    }
}

/// Counts cluster/class co-occurrences; reference pixels marked
/// [`LabelMap::IGNORE`] are only tallied in `ignored`.
pub fn confusion(pred: &SegmentationMap, reference: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    if (pred.height, pred.width) != (reference.height, reference.width) {
        return Err(Error::Input(format!(
            "prediction is {}x{} but reference is {}x{}",
            pred.height, pred.width, reference.height, reference.width
        )));
    }
    let mut cm = ConfusionMatrix::zeros(pred.k, classes);
    for (&k, &m) in pred.labels.iter().zip(&reference.labels) {
        if m == LabelMap::IGNORE {
            cm.ignored += 1;
            continue;
        }
        let (k, m) = (k as usize, m as usize);
        if m >= classes {
            return Err(Error::Input(format!("reference class {m} outside [0, {classes})")));
        }
        cm.counts[k * classes + m] += 1;
    }
    Ok(cm)
}

/// Names each cluster after its most-overlapping class (ties to the lower
/// class index). Several clusters may share a class.
pub fn majority_map(cm: &ConfusionMatrix) -> Result<ClusterMapping> {
    if cm.counts.iter().all(|&c| c == 0) {
        return Err(Error::Input("no scored pixels to derive a cluster mapping from".into()));
    }
    Ok((0..cm.clusters)
        .map(|k| {
            let row = cm.row(k);
            let mut best: Option<usize> = None;
            for (m, &c) in row.iter().enumerate() {
                if c > 0 && best.is_none_or(|b| c > row[b]) {
                    best = Some(m);
                }
            }
            best
        })
        .collect())
}

/// Fraction of scored pixels whose cluster maps to their reference class.
pub fn pixel_accuracy(cm: &ConfusionMatrix, mapping: &[Option<usize>]) -> Result<f64> {
    if mapping.len() != cm.clusters {
        return Err(Error::shape("pixel_accuracy", "mapping length", cm.clusters, mapping.len()));
    }
    let total: u64 = cm.counts.iter().sum();
    if total == 0 {
        return Err(Error::Input("no scored pixels".into()));
    }
    let correct: u64 = mapping
        .iter()
        .enumerate()
        .filter_map(|(k, m)| m.map(|class| cm.get(k, class)))
        .sum();
    Ok(correct as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub name: String,
    pub f1: f64,
    pub iou: f64,
    /// Whether the class occurs in the reference; absent classes are left out
    /// of the macro averages.
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassScore>,
    pub macro_f1: f64,
    pub macro_iou: f64,
    pub mapping: Option<ClusterMapping>,
    pub ignored: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    /// `2TP / (2TP + FP + FN)`, 0 when the denominator vanishes.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / d as f64
        }
    }

    /// `TP / (TP + FP + FN)`, 0 when the denominator vanishes.
    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            self.tp as f64 / d as f64
        }
    }
}

/// Collapses clusters into classes through `mapping` and scores each class.
pub fn class_counts(cm: &ConfusionMatrix, mapping: &[Option<usize>]) -> Result<Vec<ClassCounts>> {
    let m = cm.classes;
    // collapsed[predicted class][reference class]
    let mut collapsed = vec![0u64; m * m];
    for k in 0..cm.clusters {
        let row = cm.row(k);
        if row.iter().all(|&c| c == 0) {
            continue;
        }
        let class = mapping
            .get(k)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Contract(format!("cluster {k} has pixels but no class in the mapping")))?;
        if class >= m {
            return Err(Error::Contract(format!("cluster {k} maps to class {class} outside [0, {m})")));
        }
        for (r, &c) in row.iter().enumerate() {
            collapsed[class * m + r] += c;
        }
    }
    Ok((0..m)
        .map(|c| {
            let tp = collapsed[c * m + c];
            let predicted: u64 = collapsed[c * m..(c + 1) * m].iter().sum();
            let actual: u64 = (0..m).map(|p| collapsed[p * m + c]).sum();
            ClassCounts {
                tp,
                fp: predicted - tp,
                fn_: actual - tp,
            }
        })
        .collect())
}

pub fn metrics(cm: &ConfusionMatrix, mapping: &[Option<usize>], class_names: &[&str]) -> Result<MetricsReport> {
    if class_names.len() != cm.classes {
        return Err(Error::shape("metrics", "class names", cm.classes, class_names.len()));
    }
    let counts = class_counts(cm, mapping)?;
    let per_class: Vec<ClassScore> = counts
        .iter()
        .zip(class_names)
        .map(|(c, name)| ClassScore {
            name: name.to_string(),
            f1: c.f1(),
            iou: c.iou(),
            present: c.tp + c.fn_ > 0,
        })
        .collect();
    let present: Vec<&ClassScore> = per_class.iter().filter(|s| s.present).collect();
    let mean = |f: fn(&ClassScore) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|s| f(s)).sum::<f64>() / present.len() as f64
        }
    };
    Ok(MetricsReport {
        macro_f1: mean(|s| s.f1),
        macro_iou: mean(|s| s.iou),
        per_class,
        mapping: Some(mapping.to_vec()),
        ignored: cm.ignored,
    })
}

/// Cluster map -> class map through `mapping`.
pub fn apply_mapping(map: &SegmentationMap, mapping: &[Option<usize>]) -> Result<LabelMap> {
    let labels = map
        .labels
        .iter()
        .map(|&k| {
            mapping
                .get(k as usize)
                .copied()
                .flatten()
                .map(|c| c as u16)
                .ok_or_else(|| Error::Contract(format!("cluster {k} has no class in the mapping")))
        })
        .collect::<Result<_>>()?;
    Ok(LabelMap {
        height: map.height,
        width: map.width,
        labels,
    })
}

/// 1 where the class is `building`, 0 elsewhere; ignore markers are kept.
pub fn binarize(labels: &[u16], building: usize) -> Vec<u16> {
    labels
        .iter()
        .map(|&l| match l {
            LabelMap::IGNORE => LabelMap::IGNORE,
            l if l as usize == building => 1,
            _ => 0,
        })
        .collect()
}

/// Building/other map of a cluster prediction, renderable with
/// [`crate::io::Palette::binary`].
pub fn binary_segmentation(map: &SegmentationMap, mapping: &[Option<usize>], building: usize) -> Result<SegmentationMap> {
    let classes = apply_mapping(map, mapping)?;
    SegmentationMap::new(map.height, map.width, 2, binarize(&classes.labels, building))
}

/// Field-wise arithmetic mean of several runs' reports. The mapping is
/// dropped since it differs between runs.
pub fn average_runs(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or_else(|| Error::Input("no reports to average".into()))?;
    for r in reports {
        let same = r.per_class.len() == first.per_class.len()
            && r.per_class.iter().zip(&first.per_class).all(|(a, b)| a.name == b.name && a.present == b.present);
        if !same {
            return Err(Error::Input("reports to average must share the same scored classes".into()));
        }
    }
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        per_class: first
            .per_class
            .iter()
            .enumerate()
            .map(|(i, s)| ClassScore {
                name: s.name.clone(),
                f1: avg(&|r| r.per_class[i].f1),
                iou: avg(&|r| r.per_class[i].iou),
                present: s.present,
            })
            .collect(),
        macro_f1: avg(&|r| r.macro_f1),
        macro_iou: avg(&|r| r.macro_iou),
        mapping: None,
        ignored: (reports.iter().map(|r| r.ignored).sum::<u64>() as f64 / n).round() as u64,
    })
}

impl MetricsReport {
    /// `{per_class:{name:{f1,iou,present}}, macro_f1, macro_iou, mapping,
    /// ignored, classes}`; `classes` lists the names the macro means cover.
    pub fn to_json(&self) -> Value {
        let mut per_class = Map::new();
        for s in &self.per_class {
            per_class.insert(s.name.clone(), json!({"f1": s.f1, "iou": s.iou, "present": s.present}));
        }
        let mapping = self.mapping.as_ref().map(|m| {
            let mut obj = Map::new();
            for (k, c) in m.iter().enumerate() {
                let v = c.map_or(Value::Null, |c| Value::String(self.per_class[c].name.clone()));
                obj.insert(k.to_string(), v);
            }
            Value::Object(obj)
        });
        json!({
            "per_class": per_class,
            "macro_f1": self.macro_f1,
            "macro_iou": self.macro_iou,
            "mapping": mapping,
            "ignored": self.ignored,
            "classes": self.per_class.iter().filter(|s| s.present).map(|s| s.name.clone()).collect::<Vec<_>>(),
        })
    }
}

/// Reads a cluster→class mapping from JSON: either an object of
/// `"cluster": "class name" | null`, or a report carrying one under
/// `"mapping"`.
pub fn mapping_from_json(value: &Value, class_names: &[&str]) -> Result<ClusterMapping> {
    let obj = match value.get("mapping") {
        Some(v) => v,
        None => value,
    }
    .as_object()
    .ok_or_else(|| Error::Input("mapping must be a JSON object".into()))?;
    let mut pairs = Vec::with_capacity(obj.len());
    for (key, v) in obj {
        let cluster: usize = key
            .parse()
            .map_err(|_| Error::Input(format!("mapping key {key:?} is not a cluster index")))?;
        let class = match v {
            Value::Null => None,
            Value::String(name) => Some(
                class_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::Input(format!("mapping names unknown class {name:?}")))?,
            ),
            Value::Number(n) => Some(
                n.as_u64()
                    .map(|v| v as usize)
                    .filter(|&v| v < class_names.len())
                    .ok_or_else(|| Error::Input(format!("mapping class index {n} out of range")))?,
            ),
            other => return Err(Error::Input(format!("unexpected mapping value {other}"))),
        };
        pairs.push((cluster, class));
    }
    let len = pairs.iter().map(|&(k, _)| k + 1).max().unwrap_or(0);
    let mut out = vec![None; len];
    for (k, c) in pairs {
        out[k] = c;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(labels: &[u16], k: usize) -> SegmentationMap {
        SegmentationMap::new(1, labels.len(), k, labels.to_vec()).unwrap()
    }

    fn reference(labels: &[u16]) -> LabelMap {
        LabelMap {
            height: 1,
            width: labels.len(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn direct_count() {
        let cm = confusion(&seg(&[0, 0, 1, 1], 2), &reference(&[0, 0, 0, 1]), 2).unwrap();
        assert_eq!(cm.counts, vec![2, 0, 1, 1]);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn accuracy_counts_mapped_diagonal() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![0, 0], vec![2, 4]]);
        let mapping = majority_map(&cm).unwrap();
        assert_eq!(mapping, vec![Some(0), None, Some(1)]);
        assert_eq!(pixel_accuracy(&cm, &mapping).unwrap(), 0.7);
        assert!(pixel_accuracy(&cm, &mapping[..2]).is_err());
    }

    #[test]
    fn all_ignored() {
        let i = LabelMap::IGNORE;
        let cm = confusion(&seg(&[0, 1, 1], 2), &reference(&[i, i, i]), 3).unwrap();
        assert!(cm.counts.iter().all(|&c| c == 0));
        assert_eq!(cm.ignored, 3);
        assert!(majority_map(&cm).is_err());
    }

    #[test]
    fn size_mismatch() {
        assert!(matches!(
            confusion(&seg(&[0, 0], 2), &reference(&[0, 0, 0]), 2),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn majority_rules() {
        let cm = ConfusionMatrix::from_rows(&[vec![90, 10], vec![5, 95]]);
        assert_eq!(majority_map(&cm).unwrap(), vec![Some(0), Some(1)]);
        let cm = ConfusionMatrix::from_rows(&[vec![50, 50]]);
        assert_eq!(majority_map(&cm).unwrap(), vec![Some(0)]);
        let cm = ConfusionMatrix::from_rows(&[vec![1, 0, 9], vec![0, 2, 3], vec![0, 0, 1], vec![0, 0, 0]]);
        assert_eq!(majority_map(&cm).unwrap(), vec![Some(2), Some(2), Some(2), None]);
    }

    #[test]
    fn formula_values() {
        let c = ClassCounts { tp: 8, fp: 2, fn_: 2 };
        assert_eq!(c.f1(), 0.8);
        assert_eq!(c.iou(), 8.0 / 12.0);
        let c = ClassCounts { tp: 0, fp: 0, fn_: 5 };
        assert_eq!((c.f1(), c.iou()), (0.0, 0.0));
    }

    #[test]
    fn perfect_prediction() {
        let cm = confusion(&seg(&[2, 0, 1, 2], 3), &reference(&[1, 0, 2, 1]), 3).unwrap();
        let mapping = majority_map(&cm).unwrap();
        let r = metrics(&cm, &mapping, &["a", "b", "c"]).unwrap();
        assert_eq!((r.macro_f1, r.macro_iou), (1.0, 1.0));
        assert!(r.per_class.iter().all(|s| s.f1 == 1.0 && s.iou == 1.0));
    }

    #[test]
    fn constant_prediction_on_two_classes() {
        let cm = confusion(&seg(&[0, 0, 0, 0], 1), &reference(&[0, 0, 0, 1]), 2).unwrap();
        let r = metrics(&cm, &majority_map(&cm).unwrap(), &["a", "b"]).unwrap();
        assert_eq!(r.per_class[1].f1, 0.0);
        assert!(r.per_class.iter().all(|s| s.present));
        assert!((r.macro_f1 - (6.0 / 7.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_leave_macro() {
        let cm = confusion(&seg(&[0, 1], 2), &reference(&[0, 0]), 3).unwrap();
        let r = metrics(&cm, &[Some(0), Some(2)], &["a", "b", "c"]).unwrap();
        assert!(!r.per_class[1].present && !r.per_class[2].present);
        assert_eq!(r.macro_f1, r.per_class[0].f1);
        assert_eq!(r.to_json()["classes"], json!(["a"]));
    }

    #[test]
    fn mapping_gap_is_contract_error() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 0], vec![0, 2]]);
        assert!(matches!(metrics(&cm, &[Some(0)], &["a", "b"]), Err(Error::Contract(_))));
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(&[1, 3, 1], 1), vec![1, 0, 1]);
        assert_eq!(binarize(&[0, 2, 3], 1), vec![0, 0, 0]);
        assert_eq!(binarize(&[LabelMap::IGNORE, 1], 1), vec![LabelMap::IGNORE, 1]);
    }

    #[test]
    fn averaging() {
        let mk = |f: f64| MetricsReport {
            per_class: vec![ClassScore {
                name: "a".into(),
                f1: f,
                iou: f / 2.0,
                present: true,
            }],
            macro_f1: f,
            macro_iou: f / 2.0,
            mapping: None,
            ignored: 0,
        };
        let avg = average_runs(&[mk(0.4), mk(0.5), mk(0.6)]).unwrap();
        assert!((avg.macro_f1 - 0.5).abs() < 1e-12);
        assert_eq!(average_runs(&[mk(0.3)]).unwrap(), mk(0.3));
        assert_eq!(average_runs(&[mk(0.3), mk(0.3)]).unwrap(), mk(0.3));
        assert!(average_runs(&[]).is_err());
    }

    #[test]
    fn mapping_json_round_trip() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 0], vec![0, 2], vec![0, 0]]);
        let mapping = majority_map(&cm).unwrap();
        let names = ["impervious", "building"];
        let report = metrics(&cm, &mapping, &names).unwrap();
        let back = mapping_from_json(&report.to_json(), &names).unwrap();
        assert_eq!(back, mapping);
    }
}
