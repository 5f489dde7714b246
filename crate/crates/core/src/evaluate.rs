//! Regression and classification metrics, confusion matrices, and the
//! hierarchical error-propagation count.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dedup::load_rgb;
use crate::error::{Error, Result};
use crate::ingest::{ImageRecord, PropertyRecord, Split, SplitAssignment};
use crate::model::{MultiTaskModel, Prediction};
use crate::rules::{fireproof_class, BuildingStructure, FireproofClass, PropertyType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub mae: f64,
    pub rmse: f64,
    pub medae: f64,
    pub n: usize,
}

pub fn regression_metrics(preds: &[f64], truths: &[f64]) -> Result<RegressionReport> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("regression inputs".into()));
    }
    let mut abs: Vec<f64> = preds.iter().zip(truths).map(|(p, t)| (p - t).abs()).collect();
    if abs.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("regression errors".into()));
    }
    let n = abs.len();
    let mae = abs.iter().sum::<f64>() / n as f64;
    let rmse = (abs.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
    abs.sort_by(f64::total_cmp);
    let medae = if n % 2 == 1 {
        abs[n / 2]
    } else {
        (abs[n / 2 - 1] + abs[n / 2]) / 2.0
    };
    Ok(RegressionReport { mae, rmse, medae, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub classes: Vec<String>,
    pub n: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassScore>,
    /// Rows are true classes, columns predicted, both in `classes` order.
    pub confusion: Vec<Vec<u64>>,
}

impl ClassificationReport {
    pub fn f1(&self, class: &str) -> Option<f64> {
        self.per_class.iter().find(|c| c.class == class).map(|c| c.f1)
    }

    /// Tab-separated grid with a header row and a header column of class names.
    pub fn confusion_tsv(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in &self.classes {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.confusion) {
            out.push_str(c);
            for v in row {
                out.push('\t');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall and F1 with 0/0 = 0. Macro averages run over
/// every class in `classes`, including ones absent from both lists.
pub fn classification_metrics<T: PartialEq + Display>(
    preds: &[T],
    truths: &[T],
    classes: &[T],
) -> Result<ClassificationReport> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("classification inputs".into()));
    }
    if classes.is_empty() {
        return Err(Error::InvalidArgument("class list is empty".into()));
    }
    let index = |v: &T| {
        classes
            .iter()
            .position(|c| c == v)
            .ok_or_else(|| Error::UnknownClass(v.to_string()))
    };
    let k = classes.len();
    let mut confusion = vec![vec![0u64; k]; k];
    for (p, t) in preds.iter().zip(truths) {
        confusion[index(t)?][index(p)?] += 1;
    }
    let n = preds.len();
    let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let mut per_class = Vec::with_capacity(k);
    for (i, class) in classes.iter().enumerate() {
        let tp = confusion[i][i];
        let support: u64 = confusion[i].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[i]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        // 2TP / (2TP + FP + FN), equal to the harmonic mean when both are defined.
        let f1 = ratio(2 * tp, predicted + support);
        per_class.push(ClassScore {
            class: class.to_string(),
            precision,
            recall,
            f1,
            support,
        });
    }
    let mean = |f: fn(&ClassScore) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(ClassificationReport {
        classes: classes.iter().map(|c| c.to_string()).collect(),
        n,
        accuracy: trace as f64 / n as f64,
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        weighted_f1: per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / n as f64,
        per_class,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationReport {
    pub n: usize,
    pub n_fireproof_correct: usize,
    pub n_intermediate_error: usize,
    pub n_correct_despite_intermediate_error: usize,
    /// Share of correct fireproof predictions that had a wrong intermediate.
    pub fraction_of_correct: f64,
    pub fraction_of_all: f64,
}

/// Counts samples whose derived fireproof class is right although the
/// structure or the property type prediction is wrong.
pub fn propagation_analysis(
    preds: &[(BuildingStructure, PropertyType)],
    truths: &[(BuildingStructure, PropertyType)],
) -> Result<PropagationReport> {
    if preds.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truths.len(),
        });
    }
    let mut correct = 0;
    let mut intermediate = 0;
    let mut despite = 0;
    for (&(ps, pp), &(ts, tp)) in preds.iter().zip(truths) {
        let ok = fireproof_class(ps, pp) == fireproof_class(ts, tp);
        let wrong = ps != ts || pp != tp;
        correct += ok as usize;
        intermediate += wrong as usize;
        despite += (ok && wrong) as usize;
    }
    let n = preds.len();
    Ok(PropagationReport {
        n,
        n_fireproof_correct: correct,
        n_intermediate_error: intermediate,
        n_correct_despite_intermediate_error: despite,
        fraction_of_correct: ratio(despite as u64, correct as u64),
        fraction_of_all: ratio(despite as u64, n as u64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Metrics are computed per image; a property with several images counts several times.
    pub unit: String,
    pub split: String,
    pub n_images: usize,
    pub n_excluded: usize,
    pub year: RegressionReport,
    pub structure: ClassificationReport,
    pub ptype: ClassificationReport,
    pub fireproof: ClassificationReport,
    pub propagation: PropagationReport,
}

pub const TASKS: [&str; 3] = ["structure", "ptype", "fireproof"];

impl EvaluationReport {
    pub fn from_predictions(
        preds: &[Prediction],
        truths: &[&PropertyRecord],
        split: &str,
        n_excluded: usize,
    ) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::Empty("evaluation set".into()));
        }
        let year = regression_metrics(
            &preds.iter().map(|p| p.year).collect::<Vec<_>>(),
            &truths.iter().map(|t| t.construction_year as f64).collect::<Vec<_>>(),
        )?;
        let structure = classification_metrics(
            &preds.iter().map(|p| p.structure).collect::<Vec<_>>(),
            &truths.iter().map(|t| t.structure).collect::<Vec<_>>(),
            &BuildingStructure::ALL,
        )?;
        let ptype = classification_metrics(
            &preds.iter().map(|p| p.ptype).collect::<Vec<_>>(),
            &truths.iter().map(|t| t.ptype).collect::<Vec<_>>(),
            &PropertyType::ALL,
        )?;
        let fireproof = classification_metrics(
            &preds.iter().map(|p| p.fireproof).collect::<Vec<_>>(),
            &truths.iter().map(|t| t.fireproof).collect::<Vec<_>>(),
            &FireproofClass::ALL,
        )?;
        let propagation = propagation_analysis(
            &preds.iter().map(|p| (p.structure, p.ptype)).collect::<Vec<_>>(),
            &truths.iter().map(|t| (t.structure, t.ptype)).collect::<Vec<_>>(),
        )?;
        Ok(EvaluationReport {
            unit: "image".into(),
            split: split.into(),
            n_images: preds.len(),
            n_excluded,
            year,
            structure,
            ptype,
            fireproof,
            propagation,
        })
    }

    pub fn classification(&self, task: &str) -> Option<&ClassificationReport> {
        match task {
            "structure" => Some(&self.structure),
            "ptype" => Some(&self.ptype),
            "fireproof" => Some(&self.fireproof),
            _ => None,
        }
    }

    /// One JSON object per line, each tagged with a `section`.
    pub fn to_jsonl(&self) -> String {
        let tag = |section: &str, v: serde_json::Value| {
            let mut obj = serde_json::Map::new();
            obj.insert("section".into(), section.into());
            if let serde_json::Value::Object(m) = v {
                obj.extend(m);
            }
            serde_json::Value::Object(obj).to_string()
        };
        let lines = [
            tag(
                "header",
                serde_json::json!({
                    "unit": self.unit,
                    "split": self.split,
                    "n_images": self.n_images,
                    "n_excluded": self.n_excluded,
                }),
            ),
            tag("year", serde_json::to_value(&self.year).unwrap()),
            tag("structure", serde_json::to_value(&self.structure).unwrap()),
            tag("ptype", serde_json::to_value(&self.ptype).unwrap()),
            tag("fireproof", serde_json::to_value(&self.fireproof).unwrap()),
            tag("propagation", serde_json::to_value(&self.propagation).unwrap()),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// Writes `report` plus `confusion_<task>.tsv` next to it.
    pub fn write(&self, report: &Path) -> Result<()> {
        std::fs::write(report, self.to_jsonl()).map_err(|e| Error::io(report, e))?;
        let dir = report.parent().unwrap_or(Path::new("."));
        for task in TASKS {
            let path = dir.join(format!("confusion_{task}.tsv"));
            let tsv = self.classification(task).expect("known task").confusion_tsv();
            std::fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

const EVAL_BATCH: usize = 64;

/// Predicts every image of `split` and scores it against the property labels.
/// Images that fail to load, or whose property is unknown, are excluded and counted.
pub fn evaluate_run(
    model: &MultiTaskModel,
    images: &[ImageRecord],
    properties: &HashMap<String, PropertyRecord>,
    assignment: Option<&SplitAssignment>,
    split: Split,
) -> Result<EvaluationReport> {
    let selected: Vec<&ImageRecord> = images
        .iter()
        .filter(|im| assignment.is_none_or(|a| a.get(&im.property_id) == Some(split)))
        .collect();
    let mut preds = Vec::with_capacity(selected.len());
    let mut truths = Vec::with_capacity(selected.len());
    let mut excluded = 0;
    for chunk in selected.chunks(EVAL_BATCH) {
        let mut loaded = Vec::with_capacity(chunk.len());
        for rec in chunk {
            let Some(prop) = properties.get(&rec.property_id) else {
                warn!("{}: unknown property {}", rec.image_id, rec.property_id);
                excluded += 1;
                continue;
            };
            match load_rgb(&rec.path) {
                Ok(img) => loaded.push((model.prepare_image(&img), prop)),
                Err(e) => {
                    warn!("{}: {e}", rec.image_id);
                    excluded += 1;
                }
            }
        }
        let refs: Vec<&image::RgbImage> = loaded.iter().map(|(im, _)| im).collect();
        if refs.is_empty() {
            continue;
        }
        preds.extend(model.predict_batch(&refs)?);
        truths.extend(loaded.iter().map(|(_, p)| *p));
    }
    if preds.is_empty() {
        return Err(Error::Empty(format!("no evaluable images in the {} split", split.as_str())));
    }
    EvaluationReport::from_predictions(&preds, &truths, split.as_str(), excluded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn regression_hand_values() {
        let r = regression_metrics(&[2002.0, 2006.0], &[2000.0, 2010.0]).unwrap();
        assert_eq!((r.mae, r.medae, r.n), (3.0, 3.0, 2));
        assert!((r.rmse - 10f64.sqrt()).abs() < 1e-12);
        let r = regression_metrics(&[1.0, 2.0, 100.0], &[0.0; 3]).unwrap();
        assert!((r.mae - 103.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.medae, 2.0);
        let r = regression_metrics(&[5.0, 6.0], &[5.0, 6.0]).unwrap();
        assert_eq!((r.mae, r.rmse, r.medae), (0.0, 0.0, 0.0));
        assert!(regression_metrics(&[], &[]).is_err());
        assert!(regression_metrics(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn classification_worked_example() {
        // confusion [[1,1],[0,2]]: A predicted A once and B once; B predicted B twice.
        let truths = ["A", "A", "B", "B"];
        let preds = ["A", "B", "B", "B"];
        let r = classification_metrics(&preds, &truths, &["A", "B"]).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert!((r.f1("A").unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1("B").unwrap() - 0.8).abs() < 1e-12);
        assert!((r.macro_f1 - 11.0 / 15.0).abs() < 1e-12);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.confusion_tsv(), "true\\pred\tA\tB\nA\t1\t1\nB\t0\t2\n");
    }

    #[test]
    fn absent_class_divides_macro() {
        let r = classification_metrics(&["A", "B", "C"], &["A", "B", "C"], &["A", "B", "C"]).unwrap();
        assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));
        let r = classification_metrics(&["A", "B"], &["A", "B"], &["A", "B", "C"]).unwrap();
        assert_eq!(r.f1("C"), Some(0.0));
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            classification_metrics(&["A", "Z"], &["A", "B"], &["A", "B"]),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn propagation_examples() {
        use BuildingStructure::*;
        use PropertyType::*;
        let r = propagation_analysis(&[(ConcreteLike, Communal)], &[(SteelLike, Communal)]).unwrap();
        assert_eq!(r.n_correct_despite_intermediate_error, 1);
        let r = propagation_analysis(&[(SteelLike, NonCommunal)], &[(SteelLike, Communal)]).unwrap();
        assert_eq!((r.n_fireproof_correct, r.n_correct_despite_intermediate_error), (0, 0));
        let same = [(WoodenLike, Communal), (SteelLike, NonCommunal)];
        let r = propagation_analysis(&same, &same).unwrap();
        assert_eq!(r.n_correct_despite_intermediate_error, 0);
        assert_eq!(r.fraction_of_correct, 0.0);
        assert!(propagation_analysis(&same, &same[..1]).is_err());
    }

    fn labels(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (1usize..=50).prop_flat_map(move |n| {
            (
                proptest::collection::vec(0..k, n),
                proptest::collection::vec(0..k, n),
            )
        })
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(
            pairs in proptest::collection::vec((-1e4f64..1e4, -1e4f64..1e4), 1..60)
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let r = regression_metrics(&p, &t).unwrap();
            prop_assert!(r.mae <= r.rmse * (1.0 + 1e-12) + 1e-12);
            prop_assert!(r.medae >= 0.0);
        }

        #[test]
        fn permutation_invariant((p, t) in labels(3), rot in 0usize..50) {
            let classes = [0usize, 1, 2];
            let a = classification_metrics(&p, &t, &classes).unwrap();
            let r = rot % p.len();
            let mut p2 = p.clone();
            let mut t2 = t.clone();
            p2.rotate_left(r);
            t2.rotate_left(r);
            let b = classification_metrics(&p2, &t2, &classes).unwrap();
            prop_assert_eq!(a.confusion, b.confusion);
            prop_assert_eq!(a.macro_f1, b.macro_f1);
        }

        #[test]
        fn invariants((p, t) in labels(4)) {
            let r = classification_metrics(&p, &t, &[0usize, 1, 2, 3]).unwrap();
            let total: u64 = r.confusion.iter().flatten().sum();
            prop_assert_eq!(total as usize, p.len());
            for v in [r.accuracy, r.macro_f1, r.weighted_f1, r.macro_precision, r.macro_recall] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
