//! Runs inference over scenes and turns detections into metric tables.

use m3fuse_core::detect::Detection;
use m3fuse_core::eval::{average_precision, class_curves, ApMode, Difficulty, EvalQuery, Level, PrCurve, SceneEval, Subset};
use m3fuse_core::model::{Model, ModelError};
use m3fuse_core::numerics::ParamStore;

use crate::config::PipelineConfig;
use crate::scene::Scene;
use crate::HarnessError;

/// Detections per scene, in scene order. Scenes without points in range
/// yield no detections.
pub fn detect_scenes(model: &Model, store: &ParamStore, scenes: &[Scene]) -> Result<Vec<Vec<Detection>>, HarnessError> {
    scenes
        .iter()
        .map(|s| match model.plan(&s.cloud, &[]) {
            Ok(plan) => Ok(model.infer(store, &plan)?),
            Err(ModelError::EmptyScene) => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub class: String,
    pub subset: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRecord {
    pub class: String,
    pub subset: String,
    pub curve: PrCurve,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub rows: Vec<MetricRow>,
    pub curves: Vec<CurveRecord>,
}

impl Metrics {
    pub fn get(&self, class: &str, subset: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.class == class && r.subset == subset && r.metric == metric)
            .map(|r| r.value)
    }

    pub const HEADER: [&'static str; 4] = ["class", "subset", "metric", "value"];
    pub const CURVE_HEADER: [&'static str; 4] = ["class", "subset", "recall", "precision"];

    pub fn table(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| vec![r.class.clone(), r.subset.clone(), r.metric.clone(), r.value.to_string()])
            .collect()
    }

    pub fn curve_table(&self) -> Vec<Vec<String>> {
        self.curves
            .iter()
            .flat_map(|c| {
                c.curve
                    .points()
                    .into_iter()
                    .map(|(r, p)| vec![c.class.clone(), c.subset.clone(), r.to_string(), p.to_string()])
            })
            .collect()
    }
}

pub const SUBSETS: [Subset; 6] = [
    Subset::All,
    Subset::Level(Level::Level1),
    Subset::Level(Level::Level2),
    Subset::Difficulty(Difficulty::Easy),
    Subset::Difficulty(Difficulty::Moderate),
    Subset::Difficulty(Difficulty::Hard),
];

/// AP and heading-weighted AP per class and subset, plus class means under
/// `mean`. Classes without ground truth in a subset are left out.
pub fn compute_metrics(cfg: &PipelineConfig, scenes: &[Scene], detections: &[Vec<Detection>]) -> Metrics {
    let evals: Vec<SceneEval> = scenes
        .iter()
        .zip(detections)
        .map(|(s, d)| SceneEval {
            detections: d.clone(),
            ground_truth: s.ground_truth(),
        })
        .collect();
    let modes: Vec<ApMode> = cfg.eval.ap_modes.iter().map(|m| (*m).into()).collect();
    let mut out = Metrics::default();
    for subset in SUBSETS {
        let mut sums: Vec<(String, f64, usize)> = Vec::new();
        for (class, name) in cfg.anchors.class_names.iter().enumerate() {
            let curves = class_curves(
                &evals,
                &EvalQuery {
                    class,
                    iou_threshold: cfg.eval.iou_thresholds[class],
                    kind: cfg.eval.iou_kind.into(),
                    subset,
                    range: None,
                },
            );
            if curves.plain.num_gt == 0 {
                continue;
            }
            for mode in &modes {
                for (prefix, curve) in [("AP", &curves.plain), ("APH", &curves.heading)] {
                    let metric = format!("{prefix}_{mode}");
                    let value = average_precision(curve, *mode).expect("ground truth present");
                    match sums.iter_mut().find(|(m, _, _)| *m == metric) {
                        Some(e) => {
                            e.1 += value;
                            e.2 += 1;
                        }
                        None => sums.push((metric.clone(), value, 1)),
                    }
                    out.rows.push(MetricRow {
                        class: name.clone(),
                        subset: subset.to_string(),
                        metric,
                        value,
                    });
                }
            }
            out.curves.push(CurveRecord {
                class: name.clone(),
                subset: subset.to_string(),
                curve: curves.plain,
            });
        }
        for (metric, sum, n) in sums {
            out.rows.push(MetricRow {
                class: "mean".into(),
                subset: subset.to_string(),
                metric: format!("m{metric}"),
                value: sum / n as f64,
            });
        }
    }
    out
}
