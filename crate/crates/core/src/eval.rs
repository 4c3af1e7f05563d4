//! Scene-level evaluation of a trained model against annotated frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::io::{Scene, Split};
use crate::query::{
    gate_background, localization_accuracy, mean_iou, relevancy, segment_argmax_gated,
    threshold_miou, Metrics, BACKGROUND_GATE,
};
use crate::raster::{rasterize, IndicatorMode, RasterSettings};
use crate::scene::GaussianCloud;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Argmax segmentation (with background gate), or per-query
    /// threshold masks when a threshold is set.
    Segment {
        threshold: Option<f64>,
    },
    Localize,
}

/// Frames to evaluate: the test split when present, otherwise every
/// annotated frame.
pub fn eval_frames(scene: &Scene) -> Result<Vec<usize>> {
    let ev = scene.eval()?;
    let test = scene.indices(Split::Test);
    let annotated: Vec<usize> = ev.frames.iter().map(|f| f.frame).collect();
    let chosen: Vec<usize> = annotated
        .iter()
        .copied()
        .filter(|i| test.contains(i))
        .collect();
    Ok(if chosen.is_empty() { annotated } else { chosen })
}

/// Render each frame in `frames` and score it; metrics are averaged over frames.
pub fn evaluate(
    cloud: &GaussianCloud,
    fusion: &Fusion,
    indicator: IndicatorMode,
    settings: &RasterSettings,
    scene: &Scene,
    frames: &[usize],
    mode: EvalMode,
) -> Result<Metrics> {
    let ev = scene.eval()?;
    let queries = scene.queries()?;
    if queries.dim() != cloud.feature_dim() {
        return Err(Error::param(format!(
            "model feature width {} does not match scene d_f {}",
            cloud.feature_dim(),
            queries.dim()
        )));
    }
    let mut ious = Vec::new();
    let (mut hits, mut total) = (0.0, 0usize);
    for &f in frames {
        let ann = ev
            .frames
            .iter()
            .find(|a| a.frame == f)
            .ok_or_else(|| Error::param(format!("frame {f} has no annotations")))?;
        let cam = &scene.samples[f].camera;
        let out = rasterize(cloud, cam, fusion, indicator, settings);
        let rel = relevancy(&out.semantics, &queries)?;
        match mode {
            EvalMode::Segment { threshold } => {
                let gt = scene.label_map(ann)?;
                let v = match threshold {
                    None => {
                        let pred = segment_argmax_gated(&rel, &out.semantics, BACKGROUND_GATE)?;
                        mean_iou(&pred, &gt)?
                    }
                    Some(tau) => threshold_miou(&rel, &gt, tau)?,
                };
                ious.extend(v);
            }
            EvalMode::Localize => {
                let mut targets: Vec<(usize, Vec<_>)> = Vec::new();
                for b in &ann.boxes {
                    match targets.iter_mut().find(|(q, _)| *q == b.label) {
                        Some((_, v)) => v.push(b.bbox),
                        None => targets.push((b.label, vec![b.bbox])),
                    }
                }
                let gated = gate_background(&rel, &out.semantics, BACKGROUND_GATE)?;
                if let Some(acc) = localization_accuracy(&gated, &targets)? {
                    hits += acc * targets.len() as f64;
                    total += targets.len();
                }
            }
        }
    }
    Ok(match mode {
        EvalMode::Segment { .. } => Metrics {
            miou: (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64),
            localization_accuracy: None,
        },
        EvalMode::Localize => Metrics {
            miou: None,
            localization_accuracy: (total > 0).then(|| hits / total as f64),
        },
    })
}
