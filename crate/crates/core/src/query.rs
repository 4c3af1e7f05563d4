//! Open-vocabulary relevancy, segmentation/localization decoding, metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::FeatureMap;

/// Default relevancy threshold for binary masks.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Rendered features with a smaller norm decode as background.
pub const BACKGROUND_GATE: f64 = 0.5;

/// Text queries with precomputed embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub labels: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl QuerySet {
    pub fn new(labels: Vec<String>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        let q = QuerySet { labels, embeddings };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embeddings.is_empty() {
            return Err(Error::param("query set is empty"));
        }
        if self.labels.len() != self.embeddings.len() {
            return Err(Error::param("query labels and embeddings differ in count"));
        }
        let d = self.embeddings[0].len();
        for (label, e) in self.labels.iter().zip(&self.embeddings) {
            if e.len() != d {
                return Err(Error::param("query embeddings differ in width"));
            }
            if e.iter().any(|v| !v.is_finite()) || norm(e) == 0.0 {
                return Err(Error::param(format!(
                    "query '{label}' has an invalid embedding"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-pixel probabilities over a query set, `H × W × Q` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevancyMap {
    pub width: usize,
    pub height: usize,
    pub queries: usize,
    pub probs: Vec<f64>,
}

impl RelevancyMap {
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.probs[p * self.queries..(p + 1) * self.queries]
    }

    /// Probability plane of one query.
    pub fn channel(&self, q: usize) -> Result<Vec<f64>> {
        self.check_query(q)?;
        Ok(self.probs.chunks(self.queries).map(|p| p[q]).collect())
    }

    fn check_query(&self, q: usize) -> Result<()> {
        if q >= self.queries {
            return Err(Error::param(format!(
                "query index {q} out of range (have {})",
                self.queries
            )));
        }
        Ok(())
    }
}

/// Softmax over the query set of cosine similarities; a zero feature has
/// cosine 0 to every query.
pub fn relevancy(features: &FeatureMap, queries: &QuerySet) -> Result<RelevancyMap> {
    queries.validate()?;
    if queries.dim() != features.channels {
        return Err(Error::param(format!(
            "query width {} does not match feature width {}",
            queries.dim(),
            features.channels
        )));
    }
    let nq = queries.len();
    let units: Vec<Vec<f64>> = queries
        .embeddings
        .iter()
        .map(|e| {
            let n = norm(e);
            e.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut probs = vec![0.0; features.num_pixels() * nq];
    for (f, out) in features
        .data
        .chunks(features.channels)
        .zip(probs.chunks_mut(nq))
    {
        let n = norm(f);
        for (o, u) in out.iter_mut().zip(&units) {
            *o = if n > 0.0 {
                f.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / n
            } else {
                0.0
            };
        }
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }
    Ok(RelevancyMap {
        width: features.width,
        height: features.height,
        queries: nq,
        probs,
    })
}

/// Per-pixel label; `None` is background.
pub type LabelMap = Vec<Option<usize>>;

/// Highest-probability query per pixel, ties to the lowest index.
pub fn segment_argmax(rel: &RelevancyMap) -> LabelMap {
    rel.probs
        .chunks(rel.queries)
        .map(|p| {
            let mut best = 0;
            for (i, v) in p.iter().enumerate() {
                if *v > p[best] {
                    best = i;
                }
            }
            Some(best)
        })
        .collect()
}

/// [`segment_argmax`] with pixels whose rendered feature norm is below
/// `min_norm` assigned to background.
pub fn segment_argmax_gated(
    rel: &RelevancyMap,
    features: &FeatureMap,
    min_norm: f64,
) -> Result<LabelMap> {
    if features.num_pixels() != rel.width * rel.height {
        return Err(Error::param("feature map and relevancy map differ in size"));
    }
    let mut labels = segment_argmax(rel);
    for (l, f) in labels
        .iter_mut()
        .zip(features.data.chunks(features.channels))
    {
        if norm(f) < min_norm {
            *l = None;
        }
    }
    Ok(labels)
}

/// Copy of `rel` with every pixel whose rendered feature norm is below
/// `min_norm` zeroed, so that faint tails cannot win an argmax. Relevancy
/// is scale invariant and would otherwise rank them with the object core.
/// Returns `rel` unchanged when no pixel passes.
pub fn gate_background(
    rel: &RelevancyMap,
    features: &FeatureMap,
    min_norm: f64,
) -> Result<RelevancyMap> {
    if features.num_pixels() != rel.width * rel.height {
        return Err(Error::param("feature map and relevancy map differ in size"));
    }
    let mut out = rel.clone();
    let mut kept = 0usize;
    for (p, f) in out
        .probs
        .chunks_mut(rel.queries.max(1))
        .zip(features.data.chunks(features.channels.max(1)))
    {
        if norm(f) < min_norm {
            p.fill(0.0);
        } else {
            kept += 1;
        }
    }
    Ok(if kept == 0 { rel.clone() } else { out })
}

/// Binary mask `probs[.., q] ≥ tau`.
pub fn segment_threshold(rel: &RelevancyMap, q: usize, tau: f64) -> Result<Vec<bool>> {
    Ok(rel.channel(q)?.into_iter().map(|p| p >= tau).collect())
}

/// Pixel `(x, y)` of the strongest response to query `q`; ties go to the
/// first pixel in row-major order.
pub fn localize(rel: &RelevancyMap, q: usize) -> Result<(usize, usize)> {
    let plane = rel.channel(q)?;
    let mut best = 0;
    for (i, v) in plane.iter().enumerate() {
        if *v > plane[best] {
            best = i;
        }
    }
    Ok((best % rel.width.max(1), best / rel.width.max(1)))
}

/// Axis-aligned pixel box, half-open `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Tight box around the pixels of `label`, if any.
    pub fn of_label(labels: &[Option<usize>], width: usize, label: usize) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for (i, l) in labels.iter().enumerate() {
            if *l != Some(label) {
                continue;
            }
            let (x, y) = (i % width, i / width);
            b = Some(match b {
                None => BBox {
                    x0: x,
                    y0: y,
                    x1: x + 1,
                    y1: y + 1,
                },
                Some(b) => BBox {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x + 1),
                    y1: b.y1.max(y + 1),
                },
            });
        }
        b
    }
}

/// `|pred ∩ gt| / |pred ∪ gt|`, or `None` when both are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::param("mask sizes differ"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        inter += (*p && *g) as usize;
        union += (*p || *g) as usize;
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

/// Mean IoU over every class that appears in either map. Background is not a
/// class. Returns `None` when neither map has any labelled pixel.
pub fn mean_iou(pred: &[Option<usize>], gt: &[Option<usize>]) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::param("label map sizes differ"));
    }
    let mut classes: Vec<usize> = pred.iter().chain(gt).flatten().copied().collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for &c in &classes {
        let p: Vec<bool> = pred.iter().map(|l| *l == Some(c)).collect();
        let g: Vec<bool> = gt.iter().map(|l| *l == Some(c)).collect();
        total += iou(&p, &g)?.unwrap_or(0.0);
    }
    Ok(Some(total / classes.len() as f64))
}

/// Mean IoU of per-query threshold masks against the GT regions, over the
/// queries that appear in `gt`.
pub fn threshold_miou(rel: &RelevancyMap, gt: &[Option<usize>], tau: f64) -> Result<Option<f64>> {
    if gt.len() != rel.width * rel.height {
        return Err(Error::param("label map and relevancy map differ in size"));
    }
    let mut ious = Vec::new();
    for q in 0..rel.queries {
        let g: Vec<bool> = gt.iter().map(|l| *l == Some(q)).collect();
        if !g.iter().any(|&b| b) {
            continue;
        }
        let p = segment_threshold(rel, q, tau)?;
        ious.push(iou(&p, &g)?.unwrap_or(0.0));
    }
    Ok((!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64))
}

/// Fraction of `(query, boxes)` entries whose argmax pixel lies in one of the boxes.
pub fn localization_accuracy(
    rel: &RelevancyMap,
    targets: &[(usize, Vec<BBox>)],
) -> Result<Option<f64>> {
    if targets.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for (q, boxes) in targets {
        let (x, y) = localize(rel, *q)?;
        hits += boxes.iter().any(|b| b.contains(x, y)) as usize;
    }
    Ok(Some(hits as f64 / targets.len() as f64))
}

/// Evaluation summary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: Option<f64>,
    pub localization_accuracy: Option<f64>,
}

/// 256-entry heatmap colormap: piecewise linear through black, deep purple,
/// red, orange and pale yellow at indices 0, 64, 128, 192, 255.
pub fn heatmap_lut() -> [[u8; 3]; 256] {
    const STOPS: [(usize, [u8; 3]); 5] = [
        (0, [0, 0, 4]),
        (64, [87, 16, 110]),
        (128, [188, 55, 84]),
        (192, [249, 142, 9]),
        (255, [252, 255, 164]),
    ];
    let mut lut = [[0u8; 3]; 256];
    for w in STOPS.windows(2) {
        let ((i0, c0), (i1, c1)) = (w[0], w[1]);
        for (i, entry) in lut.iter_mut().enumerate().take(i1 + 1).skip(i0) {
            let (num, den) = ((i - i0) as i32, (i1 - i0) as i32);
            for k in 0..3 {
                let a = c0[k] as i32;
                let b = c1[k] as i32;
                // Integer rounding keeps the table platform-independent.
                entry[k] = (a + ((b - a) * num * 2 + den).div_euclid(2 * den)) as u8;
            }
        }
    }
    lut
}

/// Min-max normalize `values` and map them through [`heatmap_lut`] to RGB8.
pub fn heatmap_rgb8(values: &[f64]) -> Vec<u8> {
    let lut = heatmap_lut();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .flat_map(|v| {
            let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
            lut[(t * 255.0).round().clamp(0.0, 255.0) as usize]
        })
        .collect()
}
