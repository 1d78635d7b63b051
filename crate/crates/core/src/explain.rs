//! Vertex importance, pixel saliency, overlays and top-N reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_builder::Image;
use crate::model::LayerTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceMode {
    /// Gradient-weighted channel sum, `ReLU(Σ_c α_c h_ic)`.
    #[default]
    Gradcam,
    /// `Σ_c |h_ic|`; needs no gradients.
    Activation,
}

impl ImportanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ImportanceMode::Gradcam => "gradcam",
            ImportanceMode::Activation => "activation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, in `[0, 1]`, max-normalized.
    pub scores: Vec<f64>,
}

impl SaliencyMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.width + col]
    }
}

fn level_scores(trace: &LayerTrace, level: usize, mode: ImportanceMode) -> Result<Vec<f64>> {
    let h = trace.activation(level).ok_or_else(|| {
        Error::InvalidInput(format!("trace has no level {level} (depth {})", trace.depth()))
    })?;
    let (n, d) = (h.rows(), h.cols());
    let data = h.data();
    match mode {
        ImportanceMode::Activation => Ok(data.chunks(d).map(|row| row.iter().map(|v| v.abs()).sum()).collect()),
        ImportanceMode::Gradcam => {
            let g = trace.gradient(level).ok_or_else(|| {
                Error::InvalidInput("gradcam needs a trace recorded with gradients".into())
            })?;
            if g.shape() != h.shape() {
                return Err(Error::Integrity(format!(
                    "gradient shape {:?} differs from activation shape {:?}",
                    g.shape(),
                    h.shape()
                )));
            }
            let mut alpha = vec![0.0; d];
            for row in g.data().chunks(d) {
                for (a, v) in alpha.iter_mut().zip(row) {
                    *a += v;
                }
            }
            alpha.iter_mut().for_each(|a| *a /= n as f64);
            Ok(data
                .chunks(d)
                .map(|row| row.iter().zip(&alpha).map(|(x, a)| x * a).sum::<f64>().max(0.0))
                .collect())
        }
    }
}

/// Scores for every level of `trace`, index 0 being the input graph.
///
/// The last entry is the one the composite saliency map is built from.
pub fn vertex_importance(trace: &LayerTrace, target_class: usize, mode: ImportanceMode) -> Result<Vec<Vec<f64>>> {
    if mode == ImportanceMode::Gradcam && trace.grad_class != Some(target_class) {
        return Err(Error::InvalidInput(match trace.grad_class {
            None => "gradcam needs a trace recorded with gradients".to_string(),
            Some(c) => format!("trace gradients are for class {c}, not {target_class}"),
        }));
    }
    (0..=trace.depth()).map(|l| level_scores(trace, l, mode)).collect()
}

/// Routes level-`level` vertex scores down to input pixels through the
/// recorded max-pool winners, keeping the max where routes collide.
pub fn backproject_saliency(scores: &[f64], trace: &LayerTrace, level: usize) -> Result<SaliencyMap> {
    if level > trace.depth() || trace.grids.len() != trace.depth() + 1 {
        return Err(Error::Integrity(format!(
            "level {level} is not in a trace of depth {} with {} grids",
            trace.depth(),
            trace.grids.len()
        )));
    }
    let expected = trace.grids[level].num_vertices();
    if scores.len() != expected {
        return Err(Error::Integrity(format!(
            "{} scores for a level-{level} grid of {expected} vertices",
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidInput(format!("scores must be finite and >= 0, found {bad}")));
    }
    let mut current = scores.to_vec();
    for l in (1..=level).rev() {
        let record = &trace.layers[l - 1];
        let fine = trace.grids[l - 1].num_vertices();
        let coarse = current.len();
        if record.pooled_dims != trace.grids[l].dims() || coarse == 0 || !record.argmax.len().is_multiple_of(coarse) {
            return Err(Error::Integrity(format!("layer {l} pooling record does not match its grid")));
        }
        let d = record.argmax.len() / coarse;
        let mut below = vec![0.0f64; fine];
        for (v, &s) in current.iter().enumerate() {
            for &w in &record.argmax[v * d..(v + 1) * d] {
                let slot = below.get_mut(w).ok_or_else(|| {
                    Error::Integrity(format!("layer {l} argmax {w} outside a {fine}-vertex grid"))
                })?;
                *slot = slot.max(s);
            }
        }
        current = below;
    }
    let max = current.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        current.iter_mut().for_each(|v| *v /= max);
    }
    let (height, width) = trace.grids[0].dims();
    Ok(SaliencyMap {
        height,
        width,
        scores: current,
    })
}

/// Grayscale image as RGB with salient pixels tinted red.
///
/// A pixel is tinted when its score is positive and at least `threshold`:
/// red becomes 255 and green/blue fade to `base · (1 − score)`.
pub fn render_overlay(image: &Image, saliency: &SaliencyMap, threshold: f64) -> Result<Vec<u8>> {
    if (image.height(), image.width()) != (saliency.height, saliency.width) {
        return Err(Error::InvalidInput(format!(
            "image is {}x{} but saliency is {}x{}",
            image.height(),
            image.width(),
            saliency.height,
            saliency.width
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!("threshold must be in [0, 1], got {threshold}")));
    }
    let base = image.to_u8();
    let mut rgb = Vec::with_capacity(base.len() * 3);
    for (&b, &s) in base.iter().zip(&saliency.scores) {
        if s > 0.0 && s >= threshold {
            let faded = (f64::from(b) * (1.0 - s)).round() as u8;
            rgb.extend([255, faded, faded]);
        } else {
            rgb.extend([b, b, b]);
        }
    }
    Ok(rgb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub class: String,
    pub index: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    /// Descending by probability, ties by class index.
    pub entries: Vec<ReportEntry>,
    pub saliency: Option<SaliencyMap>,
}

impl ClassificationReport {
    pub fn predicted(&self) -> &ReportEntry {
        &self.entries[0]
    }

    /// One `<class>: <pp.pp>%` line per entry.
    pub fn lines(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| format!("{}: {:.2}%", e.class, e.prob * 100.0))
            .collect()
    }

    pub fn to_json(&self, mode: ImportanceMode, saliency_file: Option<&str>) -> serde_json::Value {
        serde_json::json!({
            "predicted": self.predicted().class,
            "mode": mode.as_str(),
            "topN": self
                .entries
                .iter()
                .map(|e| serde_json::json!({"class": e.class, "prob": e.prob}))
                .collect::<Vec<_>>(),
            "saliency_file": saliency_file,
        })
    }
}

pub fn build_report(
    probs: &[f64],
    class_names: &[String],
    top_n: usize,
    saliency: Option<SaliencyMap>,
) -> Result<ClassificationReport> {
    if probs.len() != class_names.len() {
        return Err(Error::InvalidInput(format!(
            "{} probabilities for {} classes",
            probs.len(),
            class_names.len()
        )));
    }
    if top_n == 0 || top_n > probs.len() {
        return Err(Error::InvalidInput(format!(
            "report size must be between 1 and {}, got {top_n}",
            probs.len()
        )));
    }
    if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("probability {bad} outside [0, 1]")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("probabilities sum to {total}, not 1")));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable sort keeps index order among equal probabilities
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let entries = order
        .into_iter()
        .take(top_n)
        .map(|i| ReportEntry {
            class: class_names[i].clone(),
            index: i,
            prob: probs[i],
        })
        .collect();
    Ok(ClassificationReport { entries, saliency })
}
