use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{DetectionMetrics, MetricsReport, PixelMetrics};

use super::config::{TrainConfig, TrainMode};
use super::data::Dataset;
use super::eval::{evaluate, EvalOptions};
use super::train_on;

/// Held-out results of one trained mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: TrainMode,
    pub label: String,
    pub report: MetricsReport,
    /// Final smoothed training loss of each trained model.
    pub final_loss: Vec<f64>,
}

impl ComparisonRow {
    pub fn pixel(&self) -> Option<&PixelMetrics> {
        self.report.pixel.as_ref()
    }

    pub fn detection(&self) -> Option<&DetectionMetrics> {
        self.report.detection.as_ref()
    }
}

/// Metrics per mode plus signed deltas against the first row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    /// Joint minus separate F-score (percentage points) when both ran.
    pub joint_minus_separate_f_score: Option<f64>,
}

fn delta(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| format!("{:>9}", "-"), |x| format!("{x:>9.2}"))
}

fn signed(v: Option<f64>) -> String {
    v.map_or_else(|| format!("{:>9}", "-"), |x| format!("{x:>+9.2}"))
}

impl ComparisonReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn f_score(&self, mode: TrainMode) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.mode == mode)
            .and_then(|r| r.pixel())
            .map(|p| p.f_score)
    }

    /// Signed change of each row against the first: F-score, moving IoU and
    /// static/moving mAP, in points.
    pub fn deltas(&self) -> Vec<[Option<f64>; 3]> {
        let Some(base) = self.rows.first() else {
            return Vec::new();
        };
        let key = |r: &ComparisonRow| {
            [
                r.pixel().map(|p| p.f_score),
                r.pixel().map(|p| p.iou_moving),
                r.detection().map(|d| d.map),
            ]
        };
        let b = key(base);
        self.rows
            .iter()
            .map(|r| {
                let k = key(r);
                [delta(k[0], b[0]), delta(k[1], b[1]), delta(k[2], b[2])]
            })
            .collect()
    }

    /// Plain-text tables: segmentation (precision, recall, F-score, IoU),
    /// detection (AP static, AP moving, mAP), then deltas against the first
    /// row.
    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<w$} | {:>9} | {:>9} | {:>9} | {:>9}",
            "Mode", "Precision", "Recall", "F-Score", "IoU"
        );
        for r in &self.rows {
            let p = r.pixel();
            let _ = writeln!(
                s,
                "{:<w$} | {} | {} | {} | {}",
                r.label,
                cell(p.map(|p| p.precision)),
                cell(p.map(|p| p.recall)),
                cell(p.map(|p| p.f_score)),
                cell(p.map(|p| p.iou_moving)),
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<w$} | {:>9} | {:>9} | {:>9}",
            "Mode", "AP Static", "AP Moving", "mAP"
        );
        for r in &self.rows {
            let d = r.detection();
            let _ = writeln!(
                s,
                "{:<w$} | {} | {} | {}",
                r.label,
                cell(d.map(|d| d.ap_static)),
                cell(d.map(|d| d.ap_moving)),
                cell(d.map(|d| d.map)),
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<w$} | {:>9} | {:>9} | {:>9}", "Delta", "F-Score", "IoU", "mAP");
        for (r, d) in self.rows.iter().zip(self.deltas()) {
            let _ = writeln!(
                s,
                "{:<w$} | {} | {} | {}",
                r.label,
                signed(d[0]),
                signed(d[1]),
                signed(d[2])
            );
        }
        if let Some(d) = self.joint_minus_separate_f_score {
            let _ = writeln!(s);
            let _ = writeln!(s, "joint - separate F-score: {d:+.2}");
        }
        s
    }
}

/// Trains and evaluates every config on its own data and held-out split.
/// Configs sharing data, labels and motion input share one loaded dataset.
pub fn compare_modes(configs: &[TrainConfig], opts: &EvalOptions) -> Result<ComparisonReport> {
    if configs.is_empty() {
        return Err(Error::Config("compare needs at least one config".into()));
    }
    let mut cache: Vec<(String, Dataset, Dataset)> = Vec::new();
    let mut rows = Vec::with_capacity(configs.len());
    for c in configs {
        c.validate()?;
        let mc = c.model_configs()?.remove(0);
        let key = format!(
            "{}|{}|{}|{}|{}|{}x{}",
            c.data.display(),
            c.labels.as_str(),
            c.train_split,
            c.eval_split,
            mc.motion_input.as_str(),
            mc.input_w,
            mc.input_h
        );
        if !cache.iter().any(|(k, _, _)| *k == key) {
            let train = Dataset::load(&c.data, &c.train_split, c.labels, &mc)?;
            let eval = Dataset::load(&c.data, &c.eval_split, c.labels, &mc)?;
            cache.push((key.clone(), train, eval));
        }
        let (_, train, eval) = cache.iter().find(|(k, _, _)| *k == key).expect("cached above");
        let outcome = train_on(c, train, None, |_, _| Ok(()))?;
        let report = evaluate(&outcome.model_refs(), eval, opts)?;
        rows.push(ComparisonRow {
            mode: c.mode,
            label: c.mode.label().to_string(),
            report,
            final_loss: outcome
                .runs
                .iter()
                .map(|r| r.epoch_smoothed.last().copied().unwrap_or(f64::NAN))
                .collect(),
        });
    }
    let mut report = ComparisonReport {
        rows,
        joint_minus_separate_f_score: None,
    };
    report.joint_minus_separate_f_score = delta(
        report.f_score(TrainMode::Joint2Stream),
        report.f_score(TrainMode::Separate2Stream),
    );
    Ok(report)
}
