//! Dense-prediction metrics: mIoU, depth RMSE, mean angular error, edge F1.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Mean intersection over union in percent, over classes present in `gt`
/// (or over all `k` classes when `include_absent`, absent ones scoring 0).
pub fn miou(pred: &[u8], gt: &[u8], k: usize, include_absent: bool) -> f64 {
    let mut acc = MetricsAccumulator::new(k);
    acc.add_segmentation(pred, gt);
    acc.miou_pct(include_absent)
}

pub fn depth_rmse(pred: &[f32], gt: &[f32]) -> f64 {
    let mut acc = MetricsAccumulator::new(1);
    acc.add_depth(pred, gt);
    acc.depth_rmse()
}

/// Mean angle between per-pixel vectors (`[pixels, 3]`), in degrees.
pub fn normal_mean_angular_error(pred: ArrayView2<f32>, gt: ArrayView2<f32>) -> f64 {
    let mut acc = MetricsAccumulator::new(1);
    acc.add_normals(pred, gt);
    acc.normal_merr_deg()
}

/// Pixel-exact F1 in percent; 100 when both maps are empty.
pub fn edge_f1(pred: &[u8], gt: &[u8]) -> f64 {
    let mut acc = MetricsAccumulator::new(1);
    acc.add_edges(pred, gt);
    acc.edge_f1_pct()
}

/// Count-based running sums; merging is associative and the result does
/// not depend on how samples are grouped into batches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    pub classes: usize,
    intersection: Vec<u64>,
    union: Vec<u64>,
    gt_pixels: Vec<u64>,
    depth_sq: f64,
    depth_n: u64,
    angle_sum: f64,
    angle_n: u64,
    tp: u64,
    fp: u64,
    fn_: u64,
    pub samples: usize,
}

impl MetricsAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            intersection: vec![0; classes],
            union: vec![0; classes],
            gt_pixels: vec![0; classes],
            ..Default::default()
        }
    }

    pub fn add_segmentation(&mut self, pred: &[u8], gt: &[u8]) {
        assert_eq!(pred.len(), gt.len(), "segmentation maps differ in size");
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            self.gt_pixels[g] += 1;
            if p == g {
                self.intersection[g] += 1;
                self.union[g] += 1;
            } else {
                self.union[g] += 1;
                self.union[p] += 1;
            }
        }
    }

    pub fn add_depth(&mut self, pred: &[f32], gt: &[f32]) {
        assert_eq!(pred.len(), gt.len(), "depth maps differ in size");
        for (&p, &g) in pred.iter().zip(gt) {
            let d = p as f64 - g as f64;
            self.depth_sq += d * d;
        }
        self.depth_n += pred.len() as u64;
    }

    pub fn add_normals(&mut self, pred: ArrayView2<f32>, gt: ArrayView2<f32>) {
        assert_eq!(pred.dim(), gt.dim(), "normal maps differ in size");
        for (p, g) in pred.rows().into_iter().zip(gt.rows()) {
            let dot: f64 = p.iter().zip(g.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
            let np = p.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
            let ng = g.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
            let cos = if np > 0.0 && ng > 0.0 { dot / (np * ng) } else { 0.0 };
            self.angle_sum += cos.clamp(-1.0, 1.0).acos().to_degrees();
        }
        self.angle_n += pred.nrows() as u64;
    }

    pub fn add_edges(&mut self, pred: &[u8], gt: &[u8]) {
        assert_eq!(pred.len(), gt.len(), "edge maps differ in size");
        for (&p, &g) in pred.iter().zip(gt) {
            match (p != 0, g != 0) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => {}
            }
        }
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
        for (a, b) in self.gt_pixels.iter_mut().zip(&other.gt_pixels) {
            *a += b;
        }
        self.depth_sq += other.depth_sq;
        self.depth_n += other.depth_n;
        self.angle_sum += other.angle_sum;
        self.angle_n += other.angle_n;
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.samples += other.samples;
    }

    pub fn miou_pct(&self, include_absent: bool) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for c in 0..self.classes {
            if self.gt_pixels[c] > 0 {
                sum += self.intersection[c] as f64 / self.union[c] as f64;
                n += 1;
            } else if include_absent {
                n += 1;
            }
        }
        if n == 0 {
            return 100.0;
        }
        100.0 * sum / n as f64
    }

    pub fn depth_rmse(&self) -> f64 {
        if self.depth_n == 0 {
            return 0.0;
        }
        (self.depth_sq / self.depth_n as f64).sqrt()
    }

    pub fn normal_merr_deg(&self) -> f64 {
        if self.angle_n == 0 {
            return 0.0;
        }
        self.angle_sum / self.angle_n as f64
    }

    pub fn edge_f1_pct(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return 100.0;
        }
        100.0 * (2 * self.tp) as f64 / denom as f64
    }

    pub fn report(&self, split: &str, domain: &str, label: &str, include_absent: bool) -> MetricsReport {
        MetricsReport {
            label: label.to_string(),
            split: split.to_string(),
            domain: domain.to_string(),
            sample_count: self.samples,
            miou_pct: self.miou_pct(include_absent),
            depth_rmse: self.depth_rmse(),
            normal_merr_deg: self.normal_merr_deg(),
            edge_f1_pct: self.edge_f1_pct(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Free-form run label, e.g. an epoch or ablation rung.
    pub label: String,
    pub split: String,
    pub domain: String,
    pub sample_count: usize,
    pub miou_pct: f64,
    pub depth_rmse: f64,
    pub normal_merr_deg: f64,
    pub edge_f1_pct: f64,
}

pub const CSV_HEADER: &str = "label,split,domain,sample_count,miou_pct,depth_rmse,normal_merr_deg,edge_f1_pct";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.label, self.split, self.domain, self.sample_count, self.miou_pct, self.depth_rmse, self.normal_merr_deg, self.edge_f1_pct
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Appends one row, writing the header first if the file is new or empty.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if f.metadata()?.len() == 0 {
            writeln!(f, "{CSV_HEADER}")?;
        }
        writeln!(f, "{}", self.csv_row())?;
        Ok(())
    }
}
