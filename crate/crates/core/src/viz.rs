//! PNG dumps: matrix heatmaps (one pixel per cell) and prediction grids.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};

use crate::data::{seg_palette, Sample};
use crate::error::{Error, Result};
use crate::train::Prediction;

/// Viridis anchors, dark to bright.
const RAMP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Colour for `t` in `[0, 1]`; values outside are clamped, NaN maps to black.
pub fn colormap(t: f64) -> [u8; 3] {
    if t.is_nan() {
        return [0, 0, 0];
    }
    let x = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let mut c = [0u8; 3];
    for k in 0..3 {
        c[k] = (RAMP[i][k] + f * (RAMP[i + 1][k] - RAMP[i][k])).round() as u8;
    }
    c
}

/// Renders `values` with `vmin..vmax` mapped onto the colour ramp, one pixel
/// per matrix cell.
pub fn heatmap(values: ArrayView2<f64>, vmin: f64, vmax: f64) -> RgbImage {
    let (h, w) = values.dim();
    let span = if vmax > vmin { vmax - vmin } else { 1.0 };
    RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(colormap((values[[y as usize, x as usize]] - vmin) / span)))
}

pub fn write_heatmap(path: &Path, values: ArrayView2<f64>, vmin: f64, vmax: f64) -> Result<()> {
    if values.is_empty() {
        return Err(Error::DimensionMismatch("cannot draw an empty heatmap".into()));
    }
    heatmap(values, vmin, vmax).save(path)?;
    Ok(())
}

/// Affinity heatmap; entry `(m, t)` is the weight column `t` gives task `m`.
pub fn write_affinity_heatmap(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    write_heatmap(path, matrix.view(), 0.0, 1.0)
}

const TILE: u32 = 64;
const GAP: u32 = 2;

/// One row per sample: image, then ground truth and prediction for each task
/// the prediction carries.
pub fn prediction_grid(rows: &[(&Sample, &Prediction)]) -> RgbImage {
    let cols = rows.first().map_or(1, |(_, p)| 1 + 2 * p.task_count()) as u32;
    let mut img = RgbImage::from_pixel(cols * (TILE + GAP), rows.len().max(1) as u32 * (TILE + GAP), Rgb([255, 255, 255]));
    let palette = seg_palette();
    for (r, (sample, pred)) in rows.iter().enumerate() {
        let (h, w) = sample.seg.dim();
        let mut tiles: Vec<Box<dyn Fn(usize, usize) -> [u8; 3] + '_>> = Vec::new();
        tiles.push(Box::new(|y, x| std::array::from_fn(|c| to_u8(sample.image[[y, x, c]]))));
        if let Some(seg) = &pred.seg {
            tiles.push(Box::new(|y, x| palette[sample.seg[[y, x]] as usize % palette.len()]));
            tiles.push(Box::new(move |y, x| palette[seg[y * w + x] as usize % palette.len()]));
        }
        if let Some(depth) = &pred.depth {
            tiles.push(Box::new(|y, x| [to_u8(1.0 - sample.depth[[y, x]]); 3]));
            tiles.push(Box::new(move |y, x| [to_u8(1.0 - depth[y * w + x]); 3]));
        }
        if let Some(normal) = &pred.normal {
            tiles.push(Box::new(|y, x| std::array::from_fn(|c| to_u8(0.5 + 0.5 * sample.normal[[y, x, c]]))));
            tiles.push(Box::new(move |y, x| std::array::from_fn(|c| to_u8(0.5 + 0.5 * normal[[y * w + x, c]]))));
        }
        if let Some(edge) = &pred.edge {
            tiles.push(Box::new(|y, x| [255 * sample.edge[[y, x]].min(1); 3]));
            tiles.push(Box::new(move |y, x| [255 * edge[y * w + x].min(1); 3]));
        }
        for (c, tile) in tiles.iter().enumerate() {
            for ty in 0..TILE {
                for tx in 0..TILE {
                    let y = (ty as usize * h) / TILE as usize;
                    let x = (tx as usize * w) / TILE as usize;
                    img.put_pixel(c as u32 * (TILE + GAP) + tx, r as u32 * (TILE + GAP) + ty, Rgb(tile(y, x)));
                }
            }
        }
    }
    img
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
