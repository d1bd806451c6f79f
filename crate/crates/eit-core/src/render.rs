//! Figure output for reconstructions: per-case comparison panels showing
//! both conductivity fields with their x/y derivatives, loss-curve plots,
//! and CSV loss histories.
//!
//! The panel image is a 3-row, 2-column montage of subplots, each exactly
//! n×n pixels (one pixel per grid node) separated by 2-pixel white gaps:
//! row 1 holds σ for ground truth (left) and reconstruction (right),
//! rows 2 and 3 their x and y derivatives from the same finite-difference
//! stencils the reconstruction loss uses. Each row shares one color scale
//! across its two columns so the fields are visually comparable.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::calculus::fd_derivatives;
use crate::error::{EitError, Result};
use crate::geometry::{GridSpec, PotentialField};
use crate::stage2::LossBreakdown;

// --- color maps ---

/// Sampled sequential colormap (dark violet → green → yellow), linearly
/// interpolated between anchors.
fn sequential(t: f64) -> [u8; 3] {
    const ANCHORS: [[f64; 3]; 9] = [
        [68.0, 1.0, 84.0],
        [72.0, 40.0, 120.0],
        [62.0, 74.0, 137.0],
        [49.0, 104.0, 142.0],
        [38.0, 130.0, 142.0],
        [31.0, 158.0, 137.0],
        [53.0, 183.0, 121.0],
        [109.0, 205.0, 89.0],
        [253.0, 231.0, 37.0],
    ];
    let t = t.clamp(0.0, 1.0) * (ANCHORS.len() - 1) as f64;
    let k = (t.floor() as usize).min(ANCHORS.len() - 2);
    let f = t - k as f64;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        rgb[c] = (ANCHORS[k][c] + f * (ANCHORS[k + 1][c] - ANCHORS[k][c])).round() as u8;
    }
    rgb
}

/// Blue–white–red diverging colormap for signed derivative fields.
fn diverging(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, f: f64| (a + (b - a) * f).round() as u8;
    if t < 0.5 {
        let f = t * 2.0;
        [lerp(59.0, 255.0, f), lerp(76.0, 255.0, f), lerp(192.0, 255.0, f)]
    } else {
        let f = (t - 0.5) * 2.0;
        [lerp(255.0, 180.0, f), lerp(255.0, 4.0, f), lerp(255.0, 38.0, f)]
    }
}

const OUTSIDE_COLOR: [u8; 3] = [225, 225, 225];
const GAP: u32 = 2;

// --- panels ---

/// One subplot layer: per-node values, `None` where the quantity is not
/// defined (outside the disk, or on the ring for derivative layers).
type Layer = Array2<Option<f64>>;

fn sigma_layer(field: &Array2<f64>, grid: &GridSpec) -> Layer {
    let n = grid.n;
    Array2::from_shape_fn((n, n), |(i, j)| {
        if grid.is_masked(i, j) {
            Some(field[[i, j]])
        } else {
            None
        }
    })
}

fn derivative_layers(field: &Array2<f64>, grid: &GridSpec) -> Result<(Layer, Layer)> {
    let u = PotentialField {
        values: field.clone(),
        interp_fallbacks: 0,
    };
    let bundle = fd_derivatives(&u, grid)?;
    let n = grid.n;
    let mut dx: Layer = Array2::from_elem((n, n), None);
    let mut dy: Layer = Array2::from_elem((n, n), None);
    for (k, &id) in grid.interior_ids.iter().enumerate() {
        let (i, j) = (id / n, id % n);
        dx[[i, j]] = Some(bundle.du_dx[k]);
        dy[[i, j]] = Some(bundle.du_dy[k]);
    }
    Ok((dx, dy))
}

fn layer_range(layers: &[&Layer]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for layer in layers {
        for v in layer.iter().flatten() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        // Flat field: widen so it renders mid-scale instead of dividing by 0.
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn paint_subplot(
    img: &mut RgbImage,
    x0: u32,
    y0: u32,
    layer: &Layer,
    lo: f64,
    hi: f64,
    palette: fn(f64) -> [u8; 3],
) {
    let n = layer.dim().0;
    for i in 0..n {
        for j in 0..n {
            // x (index i) runs right, y (index j) runs up.
            let px = x0 + i as u32;
            let py = y0 + (n - 1 - j) as u32;
            let rgb = match layer[[i, j]] {
                Some(v) => palette((v - lo) / (hi - lo)),
                None => OUTSIDE_COLOR,
            };
            img.put_pixel(px, py, Rgb(rgb));
        }
    }
}

/// Write the 3×2 comparison panel for one case. `gt` and `rec` are n×n
/// conductivity fields on `grid`'s nodes.
pub fn render_panels(
    gt: &Array2<f64>,
    rec: &Array2<f64>,
    grid: &GridSpec,
    path: &Path,
) -> Result<()> {
    let n = grid.n;
    if gt.dim() != (n, n) || rec.dim() != (n, n) {
        return Err(EitError::InvalidArgument(format!(
            "field shapes {:?} / {:?} do not match grid {n}x{n}",
            gt.dim(),
            rec.dim()
        )));
    }
    let (gt_dx, gt_dy) = derivative_layers(gt, grid)?;
    let (rec_dx, rec_dy) = derivative_layers(rec, grid)?;
    let gt_sigma = sigma_layer(gt, grid);
    let rec_sigma = sigma_layer(rec, grid);

    let rows: [((&Layer, &Layer), fn(f64) -> [u8; 3]); 3] = [
        ((&gt_sigma, &rec_sigma), sequential),
        ((&gt_dx, &rec_dx), diverging),
        ((&gt_dy, &rec_dy), diverging),
    ];

    let np = n as u32;
    let width = 2 * np + GAP;
    let height = 3 * np + 2 * GAP;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (r, ((left, right), palette)) in rows.iter().enumerate() {
        let (lo, hi) = if matches!(r, 1 | 2) {
            // Symmetric scale so zero sits at the white midpoint.
            let (lo, hi) = layer_range(&[left, right]);
            let m = lo.abs().max(hi.abs()).max(1e-12);
            (-m, m)
        } else {
            layer_range(&[left, right])
        };
        let y0 = r as u32 * (np + GAP);
        paint_subplot(&mut img, 0, y0, left, lo, hi, *palette);
        paint_subplot(&mut img, np + GAP, y0, right, lo, hi, *palette);
    }
    img.save(path)
        .map_err(|e| EitError::Data(format!("{}: {e}", path.display())))
}

// --- loss curves ---

const PLOT_W: u32 = 720;
const PLOT_H: u32 = 440;
const MARGIN_L: u32 = 48;
const MARGIN_B: u32 = 32;
const MARGIN_T: u32 = 12;
const MARGIN_R: u32 = 12;

/// Series order and colors for the loss plot: the seven terms then the
/// total (black). Matches the CSV column order.
const SERIES_COLORS: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [0, 0, 0],
];

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), rgb: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let f = s as f64 / steps as f64;
        let x = a.0 + f * (b.0 - a.0);
        let y = a.1 + f * (b.1 - a.1);
        let (xi, yi) = (x.round() as i64, y.round() as i64);
        if xi >= 0 && yi >= 0 && (xi as u32) < img.width() && (yi as u32) < img.height() {
            img.put_pixel(xi as u32, yi as u32, Rgb(rgb));
        }
    }
}

fn series_values(history: &[LossBreakdown]) -> [Vec<f64>; 8] {
    let mut out: [Vec<f64>; 8] = Default::default();
    for entry in history {
        for (k, (_, v)) in entry.terms().iter().enumerate() {
            out[k].push(*v);
        }
        out[7].push(entry.total);
    }
    out
}

/// Plot the per-term loss histories on a log10 scale. Values at or below
/// 1e-12 are clamped to the plot floor.
pub fn render_loss_curves(history: &[LossBreakdown], path: &Path) -> Result<()> {
    if history.is_empty() {
        return Err(EitError::InvalidArgument(
            "loss history is empty; nothing to plot".into(),
        ));
    }
    let series = series_values(history);
    let logs: Vec<Vec<f64>> = series
        .iter()
        .map(|vs| vs.iter().map(|v| v.max(1e-12).log10()).collect())
        .collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for vs in &logs {
        for &v in vs {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }

    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let x_left = MARGIN_L as f64;
    let x_right = (PLOT_W - MARGIN_R - 1) as f64;
    let y_top = MARGIN_T as f64;
    let y_bot = (PLOT_H - MARGIN_B - 1) as f64;
    let axis = [120u8, 120, 120];
    draw_line(&mut img, (x_left, y_top), (x_left, y_bot), axis);
    draw_line(&mut img, (x_left, y_bot), (x_right, y_bot), axis);
    // Horizontal gridlines at integer log10 levels.
    let mut level = lo.ceil();
    while level <= hi {
        let y = y_bot - (level - lo) / (hi - lo) * (y_bot - y_top);
        draw_line(&mut img, (x_left, y), (x_right, y), [230, 230, 230]);
        level += 1.0;
    }

    let m = history.len();
    for (k, vs) in logs.iter().enumerate() {
        let rgb = SERIES_COLORS[k];
        let mut prev: Option<(f64, f64)> = None;
        for (s, &v) in vs.iter().enumerate() {
            let fx = if m == 1 { 0.0 } else { s as f64 / (m - 1) as f64 };
            let x = x_left + fx * (x_right - x_left);
            let y = y_bot - (v - lo) / (hi - lo) * (y_bot - y_top);
            if let Some(p) = prev {
                draw_line(&mut img, p, (x, y), rgb);
            }
            prev = Some((x, y));
        }
    }
    // Color key: one swatch per series along the top edge, in CSV order.
    for (k, rgb) in SERIES_COLORS.iter().enumerate() {
        let x0 = MARGIN_L + 8 + k as u32 * 18;
        for dx in 0..12u32 {
            for dy in 0..6u32 {
                img.put_pixel(x0 + dx, 2 + dy, Rgb(*rgb));
            }
        }
    }
    img.save(path)
        .map_err(|e| EitError::Data(format!("{}: {e}", path.display())))
}

// --- loss history CSV ---

/// Column header shared by the CSV writer and its readers.
pub const HISTORY_HEADER: &str =
    "step,pde_l2,pde_top_m,boundary_flux,boundary_sigma,total_variation,hinge,weight_decay,total";

/// Write one row per optimizer step with every loss term and the total.
pub fn write_history_csv(history: &[LossBreakdown], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(64 * (history.len() + 1));
    out.push_str(HISTORY_HEADER);
    out.push('\n');
    for (step, entry) in history.iter().enumerate() {
        out.push_str(&format!(
            "{step},{},{},{},{},{},{},{},{}\n",
            entry.pde_l2,
            entry.pde_top_m,
            entry.boundary_flux,
            entry.boundary_sigma,
            entry.total_variation,
            entry.hinge,
            entry.weight_decay,
            entry.total
        ));
    }
    std::fs::write(path, out).map_err(|e| EitError::io(path, e))
}

/// Read a loss history CSV back into memory (used by the plot command).
pub fn read_history_csv(path: &Path) -> Result<Vec<LossBreakdown>> {
    let text = std::fs::read_to_string(path).map_err(|e| EitError::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HISTORY_HEADER => {}
        _ => {
            return Err(EitError::Data(format!(
                "{}: missing or unrecognized loss history header",
                path.display()
            )))
        }
    }
    let mut history = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(EitError::Data(format!(
                "{}: row {} has {} fields, expected 9",
                path.display(),
                idx + 2,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                EitError::Data(format!(
                    "{}: row {} has non-numeric value {s:?}",
                    path.display(),
                    idx + 2
                ))
            })
        };
        history.push(LossBreakdown {
            pde_l2: parse(fields[1])?,
            pde_top_m: parse(fields[2])?,
            boundary_flux: parse(fields[3])?,
            boundary_sigma: parse(fields[4])?,
            total_variation: parse(fields[5])?,
            hinge: parse(fields[6])?,
            weight_decay: parse(fields[7])?,
            total: parse(fields[8])?,
        });
    }
    Ok(history)
}

// --- tests ---
