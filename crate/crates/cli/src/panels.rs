//! Static slice panels: center slices along each axis, one column per
//! volume, shared intensity window.

use std::path::Path;

use image::{GrayImage, Luma};
use mminr::volume::Volume;

const GAP: u32 = 2;
const TARGET_CELL: usize = 128;

fn slice(v: &Volume, axis: usize) -> (usize, usize, Vec<f32>) {
    let s = v.shape();
    let mid = s[axis] / 2;
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut out = Vec::with_capacity(s[a] * s[b]);
    for j in 0..s[b] {
        for i in 0..s[a] {
            let mut idx = [0; 3];
            idx[axis] = mid;
            idx[a] = i;
            idx[b] = j;
            out.push(v.get(idx[0], idx[1], idx[2]));
        }
    }
    (s[a], s[b], out)
}

/// Renders a 3-row (x, y, z center slices) by `columns.len()` grid. All
/// columns share the window `[min, max]` of the last column, which is
/// usually the ground truth.
pub fn render(columns: &[&Volume]) -> GrayImage {
    let reference = columns.last().expect("at least one column");
    let (lo, hi) = reference.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let rows: Vec<Vec<(usize, usize, Vec<f32>)>> = (0..3).map(|a| columns.iter().map(|v| slice(v, a)).collect()).collect();
    let cell_w = rows.iter().flatten().map(|c| c.0).max().unwrap_or(1);
    let cell_h = rows.iter().flatten().map(|c| c.1).max().unwrap_or(1);
    let scale = (TARGET_CELL / cell_w.max(cell_h)).max(1) as u32;
    let (cw, ch) = (cell_w as u32 * scale, cell_h as u32 * scale);
    let width = columns.len() as u32 * (cw + GAP) + GAP;
    let height = 3 * (ch + GAP) + GAP;
    let mut img = GrayImage::from_pixel(width, height, Luma([32]));
    for (r, row) in rows.iter().enumerate() {
        for (c, (w, h, data)) in row.iter().enumerate() {
            let x0 = GAP + c as u32 * (cw + GAP);
            let y0 = GAP + r as u32 * (ch + GAP);
            for j in 0..*h {
                for i in 0..*w {
                    let v = ((data[j * w + i] - lo) / span).clamp(0.0, 1.0);
                    let px = Luma([(v * 255.0).round() as u8]);
                    for dy in 0..scale {
                        for dx in 0..scale {
                            // Image rows run top-down; flip so the second
                            // in-plane axis points up.
                            let y = y0 + (*h as u32 - 1 - j as u32) * scale + dy;
                            img.put_pixel(x0 + i as u32 * scale + dx, y, px);
                        }
                    }
                }
            }
        }
    }
    img
}

pub fn write(path: &Path, columns: &[&Volume]) -> anyhow::Result<()> {
    render(columns).save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_size_and_window() {
        let v = Volume::from_fn([4, 6, 8], |x, _, _| x as f32).unwrap();
        let img = render(&[&v, &v]);
        // Cells are 6 wide (y across the x slice) and 8 tall; 128 / 8 = 16.
        assert_eq!(img.width(), 2 * (6 * 16 + GAP) + GAP);
        assert_eq!(img.height(), 3 * (8 * 16 + GAP) + GAP);
        // The z slice (x across) starts at x = 0, the window minimum.
        let y_row2 = GAP + 2 * (8 * 16 + GAP);
        assert_eq!(img.get_pixel(GAP, y_row2 + 6 * 16 - 1).0[0], 0);
    }
}
