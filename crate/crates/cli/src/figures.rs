//! Frame grids and attention heatmaps as single PNG images.

use capvid::frames::Image;
use ndarray::Array2;

const GAP: usize = 2;
const GAP_RGB: [u8; 3] = [255, 255, 255];

/// Rows of equally sized frames separated by white gaps.
pub fn frame_grid(rows: &[&[Image]]) -> Image {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let (w, h) = rows
        .iter()
        .flat_map(|r| r.first())
        .map(|f| (f.width, f.height))
        .next()
        .unwrap_or((0, 0));
    let width = cols * w + cols.saturating_sub(1) * GAP;
    let height = rows.len() * h + rows.len().saturating_sub(1) * GAP;
    let mut out = Image::filled(width.max(1), height.max(1), GAP_RGB);
    for (r, row) in rows.iter().enumerate() {
        for (c, f) in row.iter().enumerate() {
            let (ox, oy) = (c * (w + GAP), r * (h + GAP));
            for y in 0..f.height.min(h) {
                for x in 0..f.width.min(w) {
                    out.put(ox + x, oy + y, f.get(x, y));
                }
            }
        }
    }
    out
}

/// Black-red-yellow-white ramp over `[0, 1]`.
fn heat(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let ch = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(v), ch(v - 1.0), ch(v - 2.0)]
}

/// One min-max normalized tile per key column of a `(queries, keys)` map,
/// each upscaled by `scale`.
pub fn heatmap_tiles(map: &Array2<f64>, side: usize, scale: usize) -> Vec<Image> {
    (0..map.ncols())
        .map(|k| {
            let col = map.column(k);
            let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let span = if hi > lo { hi - lo } else { 1.0 };
            let mut img = Image::new(side * scale, side * scale);
            for y in 0..side * scale {
                for x in 0..side * scale {
                    let q = (y / scale) * side + x / scale;
                    img.put(x, y, heat((col[q] - lo) / span));
                }
            }
            img
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout() {
        let a = Image::filled(4, 3, [1, 2, 3]);
        let row = vec![a.clone(), a.clone()];
        let g = frame_grid(&[&row, &row[..1]]);
        assert_eq!((g.width, g.height), (4 * 2 + GAP, 3 * 2 + GAP));
        assert_eq!(g.get(0, 0), [1, 2, 3]);
        assert_eq!(g.get(4, 0), GAP_RGB);
        assert_eq!(g.get(g.width - 1, g.height - 1), GAP_RGB);
    }

    #[test]
    fn heat_tiles_normalize() {
        let m = Array2::from_shape_vec((4, 2), vec![0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0]).unwrap();
        let t = heatmap_tiles(&m, 2, 3);
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].width, t[0].height), (6, 6));
        assert_eq!(t[0].get(0, 0), [0, 0, 0]);
        assert_eq!(t[0].get(5, 5), [255, 255, 255]);
        assert_eq!(t[1].get(0, 0), t[1].get(5, 5));
    }
}
