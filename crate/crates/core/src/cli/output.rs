//! CSV tables and PGM/PPM rasters.

use std::path::Path;

use crate::error::{Error, Result};
use crate::inference::EpochStats;

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Writes `rows` under `header`, one record per row.
pub fn write_csv<R: AsRef<[String]>>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r.as_ref()).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loss curve: `epoch,mean_total,mean_recon,mean_kl`.
pub fn write_loss_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|s| {
            vec![
                s.epoch.to_string(),
                s.mean_total.to_string(),
                s.mean_recon.to_string(),
                s.mean_kl.to_string(),
            ]
        })
        .collect();
    write_csv(path, &["epoch", "mean_total", "mean_recon", "mean_kl"], &rows)
}

/// Binary PGM (P5) from `[0, 1]` intensities, row-major.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f32]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Dimension(format!("{} pixels for a {width}x{height} raster", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| to_byte(v)));
    write_file(path, &out)
}

/// Binary PPM (P6) from RGB triples.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    if rgb.len() != width * height {
        return Err(Error::Dimension(format!("{} pixels for a {width}x{height} raster", rgb.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(rgb.iter().flatten());
    write_file(path, &out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Fixed five-stop palette (dark blue → teal → green → yellow), low to high.
const PALETTE: [[f32; 3]; 5] = [
    [0.267, 0.005, 0.329],
    [0.231, 0.322, 0.545],
    [0.129, 0.569, 0.549],
    [0.369, 0.788, 0.384],
    [0.992, 0.906, 0.145],
];

/// Maps `t ∈ [0, 1]` onto the palette by linear interpolation.
pub fn palette(t: f32) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (PALETTE.len() - 1) as f32;
    let i = (x.floor() as usize).min(PALETTE.len() - 2);
    let f = x - i as f32;
    std::array::from_fn(|c| to_byte(PALETTE[i][c] * (1.0 - f) + PALETTE[i + 1][c] * f))
}

/// Heatmap of `values` (row `i` drawn top to bottom), colored from the
/// matrix min to max, with each marker drawn as a 3×3 block.
pub fn heatmap(values: &ndarray::Array2<f32>, markers: &[((usize, usize), [u8; 3])]) -> (usize, usize, Vec<[u8; 3]>) {
    let (h, w) = values.dim();
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut rgb: Vec<[u8; 3]> = values.iter().map(|&v| palette((v - lo) / span)).collect();
    for &((i, j), color) in markers {
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let (y, x) = (i as i64 + di, j as i64 + dj);
                if (0..h as i64).contains(&y) && (0..w as i64).contains(&x) {
                    rgb[y as usize * w + x as usize] = color;
                }
            }
        }
    }
    (w, h, rgb)
}

/// Lays out square images in a grid with a one-pixel gap; `None` leaves a
/// blank tile. Returns `(width, height, pixels)`.
pub fn image_sheet(rows: &[Vec<Option<&[f32]>>], side: usize) -> (usize, usize, Vec<f32>) {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * (side + 1) + 1;
    let height = rows.len() * (side + 1) + 1;
    let mut px = vec![0.5f32; width * height];
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let (y0, x0) = (r * (side + 1) + 1, c * (side + 1) + 1);
            for y in 0..side {
                for x in 0..side {
                    px[(y0 + y) * width + x0 + x] = tile.map_or(0.0, |t| t[y * side + x]);
                }
            }
        }
    }
    (width, height, px)
}
