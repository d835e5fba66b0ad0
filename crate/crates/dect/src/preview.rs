//! 8-bit grayscale previews. Display only; never read back for metrics.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{CliError, CliResult};

/// Maps `[lo, hi]` linearly onto 0..=255, clipping outside the window.
pub fn window_to_u8(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span.is_nan() || span <= 0.0 {
                return 0;
            }
            let t = ((v - lo) / span).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        })
        .collect()
}

pub fn write_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> CliResult<()> {
    let ctx = format!("writing {}", path.display());
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(CliError::io(ctx.clone()))?;
    }
    let file = File::create(path).map_err(CliError::io(ctx.clone()))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| std::io::Error::other(e.to_string());
    let mut writer = encoder
        .write_header()
        .map_err(to_io)
        .map_err(CliError::io(ctx.clone()))?;
    writer
        .write_image_data(pixels)
        .map_err(to_io)
        .map_err(CliError::io(ctx.clone()))?;
    writer.finish().map_err(to_io).map_err(CliError::io(ctx))
}
