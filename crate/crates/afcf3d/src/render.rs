//! Raster output: four-color agreement maps, binary masks and probability
//! grayscales.

use crate::error::{Error, Result};
use crate::metrics;
use std::path::Path;

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];

/// RGB change-map raster.
pub struct ChangeMapRender {
    pub h: usize,
    pub w: usize,
    /// Row-major `h * w * 3` bytes.
    pub rgb: Vec<u8>,
}

impl ChangeMapRender {
    /// Classify every pixel against the ground truth: hits white, misses
    /// blue, false alarms red, correct rejections black.
    pub fn comparison(pred: &[u8], truth: &[u8], h: usize, w: usize) -> Result<ChangeMapRender> {
        if pred.len() != h * w || truth.len() != h * w {
            return Err(Error::config("render extents do not match the mask length"));
        }
        let mut rgb = Vec::with_capacity(h * w * 3);
        for (&p, &t) in pred.iter().zip(truth) {
            let color = match (p, t) {
                (1, 1) => TP_COLOR,
                (0, 1) => FN_COLOR,
                (1, 0) => FP_COLOR,
                (0, 0) => TN_COLOR,
                _ => return Err(Error::config("render inputs must be binary")),
            };
            rgb.extend_from_slice(&color);
        }
        Ok(ChangeMapRender { h, w, rgb })
    }

    /// Label-free rendering: predicted change white, rest black.
    pub fn binary(pred: &[u8], h: usize, w: usize) -> Result<ChangeMapRender> {
        Self::comparison(pred, pred, h, w)
    }

    /// The distinct colors present, as packed RGB triples.
    pub fn palette(&self) -> Vec<[u8; 3]> {
        let mut seen: Vec<[u8; 3]> = Vec::new();
        for px in self.rgb.chunks_exact(3) {
            let c = [px[0], px[1], px[2]];
            if !seen.contains(&c) {
                seen.push(c);
            }
        }
        seen.sort();
        seen
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.w as u32, self.h as u32, self.rgb.clone())
            .expect("buffer length matches extents");
        img.save(path)
            .map_err(|e| Error::ingestion(format!("cannot write {}: {e}", path.display())))
    }
}

/// Probability map as an 8-bit grayscale raster (0 -> 0.0, 255 -> 1.0).
pub fn save_probability_png(path: &Path, prob: &[f32], h: usize, w: usize) -> Result<()> {
    if prob.len() != h * w {
        return Err(Error::config("probability extents do not match the buffer"));
    }
    let bytes: Vec<u8> = prob
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches extents");
    img.save(path)
        .map_err(|e| Error::ingestion(format!("cannot write {}: {e}", path.display())))
}

/// Binarize a probability plane with the evaluation threshold.
pub fn threshold_mask(prob: &[f32], threshold: f64) -> Vec<u8> {
    metrics::binarize(prob, threshold)
}
