//! Paired-tile datasets: the on-disk layout, PNG ingestion and a synthetic
//! generator for end-to-end exercises.
//!
//! A dataset root holds `A/`, `B/` and `label/` directories with identically
//! named PNG tiles, plus `train.txt` / `val.txt` / `test.txt` manifests
//! listing one file name per line.

use crate::error::{Error, IoContext, Result};
use crate::tensor::{Shape5, Tensor5};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// One co-registered acquisition pair with its change mask.
pub struct SamplePair {
    pub name: String,
    /// `(1, 3, 1, h, w)` in `[0, 1]`.
    pub a: Tensor5<f32>,
    pub b: Tensor5<f32>,
    /// Row-major binary mask, `h * w` entries.
    pub label: Vec<u8>,
    pub h: usize,
    pub w: usize,
}

pub struct DatasetLayout {
    root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> DatasetLayout {
        DatasetLayout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Tile names of a split, in manifest order. An empty manifest yields an
    /// empty list, not an error.
    pub fn manifest(&self, split: &str) -> Result<Vec<String>> {
        if !matches!(split, "train" | "val" | "test") {
            return Err(Error::config(format!(
                "unknown split '{split}', expected train, val or test"
            )));
        }
        let path = self.root.join(format!("{split}.txt"));
        let text = std::fs::read_to_string(&path).at(&path)?;
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect())
    }

    pub fn load_pair(&self, name: &str) -> Result<SamplePair> {
        let a = load_image(&self.root.join("A").join(name))?;
        let b = load_image(&self.root.join("B").join(name))?;
        let (label, lh, lw) = load_mask(&self.root.join("label").join(name))?;
        if a.shape != b.shape || a.shape.h != lh || a.shape.w != lw {
            return Err(Error::ingestion(format!(
                "tile {name}: A {:?}, B {:?} and label {lh}x{lw} extents disagree",
                a.shape, b.shape
            )));
        }
        let (h, w) = (a.shape.h, a.shape.w);
        Ok(SamplePair {
            name: name.to_string(),
            a,
            b,
            label,
            h,
            w,
        })
    }

    /// Load every tile of a split.
    pub fn load_split(&self, split: &str) -> Result<Vec<SamplePair>> {
        self.manifest(split)?
            .iter()
            .map(|n| self.load_pair(n))
            .collect()
    }
}

/// Read an RGB PNG into a `(1, 3, 1, h, w)` tensor normalized to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor5<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::ingestion(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if h == 0 || w == 0 {
        return Err(Error::ingestion(format!("{} is empty", path.display())));
    }
    let shape = Shape5::new(1, 3, 1, h, w);
    let mut data = vec![0f32; shape.numel()];
    for (y, row) in img.rows().enumerate() {
        for (x, px) in row.enumerate() {
            for c in 0..3 {
                data[c * h * w + y * w + x] = f32::from(px.0[c]) / 255.0;
            }
        }
    }
    Ok(Tensor5::new(shape, data))
}

/// Read a mask PNG; any sample >= 128 counts as change.
pub fn load_mask(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::ingestion(format!("cannot read {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask = img.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
    Ok((mask, h, w))
}

fn save_rgb(path: &Path, planes: &[Vec<f32>; 3], h: usize, w: usize) -> Result<()> {
    let mut bytes = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for plane in planes {
            bytes.push((plane[i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches extents")
        .save(path)
        .map_err(|e| Error::ingestion(format!("cannot write {}: {e}", path.display())))
}

fn save_mask(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| m * 255).collect();
    image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches extents")
        .save(path)
        .map_err(|e| Error::ingestion(format!("cannot write {}: {e}", path.display())))
}

/// Smooth background texture: coarse random grid, bilinearly upsampled,
/// values confined to `[0.2, 0.8]` so change deltas never clip.
fn smooth_field(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    let step = 16.min(size);
    let nodes = size / step + 2;
    let grid: Vec<f32> = (0..nodes * nodes).map(|_| rng.gen_range(0.2..0.8)).collect();
    let mut out = vec![0f32; size * size];
    for y in 0..size {
        let gy = y as f32 / step as f32;
        let (y0, fy) = (gy as usize, gy.fract());
        for x in 0..size {
            let gx = x as f32 / step as f32;
            let (x0, fx) = (gx as usize, gx.fract());
            let v00 = grid[y0 * nodes + x0];
            let v01 = grid[y0 * nodes + x0 + 1];
            let v10 = grid[(y0 + 1) * nodes + x0];
            let v11 = grid[(y0 + 1) * nodes + x0 + 1];
            out[y * size + x] =
                v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
        }
    }
    out
}

/// Generate one pair in memory. The change regions are axis-aligned
/// rectangles; the brightness shift inside them is applied on a sparse
/// lattice (two pixels out of three), so the full rectangle is only
/// recoverable from spatial context, not from any single pixel difference.
fn synth_pair(rng: &mut ChaCha8Rng, size: usize) -> ([Vec<f32>; 3], [Vec<f32>; 3], Vec<u8>) {
    let a: [Vec<f32>; 3] = std::array::from_fn(|_| smooth_field(rng, size));
    let mut b: [Vec<f32>; 3] = std::array::from_fn(|c| {
        a[c].iter()
            .map(|&v| v + rng.gen_range(-0.0075..0.0075))
            .collect()
    });

    // Rejection-sample rectangles until the changed fraction lands in
    // [2%, 30%].
    let mut label = vec![0u8; size * size];
    loop {
        label.iter_mut().for_each(|v| *v = 0);
        for _ in 0..rng.gen_range(1..=3usize) {
            // Rectangles sit on the even grid so the half-resolution
            // prediction lattice can represent them exactly.
            let rh = 2 * rng.gen_range(size / 16..=size / 6);
            let rw = 2 * rng.gen_range(size / 16..=size / 6);
            let y0 = 2 * rng.gen_range(0..(size - rh) / 2);
            let x0 = 2 * rng.gen_range(0..(size - rw) / 2);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    label[y * size + x] = 1;
                }
            }
        }
        let fg = label.iter().map(|&v| v as usize).sum::<usize>() as f64
            / (size * size) as f64;
        if (0.02..=0.30).contains(&fg) {
            break;
        }
    }

    let delta = rng.gen_range(0.15..0.4);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            // Skip one pixel in three inside every rectangle.
            if label[i] == 0 || (x + y) % 3 == 0 {
                continue;
            }
            for c in 0..3 {
                // Shift away from the nearest clip boundary.
                let d = if a[c][i] > 0.5 { -delta } else { delta };
                b[c][i] = (a[c][i] + d).clamp(0.0, 1.0);
            }
        }
    }
    (a, b, label)
}

/// Write a complete synthetic dataset: `pairs` tiles of `tile x tile` pixels
/// under `out`, split 4:1:1 into train / val / test manifests. Deterministic
/// in the seed.
pub fn generate_dataset(out: &Path, pairs: usize, tile: usize, seed: u64) -> Result<()> {
    if pairs < 6 {
        return Err(Error::config("need at least 6 pairs to populate all splits"));
    }
    if tile == 0 || tile % 32 != 0 {
        return Err(Error::config(format!(
            "tile size must be a positive multiple of 32, got {tile}"
        )));
    }
    for sub in ["A", "B", "label"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).at(&dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let name = format!("pair_{i:04}.png");
        let (a, b, label) = synth_pair(&mut rng, tile);
        save_rgb(&out.join("A").join(&name), &a, tile, tile)?;
        save_rgb(&out.join("B").join(&name), &b, tile, tile)?;
        save_mask(&out.join("label").join(&name), &label, tile, tile)?;
        names.push(name);
    }
    let held = pairs / 6;
    let train_end = pairs - 2 * held;
    for (split, range) in [
        ("train", 0..train_end),
        ("val", train_end..train_end + held),
        ("test", train_end + held..pairs),
    ] {
        let path = out.join(format!("{split}.txt"));
        let body: String = names[range].iter().map(|n| format!("{n}\n")).collect();
        std::fs::write(&path, body).at(&path)?;
    }
    Ok(())
}
