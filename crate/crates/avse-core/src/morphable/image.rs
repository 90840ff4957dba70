//! Grayscale images, PGM interchange and the 67x67 lip crop.

use nalgebra::Vector2;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CROP_SIZE: usize = 67;

/// Grayscale image, row-major, intensities in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0.0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel coordinates; out-of-bounds is 0.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return 0.0;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// 67x67 standardized lip crop.
#[derive(Debug, Clone)]
pub struct LipCrop {
    pub image: Image,
    /// Mean and std of the raw crop before standardization.
    pub mean: f64,
    pub std: f64,
}

/// Square crop centered on the lip-landmark centroid with side
/// 1.4 x max(bbox width, height), resampled to 67x67 and standardized.
///
/// Landmarks are in pixel coordinates of `image`.
pub fn crop_lip_region(image: &Image, lip_landmarks_2d: &[Vector2<f64>]) -> Result<LipCrop> {
    let inside = lip_landmarks_2d
        .iter()
        .filter(|p| {
            p.x >= 0.0 && p.y >= 0.0 && p.x <= (image.width - 1) as f64
                && p.y <= (image.height - 1) as f64
        })
        .count();
    if inside < 4 {
        return Err(Error::LandmarksOutOfFrame(format!(
            "{inside} lip landmarks inside the image, need 4"
        )));
    }
    let n = lip_landmarks_2d.len() as f64;
    let cx = lip_landmarks_2d.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = lip_landmarks_2d.iter().map(|p| p.y).sum::<f64>() / n;
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in lip_landmarks_2d {
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    let side = 1.4 * (max_x - min_x).max(max_y - min_y);
    if side <= 0.0 {
        return Err(Error::LandmarksOutOfFrame("lip landmarks coincide".into()));
    }

    let mut crop = Image::new(CROP_SIZE, CROP_SIZE);
    let step = side / (CROP_SIZE - 1) as f64;
    for v in 0..CROP_SIZE {
        for u in 0..CROP_SIZE {
            let x = cx - side / 2.0 + u as f64 * step;
            let y = cy - side / 2.0 + v as f64 * step;
            crop.set(u, v, image.sample_bilinear(x, y));
        }
    }

    let np = crop.pixels.len() as f64;
    let mean = crop.pixels.iter().sum::<f64>() / np;
    let var = crop.pixels.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / np;
    let std = var.sqrt();
    for p in crop.pixels.iter_mut() {
        *p -= mean;
        if std > 1e-12 {
            *p /= std;
        }
    }
    Ok(LipCrop { image: crop, mean, std })
}

/// Write an 8-bit binary PGM (P5). Intensities are clamped to [0,1].
pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    let mut out = Vec::with_capacity(image.pixels.len() + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", image.width, image.height).as_bytes());
    for &p in &image.pixels {
        out.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    // header: magic, width, height, maxval as whitespace-separated tokens
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    if tokens.len() < 4 || tokens[0] != "P5" {
        return Err(Error::BadFile("not a binary PGM".into()));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::BadFile(format!("bad PGM header: {e}")))
    };
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::BadFile(format!("PGM maxval {maxval}, want 255")));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + w * h {
        return Err(Error::BadFile("truncated PGM data".into()));
    }
    let pixels = bytes[pos..pos + w * h].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image { width: w, height: h, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, x as f64 / (w - 1) as f64);
            }
        }
        img
    }

    fn box_landmarks(cx: f64, cy: f64, hw: f64, hh: f64) -> Vec<Vector2<f64>> {
        vec![
            Vector2::new(cx - hw, cy - hh),
            Vector2::new(cx + hw, cy - hh),
            Vector2::new(cx + hw, cy + hh),
            Vector2::new(cx - hw, cy + hh),
        ]
    }

    #[test]
    fn constant_image_crop_is_zero() {
        let mut img = Image::new(100, 100);
        img.pixels.iter_mut().for_each(|p| *p = 0.6);
        let crop = crop_lip_region(&img, &box_landmarks(50.0, 50.0, 10.0, 6.0)).unwrap();
        assert_eq!(crop.image.width, CROP_SIZE);
        assert_eq!(crop.image.height, CROP_SIZE);
        assert!(crop.std < 1e-12);
        assert!(crop.image.pixels.iter().all(|&p| p.abs() < 1e-12));
    }

    #[test]
    fn crop_is_standardized() {
        let img = gradient_image(120, 90);
        let crop = crop_lip_region(&img, &box_landmarks(60.0, 45.0, 15.0, 8.0)).unwrap();
        let n = crop.image.pixels.len() as f64;
        let mean = crop.image.pixels.iter().sum::<f64>() / n;
        let var = crop.image.pixels.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn crop_center_matches_gradient_value() {
        let img = gradient_image(120, 90);
        let (cx, cy) = (60.0, 45.0);
        let crop = crop_lip_region(&img, &box_landmarks(cx, cy, 15.0, 8.0)).unwrap();
        // undo the standardization to compare against the source value
        let c = CROP_SIZE / 2;
        let raw = crop.image.get(c, c) * crop.std + crop.mean;
        let expected = img.sample_bilinear(cx, cy);
        assert!((raw - expected).abs() < 1e-2, "raw {raw} vs {expected}");
    }

    #[test]
    fn landmarks_out_of_frame_rejected() {
        let img = gradient_image(50, 50);
        let lms = box_landmarks(200.0, 200.0, 5.0, 5.0);
        assert!(matches!(
            crop_lip_region(&img, &lms),
            Err(Error::LandmarksOutOfFrame(_))
        ));
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = gradient_image(33, 17);
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.width, 33);
        assert_eq!(back.height, 17);
        for (a, b) in back.pixels.iter().zip(&img.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
