use std::path::Path;

use super::{FeatureError, FeatureSet, Keypoint};
use crate::FrameId;

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Value with coordinates clamped to the image.
    pub fn clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let img = image::open(path).map_err(|e| FeatureError::Image(e.to_string()))?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        let data = luma.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Ok(Self::new(w as usize, h as usize, data))
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| FeatureError::Image("buffer size".into()))?;
        buf.save(path).map_err(|e| FeatureError::Image(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractConfig {
    /// Non-maximum suppression radius (Chebyshev distance, pixels).
    pub nms_radius: usize,
    /// Half-width of the structure tensor window.
    pub window_radius: usize,
    pub harris_k: f64,
    /// Minimum corner response.
    pub threshold: f64,
    /// Side of the square descriptor patch.
    pub patch_size: usize,
    pub max_features: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            nms_radius: 4,
            window_radius: 2,
            harris_k: 0.04,
            threshold: 1e-4,
            patch_size: 8,
            max_features: 1000,
        }
    }
}

/// Harris response `det(M) - k trace(M)^2` with central-difference gradients
/// (zero on the border) summed over a square window clipped to the image.
pub fn harris_response(img: &GrayImage, window_radius: usize, k: f64) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = 0.5 * (img.get(x + 1, y) - img.get(x - 1, y));
            let gy = 0.5 * (img.get(x, y + 1) - img.get(x, y - 1));
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let sxx = box_sum(&ixx, w, h, window_radius);
    let syy = box_sum(&iyy, w, h, window_radius);
    let sxy = box_sum(&ixy, w, h, window_radius);
    (0..w * h)
        .map(|i| {
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - k * tr * tr
        })
        .collect()
}

/// Window sums via a summed-area table.
fn box_sum(v: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut sat = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v[y * w + x];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            out[y * w + x] = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                + sat[y0 * (w + 1) + x0];
        }
    }
    out
}

/// Pixels whose response exceeds `threshold` and is a maximum within
/// `radius`; among equal responses the first in raster order wins.
pub(crate) fn local_maxima(resp: &[f64], w: usize, h: usize, radius: usize, threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let r = resp[y * w + x];
            if !(r > threshold) {
                continue;
            }
            let mut keep = true;
            'scan: for ny in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                for nx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                    if (nx, ny) == (x, y) {
                        continue;
                    }
                    let o = resp[ny * w + nx];
                    let earlier = (ny, nx) < (y, x);
                    if o > r || (earlier && o == r) {
                        keep = false;
                        break 'scan;
                    }
                }
            }
            if keep {
                out.push((x, y));
            }
        }
    }
    out
}

/// Offset of a parabola's vertex through three samples, clamped to half a pixel.
fn parabola_offset(l: f64, c: f64, r: f64) -> f64 {
    let denom = l - 2.0 * c + r;
    if denom.abs() < 1e-18 {
        return 0.0;
    }
    (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
}

/// Harris corners with non-maximum suppression and mean-subtracted,
/// normalized intensity patches as descriptors.
pub fn extract_features(frame_id: FrameId, img: &GrayImage, config: &ExtractConfig) -> FeatureSet {
    let dim = config.patch_size * config.patch_size;
    if img.width == 0 || img.height == 0 {
        return FeatureSet::empty(frame_id, dim);
    }
    let (w, h) = (img.width, img.height);
    let resp = harris_response(img, config.window_radius, config.harris_k);
    let mut peaks = local_maxima(&resp, w, h, config.nms_radius, config.threshold);
    if peaks.len() > config.max_features {
        // strongest first, raster order on ties, then restore raster order
        peaks.sort_by(|a, b| {
            resp[b.1 * w + b.0]
                .total_cmp(&resp[a.1 * w + a.0])
                .then((a.1, a.0).cmp(&(b.1, b.0)))
        });
        peaks.truncate(config.max_features);
        peaks.sort_by_key(|&(x, y)| (y, x));
    }

    let half = config.patch_size as isize / 2;
    let mut keypoints = Vec::new();
    let mut descriptors = Vec::new();
    for (x, y) in peaks {
        let mut patch = Vec::with_capacity(dim);
        for dy in 0..config.patch_size as isize {
            for dx in 0..config.patch_size as isize {
                patch.push(img.clamped(x as isize + dx - half, y as isize + dy - half));
            }
        }
        let mean = patch.iter().sum::<f64>() / dim as f64;
        patch.iter_mut().for_each(|v| *v -= mean);
        let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        patch.iter_mut().for_each(|v| *v /= norm);

        let at = |xx: usize, yy: usize| resp[yy * w + xx];
        let c = at(x, y);
        let ox = if x > 0 && x + 1 < w { parabola_offset(at(x - 1, y), c, at(x + 1, y)) } else { 0.0 };
        let oy = if y > 0 && y + 1 < h { parabola_offset(at(x, y - 1), c, at(x, y + 1)) } else { 0.0 };
        let kx = (x as f64 + ox).clamp(0.0, w as f64 - 1.0);
        let ky = (y as f64 + oy).clamp(0.0, h as f64 - 1.0);
        keypoints.push(Keypoint {
            x: kx,
            y: ky,
            response: c,
        });
        descriptors.extend(patch);
    }
    FeatureSet {
        frame_id,
        keypoints,
        dim,
        descriptors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct per-pixel evaluation of the same response definition.
    fn response_oracle(img: &GrayImage, r: usize, k: f64) -> Vec<f64> {
        let (w, h) = (img.width as isize, img.height as isize);
        let grad = |x: isize, y: isize| -> (f64, f64) {
            if x < 1 || y < 1 || x >= w - 1 || y >= h - 1 {
                return (0.0, 0.0);
            }
            let g = |xx: isize, yy: isize| img.get(xx as usize, yy as usize);
            (0.5 * (g(x + 1, y) - g(x - 1, y)), 0.5 * (g(x, y + 1) - g(x, y - 1)))
        };
        let r = r as isize;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                        let (gx, gy) = grad(xx, yy);
                        a += gx * gx;
                        b += gy * gy;
                        c += gx * gy;
                    }
                }
                out.push(a * b - c * c - k * (a + b) * (a + b));
            }
        }
        out
    }

    #[test]
    fn constant_image_has_no_features() {
        let img = GrayImage::filled(32, 32, 0.4);
        assert!(extract_features(0, &img, &ExtractConfig::default()).is_empty());
    }

    #[test]
    fn single_bright_pixel_is_detected() {
        let mut img = GrayImage::filled(32, 32, 0.0);
        img.set(13, 17, 1.0);
        let f = extract_features(0, &img, &ExtractConfig::default());
        assert!(!f.is_empty());
        assert!(f
            .keypoints
            .iter()
            .any(|k| (k.x - 13.0).abs() <= 1.0 && (k.y - 17.0).abs() <= 1.0));
    }

    #[test]
    fn checkerboard_count_matches_exhaustive_scan() {
        let mut img = GrayImage::filled(64, 64, 0.0);
        for y in 0..64 {
            for x in 0..64 {
                if ((x / 8) + (y / 8)) % 2 == 0 {
                    img.set(x, y, 1.0);
                }
            }
        }
        let cfg = ExtractConfig::default();
        let resp = response_oracle(&img, cfg.window_radius, cfg.harris_k);
        let fast = harris_response(&img, cfg.window_radius, cfg.harris_k);
        for (a, b) in resp.iter().zip(&fast) {
            assert!((a - b).abs() < 1e-12);
        }
        // exhaustive scan: strict local maximum over the full neighbourhood,
        // equal values resolved in raster order
        let mut count = 0;
        for y in 0..64i64 {
            for x in 0..64i64 {
                let r = resp[(y * 64 + x) as usize];
                if r <= cfg.threshold {
                    continue;
                }
                let n = cfg.nms_radius as i64;
                let dominated = (-n..=n).any(|dy| {
                    (-n..=n).any(|dx| {
                        let (xx, yy) = (x + dx, y + dy);
                        if (dx, dy) == (0, 0) || xx < 0 || yy < 0 || xx >= 64 || yy >= 64 {
                            return false;
                        }
                        let o = resp[(yy * 64 + xx) as usize];
                        o > r || (o == r && (yy, xx) < (y, x))
                    })
                });
                if !dominated {
                    count += 1;
                }
            }
        }
        let f = extract_features(0, &img, &cfg);
        assert!(count > 0);
        assert_eq!(f.len(), count);
    }

    #[test]
    fn extraction_is_deterministic_with_unit_descriptors() {
        let mut img = GrayImage::filled(48, 40, 0.0);
        let mut s = 12345u64;
        for v in img.data.iter_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = (s >> 40) as f64 / (1u64 << 24) as f64;
        }
        let cfg = ExtractConfig::default();
        let a = extract_features(3, &img, &cfg);
        let b = extract_features(3, &img, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.dim, 64);
        for (k, row) in a.keypoints.iter().zip(a.descriptor_rows()) {
            assert!(k.x >= 0.0 && k.x < 48.0 && k.y >= 0.0 && k.y < 40.0);
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
