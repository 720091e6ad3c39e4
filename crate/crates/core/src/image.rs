//! Small RGB float images and the two resampling routines the visual
//! embedding needs: area down-scaling for the global view and bilinear
//! crop-and-resize for the region view.

use crate::synthworld::BBox;

/// Row-major `H x W x 3` image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// 8-bit RGBA buffer, e.g. for PNG encoding or a browser canvas.
    pub fn to_rgba8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.width * self.height * 4);
        for px in self.data.chunks_exact(3) {
            for &v in px {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    /// Down-scales by box-filter averaging. Non-integer ratios weight the
    /// partially covered source pixels by their overlap.
    pub fn resize_area(&self, out_w: usize, out_h: usize) -> Image {
        let sx = self.width as f64 / out_w as f64;
        let sy = self.height as f64 / out_h as f64;
        let mut out = Image::filled(out_w, out_h, 0.0);
        for oy in 0..out_h {
            let y0 = oy as f64 * sy;
            let y1 = y0 + sy;
            for ox in 0..out_w {
                let x0 = ox as f64 * sx;
                let x1 = x0 + sx;
                let mut acc = [0.0f64; 3];
                let mut area = 0.0;
                let mut y = y0.floor() as usize;
                while (y as f64) < y1 && y < self.height {
                    let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                    let mut x = x0.floor() as usize;
                    while (x as f64) < x1 && x < self.width {
                        let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                        let w = wx * wy;
                        let p = self.pixel(x, y);
                        for c in 0..3 {
                            acc[c] += w * p[c] as f64;
                        }
                        area += w;
                        x += 1;
                    }
                    y += 1;
                }
                let rgb = [
                    (acc[0] / area) as f32,
                    (acc[1] / area) as f32,
                    (acc[2] / area) as f32,
                ];
                out.set_pixel(ox, oy, rgb);
            }
        }
        out
    }

    /// Crops `bbox` (pixel coordinates of this image) and bilinearly resizes
    /// the crop to `out_w x out_h`. Sample positions use pixel-centre
    /// alignment and clamp at the crop border.
    pub fn crop_resize(&self, bbox: &BBox, out_w: usize, out_h: usize) -> Image {
        let mut out = Image::filled(out_w, out_h, 0.0);
        let bw = bbox.w as f64;
        let bh = bbox.h as f64;
        let x_lo = bbox.x as f64;
        let y_lo = bbox.y as f64;
        let x_max = (bbox.x + bbox.w - 1) as f64;
        let y_max = (bbox.y + bbox.h - 1) as f64;
        for oy in 0..out_h {
            let sy = (y_lo + (oy as f64 + 0.5) * bh / out_h as f64 - 0.5).clamp(y_lo, y_max);
            let y0 = sy.floor();
            let fy = sy - y0;
            let y0 = y0 as usize;
            let y1 = (y0 + 1).min(y_max as usize);
            for ox in 0..out_w {
                let sx = (x_lo + (ox as f64 + 0.5) * bw / out_w as f64 - 0.5).clamp(x_lo, x_max);
                let x0 = sx.floor();
                let fx = sx - x0;
                let x0 = x0 as usize;
                let x1 = (x0 + 1).min(x_max as usize);
                let mut rgb = [0.0f32; 3];
                for (c, v) in rgb.iter_mut().enumerate() {
                    let top = self.get(x0, y0, c) as f64 * (1.0 - fx) + self.get(x1, y0, c) as f64 * fx;
                    let bot = self.get(x0, y1, c) as f64 * (1.0 - fx) + self.get(x1, y1, c) as f64 * fx;
                    *v = (top * (1.0 - fy) + bot * fy) as f32;
                }
                out.set_pixel(ox, oy, rgb);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_resize_of_constant_is_constant() {
        let img = Image::filled(96, 96, 0.25);
        let small = img.resize_area(48, 48);
        assert!(small.data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
        let odd = img.resize_area(40, 40);
        assert!(odd.data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn area_resize_averages_blocks() {
        let mut img = Image::filled(4, 4, 0.0);
        img.set_pixel(0, 0, [1.0, 1.0, 1.0]);
        let small = img.resize_area(2, 2);
        assert!((small.get(0, 0, 0) - 0.25).abs() < 1e-6);
        assert_eq!(small.get(1, 1, 0), 0.0);
    }

    #[test]
    fn full_crop_at_same_size_is_identity() {
        let mut img = Image::filled(8, 8, 0.0);
        for y in 0..8 {
            for x in 0..8 {
                img.set_pixel(x, y, [x as f32 / 8.0, y as f32 / 8.0, 0.5]);
            }
        }
        let bbox = BBox { x: 0, y: 0, w: 8, h: 8 };
        let out = img.crop_resize(&bbox, 8, 8);
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_of_uniform_region_is_uniform() {
        let mut img = Image::filled(16, 16, 0.5);
        for y in 4..10 {
            for x in 4..10 {
                img.set_pixel(x, y, [1.0, 0.0, 0.0]);
            }
        }
        let out = img.crop_resize(&BBox { x: 4, y: 4, w: 6, h: 6 }, 12, 12);
        assert!(out.data.chunks(3).all(|p| p == [1.0, 0.0, 0.0]));
    }
}
