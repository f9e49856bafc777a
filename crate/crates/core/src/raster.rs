//! Multi-channel floating-point images.

use std::path::Path;

use crate::error::{AamError, Result};

/// Row-major image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(AamError::Input("empty raster".into()));
        }
        AamError::check_len(width * height * channels, data.len())?;
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Builds a single-channel raster from `f(x, y)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Raster {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, ch: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, ch: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + ch] = v;
    }

    /// Bilinear sample of every channel at `(x, y)`, clamping to the border.
    #[inline]
    pub fn sample(&self, x: f64, y: f64, out: &mut [f64]) {
        let xm = (self.width - 1) as f64;
        let ym = (self.height - 1) as f64;
        let x = x.clamp(0.0, xm);
        let y = y.clamp(0.0, ym);
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as usize;
        let y0 = y0 as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let c = self.channels;
        let i00 = (y0 * self.width + x0) * c;
        let i10 = (y0 * self.width + x1) * c;
        let i01 = (y1 * self.width + x0) * c;
        let i11 = (y1 * self.width + x1) * c;
        for (ch, o) in out.iter_mut().enumerate().take(c) {
            let top = self.data[i00 + ch] * (1.0 - fx) + self.data[i10 + ch] * fx;
            let bot = self.data[i01 + ch] * (1.0 - fx) + self.data[i11 + ch] * fx;
            *o = top * (1.0 - fy) + bot * fy;
        }
    }

    /// Catmull-Rom bicubic sample of every channel at `(x, y)`, clamping to
    /// the border. Exact at pixel centres and for quadratic data.
    pub fn sample_cubic(&self, x: f64, y: f64, out: &mut [f64]) {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor(), y.floor());
        let (wx, wy) = (catmull_rom(x - x0), catmull_rom(y - y0));
        let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
        let xs: [usize; 4] = std::array::from_fn(|k| clamp(x0 + k as f64 - 1.0, self.width));
        let ys: [usize; 4] = std::array::from_fn(|k| clamp(y0 + k as f64 - 1.0, self.height));
        let c = self.channels;
        for (ch, o) in out.iter_mut().enumerate().take(c) {
            let mut acc = 0.0;
            for (j, &yy) in ys.iter().enumerate() {
                let row: f64 = xs
                    .iter()
                    .zip(&wx)
                    .map(|(&xx, w)| w * self.data[(yy * self.width + xx) * c + ch])
                    .sum();
                acc += wy[j] * row;
            }
            *o = acc;
        }
    }

    /// Central differences, one-sided on the image border.
    pub fn gradient(&self) -> (Raster, Raster) {
        let mut gx = Raster::filled(self.width, self.height, self.channels, 0.0);
        let mut gy = gx.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for ch in 0..self.channels {
                    let dx = if self.width == 1 {
                        0.0
                    } else if x == 0 {
                        self.get(1, y, ch) - self.get(0, y, ch)
                    } else if x == self.width - 1 {
                        self.get(x, y, ch) - self.get(x - 1, y, ch)
                    } else {
                        0.5 * (self.get(x + 1, y, ch) - self.get(x - 1, y, ch))
                    };
                    let dy = if self.height == 1 {
                        0.0
                    } else if y == 0 {
                        self.get(x, 1, ch) - self.get(x, 0, ch)
                    } else if y == self.height - 1 {
                        self.get(x, y, ch) - self.get(x, y - 1, ch)
                    } else {
                        0.5 * (self.get(x, y + 1, ch) - self.get(x, y - 1, ch))
                    };
                    gx.set(x, y, ch, dx);
                    gy.set(x, y, ch, dy);
                }
            }
        }
        (gx, gy)
    }

    fn convolve_separable(&self, kernel: &[f64]) -> Raster {
        let r = (kernel.len() / 2) as isize;
        let (w, h, c) = (self.width as isize, self.height as isize, self.channels);
        let mut tmp = Raster::filled(self.width, self.height, c, 0.0);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, wt) in kernel.iter().enumerate() {
                        let xx = (x + k as isize - r).clamp(0, w - 1);
                        acc += wt * self.get(xx as usize, y as usize, ch);
                    }
                    tmp.set(x as usize, y as usize, ch, acc);
                }
            }
        }
        let mut out = Raster::filled(self.width, self.height, c, 0.0);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, wt) in kernel.iter().enumerate() {
                        let yy = (y + k as isize - r).clamp(0, h - 1);
                        acc += wt * tmp.get(x as usize, yy as usize, ch);
                    }
                    out.set(x as usize, y as usize, ch, acc);
                }
            }
        }
        out
    }

    /// Separable Gaussian blur with replicated borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Raster {
        if sigma <= 0.0 {
            return self.clone();
        }
        let r = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= s);
        self.convolve_separable(&kernel)
    }

    /// 3×3 box filter with replicated borders.
    pub fn box3(&self) -> Raster {
        self.convolve_separable(&[1.0 / 3.0; 3])
    }

    /// Keeps every second pixel in each direction (pixel `2x` becomes `x`).
    pub fn decimate2(&self) -> Raster {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut out = Raster::filled(w, h, self.channels, 0.0);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..self.channels {
                    out.set(x, y, ch, self.get(2 * x, 2 * y, ch));
                }
            }
        }
        out
    }

    /// One pyramid level down: Gaussian blur (sigma 1) then 2× decimation.
    pub fn pyramid_down(&self) -> Raster {
        self.gaussian_blur(PYRAMID_SIGMA).decimate2()
    }

    /// Rescales by `factor` so that pixel `x` maps to `x * factor`, with
    /// Gaussian prefiltering when shrinking.
    pub fn resize(&self, factor: f64) -> Result<Raster> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(AamError::Input(format!("invalid resize factor {factor}")));
        }
        if factor == 1.0 {
            return Ok(self.clone());
        }
        let src = if factor < 1.0 {
            self.gaussian_blur(0.5 * (1.0 / (factor * factor) - 1.0).sqrt())
        } else {
            self.clone()
        };
        let w = ((self.width as f64) * factor).round().max(1.0) as usize;
        let h = ((self.height as f64) * factor).round().max(1.0) as usize;
        let mut out = Raster::filled(w, h, self.channels, 0.0);
        let mut buf = vec![0.0; self.channels];
        for y in 0..h {
            for x in 0..w {
                src.sample(x as f64 / factor, y as f64 / factor, &mut buf);
                for (ch, v) in buf.iter().enumerate() {
                    out.set(x, y, ch, *v);
                }
            }
        }
        Ok(out)
    }

    /// Loads an 8/16-bit PNG or PNM file as a grayscale raster in `[0, 1]`.
    pub fn load(path: &Path) -> Result<Raster> {
        let img = image::open(path)
            .map_err(|e| AamError::Format(format!("{}: {e}", path.display())))?
            .into_luma16();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
        Raster::new(w as usize, h as usize, 1, data)
    }

    /// Writes the first channel as a 16-bit grayscale PNG, clamped to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u16> = (0..self.width * self.height)
            .map(|i| (self.data[i * self.channels].clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
            self.width as u32,
            self.height as u32,
            buf,
        )
        .ok_or_else(|| AamError::Format("raster buffer size".into()))?;
        img.save(path)
            .map_err(|e| AamError::Format(format!("{}: {e}", path.display())))
    }
}

/// Catmull-Rom weights for taps at offsets −1, 0, 1, 2 from the base pixel.
fn catmull_rom(t: f64) -> [f64; 4] {
    let (t2, t3) = (t * t, t * t * t);
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Blur applied before each 2× pyramid decimation.
pub const PYRAMID_SIGMA: f64 = 1.0;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_is_exact_on_ramps() {
        let r = Raster::from_fn(10, 8, |x, y| 2.0 * x as f64 - 0.5 * y as f64);
        let mut out = [0.0];
        r.sample(3.25, 4.5, &mut out);
        assert!((out[0] - (6.5 - 2.25)).abs() < 1e-12);
        r.sample(-3.0, 100.0, &mut out);
        assert!((out[0] - (0.0 - 3.5)).abs() < 1e-12);
    }

    #[test]
    fn cubic_is_exact_on_quadratics_and_pixel_centres() {
        let q = |x: f64, y: f64| 0.3 * x * x - x * y + 2.0 * y + 1.0;
        let r = Raster::from_fn(10, 8, |x, y| q(x as f64, y as f64));
        let mut out = [0.0];
        r.sample_cubic(4.3, 3.6, &mut out);
        assert!((out[0] - q(4.3, 3.6)).abs() < 1e-12);
        r.sample_cubic(2.0, 5.0, &mut out);
        assert_eq!(out[0], q(2.0, 5.0));
    }

    #[test]
    fn gradient_of_ramp_is_constant() {
        let r = Raster::from_fn(6, 5, |x, y| 3.0 * x as f64 + y as f64);
        let (gx, gy) = r.gradient();
        assert!(gx.data().iter().all(|v| (v - 3.0).abs() < 1e-12));
        assert!(gy.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn blur_preserves_constants_and_decimation_halves() {
        let r = Raster::filled(9, 7, 2, 0.25);
        let b = r.gaussian_blur(1.0);
        assert!(b.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
        let d = b.decimate2();
        assert_eq!((d.width(), d.height(), d.channels()), (5, 4, 2));
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let r = Raster::from_fn(5, 4, |x, y| (x + y) as f64 / 7.0);
        r.save_png(&p).unwrap();
        let back = Raster::load(&p).unwrap();
        for (a, b) in r.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
