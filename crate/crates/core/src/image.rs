//! RGB images as `3×H×W` tensors with values in `[0, 1]`.

use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::ops::reflect_index;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor);

impl Image {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let (c, h, w) = tensor.dims3()?;
        if c != 3 {
            return Err(shape_err!("images have 3 channels, got {c}"));
        }
        if h == 0 || w == 0 {
            return Err(shape_err!("empty image {h}×{w}"));
        }
        Ok(Image(tensor))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image(Tensor::full(&[3, height, width], value))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn clamped(&self) -> Image {
        Image(self.0.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut t = Tensor::zeros(&[3, h, w]);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                t.set3(c, y as usize, x as usize, f64::from(px[c]) / 255.0);
            }
        }
        Image(t)
    }

    /// Clamps to `[0, 1]` and rounds to 8 bits.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = self.dims();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.0.at3(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Builds `3×h×w` from `f(c, y, x)`.
    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(c, y, x));
                }
            }
        }
        Image(Tensor::from_vec(&[3, h, w], data).expect("length matches shape"))
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.at3(c, y, x)
    }

    /// The `h×w` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Image> {
        let (ih, iw) = self.dims();
        if y + h > ih || x + w > iw || h == 0 || w == 0 {
            return Err(shape_err!("crop {h}×{w} at ({y}, {x}) outside {ih}×{iw}"));
        }
        Ok(Self::from_fn(h, w, |c, yy, xx| self.at(c, y + yy, x + xx)))
    }

    /// Mirror-extends the bottom and right edges up to at least `h×w`.
    pub fn reflect_pad_to(&self, h: usize, w: usize) -> Image {
        let (ih, iw) = self.dims();
        let (oh, ow) = (h.max(ih), w.max(iw));
        Self::from_fn(oh, ow, |c, y, x| {
            self.at(c, reflect_index(y as isize, ih), reflect_index(x as isize, iw))
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        let (h, w) = self.dims();
        Self::from_fn(h, w, |c, y, x| self.at(c, y, w - 1 - x))
    }

    /// Rotates by `k·90°` counter-clockwise.
    pub fn rot90(&self, k: usize) -> Image {
        let (h, w) = self.dims();
        match k % 4 {
            0 => self.clone(),
            1 => Self::from_fn(w, h, |c, y, x| self.at(c, x, w - 1 - y)),
            2 => Self::from_fn(h, w, |c, y, x| self.at(c, h - 1 - y, w - 1 - x)),
            _ => Self::from_fn(w, h, |c, y, x| self.at(c, h - 1 - x, y)),
        }
    }

    /// Decodes an 8-bit PNG/JPEG.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_roundtrip_is_exact() {
        let img = image::RgbImage::from_fn(5, 4, |x, y| image::Rgb([x as u8 * 50, y as u8 * 60, 255]));
        let back = Image::from_rgb8(&img).to_rgb8();
        assert_eq!(back, img);
    }

    #[test]
    fn four_quarter_turns_and_two_flips_are_identity() {
        let img = Image::from_fn(3, 5, |c, y, x| (c * 100 + y * 10 + x) as f64);
        let mut r = img.clone();
        for _ in 0..4 {
            r = r.rot90(1);
        }
        assert_eq!(r, img);
        assert_eq!(img.rot90(1).rot90(1), img.rot90(2));
        assert_eq!(img.rot90(3).rot90(1), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        // (y, x) = (0, 4) is the top-right corner; a left turn moves it top-left.
        assert_eq!(img.rot90(1).at(0, 0, 0), img.at(0, 0, 4));
    }

    #[test]
    fn crop_and_pad() {
        let img = Image::from_fn(4, 4, |_, y, x| (y * 4 + x) as f64);
        assert_eq!(img.crop(0, 0, 4, 4).unwrap(), img);
        assert!(img.crop(1, 0, 4, 4).is_err());
        let p = img.reflect_pad_to(6, 5);
        assert_eq!(p.dims(), (6, 5));
        assert_eq!(p.at(0, 4, 4), img.at(0, 2, 2));
        assert_eq!(p.crop(0, 0, 4, 4).unwrap(), img);
    }

    #[test]
    fn rejects_non_rgb() {
        assert!(Image::new(Tensor::zeros(&[1, 4, 4])).is_err());
    }
}
