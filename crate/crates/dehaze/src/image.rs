//! Image representation and basic manipulation.
//!
//! An [`ImageArray`] is an `H x W x C` array of intensities in `[0, 1]`,
//! `C` in `{1, 3}`. Files decode from 8-bit via `v / 255` and encode via
//! `round(v * 255)`.

use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{DehazeError, Result};
use crate::tensor::Element;

/// Luminance weights (ITU-R BT.601).
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug)]
pub struct ImageArray<El: Element> {
    data: Array3<El>,
}

pub type Image = ImageArray<f64>;

impl<El: Element> ImageArray<El> {
    /// Wrap an `H x W x C` array, clamping every element to `[0, 1]`.
    pub fn new(data: Array3<El>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(DehazeError::invalid("image must have H >= 1 and W >= 1"));
        }
        if c != 1 && c != 3 {
            return Err(DehazeError::invalid(format!(
                "image must have 1 or 3 channels, got {c}"
            )));
        }
        let zero = El::zero();
        let one = El::one();
        let data = data.mapv(|v| v.max(zero).min(one));
        Ok(ImageArray { data })
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn((h, w, c), |(i, j, k)| El::of(f(i, j, k))))
    }

    pub fn constant(h: usize, w: usize, c: usize, v: f64) -> Result<Self> {
        Self::new(Array3::from_elem((h, w, c), El::of(v)))
    }

    pub fn data(&self) -> &Array3<El> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.data.dim() == other.data.dim()
    }

    /// BT.601 luminance of an RGB image.
    pub fn to_luminance(&self) -> Result<Self> {
        if self.channels() != 3 {
            return Err(DehazeError::invalid(format!(
                "to_luminance expects 3 channels, got {}",
                self.channels()
            )));
        }
        let (h, w, _) = self.data.dim();
        let wr = El::of(LUMA_WEIGHTS[0]);
        let wg = El::of(LUMA_WEIGHTS[1]);
        let wb = El::of(LUMA_WEIGHTS[2]);
        let out = Array3::from_shape_fn((h, w, 1), |(i, j, _)| {
            wr * self.data[[i, j, 0]] + wg * self.data[[i, j, 1]] + wb * self.data[[i, j, 2]]
        });
        Self::new(out)
    }

    /// Deterministic seeded crop to `size x size`.
    pub fn random_crop(&self, size: usize, seed: u64) -> Result<Self> {
        let (oy, ox) = crop_offsets(self.height(), self.width(), size, seed)?;
        self.crop_at(oy, ox, size)
    }

    pub fn crop_at(&self, oy: usize, ox: usize, size: usize) -> Result<Self> {
        if oy + size > self.height() || ox + size > self.width() {
            return Err(DehazeError::invalid("crop window out of bounds"));
        }
        let sub = self
            .data
            .slice(ndarray::s![oy..oy + size, ox..ox + size, ..])
            .to_owned();
        Self::new(sub)
    }

    /// Channel-first `[C, H, W]` layout for the network.
    pub fn to_chw(&self) -> ArrayD<El> {
        let (h, w, c) = self.data.dim();
        ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |ix| self.data[[ix[1], ix[2], ix[0]]])
    }

    /// Back from `[C, H, W]`, clamping to `[0, 1]`.
    pub fn from_chw(chw: &ArrayD<El>) -> Result<Self> {
        if chw.ndim() != 3 {
            return Err(DehazeError::invalid("from_chw expects a 3-d array"));
        }
        let (c, h, w) = (chw.shape()[0], chw.shape()[1], chw.shape()[2]);
        Self::new(Array3::from_shape_fn((h, w, c), |(i, j, k)| chw[[k, i, j]]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| DehazeError::Image {
            path: path.display().to_string(),
            source: e,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let scale = El::of(1.0 / 255.0);
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(i, j, k)| {
            El::of(rgb.get_pixel(j as u32, i as u32)[k] as f64) * scale
        });
        Self::new(data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w, c) = self.data.dim();
        let to_u8 = |v: El| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8;
        let buf: Vec<u8> = if c == 3 {
            self.data.iter().map(|&v| to_u8(v)).collect()
        } else {
            self.data
                .iter()
                .flat_map(|&v| {
                    let b = to_u8(v);
                    [b, b, b]
                })
                .collect()
        };
        let img: image::RgbImage =
            image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer size");
        img.save(path).map_err(|e| DehazeError::Image {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Seeded crop offsets; identical `(h, w, size, seed)` give identical offsets.
pub fn crop_offsets(h: usize, w: usize, size: usize, seed: u64) -> Result<(usize, usize)> {
    if size == 0 || h < size || w < size {
        return Err(DehazeError::invalid(format!(
            "image {h}x{w} smaller than crop size {size}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let oy = rng.gen_range(0..=h - size);
    let ox = rng.gen_range(0..=w - size);
    Ok((oy, ox))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luminance_of_primaries() {
        let white = Image::constant(2, 2, 3, 1.0).unwrap();
        let lum = white.to_luminance().unwrap();
        assert!(lum.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let black = Image::constant(2, 2, 3, 0.0).unwrap();
        assert!(black.to_luminance().unwrap().data().iter().all(|&v| v == 0.0));

        let red = Image::from_fn(2, 2, 3, |_, _, c| if c == 0 { 1.0 } else { 0.0 }).unwrap();
        let lum = red.to_luminance().unwrap();
        assert!(lum.data().iter().all(|&v| (v - 0.299).abs() < 1e-12));
    }

    #[test]
    fn luminance_of_gray_is_identity() {
        let gray = Image::from_fn(4, 5, 3, |i, j, _| (i * 5 + j) as f64 / 40.0).unwrap();
        let lum = gray.to_luminance().unwrap();
        for i in 0..4 {
            for j in 0..5 {
                assert!((lum.data()[[i, j, 0]] - gray.data()[[i, j, 0]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn luminance_rejects_single_channel() {
        let g = Image::constant(2, 2, 1, 0.5).unwrap();
        assert!(g.to_luminance().is_err());
    }

    #[test]
    fn crop_determinism_and_bounds() {
        let img = Image::from_fn(30, 30, 3, |i, j, k| {
            ((i * 31 + j * 7 + k * 3) % 97) as f64 / 96.0
        })
        .unwrap();
        let a = img.random_crop(16, 42).unwrap();
        let b = img.random_crop(16, 42).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.height(), 16);

        // identity crop when size == H == W
        let sq = Image::constant(8, 8, 3, 0.3).unwrap();
        let c = sq.random_crop(8, 7).unwrap();
        assert_eq!(c.data(), sq.data());

        assert!(img.random_crop(31, 0).is_err());
    }

    #[test]
    fn crop_is_contiguous_subwindow() {
        let img = Image::from_fn(20, 20, 3, |i, j, k| ((i * 20 + j + k) % 50) as f64 / 49.0).unwrap();
        let (oy, ox) = crop_offsets(20, 20, 8, 5).unwrap();
        let c = img.crop_at(oy, ox, 8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..3 {
                    assert_eq!(c.data()[[i, j, k]], img.data()[[oy + i, ox + j, k]]);
                }
            }
        }
    }

    #[test]
    fn chw_round_trip() {
        let img = Image::from_fn(5, 6, 3, |i, j, k| ((i + 2 * j + 3 * k) % 11) as f64 / 10.0).unwrap();
        let chw = img.to_chw();
        assert_eq!(chw.shape(), &[3, 5, 6]);
        let back = Image::from_chw(&chw).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn new_clamps_and_validates() {
        let arr = Array3::from_elem((2, 2, 3), 1.7);
        let img = Image::new(arr).unwrap();
        assert!(img.data().iter().all(|&v| v <= 1.0));
        assert!(Image::new(Array3::<f64>::zeros((2, 2, 2))).is_err());
    }
}
