//! Single-band images and their PNG encoding.
//!
//! RGB images are stored as 8-bit RGB PNGs, single bands as 16-bit grayscale
//! PNGs. Values map linearly onto [0, 1].

use std::path::Path;

use image::{ColorType, ImageDecoder, ImageReader};

use crate::band::Band;
use crate::error::{Error, Result};

/// Row-major `height x width x channels` image for one band.
///
/// Rendered images may temporarily leave [0, 1] (the renderer only clamps
/// colors from below); [`SpectralImage::clamped`] applies the write-out clamp.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralImage {
    band: Band,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl SpectralImage {
    pub fn zeros(band: Band, width: usize, height: usize) -> Self {
        SpectralImage {
            band,
            width,
            height,
            data: vec![0.0; width * height * band.channel_count()],
        }
    }

    pub fn filled(band: Band, width: usize, height: usize, value: f64) -> Self {
        SpectralImage {
            band,
            width,
            height,
            data: vec![value; width * height * band.channel_count()],
        }
    }

    pub fn from_data(band: Band, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let expected = width * height * band.channel_count();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} {band} image (expected {expected})",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!("non-finite value {v}")));
        }
        Ok(SpectralImage {
            band,
            width,
            height,
            data,
        })
    }

    pub fn band(&self) -> Band {
        self.band
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.band.channel_count()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels() + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    /// Extracts one channel as a dense `height x width` plane.
    pub fn channel_plane(&self, c: usize) -> Vec<f64> {
        let ch = self.channels();
        self.data.iter().skip(c).step_by(ch).copied().collect()
    }

    pub fn same_shape(&self, other: &SpectralImage) -> Result<()> {
        if self.band != other.band {
            return Err(Error::BandMismatch(format!("{} vs {}", self.band, other.band)));
        }
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// True when every value is finite and in [0, 1].
    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Copy with every value clamped to [0, 1].
    pub fn clamped(&self) -> SpectralImage {
        SpectralImage {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    /// Copy rounded to the precision of this band's PNG encoding.
    pub fn quantized(&self) -> SpectralImage {
        let levels = png_levels(self.band);
        SpectralImage {
            data: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * levels).round() / levels)
                .collect(),
            ..self.clone()
        }
    }

    /// Writes the image as PNG after the [0, 1] write-out clamp.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let levels = png_levels(self.band);
        let w = self.width as u32;
        let h = self.height as u32;
        match self.band {
            Band::Rgb => {
                let buf: Vec<u8> = self
                    .data
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * levels).round() as u8)
                    .collect();
                image::save_buffer(path, &buf, w, h, ColorType::Rgb8)?;
            }
            _ => {
                let buf: Vec<u16> = self
                    .data
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * levels).round() as u16)
                    .collect();
                let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, buf)
                    .ok_or_else(|| Error::InvalidImage("buffer size".into()))?;
                img.save(path)?;
            }
        }
        Ok(())
    }

    /// Decodes a PNG written by [`SpectralImage::save_png`].
    pub fn load_png(path: &Path, band: Band) -> Result<Self> {
        let header = probe_png(path)?;
        check_color(&header, band, path)?;
        let img = ImageReader::open(path)?.decode()?;
        let (w, h) = (header.width, header.height);
        let data: Vec<f64> = match band {
            Band::Rgb => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            _ => img
                .to_luma16()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 65535.0)
                .collect(),
        };
        SpectralImage::from_data(band, w, h, data)
    }
}

fn png_levels(band: Band) -> f64 {
    match band {
        Band::Rgb => 255.0,
        _ => 65535.0,
    }
}

/// Header facts read without decoding pixel data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageHeader {
    pub width: usize,
    pub height: usize,
    pub color: ColorType,
}

pub fn probe_png(path: &Path) -> Result<ImageHeader> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let decoder = ImageReader::open(path)?.with_guessed_format()?.into_decoder()?;
    let (w, h) = decoder.dimensions();
    Ok(ImageHeader {
        width: w as usize,
        height: h as usize,
        color: decoder.color_type(),
    })
}

/// Checks that a PNG's color layout matches the channel count of `band`.
pub fn check_color(header: &ImageHeader, band: Band, path: &Path) -> Result<()> {
    let channels = header.color.channel_count() as usize;
    let ok = match band {
        Band::Rgb => header.color == ColorType::Rgb8,
        _ => matches!(header.color, ColorType::L16 | ColorType::L8),
    };
    if !ok {
        return Err(Error::BandMismatch(format!(
            "{} has {channels} channel(s) ({:?}), band {band} needs {}",
            path.display(),
            header.color,
            band.channel_count()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        for band in Band::ALL {
            let n = 5 * 4 * band.channel_count();
            let data: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
            let img = SpectralImage::from_data(band, 5, 4, data).unwrap();
            let path = dir.path().join(format!("{band}.png"));
            img.save_png(&path).unwrap();
            let back = SpectralImage::load_png(&path, band).unwrap();
            assert_eq!(back, img.quantized());
            let header = probe_png(&path).unwrap();
            assert_eq!((header.width, header.height), (5, 4));
        }
    }

    #[test]
    fn gray_png_for_rgb_band_is_band_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nir.png");
        SpectralImage::zeros(Band::Nir, 4, 4).save_png(&path).unwrap();
        assert!(matches!(
            SpectralImage::load_png(&path, Band::Rgb),
            Err(Error::BandMismatch(_))
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(SpectralImage::from_data(Band::G, 1, 1, vec![f64::NAN]).is_err());
        assert!(SpectralImage::from_data(Band::Rgb, 1, 1, vec![0.0]).is_err());
    }

    #[test]
    fn channel_plane_strides() {
        let img = SpectralImage::from_data(Band::Rgb, 2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.channel_plane(1), vec![0.2, 0.5]);
    }
}
