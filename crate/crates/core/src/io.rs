//! Raster file input and output.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use crate::enhancement::InputImage;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, GrayImage, RgbImage};

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads an 8-bit grey or colour PNG, JPEG or PGM/PPM file. Alpha is
/// dropped.
pub fn load_image(path: &Path) -> Result<InputImage> {
    let img = image::open(path).map_err(image_err(path))?;
    let (cols, rows) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => Ok(InputImage::Gray(GrayImage::new(rows, cols, g.into_raw())?)),
        DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            Ok(InputImage::Gray(GrayImage::new(rows, cols, g.into_raw())?))
        }
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            let rgb = img.to_rgb8();
            let data = rgb.pixels().map(|p| p.0).collect();
            Ok(InputImage::Rgb(RgbImage::new(rows, cols, data)?))
        }
        other => Err(Error::InvalidInput(format!(
            "{}: unsupported pixel format {:?}; 8-bit grey or colour expected",
            path.display(),
            other.color()
        ))),
    }
}

pub fn save_gray_png(image: &GrayImage, path: &Path) -> Result<()> {
    image::save_buffer(
        path,
        image.data(),
        image.cols() as u32,
        image.rows() as u32,
        ExtendedColorType::L8,
    )
    .map_err(image_err(path))
}

pub fn save_rgb_png(image: &RgbImage, path: &Path) -> Result<()> {
    let flat: Vec<u8> = image.data().iter().flatten().copied().collect();
    image::save_buffer(
        path,
        &flat,
        image.dims().cols as u32,
        image.dims().rows as u32,
        ExtendedColorType::Rgb8,
    )
    .map_err(image_err(path))
}

/// Binary PBM; set pixels are written black (1 bits). The encoder takes
/// 0 for black and 1 for white.
pub fn save_pbm(mask: &BinaryMask, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let luma: Vec<u8> = mask.data().iter().map(|&b| u8::from(!b)).collect();
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Bitmap(SampleEncoding::Binary))
        .write_image(
            &luma,
            mask.dims().cols as u32,
            mask.dims().rows as u32,
            ExtendedColorType::L8,
        )
        .map_err(image_err(path))
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Dims;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GrayImage::from_fn(7, 5, |r, c| (r * 30 + c) as u8);
        let p = dir.path().join("g.png");
        save_gray_png(&g, &p).unwrap();
        match load_image(&p).unwrap() {
            InputImage::Gray(back) => assert_eq!(back, g),
            other => panic!("{other:?}"),
        }
        let rgb = RgbImage::new(1, 2, vec![[1, 2, 3], [4, 5, 6]]).unwrap();
        let p = dir.path().join("c.png");
        save_rgb_png(&rgb, &p).unwrap();
        match load_image(&p).unwrap() {
            InputImage::Rgb(back) => assert_eq!(back, rgb),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pbm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = BinaryMask::empty(Dims::new(2, 10));
        m.set(0, 0, true);
        m.set(1, 9, true);
        let p = dir.path().join("m.pbm");
        save_pbm(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P4"));
        // rows padded to whole bytes, set pixels are 1 bits
        assert_eq!(&bytes[bytes.len() - 4..], &[0b1000_0000, 0, 0, 0b0100_0000]);
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(matches!(
            load_image(Path::new("/nonexistent/x.png")),
            Err(Error::Image { .. })
        ));
    }
}
