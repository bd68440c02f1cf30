//! PNG and SVG file helpers.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::Result;
use crate::geometry::SketchParams;
use crate::svg::{export_svg, import_svg};
use crate::tensor::RasterImage;

/// Quantizes to 8-bit RGB.
pub fn to_rgb8(img: &RasterImage) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let bytes = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    ImageBuffer::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer sized from the image")
}

pub fn save_png(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    to_rgb8(img).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Loads an image, compositing any alpha channel over white.
pub fn load_png(path: impl AsRef<Path>) -> Result<RasterImage> {
    let rgba = image::open(path)?.to_rgba32f();
    let (w, h) = rgba.dimensions();
    let data = rgba
        .pixels()
        .flat_map(|p| {
            let a = p[3] as f64;
            [0, 1, 2].map(|c| p[c] as f64 * a + (1.0 - a))
        })
        .collect();
    RasterImage::new(w as usize, h as usize, data)
}

pub fn write_svg(params: &SketchParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, export_svg(params))?;
    Ok(())
}

pub fn read_svg(path: impl AsRef<Path>) -> Result<SketchParams> {
    import_svg(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<f64> = (0..5 * 3 * 3).map(|i| i as f64 / 44.0).collect();
        let img = RasterImage::new(5, 3, data).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!((back.width, back.height), (5, 3));
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn transparent_pixels_become_white() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        image::RgbaImage::from_pixel(2, 2, image::Rgba([0, 0, 0, 0])).save(&path).unwrap();
        let img = load_png(&path).unwrap();
        assert!(img.data.iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }
}
