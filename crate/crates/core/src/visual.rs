//! Image decoding, model preprocessing, heatmap overlays and PNG output.

use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageEncoder};

use crate::error::{Error, Result};
use crate::model::InputSpec;
use crate::tensor::{bilinear_resize, Tensor};

/// 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("image size {width}×{height} must be positive")));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(ImageBuffer { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    /// One ramp from blue (0) to red (1).
    Sequential,
    /// Positive values on a red ramp, negative values on a green ramp.
    Signed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSpec {
    pub mode: RenderMode,
    /// Overlay opacity in `[0, 1]`.
    pub alpha: f32,
    /// Gain applied to map values before clamping to the ramp.
    pub boost: f32,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            mode: RenderMode::Sequential,
            alpha: 0.5,
            boost: 1.0,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Format(format!("alpha {} is outside [0, 1]", self.alpha)));
        }
        if !(self.boost > 0.0) || !self.boost.is_finite() {
            return Err(Error::Format(format!("boost {} must be positive", self.boost)));
        }
        Ok(())
    }
}

fn decode(bytes: &[u8]) -> Result<DynamicImage> {
    let format = image::guess_format(bytes).map_err(|e| Error::Format(e.to_string()))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Pnm) {
        return Err(Error::Format(format!(
            "unsupported image format {format:?}; expected PNG or PPM"
        )));
    }
    image::load_from_memory_with_format(bytes, format).map_err(|e| Error::Format(e.to_string()))
}

/// Decodes PNG (alpha dropped) or binary PPM into RGB.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    let rgb = decode(bytes)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageBuffer::new(w as usize, h as usize, rgb.into_raw())
}

/// Decodes an image into a normalized `1 × C × H × W` tensor, where `C` is
/// `mean.len()` (1 for grayscale models, 3 for RGB). With `size` set the
/// image is bilinearly resized first.
pub fn image_tensor(bytes: &[u8], mean: &[f32], std: &[f32], size: Option<(usize, usize)>) -> Result<Tensor> {
    let img = decode(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match mean.len() {
        1 if !img.color().has_color() => (1, img.to_luma8().into_raw()),
        1 => {
            return Err(Error::shape(
                "model expects 1 channel but the image is in color".to_string(),
            ))
        }
        3 => (3, img.to_rgb8().into_raw()),
        c => {
            return Err(Error::shape(format!(
                "model expects {c} channels; images provide 1 or 3"
            )))
        }
    };
    let (oh, ow) = size.unwrap_or((h, w));
    let mut data = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let plane: Vec<f32> = raw
            .iter()
            .skip(c)
            .step_by(channels)
            .map(|&p| (p as f64 / 255.0) as f32)
            .collect();
        let plane = bilinear_resize(&Tensor::new([h, w], plane)?, oh, ow)?;
        let (m, s) = (mean[c] as f64, std[c] as f64);
        data.extend(plane.data().iter().map(|&v| ((v as f64 - m) / s) as f32));
    }
    Tensor::new([1, channels, oh, ow], data)
}

/// Decode, resize to the model input, and normalize per channel.
pub fn load_and_preprocess(image_bytes: &[u8], spec: &InputSpec) -> Result<Tensor> {
    image_tensor(image_bytes, &spec.mean, &spec.std, Some((spec.height(), spec.width())))
}

#[inline]
fn round_half_up(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Orients a signed regression map for display.
///
/// Raw maps are positive where a region explains the score `p` rather than
/// `q`. When `q > p` those regions hold the score down and stay positive
/// (red); when `q < p` they hold it up and are flipped to render green.
pub fn orient_regression_map(map: &Tensor, p: f64, q: f64) -> Tensor {
    if q < p {
        map.scale(-1.0)
    } else {
        map.clone()
    }
}

/// Overlays `map` (`H × W`, matching `base`) onto `base`.
pub fn render(map: &Tensor, base: &ImageBuffer, spec: &RenderSpec) -> Result<ImageBuffer> {
    spec.validate()?;
    let (h, w) = map.hw()?;
    if (h, w) != (base.height, base.width) {
        return Err(Error::shape(format!(
            "map is {h}×{w} but the base image is {}×{}",
            base.height, base.width
        )));
    }
    let alpha = spec.alpha as f64;
    let boost = spec.boost as f64;
    let mut out = base.pixels.clone();
    match spec.mode {
        RenderMode::Sequential => {
            for (px, &v) in out.chunks_exact_mut(3).zip(map.data()) {
                let v = if v.is_nan() {
                    0.0
                } else {
                    (boost * v as f64).clamp(0.0, 1.0)
                };
                let color = [255.0 * v, 0.0, 255.0 * (1.0 - v)];
                for (c, dst) in px.iter_mut().enumerate() {
                    *dst = round_half_up((1.0 - alpha) * *dst as f64 + alpha * color[c]);
                }
            }
        }
        RenderMode::Signed => {
            let peak = map.max_abs() as f64;
            if peak == 0.0 || !peak.is_finite() {
                return Ok(base.clone());
            }
            for (px, &v) in out.chunks_exact_mut(3).zip(map.data()) {
                if v == 0.0 || v.is_nan() {
                    continue;
                }
                let mag = (boost * (v as f64).abs() / peak).min(1.0);
                let end = if v > 0.0 { [255.0, 0.0, 0.0] } else { [0.0, 255.0, 0.0] };
                let a = alpha * mag;
                for (c, dst) in px.iter_mut().enumerate() {
                    *dst = round_half_up((1.0 - a) * *dst as f64 + a * end[c]);
                }
            }
        }
    }
    Ok(ImageBuffer { pixels: out, ..*base })
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes)
        .write_image(
            &img.pixels,
            img.width as u32,
            img.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(bytes)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    // Temp files default to 0600; outputs should look like ordinary files.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Encodes an 8-bit RGB PNG and writes it atomically.
pub fn write_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn png_bytes(img: &ImageBuffer) -> Vec<u8> {
        encode_png(img).unwrap()
    }

    fn spec3(mean: f32, std: f32, h: usize, w: usize) -> InputSpec {
        InputSpec {
            shape: [3, h, w],
            mean: vec![mean; 3],
            std: vec![std; 3],
        }
    }

    #[test]
    fn gray_128_normalization() {
        let img = ImageBuffer::filled(5, 3, [128; 3]).unwrap();
        let t = load_and_preprocess(&png_bytes(&img), &spec3(0.5, 0.5, 4, 4)).unwrap();
        assert_eq!(t.dims(), &[1, 3, 4, 4]);
        let expect = (128.0 / 255.0 - 0.5) / 0.5;
        assert!(t.data().iter().all(|&v| (v as f64 - expect).abs() < 1e-7));
        assert!((expect - 0.0039).abs() < 1e-4);
    }

    #[test]
    fn unit_normalization_is_pixel_over_255() {
        let pixels: Vec<u8> = (0..2 * 2 * 3).map(|i| (i * 20) as u8).collect();
        let img = ImageBuffer::new(2, 2, pixels.clone()).unwrap();
        let t = load_and_preprocess(&png_bytes(&img), &spec3(0.0, 1.0, 2, 2)).unwrap();
        // planar layout: channel c holds pixels[c], pixels[c + 3], ...
        for c in 0..3 {
            for i in 0..4 {
                let got = t.data()[c * 4 + i];
                assert_eq!(got, (pixels[i * 3 + c] as f64 / 255.0) as f32);
            }
        }
    }

    #[test]
    fn ppm_and_garbage() {
        let mut ppm = b"P6\n2 1\n255\n".to_vec();
        ppm.extend([255, 0, 0, 0, 0, 255]);
        let img = decode_image(&ppm).unwrap();
        assert_eq!(img.pixel(0, 0), [255, 0, 0]);
        assert_eq!(img.pixel(1, 0), [0, 0, 255]);
        assert!(matches!(decode_image(b"not an image"), Err(Error::Format(_))));
    }

    #[test]
    fn channel_mismatch() {
        let img = ImageBuffer::filled(2, 2, [9, 9, 9]).unwrap();
        let spec = InputSpec {
            shape: [2, 2, 2],
            mean: vec![0.0; 2],
            std: vec![1.0; 2],
        };
        assert!(matches!(
            load_and_preprocess(&png_bytes(&img), &spec),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sequential_endpoints() {
        let base = ImageBuffer::filled(1, 1, [10, 20, 30]).unwrap();
        let one = Tensor::filled([1, 1], 1.0).unwrap();
        let zero = Tensor::filled([1, 1], 0.0).unwrap();
        let full = RenderSpec {
            alpha: 1.0,
            ..RenderSpec::default()
        };
        assert_eq!(render(&one, &base, &full).unwrap().pixel(0, 0), [255, 0, 0]);
        let none = RenderSpec {
            alpha: 0.0,
            ..RenderSpec::default()
        };
        assert_eq!(render(&zero, &base, &none).unwrap(), base);
        // half blend of (10,20,30) with blue: (5, 10, 142.5 -> 143)
        let half = render(&zero, &base, &RenderSpec::default()).unwrap();
        assert_eq!(half.pixel(0, 0), [5, 10, 143]);
    }

    #[test]
    fn signed_zero_map_is_base() {
        let base = ImageBuffer::filled(2, 2, [1, 2, 3]).unwrap();
        let spec = RenderSpec {
            mode: RenderMode::Signed,
            ..RenderSpec::default()
        };
        let z = Tensor::zeros([2, 2]).unwrap();
        assert_eq!(render(&z, &base, &spec).unwrap(), base);
    }

    #[test]
    fn signed_ramps_do_not_mix() {
        let base = ImageBuffer::filled(3, 1, [100, 100, 100]).unwrap();
        let m = Tensor::new([1, 3], vec![2.0, -1.0, 0.0]).unwrap();
        let spec = RenderSpec {
            mode: RenderMode::Signed,
            alpha: 1.0,
            boost: 1.0,
        };
        let out = render(&m, &base, &spec).unwrap();
        assert_eq!(out.pixel(0, 0), [255, 0, 0]);
        assert_eq!(out.pixel(1, 0), [50, 178, 50]);
        assert_eq!(out.pixel(2, 0), [100, 100, 100]);
    }

    #[test]
    fn render_rejects_mismatch_and_bad_spec() {
        let base = ImageBuffer::filled(2, 2, [0; 3]).unwrap();
        let m = Tensor::zeros([3, 2]).unwrap();
        assert!(matches!(
            render(&m, &base, &RenderSpec::default()),
            Err(Error::Shape(_))
        ));
        let bad = RenderSpec {
            alpha: 1.5,
            ..RenderSpec::default()
        };
        assert!(render(&Tensor::zeros([2, 2]).unwrap(), &base, &bad).is_err());
    }

    #[test]
    fn png_round_trip_and_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let red = ImageBuffer::filled(1, 1, [255, 0, 0]).unwrap();
        let p = dir.path().join("red.png");
        write_png(&red, &p).unwrap();
        assert_eq!(decode_image(&std::fs::read(&p).unwrap()).unwrap(), red);

        let grad = ImageBuffer::new(2, 2, (0..12).map(|i| i * 21).collect()).unwrap();
        let p = dir.path().join("grad.png");
        write_png(&grad, &p).unwrap();
        assert_eq!(decode_image(&std::fs::read(&p).unwrap()).unwrap(), grad);

        let missing = dir.path().join("no/such/dir/x.png");
        let err = write_png(&red, &missing).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("x.png"));
    }

    #[test]
    fn regression_orientation_follows_the_question() {
        let base = ImageBuffer::filled(2, 1, [0; 3]).unwrap();
        let raw = Tensor::new([1, 2], vec![1.0, -1.0]).unwrap();
        let spec = RenderSpec {
            mode: RenderMode::Signed,
            alpha: 1.0,
            boost: 1.0,
        };
        // Asking about a higher score: regions explaining the lower estimate are red.
        let up = render(&orient_regression_map(&raw, 0.4, 0.9), &base, &spec).unwrap();
        assert_eq!(up.pixel(0, 0), [255, 0, 0]);
        assert_eq!(up.pixel(1, 0), [0, 255, 0]);
        // Asking about a lower score: regions defending the estimate are green.
        let down = render(&orient_regression_map(&raw, 0.4, 0.1), &base, &spec).unwrap();
        assert_eq!(down.pixel(0, 0), [0, 255, 0]);
        assert_eq!(down.pixel(1, 0), [255, 0, 0]);
    }
}
