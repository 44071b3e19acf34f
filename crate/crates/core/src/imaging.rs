//! Planar float images and PNG/JPEG conversion.

use std::path::Path;

use image::{DynamicImage, ImageBuffer};
use ndarray::{s, Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::resample::resize_plane;
use crate::scalar::Real;

/// `C × H × W` image with values nominally in `[0, 1]`, `C` ∈ {1, 3}.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    data: Array3<T>,
}

/// Sample depth of an image file, kept so that a lossless round trip is possible.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

impl<T: Real> Image<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        let c = data.dim().0;
        if c != 1 && c != 3 {
            return Err(Error::shape("image channels", "1 or 3", c));
        }
        if data.dim().1 == 0 || data.dim().2 == 0 {
            return Err(Error::Invalid("image has zero area".into()));
        }
        Ok(Image { data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Image::new(Array3::from_elem((channels, height, width), value)).expect("valid dims")
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, T> {
        self.data.view()
    }

    pub fn data_mut(&mut self) -> &mut Array3<T> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    pub fn clamped(mut self) -> Self {
        self.data.mapv_inplace(|v| v.max(T::zero()).min(T::one()));
        self
    }

    /// Resamples every channel: area averaging when shrinking, bilinear when enlarging.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let mut out = Array3::zeros((self.channels(), height, width));
        for c in 0..self.channels() {
            let plane = resize_plane(self.data.slice(s![c, .., ..]), height, width);
            out.slice_mut(s![c, .., ..]).assign(&plane);
        }
        Image { data: out }
    }

    /// Crops the pixel box `[x, x+w) × [y, y+h)`, clipped to the image.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        let x1 = (x + w).min(self.width());
        let y1 = (y + h).min(self.height());
        if x >= x1 || y >= y1 {
            return Err(Error::Invalid(format!("empty crop {x},{y},{w},{h}")));
        }
        Ok(Image {
            data: self.data.slice(s![.., y..y1, x..x1]).to_owned(),
        })
    }

    /// Three-channel view for network input; grey images are replicated.
    pub fn to_rgb(&self) -> Self {
        if self.channels() == 3 {
            return self.clone();
        }
        let plane = self.data.slice(s![0, .., ..]);
        let mut out = Array3::zeros((3, self.height(), self.width()));
        for c in 0..3 {
            out.slice_mut(s![c, .., ..]).assign(&plane);
        }
        Image { data: out }
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            data: self.data.mapv(|v| U::lit(v.as_f64())),
        }
    }

    pub fn from_dynamic(img: &DynamicImage) -> (Self, BitDepth) {
        let depth = match img.color().bytes_per_pixel() / img.color().channel_count().max(1) {
            1 => BitDepth::Eight,
            _ => BitDepth::Sixteen,
        };
        let grey = !img.color().has_color();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let scale = 1.0 / depth.max_value();
        let data = match (grey, depth) {
            (true, BitDepth::Eight) => {
                let buf = img.to_luma8();
                Array3::from_shape_fn((1, h, w), |(_, y, x)| {
                    T::lit(buf.get_pixel(x as u32, y as u32)[0] as f64 * scale)
                })
            }
            (true, BitDepth::Sixteen) => {
                let buf = img.to_luma16();
                Array3::from_shape_fn((1, h, w), |(_, y, x)| {
                    T::lit(buf.get_pixel(x as u32, y as u32)[0] as f64 * scale)
                })
            }
            (false, BitDepth::Eight) => {
                let buf = img.to_rgb8();
                Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                    T::lit(buf.get_pixel(x as u32, y as u32)[c] as f64 * scale)
                })
            }
            (false, BitDepth::Sixteen) => {
                let buf = img.to_rgb16();
                Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                    T::lit(buf.get_pixel(x as u32, y as u32)[c] as f64 * scale)
                })
            }
        };
        (Image { data }, depth)
    }

    /// Quantizes to the given depth; values are clamped to `[0, 1]` first.
    pub fn to_dynamic(&self, depth: BitDepth) -> DynamicImage {
        self.quantize(depth).to_dynamic()
    }

    pub fn quantize(&self, depth: BitDepth) -> Raster {
        let (h, w) = self.size();
        let mut raster = Raster {
            width: w,
            height: h,
            channels: self.channels(),
            samples: match depth {
                BitDepth::Eight => Samples::Eight(vec![0; self.data.len()]),
                BitDepth::Sixteen => Samples::Sixteen(vec![0; self.data.len()]),
            },
        };
        raster.paste(0, 0, self.data.view());
        raster
    }
}

/// Interleaved samples at a fixed depth.
#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    Eight(Vec<u8>),
    Sixteen(Vec<u16>),
}

/// A quantized, interleaved image ready for encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Samples,
}

impl Raster {
    pub fn depth(&self) -> BitDepth {
        match self.samples {
            Samples::Eight(_) => BitDepth::Eight,
            Samples::Sixteen(_) => BitDepth::Sixteen,
        }
    }

    /// Quantizes a planar `C × h × w` patch into the raster with its corner at `(x0, y0)`.
    pub fn paste<T: Real>(&mut self, x0: usize, y0: usize, patch: ArrayView3<T>) {
        let (c, h, w) = patch.dim();
        assert!(c == self.channels && y0 + h <= self.height && x0 + w <= self.width, "patch outside raster");
        let max = self.depth().max_value();
        let q = |v: T| (v.as_f64().clamp(0.0, 1.0) * max).round();
        let patch = patch.as_standard_layout();
        let planes = patch.as_slice().expect("standard layout");
        let (stride, plane) = (self.width * c, h * w);
        macro_rules! fill {
            ($buf:expr, $ty:ty) => {
                for y in 0..h {
                    let row = &mut $buf[(y0 + y) * stride + x0 * c..][..w * c];
                    for x in 0..w {
                        for ch in 0..c {
                            row[x * c + ch] = q(planes[ch * plane + y * w + x]) as $ty;
                        }
                    }
                }
            };
        }
        match &mut self.samples {
            Samples::Eight(buf) => fill!(buf, u8),
            Samples::Sixteen(buf) => fill!(buf, u16),
        }
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        match (&self.samples, self.channels) {
            (Samples::Eight(b), 1) => DynamicImage::ImageLuma8(ImageBuffer::from_raw(w, h, b.clone()).expect("sized")),
            (Samples::Eight(b), _) => DynamicImage::ImageRgb8(ImageBuffer::from_raw(w, h, b.clone()).expect("sized")),
            (Samples::Sixteen(b), 1) => DynamicImage::ImageLuma16(ImageBuffer::from_raw(w, h, b.clone()).expect("sized")),
            (Samples::Sixteen(b), _) => DynamicImage::ImageRgb16(ImageBuffer::from_raw(w, h, b.clone()).expect("sized")),
        }
    }

    /// PNG bytes with fast compression; the service re-encodes on every request.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        use image::codecs::png::{CompressionType, FilterType, PngEncoder};
        use image::{ExtendedColorType, ImageEncoder};
        let mut out = Vec::new();
        let encoder = PngEncoder::new_with_quality(&mut out, CompressionType::Fast, FilterType::Sub);
        match &self.samples {
            Samples::Eight(b) => {
                let color = if self.channels == 1 { ExtendedColorType::L8 } else { ExtendedColorType::Rgb8 };
                encoder.write_image(b, self.width as u32, self.height as u32, color)?;
            }
            Samples::Sixteen(_) => self.to_dynamic().write_with_encoder(encoder)?,
        }
        Ok(out)
    }
}

pub fn load_image<T: Real>(path: impl AsRef<Path>) -> Result<(Image<T>, BitDepth)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image<T: Real>(bytes: &[u8]) -> Result<(Image<T>, BitDepth)> {
    let img = image::load_from_memory(bytes)?;
    Ok(Image::from_dynamic(&img))
}

pub fn save_png<T: Real>(image: &Image<T>, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(image, depth)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_png<T: Real>(image: &Image<T>, depth: BitDepth) -> Result<Vec<u8>> {
    image.quantize(depth).encode_png()
}
