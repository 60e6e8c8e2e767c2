//! Luminance-augmented network input.
//!
//! An RGB image is converted to luma, eroded and dilated with a flat 4x4
//! window, the two extrema maps are min-max normalized over the whole image,
//! and the result is stacked behind the `[0, 1]`-scaled RGB planes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Side of the flat structuring element.
pub const MORPH_SIZE: usize = 4;
/// Offset of the anchor inside the structuring element (row and column).
pub const MORPH_ANCHOR: usize = 1;
/// Guard added to the normalization denominator.
pub const NORM_EPS: f64 = 1e-6;
/// Spatial extents must be multiples of this (three 2x reductions).
pub const SIZE_MULTIPLE: usize = 8;

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::dim("rgb_image", format!("{height}x{width}x3 image cannot hold {} bytes", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Self { height, width, data: rgb.repeat(height * width) }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Symmetric zero padding up to the next multiple of `multiple`.
    /// Returns the padded image and the `(top, left)` offset of the original.
    pub fn pad_to_multiple(&self, multiple: usize) -> (RgbImage, (usize, usize)) {
        let ph = self.height.div_ceil(multiple) * multiple;
        let pw = self.width.div_ceil(multiple) * multiple;
        let (top, left) = ((ph - self.height) / 2, (pw - self.width) / 2);
        let mut out = RgbImage::filled(ph, pw, [0, 0, 0]);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y + top, x + left, self.pixel(y, x));
            }
        }
        (out, (top, left))
    }
}

/// Real-valued single-channel map.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl GrayMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    fn min_max(&self) -> (f64, f64) {
        self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// ITU-R 601 luma, kept on the `[0, 255]` scale.
pub fn rgb_to_gray(img: &RgbImage) -> GrayMap {
    let values =
        img.data.chunks_exact(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect();
    GrayMap { height: img.height, width: img.width, values }
}

/// Flat 4x4 window filter with replicate borders over offsets `d - shift`,
/// `d in 0..4`; `pick` folds the window.
fn window_filter(g: &GrayMap, shift: usize, pick: fn(f64, f64) -> f64) -> GrayMap {
    let (h, w) = (g.height, g.width);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let offsets = || (0..MORPH_SIZE).map(move |d| d as isize - shift as isize);
    // Separable: the rectangular window's extremum is the extremum of row extrema.
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] =
                offsets().map(|d| g.values[y * w + clamp(x as isize + d, w)]).reduce(pick).expect("non-empty window");
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                offsets().map(|d| rows[clamp(y as isize + d, h) * w + x]).reduce(pick).expect("non-empty window");
        }
    }
    GrayMap { height: h, width: w, values: out }
}

/// Grayscale erosion `min_{s in S} G(i + s)`, where `S` spans offsets
/// `-1..=2` on each axis (4x4 element anchored at (1, 1)).
pub fn morph_erode(g: &GrayMap) -> GrayMap {
    window_filter(g, MORPH_ANCHOR, f64::min)
}

/// Grayscale dilation `max_{s in S} G(i - s)`: the element stamped with its
/// anchor on each bright pixel, i.e. offsets `-2..=1` around `i`.
pub fn morph_dilate(g: &GrayMap) -> GrayMap {
    window_filter(g, MORPH_SIZE - 1 - MORPH_ANCHOR, f64::max)
}

/// Whole-map min-max rescale `(x - min) / (max - min + eps)`.
pub fn minmax_normalize(g: &GrayMap) -> GrayMap {
    let (lo, hi) = g.min_max();
    let den = hi - lo + NORM_EPS;
    GrayMap { height: g.height, width: g.width, values: g.values.iter().map(|v| (v - lo) / den).collect() }
}

/// Which planes the network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputChannels {
    Rgb,
    RgbLuma,
}

impl InputChannels {
    pub fn count(self) -> usize {
        match self {
            InputChannels::Rgb => 3,
            InputChannels::RgbLuma => 5,
        }
    }
}

/// The network input: `[5, H, W]` ordered R, G, B, normalized erosion, normalized dilation.
#[derive(Clone, Debug, PartialEq)]
pub struct FiveChannelInput<F> {
    pub values: Tensor<F>,
}

fn check_size(img: &RgbImage) -> Result<()> {
    if !img.height.is_multiple_of(SIZE_MULTIPLE) || !img.width.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::Sizing { height: img.height, width: img.width, multiple: SIZE_MULTIPLE });
    }
    Ok(())
}

fn push_rgb<F: Scalar>(img: &RgbImage, out: &mut Vec<F>) {
    let inv = 1.0 / 255.0;
    for c in 0..3 {
        out.extend(img.data.chunks_exact(3).map(|p| F::lit(p[c] as f64 * inv)));
    }
}

pub fn build_five_channel<F: Scalar>(img: &RgbImage) -> Result<FiveChannelInput<F>> {
    check_size(img)?;
    let gray = rgb_to_gray(img);
    let lo = minmax_normalize(&morph_erode(&gray));
    let hi = minmax_normalize(&morph_dilate(&gray));
    let mut data = Vec::with_capacity(5 * img.height * img.width);
    push_rgb(img, &mut data);
    data.extend(lo.values.iter().map(|&v| F::lit(v)));
    data.extend(hi.values.iter().map(|&v| F::lit(v)));
    Ok(FiveChannelInput { values: Tensor::new(&[5, img.height, img.width], data)? })
}

/// Per-image input tensor `[C, H, W]` for the requested channel set.
pub fn input_tensor<F: Scalar>(img: &RgbImage, channels: InputChannels) -> Result<Tensor<F>> {
    match channels {
        InputChannels::RgbLuma => Ok(build_five_channel(img)?.values),
        InputChannels::Rgb => {
            check_size(img)?;
            let mut data = Vec::with_capacity(3 * img.height * img.width);
            push_rgb(img, &mut data);
            Tensor::new(&[3, img.height, img.width], data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> GrayMap {
        GrayMap { height: h, width: w, values: (0..h * w).map(|i| f(i / w, i % w)).collect() }
    }

    #[test]
    fn luma_reference_colours() {
        let white = RgbImage::filled(1, 1, [255, 255, 255]);
        assert!((rgb_to_gray(&white).values[0] - 255.0).abs() < 1e-9);
        let red = RgbImage::filled(1, 1, [255, 0, 0]);
        assert!((rgb_to_gray(&red).values[0] - 76.245).abs() < 1e-9);
    }

    #[test]
    fn constant_map_is_fixed_by_morphology_and_zeroed_by_normalization() {
        let g = map(6, 5, |_, _| 42.0);
        assert_eq!(morph_erode(&g), g);
        assert_eq!(morph_dilate(&g), g);
        assert!(minmax_normalize(&g).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bright_pixel_dilates_to_anchor_block() {
        let g = map(8, 8, |y, x| if (y, x) == (4, 5) { 255.0 } else { 0.0 });
        let d = morph_dilate(&g);
        let e = morph_erode(&g);
        for y in 0..8 {
            for x in 0..8 {
                // The element anchored on (4, 5) covers rows 3..=6 and columns 4..=7.
                let inside = (3..=6).contains(&y) && (4..=7).contains(&x);
                assert_eq!(d.get(y, x), if inside { 255.0 } else { 0.0 }, "({y},{x})");
                assert_eq!(e.get(y, x), 0.0);
            }
        }
    }

    #[test]
    fn normalization_closed_form() {
        let g = map(16, 16, |y, x| (y * 16 + x) as f64);
        let n = minmax_normalize(&g);
        assert_eq!(n.values[0], 0.0);
        assert!((n.values[255] - 255.0 / (255.0 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn sizing_error_names_multiple() {
        let img = RgbImage::filled(12, 16, [1, 2, 3]);
        let err = build_five_channel::<f32>(&img).unwrap_err();
        assert!(matches!(err, Error::Sizing { multiple: 8, .. }));
        assert!(input_tensor::<f32>(&img, InputChannels::Rgb).is_err());
    }

    #[test]
    fn black_and_white_images() {
        let black = build_five_channel::<f32>(&RgbImage::filled(8, 8, [0, 0, 0])).unwrap();
        assert!(black.values.data().iter().all(|&v| v == 0.0));
        let white = build_five_channel::<f32>(&RgbImage::filled(8, 16, [255, 255, 255])).unwrap();
        let plane = 8 * 16;
        assert!(white.values.data()[..3 * plane].iter().all(|&v| v == 1.0));
        assert!(white.values.data()[3 * plane..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padding_centres_original() {
        let img = RgbImage::filled(5, 10, [9, 9, 9]);
        let (p, (top, left)) = img.pad_to_multiple(8);
        assert_eq!((p.height(), p.width()), (8, 16));
        assert_eq!((top, left), (1, 3));
        assert_eq!(p.pixel(1, 3), [9, 9, 9]);
        assert_eq!(p.pixel(0, 0), [0, 0, 0]);
    }
}
