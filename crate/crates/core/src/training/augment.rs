//! Image augmentation applied in a fixed order: rotation, scaling, colour
//! jitter, horizontal flip, random crop with resize, Gaussian blur. Output
//! is clipped to `[0, 1]`. Transforms drawn at their identity value are
//! skipped so that collapsed ranges reproduce the input exactly.

use ndarray::Array3;
use rand::Rng;

use super::AugmentConfig;
use crate::encoders::ImageTensor;

fn draw(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..=r.1)
    }
}

/// Bilinear sample of channel `ch` at fractional pixel `(y, x)`, with zero
/// outside the image.
fn bilinear(img: &Array3<f32>, ch: usize, y: f64, x: f64) -> f32 {
    let (_, h, w) = img.dim();
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            img[[ch, yy as usize, xx as usize]] as f64
        }
    };
    let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1.0) * (1.0 - fy) * fx
        + at(y0 + 1.0, x0) * fy * (1.0 - fx)
        + at(y0 + 1.0, x0 + 1.0) * fy * fx;
    v as f32
}

/// Inverse-maps every output pixel through `f` (output → input coordinates).
fn remap(img: &Array3<f32>, f: impl Fn(f64, f64) -> (f64, f64)) -> Array3<f32> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let (sy, sx) = f(y as f64, x as f64);
        bilinear(img, ch, sy, sx)
    })
}

pub fn rotate(img: &Array3<f32>, degrees: f64) -> Array3<f32> {
    let (_, h, w) = img.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    remap(img, |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        (cy + c * dy - s * dx, cx + s * dy + c * dx)
    })
}

/// Zoom about the centre by `factor` (> 1 enlarges).
pub fn scale(img: &Array3<f32>, factor: f64) -> Array3<f32> {
    let (_, h, w) = img.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    remap(img, |y, x| (cy + (y - cy) / factor, cx + (x - cx) / factor))
}

pub fn flip_horizontal(img: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| img[[ch, y, w - 1 - x]])
}

/// Crops the `ch × cw` window at `(top, left)` and resizes it back to the
/// full image size.
pub fn crop_resize(img: &Array3<f32>, top: f64, left: f64, ch: f64, cw: f64) -> Array3<f32> {
    let (_, h, w) = img.dim();
    let (sy, sx) = (ch / h as f64, cw / w as f64);
    remap(img, |y, x| (top + (y + 0.5) * sy - 0.5, left + (x + 0.5) * sx - 0.5))
}

pub fn gaussian_blur(img: &Array3<f32>, sigma: f64) -> Array3<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let (c, h, w) = img.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz = Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let acc: f64 = kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * img[[ch, y, clamp(x as isize + i as isize - radius, w)]] as f64)
            .sum();
        (acc / norm) as f32
    });
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let acc: f64 = kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * horiz[[ch, clamp(y as isize + i as isize - radius, h), x]] as f64)
            .sum();
        (acc / norm) as f32
    })
}

pub fn augment(img: &ImageTensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> ImageTensor {
    if !cfg.enabled {
        return img.clone();
    }
    let mut x = img.values().clone();

    let angle = draw(rng, cfg.rotation_degrees);
    if angle != 0.0 {
        x = rotate(&x, angle);
    }
    let factor = draw(rng, cfg.scaling);
    if factor != 1.0 {
        x = scale(&x, factor);
    }
    let brightness = draw(rng, cfg.color_jitter);
    let contrast = draw(rng, cfg.color_jitter);
    if brightness != 1.0 {
        x.mapv_inplace(|v| v * brightness as f32);
    }
    if contrast != 1.0 {
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
        x.mapv_inplace(|v| ((v as f64 - mean) * contrast + mean) as f32);
    }
    if cfg.horizontal_flip_prob > 0.0 && rng.random_bool(cfg.horizontal_flip_prob) {
        x = flip_horizontal(&x);
    }
    let area = draw(rng, cfg.random_crop_scale);
    if area != 1.0 {
        let (_, h, w) = x.dim();
        let side = area.sqrt();
        let (chh, cww) = (side * h as f64, side * w as f64);
        let top = rng.random_range(0.0..=(h as f64 - chh));
        let left = rng.random_range(0.0..=(w as f64 - cww));
        x = crop_resize(&x, top, left, chh, cww);
    }
    let sigma = draw(rng, cfg.gaussian_blur_sigma);
    if sigma > 0.0 {
        x = gaussian_blur(&x, sigma);
    }
    x.mapv_inplace(|v| v.clamp(0.0, 1.0));
    ImageTensor::new(x).expect("augmentation keeps values finite")
}
