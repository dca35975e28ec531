//! Byte-level image operations. Photometric ops mirror the usual PIL
//! semantics; geometric ops use nearest-neighbour sampling and a mid-gray
//! fill.

use super::ImageU8;
use crate::rng::RngStream;

pub(crate) const GEOMETRIC_FILL: u8 = 128;
pub(crate) const CUTOUT_FILL: u8 = 127;

fn clamp_round(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((r as u32 * 19595 + g as u32 * 38470 + b as u32 * 7471 + 0x8000) >> 16) as u8
}

/// `degenerate + v·(img − degenerate)` per byte.
fn blend(img: &ImageU8, degenerate: &[u8], v: f64) -> ImageU8 {
    let pixels = img
        .pixels
        .iter()
        .zip(degenerate)
        .map(|(&o, &d)| clamp_round(d as f64 + v * (o as f64 - d as f64)))
        .collect();
    img.with_pixels(pixels)
}

/// Applies a 256-entry lookup table independently per channel.
fn map_channels(img: &ImageU8, luts: &[[u8; 256]; 3]) -> ImageU8 {
    let pixels = img
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| luts[i % 3][v as usize])
        .collect();
    img.with_pixels(pixels)
}

fn channel_histograms(img: &ImageU8) -> [[u32; 256]; 3] {
    let mut h = [[0u32; 256]; 3];
    for (i, &v) in img.pixels.iter().enumerate() {
        h[i % 3][v as usize] += 1;
    }
    h
}

pub(crate) fn autocontrast(img: &ImageU8) -> ImageU8 {
    let mut luts = [[0u8; 256]; 3];
    for (c, lut) in luts.iter_mut().enumerate() {
        let vals = img.pixels.iter().skip(c).step_by(3);
        let lo = vals.clone().copied().min().unwrap_or(0);
        let hi = vals.copied().max().unwrap_or(255);
        for (i, e) in lut.iter_mut().enumerate() {
            *e = if hi > lo {
                let scale = 255.0 / (hi - lo) as f64;
                clamp_round((i as f64 - lo as f64) * scale)
            } else {
                i as u8
            };
        }
    }
    map_channels(img, &luts)
}

pub(crate) fn equalize(img: &ImageU8) -> ImageU8 {
    let hist = channel_histograms(img);
    let mut luts = [[0u8; 256]; 3];
    for (lut, h) in luts.iter_mut().zip(&hist) {
        for (i, e) in lut.iter_mut().enumerate() {
            *e = i as u8;
        }
        let nonzero: Vec<u32> = h.iter().copied().filter(|&x| x > 0).collect();
        if nonzero.len() <= 1 {
            continue;
        }
        let total: u32 = nonzero.iter().sum();
        let step = (total - nonzero[nonzero.len() - 1]) / 255;
        if step == 0 {
            continue;
        }
        let mut n = step / 2;
        for (i, e) in lut.iter_mut().enumerate() {
            *e = (n / step).min(255) as u8;
            n += h[i];
        }
    }
    map_channels(img, &luts)
}

pub(crate) fn posterize(img: &ImageU8, v: f64) -> ImageU8 {
    let bits = (v.round() as i64).clamp(1, 8) as u32;
    let mask: u8 = !((1u16 << (8 - bits)) - 1) as u8;
    img.with_pixels(img.pixels.iter().map(|&p| p & mask).collect())
}

pub(crate) fn solarize(img: &ImageU8, v: f64) -> ImageU8 {
    img.with_pixels(
        img.pixels
            .iter()
            .map(|&p| if p as f64 >= v { 255 - p } else { p })
            .collect(),
    )
}

pub(crate) fn brightness(img: &ImageU8, v: f64) -> ImageU8 {
    blend(img, &vec![0u8; img.pixels.len()], v)
}

fn grayscale_rgb(img: &ImageU8) -> Vec<u8> {
    img.pixels
        .chunks(3)
        .flat_map(|p| {
            let l = luma(p[0], p[1], p[2]);
            [l, l, l]
        })
        .collect()
}

pub(crate) fn color(img: &ImageU8, v: f64) -> ImageU8 {
    blend(img, &grayscale_rgb(img), v)
}

pub(crate) fn contrast(img: &ImageU8, v: f64) -> ImageU8 {
    let n = img.pixels.len() / 3;
    let sum: u64 = img
        .pixels
        .chunks(3)
        .map(|p| luma(p[0], p[1], p[2]) as u64)
        .sum();
    let mean = (sum as f64 / n as f64 + 0.5).floor().clamp(0.0, 255.0) as u8;
    blend(img, &vec![mean; img.pixels.len()], v)
}

pub(crate) fn sharpness(img: &ImageU8, v: f64) -> ImageU8 {
    let (h, w) = (img.height, img.width);
    let mut smooth = img.pixels.clone();
    if h >= 3 && w >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                for c in 0..3 {
                    let mut acc = 0u32;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let weight = if dy == 1 && dx == 1 { 5 } else { 1 };
                            acc += weight * img.get(y + dy - 1, x + dx - 1, c) as u32;
                        }
                    }
                    smooth[(y * w + x) * 3 + c] = clamp_round(acc as f64 / 13.0);
                }
            }
        }
    }
    blend(img, &smooth, v)
}

/// Inverse-maps every output pixel centre through `src_of`, sampling the
/// nearest input pixel or the fill value when it lands outside.
fn remap(img: &ImageU8, src_of: impl Fn(f64, f64) -> (f64, f64)) -> ImageU8 {
    let (h, w) = (img.height, img.width);
    let mut out = vec![GEOMETRIC_FILL; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src_of(x as f64 + 0.5, y as f64 + 0.5);
            let (ix, iy) = (sx.floor(), sy.floor());
            if ix >= 0.0 && iy >= 0.0 && (ix as usize) < w && (iy as usize) < h {
                let (ix, iy) = (ix as usize, iy as usize);
                let dst = (y * w + x) * 3;
                let src = (iy * w + ix) * 3;
                out[dst..dst + 3].copy_from_slice(&img.pixels[src..src + 3]);
            }
        }
    }
    img.with_pixels(out)
}

/// Counter-clockwise rotation by `degrees` about the image centre.
pub(crate) fn rotate(img: &ImageU8, degrees: f64) -> ImageU8 {
    let (cx, cy) = (img.width as f64 / 2.0, img.height as f64 / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    remap(img, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    })
}

pub(crate) fn shear_x(img: &ImageU8, v: f64) -> ImageU8 {
    remap(img, |x, y| (x + v * y, y))
}

pub(crate) fn shear_y(img: &ImageU8, v: f64) -> ImageU8 {
    remap(img, |x, y| (x, y + v * x))
}

pub(crate) fn translate_x(img: &ImageU8, v: f64) -> ImageU8 {
    let shift = (v * img.width as f64).round();
    remap(img, |x, y| (x - shift, y))
}

pub(crate) fn translate_y(img: &ImageU8, v: f64) -> ImageU8 {
    let shift = (v * img.height as f64).round();
    remap(img, |x, y| (x, y - shift))
}

/// Gray square of side `round(v·min(H, W))` centred at a uniform pixel,
/// clipped to the image.
pub(crate) fn cutout(img: &ImageU8, v: f64, rng: &mut RngStream) -> ImageU8 {
    let (h, w) = (img.height, img.width);
    let cy = rng.below(h) as isize;
    let cx = rng.below(w) as isize;
    let side = (v * h.min(w) as f64).round() as isize;
    let mut out = img.clone();
    if side <= 0 {
        return out;
    }
    let (y0, x0) = (cy - side / 2, cx - side / 2);
    let ys = y0.max(0) as usize..((y0 + side).min(h as isize)).max(0) as usize;
    let xs = x0.max(0) as usize..((x0 + side).min(w as isize)).max(0) as usize;
    for y in ys {
        for x in xs.clone() {
            let i = (y * w + x) * 3;
            out.pixels[i..i + 3].fill(CUTOUT_FILL);
        }
    }
    out
}

/// Zero-pads by `pad`, crops the original size at `(ox, oy)` in padded
/// coordinates, then optionally mirrors columns.
pub(crate) fn crop_flip(img: &ImageU8, pad: usize, ox: usize, oy: usize, flip: bool) -> ImageU8 {
    let (h, w) = (img.height, img.width);
    let mut out = vec![0u8; img.pixels.len()];
    for y in 0..h {
        let sy = (y + oy) as isize - pad as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = (x + ox) as isize - pad as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let dx = if flip { w - 1 - x } else { x };
            let src = (sy as usize * w + sx as usize) * 3;
            let dst = (y * w + dx) * 3;
            out[dst..dst + 3].copy_from_slice(&img.pixels[src..src + 3]);
        }
    }
    img.with_pixels(out)
}
