//! Weak and strong view transformations.
//!
//! The weak view is a padded random crop plus a random horizontal flip. The
//! strong view applies the weak view, then `n` operations drawn uniformly
//! (with replacement) from the 14-entry RandAugment table, each with its own
//! random strength, and finally Cutout.

mod pixel;

use std::fmt;
use std::str::FromStr;

use crate::error::{CrldError, Result};
use crate::rng::RngStream;

/// Zero padding applied before the random crop.
pub const CROP_PAD: usize = 4;

/// Height × width RGB image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(CrldError::InvalidArgument(format!(
                "{height}×{width} image needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(ImageU8 {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        ImageU8 {
            height,
            width,
            pixels,
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    fn with_pixels(&self, pixels: Vec<u8>) -> ImageU8 {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        ImageU8 {
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    /// Binary PPM (`P6`) encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| CrldError::Format(format!("ppm: {why}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("only 8-bit P6 is supported"));
        }
        let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let body = &bytes[(pos + 1).min(bytes.len())..];
        ImageU8::new(h, w, body.to_vec()).map_err(|_| bad("pixel data length"))
    }
}

/// Every transformation in the strong-view inventory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugKind {
    AutoContrast,
    Brightness,
    Color,
    Contrast,
    Equalize,
    Identity,
    Posterize,
    Rotate,
    Sharpness,
    ShearX,
    ShearY,
    Solarize,
    TranslateX,
    TranslateY,
    Cutout,
}

impl AugKind {
    pub const ALL: [AugKind; 15] = [
        AugKind::AutoContrast,
        AugKind::Brightness,
        AugKind::Color,
        AugKind::Contrast,
        AugKind::Equalize,
        AugKind::Identity,
        AugKind::Posterize,
        AugKind::Rotate,
        AugKind::Sharpness,
        AugKind::ShearX,
        AugKind::ShearY,
        AugKind::Solarize,
        AugKind::TranslateX,
        AugKind::TranslateY,
        AugKind::Cutout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugKind::AutoContrast => "autocontrast",
            AugKind::Brightness => "brightness",
            AugKind::Color => "color",
            AugKind::Contrast => "contrast",
            AugKind::Equalize => "equalize",
            AugKind::Identity => "identity",
            AugKind::Posterize => "posterize",
            AugKind::Rotate => "rotate",
            AugKind::Sharpness => "sharpness",
            AugKind::ShearX => "shear_x",
            AugKind::ShearY => "shear_y",
            AugKind::Solarize => "solarize",
            AugKind::TranslateX => "translate_x",
            AugKind::TranslateY => "translate_y",
            AugKind::Cutout => "cutout",
        }
    }

    /// Default parameter range `(v_min, v_max)`.
    pub fn default_range(self) -> (f64, f64) {
        match self {
            AugKind::AutoContrast | AugKind::Equalize | AugKind::Identity => (0.0, 1.0),
            AugKind::Brightness | AugKind::Color | AugKind::Sharpness => (0.05, 0.95),
            // published as [0.05, 0.095]; read as the same range as its siblings
            AugKind::Contrast => (0.05, 0.95),
            AugKind::Posterize => (4.0, 8.0),
            AugKind::Rotate => (-30.0, 30.0),
            AugKind::ShearX | AugKind::ShearY => (-0.3, 0.3),
            AugKind::TranslateX | AugKind::TranslateY => (-0.3, 0.3),
            AugKind::Solarize => (0.0, 256.0),
            AugKind::Cutout => (0.0, 0.5),
        }
    }
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugKind {
    type Err = CrldError;

    fn from_str(s: &str) -> Result<Self> {
        AugKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CrldError::InvalidArgument(format!("unknown augmentation kind {s:?}")))
    }
}

/// One row of the operation table: a kind and its parameter range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugOpSpec {
    pub kind: AugKind,
    pub v_min: f64,
    pub v_max: f64,
}

impl AugOpSpec {
    pub fn new(kind: AugKind, v_min: f64, v_max: f64) -> Result<Self> {
        if !(v_min <= v_max) {
            return Err(CrldError::InvalidArgument(format!(
                "{kind}: v_min {v_min} exceeds v_max {v_max}"
            )));
        }
        Ok(AugOpSpec { kind, v_min, v_max })
    }

    pub fn default_for(kind: AugKind) -> Self {
        let (v_min, v_max) = kind.default_range();
        AugOpSpec { kind, v_min, v_max }
    }

    pub fn contains(&self, v: f64) -> bool {
        const SLACK: f64 = 1e-9;
        v >= self.v_min - SLACK && v <= self.v_max + SLACK
    }
}

/// The 14 RandAugment rows (everything except Cutout).
pub fn randaugment_table() -> Vec<AugOpSpec> {
    AugKind::ALL
        .into_iter()
        .filter(|&k| k != AugKind::Cutout)
        .map(AugOpSpec::default_for)
        .collect()
}

/// `v = v_min + (v_max − v_min)·p·p_s`.
pub fn sample_strength(spec: &AugOpSpec, p: f64, p_s: f64) -> f64 {
    spec.v_min + (spec.v_max - spec.v_min) * p * p_s
}

/// `v_co = 0.5·p_co·p_s`.
pub fn sample_cutout_strength(p_co: f64, p_s: f64) -> f64 {
    0.5 * p_co * p_s
}

/// Applies one operation at strength `v`. Only Cutout consumes `rng`.
pub fn apply_op(img: &ImageU8, kind: AugKind, v: f64, rng: &mut RngStream) -> Result<ImageU8> {
    let spec = AugOpSpec::default_for(kind);
    if !v.is_finite() || !spec.contains(v) {
        return Err(CrldError::InvalidArgument(format!(
            "{kind} strength {v} outside [{}, {}]",
            spec.v_min, spec.v_max
        )));
    }
    Ok(match kind {
        AugKind::AutoContrast => pixel::autocontrast(img),
        AugKind::Brightness => pixel::brightness(img, v),
        AugKind::Color => pixel::color(img, v),
        AugKind::Contrast => pixel::contrast(img, v),
        AugKind::Equalize => pixel::equalize(img),
        AugKind::Identity => img.clone(),
        AugKind::Posterize => pixel::posterize(img, v),
        AugKind::Rotate => pixel::rotate(img, v),
        AugKind::Sharpness => pixel::sharpness(img, v),
        AugKind::ShearX => pixel::shear_x(img, v),
        AugKind::ShearY => pixel::shear_y(img, v),
        AugKind::Solarize => pixel::solarize(img, v),
        AugKind::TranslateX => pixel::translate_x(img, v),
        AugKind::TranslateY => pixel::translate_y(img, v),
        AugKind::Cutout => pixel::cutout(img, v, rng),
    })
}

/// Strong-view recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct StrongPolicy {
    /// Operations sampled per image; Cutout is extra and always last.
    pub n: usize,
    /// Strength multiplier in `(0, 1]`.
    pub p_s: f64,
    pub op_table: Vec<AugOpSpec>,
}

impl Default for StrongPolicy {
    fn default() -> Self {
        StrongPolicy {
            n: 2,
            p_s: 1.0,
            op_table: randaugment_table(),
        }
    }
}

impl StrongPolicy {
    pub fn new(n: usize, p_s: f64) -> Result<Self> {
        let p = StrongPolicy {
            n,
            p_s,
            ..StrongPolicy::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(CrldError::InvalidArgument("strong policy needs n ≥ 1".into()));
        }
        if !(self.p_s > 0.0 && self.p_s <= 1.0) {
            return Err(CrldError::InvalidArgument(format!(
                "p_s must lie in (0, 1], got {}",
                self.p_s
            )));
        }
        if self.op_table.is_empty() || self.op_table.iter().any(|s| s.kind == AugKind::Cutout) {
            return Err(CrldError::InvalidArgument(
                "op table must be non-empty and exclude cutout".into(),
            ));
        }
        Ok(())
    }
}

/// Record of one operation applied by [`strong_view_traced`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppliedOp {
    pub kind: AugKind,
    pub v: f64,
}

/// Crop with explicit offsets in `[0, 2·CROP_PAD]` and an explicit flip.
/// `(CROP_PAD, CROP_PAD, false)` is the identity.
pub fn weak_view_with(img: &ImageU8, ox: usize, oy: usize, flip: bool) -> ImageU8 {
    pixel::crop_flip(img, CROP_PAD, ox.min(2 * CROP_PAD), oy.min(2 * CROP_PAD), flip)
}

pub fn weak_view(img: &ImageU8, rng: &mut RngStream) -> ImageU8 {
    let ox = rng.below(2 * CROP_PAD + 1);
    let oy = rng.below(2 * CROP_PAD + 1);
    let flip = rng.coin(0.5);
    weak_view_with(img, ox, oy, flip)
}

pub fn strong_view(img: &ImageU8, policy: &StrongPolicy, rng: &mut RngStream) -> ImageU8 {
    strong_view_traced(img, policy, rng).0
}

/// Strong view plus the list of operations and strengths it applied.
pub fn strong_view_traced(
    img: &ImageU8,
    policy: &StrongPolicy,
    rng: &mut RngStream,
) -> (ImageU8, Vec<AppliedOp>) {
    let mut out = weak_view(img, rng);
    let mut trace = Vec::with_capacity(policy.n + 1);
    for _ in 0..policy.n {
        let spec = policy.op_table[rng.below(policy.op_table.len())];
        let v = sample_strength(&spec, rng.uniform(), policy.p_s);
        out = apply_op(&out, spec.kind, v, rng).expect("sampled strength lies in range");
        trace.push(AppliedOp { kind: spec.kind, v });
    }
    let v_co = sample_cutout_strength(rng.uniform(), policy.p_s);
    out = pixel::cutout(&out, v_co, rng);
    trace.push(AppliedOp {
        kind: AugKind::Cutout,
        v: v_co,
    });
    (out, trace)
}
