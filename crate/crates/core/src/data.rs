//! Synthetic brain-like phantom corpus, preprocessing, dataset splits, and the
//! binary slice file format.
//!
//! Slice file layout (little-endian):
//!
//! ```text
//! "BVSL" | u32 version | u32 H | u32 W | u8 label | u8 has_mask | u16 id_len
//! | id bytes | H*W f32 pixels (row-major) | [H*W u8 mask if has_mask]
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const SLICE_MAGIC: [u8; 4] = *b"BVSL";
pub const SLICE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal = 0,
    Abnormal = 1,
}

impl Label {
    pub fn from_byte(b: u8) -> Option<Label> {
        match b {
            0 => Some(Label::Normal),
            1 => Some(Label::Abnormal),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "normal" | "0" => Some(Label::Normal),
            "abnormal" | "1" => Some(Label::Abnormal),
            _ => None,
        }
    }
}

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::dim("image", &[height, width], &[pixels.len()]));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub id: String,
    pub image: Image,
    pub label: Label,
    /// Ground-truth anomaly region; diagnostics only, never used in training.
    pub mask: Option<Vec<u8>>,
}

impl SliceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.image.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data(format!("{}: pixel outside [0, 1]", self.id)));
        }
        let has_region = self.mask.as_ref().is_some_and(|m| m.iter().any(|&v| v != 0));
        if has_region != (self.label == Label::Abnormal) {
            return Err(Error::Data(format!("{}: mask does not match label", self.id)));
        }
        if let Some(m) = &self.mask {
            if m.len() != self.image.pixels.len() {
                return Err(Error::Data(format!("{}: mask size mismatch", self.id)));
            }
        }
        Ok(())
    }
}

/// Parameters of the phantom generator. Fractions are relative to `size`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    /// Native render resolution.
    pub size: usize,
    pub seed: u64,
    /// Amplitude of each low-frequency texture wave.
    pub texture_scale: f64,
    /// Standard deviation of per-pixel acquisition noise, truncated at two
    /// deviations.
    pub noise_std: f64,
    /// Range of the ellipse semi-axes, as a fraction of `size`.
    pub axis_range: (f64, f64),
    pub blob_intensity: (f64, f64),
    /// Blob radius range in pixels.
    pub blob_radius: (f64, f64),
    /// Share of abnormal slices when a corpus size is given as a total.
    pub abnormal_fraction: f64,
}

impl PhantomConfig {
    pub fn new(size: usize, seed: u64) -> Self {
        PhantomConfig {
            size,
            seed,
            texture_scale: 0.04,
            noise_std: 0.02,
            axis_range: (0.28, 0.38),
            blob_intensity: (0.6, 1.0),
            blob_radius: (size as f64 / 16.0, size as f64 / 5.0),
            abnormal_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_range = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if self.size < 8 {
            return Err(Error::Config(format!("phantom size {} is too small", self.size)));
        }
        if !ok_range(self.axis_range) || self.axis_range.0 <= 0.0 || self.axis_range.1 > 0.5 {
            return Err(Error::Config(format!("bad axis range {:?}", self.axis_range)));
        }
        if !ok_range(self.blob_intensity) || self.blob_intensity.0 < 0.0 || self.blob_intensity.1 > 1.0 {
            return Err(Error::Config(format!("bad blob intensity {:?}", self.blob_intensity)));
        }
        if !ok_range(self.blob_radius) || self.blob_radius.0 <= 0.0 {
            return Err(Error::Config(format!("bad blob radius {:?}", self.blob_radius)));
        }
        if !(0.0..=0.3).contains(&self.texture_scale) {
            return Err(Error::Config(format!("texture scale {} outside [0, 0.3]", self.texture_scale)));
        }
        if !(0.0..=0.1).contains(&self.noise_std) {
            return Err(Error::Config(format!("noise std {} outside [0, 0.1]", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.abnormal_fraction) {
            return Err(Error::Config(format!("abnormal fraction {} outside [0, 1)", self.abnormal_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    intensity: f64,
}

/// Randomized geometry of one phantom.
#[derive(Clone, Debug)]
pub struct PhantomLayout {
    size: usize,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    peak: f64,
    falloff: f64,
    waves: Vec<(f64, f64, f64, f64)>,
    ventricle_offset: f64,
    ventricle_axes: (f64, f64),
    texture: f64,
    noise_std: f64,
    noise_seed: u64,
    blobs: Vec<Blob>,
}

impl PhantomLayout {
    pub fn sample<R: Rng>(config: &PhantomConfig, label: Label, rng: &mut R) -> Self {
        let s = config.size as f64;
        let mid = (s - 1.0) / 2.0;
        let (amin, amax) = config.axis_range;
        let a = rng.gen_range(amin..=amax) * s;
        let b = rng.gen_range(amin..=amax) * s;
        let mut layout = PhantomLayout {
            size: config.size,
            cx: mid + rng.gen_range(-0.04..=0.04) * s,
            cy: mid + rng.gen_range(-0.04..=0.04) * s,
            a,
            b,
            angle: rng.gen_range(-0.35..=0.35),
            peak: rng.gen_range(0.55..=0.7),
            falloff: rng.gen_range(0.25..=0.45),
            waves: (0..3)
                .map(|_| {
                    let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let freq = rng.gen_range(1.0..=3.0) * std::f64::consts::TAU / s;
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    (dir.cos() * freq, dir.sin() * freq, phase, rng.gen_range(0.5..=1.0))
                })
                .collect(),
            ventricle_offset: rng.gen_range(0.10..=0.16),
            ventricle_axes: (rng.gen_range(0.07..=0.11), rng.gen_range(0.16..=0.24)),
            texture: config.texture_scale,
            noise_std: config.noise_std,
            noise_seed: rng.gen(),
            blobs: Vec::new(),
        };
        if label == Label::Abnormal {
            let count = rng.gen_range(1..=3);
            let (rmin, rmax) = config.blob_radius;
            let (imin, imax) = config.blob_intensity;
            for _ in 0..count {
                // uniform point in the inner part of the ellipse
                let r = 0.6 * rng.gen_range(0.0f64..=1.0).sqrt();
                let t = rng.gen_range(0.0..std::f64::consts::TAU);
                let (ex, ey) = (r * t.cos() * layout.a, r * t.sin() * layout.b);
                let (sin, cos) = layout.angle.sin_cos();
                layout.blobs.push(Blob {
                    cx: layout.cx + ex * cos - ey * sin,
                    cy: layout.cy + ex * sin + ey * cos,
                    radius: rng.gen_range(rmin..=rmax),
                    intensity: rng.gen_range(imin..=imax),
                });
            }
        }
        layout
    }

    /// Normalized elliptical radius of a pixel centre.
    fn radius(&self, x: f64, y: f64, scale_a: f64, scale_b: f64, dx: f64) -> f64 {
        let (sin, cos) = self.angle.sin_cos();
        let (px, py) = (x - self.cx, y - self.cy);
        let u = px * cos + py * sin - dx;
        let v = -px * sin + py * cos;
        ((u / scale_a).powi(2) + (v / scale_b).powi(2)).sqrt()
    }

    /// Soft brain mask: 1 inside the ellipse, 0 outside.
    fn inside(&self, x: f64, y: f64) -> f64 {
        let r = self.radius(x, y, self.a, self.b, 0.0);
        smoothstep(1.0, 1.0 - 1.5 / self.a.min(self.b), r)
    }

    fn tissue(&self, x: f64, y: f64) -> f64 {
        let r = self.radius(x, y, self.a, self.b, 0.0);
        let inside = self.inside(x, y);
        if inside <= 0.0 {
            return 0.0;
        }
        let mut v = self.peak * (1.0 - self.falloff * r * r);
        for &(kx, ky, phase, amp) in &self.waves {
            v += self.texture * amp * (kx * x + ky * y + phase).sin();
        }
        let s = self.size as f64;
        let (va, vb) = (self.ventricle_axes.0 * s, self.ventricle_axes.1 * s);
        for side in [-1.0, 1.0] {
            let rv = self.radius(x, y, va, vb, side * self.ventricle_offset * s);
            v *= 1.0 - 0.6 * smoothstep(1.0, 0.7, rv);
        }
        (v * inside).clamp(0.0, 0.95)
    }

    /// Bright rim just outside the brain, peaking at 1. It pins every slice's
    /// maximum so per-slice normalization does not depend on the blobs.
    fn skull(&self, x: f64, y: f64) -> f64 {
        let r = self.radius(x, y, self.a, self.b, 0.0);
        let px = 1.0 / self.a.min(self.b);
        let (inner, outer) = (1.0 + 1.5 * px, 1.0 + 4.5 * px);
        smoothstep(inner - px, inner, r) * smoothstep(outer + px, outer, r)
    }

    /// Renders the phantom; `with_blobs` toggles the anomalies so the blob-free
    /// counterpart of an abnormal slice can be compared against it.
    pub fn render(&self, with_blobs: bool) -> (Image, Option<Vec<u8>>) {
        let n = self.size;
        let mut pixels = Vec::with_capacity(n * n);
        let mut mask = vec![0u8; n * n];
        let mut noise_rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        for y in 0..n {
            for x in 0..n {
                let (fx, fy) = (x as f64, y as f64);
                let mut v = self.tissue(fx, fy);
                if with_blobs {
                    // blobs stay within the brain
                    let inside = self.inside(fx, fy);
                    for blob in &self.blobs {
                        let d2 = (fx - blob.cx).powi(2) + (fy - blob.cy).powi(2);
                        let sigma = blob.radius / 2.0;
                        v += inside * blob.intensity * (-d2 / (2.0 * sigma * sigma)).exp();
                        if d2 <= blob.radius * blob.radius && inside > 0.5 {
                            mask[y * n + x] = 1;
                        }
                    }
                }
                v = v.max(self.skull(fx, fy));
                let e: f64 = noise_rng.sample(StandardNormal);
                v += self.noise_std * e.clamp(-2.0, 2.0);
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        let has_blobs = with_blobs && !self.blobs.is_empty();
        let image = Image { height: n, width: n, pixels };
        (image, has_blobs.then_some(mask))
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Renders one phantom at the config's native size.
pub fn generate_phantom<R: Rng>(config: &PhantomConfig, label: Label, id: &str, rng: &mut R) -> SliceRecord {
    let layout = PhantomLayout::sample(config, label, rng);
    let (image, mask) = layout.render(true);
    SliceRecord {
        id: id.to_string(),
        image,
        label,
        mask,
    }
}

/// Per-record generator stream derived from `(seed, id)`.
pub fn record_rng(seed: u64, id: &str) -> ChaCha8Rng {
    // FNV-1a over the id, folded into the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// Corner-aligned bilinear resampling to `target x target`.
pub fn resize_bilinear(image: &Image, target: usize) -> Result<Image> {
    if image.height < 2 || image.width < 2 || target == 0 {
        return Err(Error::Data(format!(
            "cannot resize {}x{} image to {target}",
            image.height, image.width
        )));
    }
    if image.height == target && image.width == target {
        return Ok(image.clone());
    }
    let coord = |i: usize, src: usize| {
        if target == 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (target - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(target * target);
    for i in 0..target {
        let sy = coord(i, image.height);
        let y0 = (sy.floor() as usize).min(image.height - 2);
        let fy = sy - y0 as f64;
        for j in 0..target {
            let sx = coord(j, image.width);
            let x0 = (sx.floor() as usize).min(image.width - 2);
            let fx = sx - x0 as f64;
            let p = |y: usize, x: usize| image.at(y, x) as f64;
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x0 + 1) * fx;
            let bottom = p(y0 + 1, x0) * (1.0 - fx) + p(y0 + 1, x0 + 1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Ok(Image {
        height: target,
        width: target,
        pixels: out,
    })
}

/// Min-max scaling to `[0, 1]`; a constant image maps to zeros.
pub fn normalize(image: &Image) -> Image {
    let (lo, hi) = image
        .pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    let span = hi - lo;
    let pixels = if span > 0.0 {
        image.pixels.iter().map(|&p| ((p - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; image.pixels.len()]
    };
    Image { pixels, ..image.clone() }
}

/// Resizes a record to `target` and rescales it to `[0, 1]`. The mask follows
/// the resize; an abnormal record always keeps at least one mask pixel.
pub fn preprocess(record: &SliceRecord, target: usize) -> Result<SliceRecord> {
    let image = normalize(&resize_bilinear(&record.image, target)?);
    let mask = match &record.mask {
        Some(m) => {
            let as_img = Image {
                height: record.image.height,
                width: record.image.width,
                pixels: m.iter().map(|&v| v as f32).collect(),
            };
            let soft = resize_bilinear(&as_img, target)?;
            let mut hard: Vec<u8> = soft.pixels.iter().map(|&v| u8::from(v >= 0.5)).collect();
            if !hard.iter().any(|&v| v != 0) {
                let best = soft
                    .pixels
                    .iter()
                    .enumerate()
                    .fold((0, f32::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0;
                hard[best] = 1;
            }
            Some(hard)
        }
        None => None,
    };
    Ok(SliceRecord {
        id: record.id.clone(),
        image,
        label: record.label,
        mask,
    })
}

/// Size and composition of a generated corpus.
#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub normals: usize,
    pub abnormals: usize,
    /// Final side length after preprocessing.
    pub size: usize,
    pub phantom: PhantomConfig,
}

impl CorpusSpec {
    /// Renders at twice the final size, then preprocesses down.
    pub fn new(normals: usize, abnormals: usize, size: usize, seed: u64) -> Self {
        CorpusSpec {
            normals,
            abnormals,
            size,
            phantom: PhantomConfig::new(2 * size, seed),
        }
    }
}

pub fn record_id(label: Label, index: usize) -> String {
    match label {
        Label::Normal => format!("n{index:05}"),
        Label::Abnormal => format!("a{index:05}"),
    }
}

/// Generates and preprocesses a corpus; a pure function of the spec.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<SliceRecord>> {
    spec.phantom.validate()?;
    let mut out = Vec::with_capacity(spec.normals + spec.abnormals);
    for (label, count) in [(Label::Normal, spec.normals), (Label::Abnormal, spec.abnormals)] {
        for i in 0..count {
            let id = record_id(label, i);
            let mut rng = record_rng(spec.phantom.seed, &id);
            let raw = generate_phantom(&spec.phantom, label, &id, &mut rng);
            out.push(preprocess(&raw, spec.size)?);
        }
    }
    Ok(out)
}

// ------------------------------------------------------------------ splits

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub train_frac_normals: f64,
    pub test_per_class: usize,
    pub seed: u64,
    /// Abnormal share of the training set (contamination studies).
    pub abnormal_train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_frac_normals: 0.85,
            test_per_class: 30,
            seed: 0,
            abnormal_train_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<SliceRecord>,
    pub val: Vec<SliceRecord>,
    pub test: Vec<SliceRecord>,
}

/// Balanced test set first, then the remaining normals split into training
/// and validation (`floor(frac * n)` for training).
pub fn make_splits(corpus: &[SliceRecord], config: &SplitConfig) -> Result<Splits> {
    if !(0.0..=1.0).contains(&config.train_frac_normals) || !(0.0..1.0).contains(&config.abnormal_train_fraction) {
        return Err(Error::Config("split fractions out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut normals: Vec<&SliceRecord> = corpus.iter().filter(|r| r.label == Label::Normal).collect();
    let mut abnormals: Vec<&SliceRecord> = corpus.iter().filter(|r| r.label == Label::Abnormal).collect();
    let k = config.test_per_class;
    if normals.len() < k + 2 || abnormals.len() < k {
        return Err(Error::Data(format!(
            "need at least {} normals and {k} abnormals, have {} and {}",
            k + 2,
            normals.len(),
            abnormals.len()
        )));
    }
    normals.shuffle(&mut rng);
    abnormals.shuffle(&mut rng);
    let rest = normals.len() - k;
    let n_train = (config.train_frac_normals * rest as f64).floor() as usize;
    let mut test: Vec<SliceRecord> = normals[..k].iter().chain(&abnormals[..k]).map(|&r| r.clone()).collect();
    test.sort_by(|a, b| a.id.cmp(&b.id));
    let mut train: Vec<SliceRecord> = normals[k..k + n_train].iter().map(|&r| r.clone()).collect();
    let val: Vec<SliceRecord> = normals[k + n_train..].iter().map(|&r| r.clone()).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training or validation split is empty".into()));
    }
    let f = config.abnormal_train_fraction;
    let n_contam = ((f / (1.0 - f)) * n_train as f64).floor() as usize;
    if n_contam > abnormals.len() - k {
        return Err(Error::Data("not enough abnormal slices for requested contamination".into()));
    }
    train.extend(abnormals[k..k + n_contam].iter().map(|&r| r.clone()));
    Ok(Splits { train, val, test })
}

// --------------------------------------------------------------- file I/O

pub fn encode_slice(record: &SliceRecord) -> Result<Vec<u8>> {
    let id = record.id.as_bytes();
    if id.len() > u16::MAX as usize {
        return Err(Error::Format(format!("id of {} bytes is too long", id.len())));
    }
    let (h, w) = (record.image.height, record.image.width);
    if record.image.pixels.len() != h * w {
        return Err(Error::Format("pixel count does not match extents".into()));
    }
    let mut out = Vec::with_capacity(20 + id.len() + h * w * 5);
    out.extend_from_slice(&SLICE_MAGIC);
    out.extend_from_slice(&SLICE_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.push(record.label as u8);
    out.push(u8::from(record.mask.is_some()));
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    for p in &record.image.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    if let Some(mask) = &record.mask {
        if mask.len() != h * w {
            return Err(Error::Format("mask size does not match extents".into()));
        }
        out.extend_from_slice(mask);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_slice(bytes: &[u8]) -> Result<SliceRecord> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != SLICE_MAGIC {
        return Err(Error::BadMagic {
            expected: SLICE_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != SLICE_VERSION {
        return Err(Error::Version {
            expected: SLICE_VERSION,
            found: version,
        });
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let flags = r.take(2, "flags")?;
    let label = Label::from_byte(flags[0]).ok_or_else(|| Error::Format(format!("bad label byte {}", flags[0])))?;
    let has_mask = match flags[1] {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("bad mask flag {b}"))),
    };
    let id_len = u16::from_le_bytes(r.take(2, "id length")?.try_into().unwrap()) as usize;
    let id = String::from_utf8(r.take(id_len, "id")?.to_vec()).map_err(|_| Error::Format("id is not UTF-8".into()))?;
    let n = h.checked_mul(w).ok_or_else(|| Error::Format("extent overflow".into()))?;
    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("extent overflow".into()))?, "pixels")?;
    let pixels = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mask = if has_mask { Some(r.take(n, "mask")?.to_vec()) } else { None };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(SliceRecord {
        id,
        image: Image { height: h, width: w, pixels },
        label,
        mask,
    })
}

pub fn write_slice(path: &Path, record: &SliceRecord) -> Result<()> {
    fs::write(path, encode_slice(record)?)?;
    Ok(())
}

pub fn read_slice(path: &Path) -> Result<SliceRecord> {
    decode_slice(&fs::read(path)?)
}

/// Writes `slices/<id>.bvsl` files and `manifest.csv` under `dir`.
pub fn write_corpus(dir: &Path, records: &[SliceRecord]) -> Result<()> {
    fs::create_dir_all(dir.join("slices"))?;
    let mut manifest = String::from("id,label,path\n");
    for r in records {
        if r.id.contains([',', '/', '\\', '\n']) {
            return Err(Error::Data(format!("id {:?} is not file-safe", r.id)));
        }
        let rel = format!("slices/{}.bvsl", r.id);
        write_slice(&dir.join(&rel), r)?;
        manifest.push_str(&format!("{},{},{}\n", r.id, r.label.as_str(), rel));
    }
    let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

/// Reads every slice listed in `manifest.csv`, in manifest order.
pub fn read_corpus(dir: &Path) -> Result<Vec<SliceRecord>> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut lines = text.lines();
    if lines.next() != Some("id,label,path") {
        return Err(Error::Format("manifest header must be `id,label,path`".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let [id, label, path] = fields[..] else {
            return Err(Error::Format(format!("manifest line {}: expected 3 fields", i + 2)));
        };
        let label = Label::parse(label).ok_or_else(|| Error::Format(format!("manifest line {}: bad label", i + 2)))?;
        let record = read_slice(&dir.join(path))?;
        if record.id != id || record.label != label {
            return Err(Error::Data(format!("manifest entry {id} disagrees with its slice file")));
        }
        out.push(record);
    }
    Ok(out)
}
