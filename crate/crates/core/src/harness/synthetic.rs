//! Synthetic fine-grained benchmark: one silhouette per superclass, fine
//! classes told apart only by the pixel-scale texture of small parts, drawn
//! over random clutter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

use crate::imaging::{read_ppm, write_ppm, Image, Rect};

/// Number of distinct part textures; bounds the fine classes per superclass.
pub const TEXTURES: usize = 4;

/// Vertical centres of the part slots, as fractions of the object height.
const PART_SLOTS: [&[f64]; 3] = [&[0.5], &[0.3, 0.7], &[0.22, 0.5, 0.78]];

/// Silhouettes, one per superclass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Silhouette {
    Ellipse,
    Rectangle,
    Diamond,
    Capsule,
}

const SILHOUETTES: [Silhouette; 4] = [
    Silhouette::Ellipse,
    Silhouette::Rectangle,
    Silhouette::Diamond,
    Silhouette::Capsule,
];

impl Silhouette {
    /// Whether the point at fractional offsets `(u, v)` in `[0, 1]^2` of the box is inside.
    fn contains(self, u: f64, v: f64) -> bool {
        let (du, dv) = ((u - 0.5) * 2.0, (v - 0.5) * 2.0);
        match self {
            Silhouette::Ellipse => du * du + dv * dv <= 1.0,
            Silhouette::Rectangle => du.abs() <= 1.0 && dv.abs() <= 1.0,
            Silhouette::Diamond => du.abs() * 0.6 + dv.abs() * 0.6 <= 1.0 && du.abs() <= 1.0,
            Silhouette::Capsule => {
                let cap = (dv.abs() - 0.5).max(0.0) * 2.0;
                du * du + cap * cap <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub superclasses: usize,
    pub fine_per_superclass: usize,
    pub parts: usize,
    /// Object box sides are drawn from this range, as fractions of the image side.
    pub object_min: f64,
    pub object_max: f64,
    /// Part side as a fraction of the object's shorter side.
    pub part_scale: f64,
    /// Mean number of clutter shapes per image.
    pub clutter: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Brightness difference between the two tones of a part texture.
    pub texture_contrast: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Clutter-only training images (the FilterNet background class).
    pub background_train: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            superclasses: 2,
            fine_per_superclass: 4,
            parts: 2,
            object_min: 0.6,
            object_max: 0.85,
            part_scale: 0.32,
            clutter: 6.0,
            noise: 0.16,
            texture_contrast: 0.3,
            train_per_class: 200,
            val_per_class: 50,
            test_per_class: 50,
            background_train: 400,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Invalid(format!("image size {} below 32", self.image_size)));
        }
        if self.superclasses == 0 || self.superclasses > SILHOUETTES.len() {
            return Err(Error::OutOfRange(format!("superclasses {}", self.superclasses)));
        }
        if self.fine_per_superclass < 2 || self.fine_per_superclass > TEXTURES {
            return Err(Error::OutOfRange(format!(
                "fine classes per superclass {}",
                self.fine_per_superclass
            )));
        }
        if self.parts == 0 || self.parts > PART_SLOTS.len() {
            return Err(Error::Invalid(format!(
                "{} parts exceed the silhouette's {} part slots",
                self.parts,
                PART_SLOTS.len()
            )));
        }
        if !(0.2..=1.0).contains(&self.object_min) || !(self.object_min..=1.0).contains(&self.object_max) {
            return Err(Error::OutOfRange(format!(
                "object size range {}..{}",
                self.object_min, self.object_max
            )));
        }
        if !(0.1..=0.45).contains(&self.part_scale) {
            return Err(Error::OutOfRange(format!("part scale {}", self.part_scale)));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.clutter) || !finite_nonneg(self.noise) || !finite_nonneg(self.texture_contrast) {
            return Err(Error::Invalid("clutter, noise and contrast must be non-negative".into()));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Invalid("every split needs samples".into()));
        }
        Ok(())
    }

    pub fn fine_classes(&self) -> usize {
        self.superclasses * self.fine_per_superclass
    }

    /// Texture index of part `part` for local fine class `fine`.
    pub fn texture_of(&self, fine: usize, part: usize) -> usize {
        (fine + part) % TEXTURES
    }
}

/// One generated image with its labels and (test-only) annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Fine label within the superclass.
    pub fine: usize,
    pub superclass: usize,
    pub object_box: Rect,
    pub part_boxes: Vec<Rect>,
}

impl Sample {
    /// Fine label counted across all superclasses.
    pub fn global_fine(&self, fine_per_superclass: usize) -> usize {
        self.superclass * fine_per_superclass + self.fine
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub spec: SyntheticSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub background: Vec<Image>,
}

impl LabeledDataset {
    pub fn split(&self, name: &str) -> Option<&[Sample]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// `(r, g, b)` from hue in turns, saturation and value.
fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// 4x4 tiles of the part textures: each has eight set pixels, is not a
/// stripe pattern, and maps to a translate of itself under mirroring.
const TILES: [[[u8; 4]; 4]; TEXTURES] = [
    [[0, 0, 0, 1], [1, 1, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0]],
    [[0, 0, 0, 1], [1, 0, 1, 1], [0, 1, 0, 1], [1, 0, 1, 0]],
    [[0, 0, 0, 1], [0, 1, 1, 1], [1, 0, 0, 0], [1, 1, 1, 0]],
    [[0, 0, 1, 1], [0, 1, 1, 0], [1, 0, 0, 1], [1, 1, 0, 0]],
];

/// Whether texture `t` takes its second tone at `(y, x)`.
pub fn texture_bit(t: usize, y: usize, x: usize) -> bool {
    TILES[t][y % 4][x % 4] == 1
}

struct Canvas {
    size: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn put(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.size + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    fn fill_shape(&mut self, rect: Rect, shape: Silhouette, rgb: [f64; 3]) {
        for y in rect.y..rect.bottom().min(self.size) {
            for x in rect.x..rect.right().min(self.size) {
                let u = (x - rect.x) as f64 / (rect.w.max(2) - 1) as f64;
                let v = (y - rect.y) as f64 / (rect.h.max(2) - 1) as f64;
                if shape.contains(u, v) {
                    self.put(y, x, rgb);
                }
            }
        }
    }
}

fn tone_pair(spec: &SyntheticSpec, superclass: usize, part: usize) -> ([f64; 3], [f64; 3]) {
    let hue = (superclass * spec.parts + part) as f64 * 0.381_966 + 0.08;
    let base = hsv(hue, 0.75, 0.9);
    let dark = base.map(|c| (c - spec.texture_contrast).max(0.0));
    (base, dark)
}

fn draw_background(canvas: &mut Canvas, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) {
    let n = spec.image_size;
    let a = hsv(rng.random(), rng.random_range(0.0..0.5), rng.random_range(0.3..0.8));
    let b = hsv(rng.random(), rng.random_range(0.0..0.5), rng.random_range(0.3..0.8));
    let vertical = rng.random_bool(0.5);
    for y in 0..n {
        for x in 0..n {
            let t = if vertical { y } else { x } as f64 / (n - 1) as f64;
            canvas.put(y, x, std::array::from_fn(|c| a[c] * (1.0 - t) + b[c] * t));
        }
    }
    let count = (spec.clutter * rng.random_range(0.5..1.5)).round() as usize;
    for _ in 0..count {
        let w = rng.random_range(4..=n / 4);
        let h = rng.random_range(4..=n / 4);
        let rect = Rect::new(rng.random_range(0..=n - w), rng.random_range(0..=n - h), w, h);
        let shape = SILHOUETTES[rng.random_range(0..SILHOUETTES.len())];
        let rgb = hsv(rng.random(), rng.random_range(0.0..0.8), rng.random_range(0.2..0.9));
        canvas.fill_shape(rect, shape, rgb);
    }
}

fn add_noise(canvas: &mut Canvas, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Image> {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
        for v in &mut canvas.data {
            *v += normal.sample(rng);
        }
    }
    // Quantized to the 8-bit grid so saved datasets reload exactly.
    let data = canvas
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    Image::new(canvas.size, canvas.size, 3, data)
}

fn draw_sample(spec: &SyntheticSpec, superclass: usize, fine: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let n = spec.image_size;
    let mut canvas = Canvas {
        size: n,
        data: vec![0.0; n * n * 3],
    };
    draw_background(&mut canvas, spec, rng);

    let lo = (n as f64 * spec.object_min).round() as usize;
    let hi = (n as f64 * spec.object_max).round() as usize;
    let w = rng.random_range(lo..=hi);
    let h = rng.random_range(lo..=hi);
    let object_box = Rect::new(rng.random_range(0..=n - w), rng.random_range(0..=n - h), w, h);
    let body = hsv(rng.random(), rng.random_range(0.1..0.35), rng.random_range(0.45..0.75));
    canvas.fill_shape(object_box, SILHOUETTES[superclass], body);

    let side = ((w.min(h) as f64) * spec.part_scale).round().max(4.0) as usize;
    let mut part_boxes = Vec::with_capacity(spec.parts);
    for (part, &frac) in PART_SLOTS[spec.parts - 1].iter().enumerate() {
        let cy = object_box.y as f64 + frac * h as f64;
        let y = (cy - side as f64 / 2.0).round() as usize;
        let x = object_box.x + (w - side) / 2;
        let rect = Rect::new(x, y, side, side);
        let (light, dark) = tone_pair(spec, superclass, part);
        let jitter = rng.random_range(-0.05..0.05);
        let texture = spec.texture_of(fine, part);
        for py in rect.y..rect.bottom() {
            for px in rect.x..rect.right() {
                let tone = if texture_bit(texture, py - rect.y, px - rect.x) { dark } else { light };
                canvas.put(py, px, tone.map(|c| (c + jitter).clamp(0.0, 1.0)));
            }
        }
        part_boxes.push(rect);
    }
    let image = add_noise(&mut canvas, spec.noise, rng)?;
    Ok(Sample {
        image,
        fine,
        superclass,
        object_box,
        part_boxes,
    })
}

/// Clutter-only image of the same statistics as the object images.
fn draw_clutter(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Image> {
    let n = spec.image_size;
    let mut canvas = Canvas {
        size: n,
        data: vec![0.0; n * n * 3],
    };
    draw_background(&mut canvas, spec, rng);
    add_noise(&mut canvas, spec.noise, rng)
}

fn gen_split(spec: &SyntheticSpec, per_class: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(per_class * spec.fine_classes());
    for i in 0..per_class * spec.fine_classes() {
        let global = i % spec.fine_classes();
        let (superclass, fine) = (global / spec.fine_per_superclass, global % spec.fine_per_superclass);
        out.push(draw_sample(spec, superclass, fine, rng)?);
    }
    Ok(out)
}

pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split_rng = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(rng.random());
        r.set_stream(stream);
        r
    };
    let (mut r_train, mut r_val, mut r_test, mut r_bg) = (split_rng(0), split_rng(1), split_rng(2), split_rng(3));
    Ok(LabeledDataset {
        spec: spec.clone(),
        train: gen_split(spec, spec.train_per_class, &mut r_train)?,
        val: gen_split(spec, spec.val_per_class, &mut r_val)?,
        test: gen_split(spec, spec.test_per_class, &mut r_test)?,
        background: (0..spec.background_train)
            .map(|_| draw_clutter(spec, &mut r_bg))
            .collect::<Result<_>>()?,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    split: String,
    file: String,
    fine: Option<usize>,
    superclass: Option<usize>,
    object_box: Option<[usize; 4]>,
    part_boxes: Vec<[usize; 4]>,
}

fn rect_array(r: Rect) -> [usize; 4] {
    [r.x, r.y, r.w, r.h]
}

fn array_rect(a: [usize; 4]) -> Rect {
    Rect::new(a[0], a[1], a[2], a[3])
}

pub const SPEC_FILE: &str = "spec.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes `spec.json`, `manifest.jsonl` and one PPM per image under `dir`.
pub fn save_dataset(data: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let spec = serde_json::to_string_pretty(&data.spec).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(dir.join(SPEC_FILE), spec + "\n")?;
    let mut manifest = String::new();
    let mut write = |split: &str, i: usize, img: &Image, sample: Option<&Sample>| -> Result<()> {
        let file = format!("images/{split}_{i:05}.ppm");
        fs::write(dir.join(&file), write_ppm(img))?;
        let entry = ManifestEntry {
            split: split.to_string(),
            file,
            fine: sample.map(|s| s.fine),
            superclass: sample.map(|s| s.superclass),
            object_box: sample.map(|s| rect_array(s.object_box)),
            part_boxes: sample.map_or(vec![], |s| s.part_boxes.iter().map(|&r| rect_array(r)).collect()),
        };
        manifest += &serde_json::to_string(&entry).map_err(|e| Error::Invalid(e.to_string()))?;
        manifest.push('\n');
        Ok(())
    };
    for (name, samples) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        for (i, s) in samples.iter().enumerate() {
            write(name, i, &s.image, Some(s))?;
        }
    }
    for (i, img) in data.background.iter().enumerate() {
        write("background", i, img, None)?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let spec_text = fs::read_to_string(dir.join(SPEC_FILE))?;
    let spec: SyntheticSpec = serde_json::from_str(&spec_text).map_err(|e| Error::Invalid(format!("{SPEC_FILE}: {e}")))?;
    spec.validate()?;
    let mut data = LabeledDataset {
        spec,
        train: vec![],
        val: vec![],
        test: vec![],
        background: vec![],
    };
    for (n, line) in fs::read_to_string(dir.join(MANIFEST_FILE))?.lines().enumerate() {
        let bad = |msg: String| Error::Config { line: n + 1, msg };
        let e: ManifestEntry = serde_json::from_str(line).map_err(|e| bad(format!("{MANIFEST_FILE}: {e}")))?;
        let image = read_ppm(&fs::read(dir.join(&e.file))?)?;
        if e.split == "background" {
            data.background.push(image);
            continue;
        }
        let (Some(fine), Some(superclass), Some(object_box)) = (e.fine, e.superclass, e.object_box) else {
            return Err(bad(format!("{MANIFEST_FILE}: labelled entry without labels")));
        };
        if fine >= data.spec.fine_per_superclass || superclass >= data.spec.superclasses {
            return Err(bad(format!("{MANIFEST_FILE}: label out of range")));
        }
        let sample = Sample {
            image,
            fine,
            superclass,
            object_box: array_rect(object_box),
            part_boxes: e.part_boxes.into_iter().map(array_rect).collect(),
        };
        match e.split.as_str() {
            "train" => data.train.push(sample),
            "val" => data.val.push(sample),
            "test" => data.test.push(sample),
            other => return Err(bad(format!("{MANIFEST_FILE}: unknown split {other}"))),
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train_per_class: 3,
            val_per_class: 2,
            test_per_class: 2,
            background_train: 4,
            ..Default::default()
        }
    }

    /// Reads the texture planted in a part box by correlating the box's
    /// brightness with each texture's tone layout.
    fn oracle_texture(img: &Image, rect: Rect) -> usize {
        let lum = |y: usize, x: usize| img.pixel(y, x).iter().sum::<f64>();
        let scores: Vec<f64> = (0..TEXTURES)
            .map(|t| {
                let mut s = 0.0;
                for y in rect.y..rect.bottom() {
                    for x in rect.x..rect.right() {
                        let sign = if texture_bit(t, y - rect.y, x - rect.x) { -1.0 } else { 1.0 };
                        s += sign * lum(y, x);
                    }
                }
                s
            })
            .collect();
        crate::numerics::argmax(&scores)
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_synthetic(&small(), 5).unwrap();
        assert_eq!(a, gen_synthetic(&small(), 5).unwrap());
        assert_ne!(a.train[0].image, gen_synthetic(&small(), 6).unwrap().train[0].image);
    }

    #[test]
    fn boxes_nest_and_classes_balance() {
        let d = gen_synthetic(&small(), 1).unwrap();
        let n = d.spec.image_size;
        for s in d.train.iter().chain(&d.val).chain(&d.test) {
            assert!(s.object_box.fits_in(n, n));
            assert_eq!(s.part_boxes.len(), 2);
            assert!(s.part_boxes.iter().all(|p| s.object_box.contains_rect(p)));
        }
        let mut counts = vec![0; d.spec.fine_classes()];
        for s in &d.train {
            counts[s.global_fine(4)] += 1;
        }
        assert!(counts.iter().all(|&c| c == 3));
        assert_eq!(d.background.len(), 4);
    }

    #[test]
    fn oracle_reads_every_planted_texture() {
        let d = gen_synthetic(&small(), 2).unwrap();
        for s in d.train.iter().chain(&d.test) {
            for (part, rect) in s.part_boxes.iter().enumerate() {
                assert_eq!(oracle_texture(&s.image, *rect), d.spec.texture_of(s.fine, part));
            }
        }
    }

    #[test]
    fn textures_share_their_mean() {
        for t in 0..TEXTURES {
            let on = (0..4).flat_map(|y| (0..4).map(move |x| (y, x))).filter(|&(y, x)| texture_bit(t, y, x)).count();
            assert_eq!(on, 8);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let too_many_parts = SyntheticSpec { parts: 4, ..small() };
        assert!(gen_synthetic(&too_many_parts, 0).is_err());
        let one_fine = SyntheticSpec {
            fine_per_superclass: 1,
            ..small()
        };
        assert!(gen_synthetic(&one_fine, 0).is_err());
        let crowded = SyntheticSpec {
            fine_per_superclass: TEXTURES + 1,
            ..small()
        };
        assert!(gen_synthetic(&crowded, 0).is_err());
    }

    #[test]
    fn saved_dataset_reloads_exactly() {
        let data = gen_synthetic(&small(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), data);
    }
}
