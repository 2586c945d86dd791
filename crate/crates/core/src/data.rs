//! Synthetic bi-temporal building-change pairs and tile I/O.
//!
//! A scene is a textured background with axis-aligned rectangular
//! "buildings". Each building slot draws an event: added (T2 only),
//! removed (T1 only) or unchanged (both). The mask is the symmetric
//! difference of the two footprint sets, always in the T1 frame; T2 is then
//! translated (border clamp) and photometrically jittered.
//!
//! Randomness comes from xoshiro256++ seeded through splitmix64
//! (`Xoshiro256PlusPlus::seed_from_u64`), so samples are reproducible
//! across platforms.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned rectangle, `[x0, x0 + w) x [y0, y0 + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: u32,
    pub y0: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    /// Overlap test with a `gap`-pixel margin.
    fn near(&self, o: &Rect, gap: u32) -> bool {
        self.x0 < o.x0 + o.w + gap
            && o.x0 < self.x0 + self.w + gap
            && self.y0 < o.y0 + o.h + gap
            && o.y0 < self.y0 + self.h + gap
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    Added,
    Removed,
    Unchanged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Building {
    pub rect: Rect,
    pub event: Event,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SampleMeta {
    pub seed: u64,
    pub buildings: Vec<Building>,
    pub shift: (i32, i32),
    /// `(brightness offset, contrast factor)` applied to T2.
    pub jitter: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChangeSample {
    pub t1: RgbImage,
    pub t2: RgbImage,
    /// `1` = changed, `0` = unchanged.
    pub mask: GrayImage,
    pub meta: SampleMeta,
}

impl ChangeSample {
    pub fn size(&self) -> (u32, u32) {
        self.t1.dimensions()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub size: u32,
    pub buildings: (u32, u32),
    pub building_size: (u32, u32),
    /// Probabilities of (added, removed, unchanged) per building slot.
    pub change_probs: (f64, f64, f64),
    pub texture_seed: u64,
    /// Maximum |dx|, |dy| of the T2 translation, in pixels (at most 3).
    pub max_shift: u32,
    /// Brightness offset is drawn from `±jitter * 255`, contrast from `1 ± jitter`.
    pub jitter: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            size: 64,
            buildings: (3, 8),
            building_size: (8, 18),
            change_probs: (0.25, 0.25, 0.5),
            texture_seed: 0,
            max_shift: 2,
            jitter: 0.1,
        }
    }
}

pub const MAX_SHIFT: u32 = 3;
const PLACEMENT_ATTEMPTS: usize = 100;

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let (a, r, u) = self.change_probs;
        if [a, r, u].iter().any(|p| !(0.0..=1.0).contains(p)) || ((a + r + u) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "change probabilities {:?} must be in [0,1] and sum to 1",
                self.change_probs
            )));
        }
        if self.buildings.0 > self.buildings.1 {
            return Err(Error::Config(format!("building count range {:?} is empty", self.buildings)));
        }
        let (lo, hi) = self.building_size;
        if lo == 0 || lo > hi || hi > self.size {
            return Err(Error::Config(format!(
                "building size range {:?} does not fit a {} px image",
                self.building_size, self.size
            )));
        }
        if self.max_shift > MAX_SHIFT {
            return Err(Error::Config(format!("shift range {} exceeds {MAX_SHIFT} px", self.max_shift)));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter {} must be in [0, 1)", self.jitter)));
        }
        Ok(())
    }

    /// Reads keys `size`, `buildings_min`, `buildings_max`, `building_size_min`,
    /// `building_size_max`, `p_add`, `p_remove`, `p_none`, `texture_seed`,
    /// `max_shift`, `jitter`; missing keys keep their defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut s = Self::default();
        s.size = kv.get_or("size", s.size)?;
        s.buildings.0 = kv.get_or("buildings_min", s.buildings.0)?;
        s.buildings.1 = kv.get_or("buildings_max", s.buildings.1)?;
        s.building_size.0 = kv.get_or("building_size_min", s.building_size.0)?;
        s.building_size.1 = kv.get_or("building_size_max", s.building_size.1)?;
        s.change_probs.0 = kv.get_or("p_add", s.change_probs.0)?;
        s.change_probs.1 = kv.get_or("p_remove", s.change_probs.1)?;
        s.change_probs.2 = kv.get_or("p_none", s.change_probs.2)?;
        s.texture_seed = kv.get_or("texture_seed", s.texture_seed)?;
        s.max_shift = kv.get_or("max_shift", s.max_shift)?;
        s.jitter = kv.get_or("jitter", s.jitter)?;
        s.validate()?;
        Ok(s)
    }

    pub const KEYS: &'static [&'static str] = &[
        "size",
        "buildings_min",
        "buildings_max",
        "building_size_min",
        "building_size_max",
        "p_add",
        "p_remove",
        "p_none",
        "texture_seed",
        "max_shift",
        "jitter",
    ];
}

fn place(rng: &mut impl Rng, spec: &GenSpec, taken: &[Rect]) -> Result<Rect> {
    let (lo, hi) = spec.building_size;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let w = rng.gen_range(lo..=hi);
        let h = rng.gen_range(lo..=hi);
        let x0 = rng.gen_range(0..=spec.size - w);
        let y0 = rng.gen_range(0..=spec.size - h);
        let r = Rect { x0, y0, w, h };
        if taken.iter().all(|t| !r.near(t, 2)) {
            return Ok(r);
        }
    }
    Err(Error::Generation(format!(
        "could not place building {} without overlap after {PLACEMENT_ATTEMPTS} attempts",
        taken.len() + 1
    )))
}

/// Period-1 triangle wave in `[-1, 1]`, plain arithmetic so it is
/// bit-identical everywhere.
fn triangle(t: f64) -> f64 {
    4.0 * (t - t.floor() - 0.5).abs() - 1.0
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// One sample, fully determined by `(spec, seed)`.
pub fn generate(spec: &GenSpec, seed: u64) -> Result<ChangeSample> {
    spec.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut tex = Xoshiro256PlusPlus::seed_from_u64(seed ^ spec.texture_seed.rotate_left(32) ^ 0x5bd1_e995);
    let n = spec.size;

    // Background: a smooth two-tone field plus per-pixel grain.
    let base: [f64; 3] = [rng.gen_range(70.0..110.0), rng.gen_range(90.0..130.0), rng.gen_range(60.0..100.0)];
    let (fx, fy) = (rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2));
    let mut background = RgbImage::new(n, n);
    for (x, y, px) in background.enumerate_pixels_mut() {
        let wave = 12.0 * (triangle(x as f64 * fx) + triangle(y as f64 * fy));
        let grain: f64 = tex.gen_range(-10.0..10.0);
        *px = Rgb(std::array::from_fn(|c| clamp_u8(base[c] + wave + grain)));
    }

    let count = rng.gen_range(spec.buildings.0..=spec.buildings.1);
    let (pa, pr, _) = spec.change_probs;
    let mut rects = Vec::with_capacity(count as usize);
    let mut buildings = Vec::with_capacity(count as usize);
    let mut roofs = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let rect = place(&mut rng, spec, &rects)?;
        rects.push(rect);
        let u: f64 = rng.gen();
        let event = if u < pa {
            Event::Added
        } else if u < pa + pr {
            Event::Removed
        } else {
            Event::Unchanged
        };
        buildings.push(Building { rect, event });
        // Roofs are bright or dark against the background.
        let bright = rng.gen_bool(0.5);
        let level: f64 = if bright { rng.gen_range(170.0..230.0) } else { rng.gen_range(20.0..50.0) };
        let tint: [f64; 3] = std::array::from_fn(|_| level + rng.gen_range(-15.0..15.0));
        let grain: Vec<f64> = (0..rect.w * rect.h).map(|_| tex.gen_range(-6.0..6.0)).collect();
        roofs.push((tint, grain));
    }

    let render = |present: &dyn Fn(&Building) -> bool| {
        let mut img = background.clone();
        for (b, (tint, grain)) in buildings.iter().zip(&roofs) {
            if !present(b) {
                continue;
            }
            let r = b.rect;
            for y in 0..r.h {
                for x in 0..r.w {
                    let gv = grain[(y * r.w + x) as usize];
                    img.put_pixel(r.x0 + x, r.y0 + y, Rgb(std::array::from_fn(|c| clamp_u8(tint[c] + gv))));
                }
            }
        }
        img
    };
    let t1 = render(&|b| b.event != Event::Added);
    let t2_clean = render(&|b| b.event != Event::Removed);

    let mut mask = GrayImage::new(n, n);
    for (x, y, px) in mask.enumerate_pixels_mut() {
        let changed = buildings.iter().any(|b| b.event != Event::Unchanged && b.rect.contains(x, y));
        *px = Luma([changed as u8]);
    }

    let m = spec.max_shift as i32;
    let shift = if m > 0 { (rng.gen_range(-m..=m), rng.gen_range(-m..=m)) } else { (0, 0) };
    let jitter = if spec.jitter > 0.0 {
        (rng.gen_range(-spec.jitter..=spec.jitter) * 255.0, 1.0 + rng.gen_range(-spec.jitter..=spec.jitter))
    } else {
        (0.0, 1.0)
    };
    let t2 = photometric(&translate(&t2_clean, shift.0, shift.1), jitter.0, jitter.1);
    Ok(ChangeSample { t1, t2, mask, meta: SampleMeta { seed, buildings, shift, jitter } })
}

/// `count` samples with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_set(spec: &GenSpec, base_seed: u64, count: usize) -> Result<Vec<ChangeSample>> {
    (0..count as u64).map(|i| generate(spec, base_seed.wrapping_add(i))).collect()
}

/// Moves content by `(dx, dy)` pixels: `out(x, y) = in(x - dx, y - dy)`,
/// with coordinates clamped to the border.
pub fn translate(img: &RgbImage, dx: i32, dy: i32) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let sx = (x as i32 - dx).clamp(0, w as i32 - 1) as u32;
        let sy = (y as i32 - dy).clamp(0, h as i32 - 1) as u32;
        *img.get_pixel(sx, sy)
    })
}

/// `v' = (v - 128) * contrast + 128 + brightness`, rounded and clamped.
pub fn photometric(img: &RgbImage, brightness: f64, contrast: f64) -> RgbImage {
    let mut out = img.clone();
    for px in out.pixels_mut() {
        for v in px.0.iter_mut() {
            *v = clamp_u8((*v as f64 - 128.0) * contrast + 128.0 + brightness);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    pub flip: bool,
    pub photometric: bool,
    pub temporal_swap: bool,
}

impl AugmentFlags {
    pub fn all() -> Self {
        Self { flip: true, photometric: true, temporal_swap: true }
    }
}

pub fn flip_horizontal(s: &ChangeSample) -> ChangeSample {
    use image::imageops::flip_horizontal as f;
    ChangeSample { t1: f(&s.t1), t2: f(&s.t2), mask: f(&s.mask), meta: s.meta.clone() }
}

pub fn flip_vertical(s: &ChangeSample) -> ChangeSample {
    use image::imageops::flip_vertical as f;
    ChangeSample { t1: f(&s.t1), t2: f(&s.t2), mask: f(&s.mask), meta: s.meta.clone() }
}

/// Exchanges T1 and T2; the mask is a symmetric difference and stays put.
pub fn swap_temporal(s: &ChangeSample) -> ChangeSample {
    ChangeSample { t1: s.t2.clone(), t2: s.t1.clone(), mask: s.mask.clone(), meta: s.meta.clone() }
}

/// Random flips, per-image brightness/contrast and temporal swap, each
/// enabled by `flags` and applied with probability 1/2.
pub fn augment(s: &ChangeSample, flags: AugmentFlags, seed: u64) -> ChangeSample {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut out = s.clone();
    if flags.flip {
        if rng.gen_bool(0.5) {
            out = flip_horizontal(&out);
        }
        if rng.gen_bool(0.5) {
            out = flip_vertical(&out);
        }
    }
    if flags.photometric {
        for img in [&mut out.t1, &mut out.t2] {
            if rng.gen_bool(0.5) {
                let b = rng.gen_range(-20.0..20.0);
                let c = rng.gen_range(0.85..1.15);
                *img = photometric(img, b, c);
            }
        }
    }
    if flags.temporal_swap && rng.gen_bool(0.5) {
        out = swap_temporal(&out);
    }
    out
}

/// Packs images into an `N x 3 x H x W` tensor scaled to roughly `[-1, 1]`.
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<Tensor<f32>> {
    let images: Vec<&RgbImage> = images.into_iter().collect();
    let first = images.first().ok_or_else(|| Error::Data("no images to pack".into()))?;
    let (w, h) = first.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0f32; images.len() * 3 * h * w];
    for (i, img) in images.iter().enumerate() {
        if img.dimensions() != first.dimensions() {
            return Err(Error::Data(format!("image {i} is {:?}, expected {:?}", img.dimensions(), first.dimensions())));
        }
        for (p, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[(i * 3 + c) * h * w + p] = px.0[c] as f32 / 127.5 - 1.0;
            }
        }
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

/// Concatenated `{0,1}` masks in row-major order.
pub fn masks_to_vec<'a>(masks: impl IntoIterator<Item = &'a GrayImage>) -> Vec<u8> {
    masks.into_iter().flat_map(|m| m.as_raw().iter().copied()).collect()
}

fn tile_name(i: usize) -> String {
    format!("{i:05}.png")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Dataset { path: path.to_path_buf(), msg: e.to_string() }
}

/// Writes `root/{A,B,label}/NNNNN.png`; labels are stored as `{0,255}`.
pub fn write_dataset(samples: &[ChangeSample], root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for sub in ["A", "B", "label"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let name = tile_name(i);
        let a = root.join("A").join(&name);
        s.t1.save(&a).map_err(|e| io_err(&a, e))?;
        let b = root.join("B").join(&name);
        s.t2.save(&b).map_err(|e| io_err(&b, e))?;
        let l = root.join("label").join(&name);
        let label = GrayImage::from_fn(s.mask.width(), s.mask.height(), |x, y| Luma([s.mask.get_pixel(x, y)[0] * 255]));
        label.save(&l).map_err(|e| io_err(&l, e))?;
    }
    Ok(())
}

/// Reads every tile listed in `root/A`, in name order. Metadata that is not
/// stored in the images comes back as defaults (seed = tile index).
pub fn read_dataset(root: impl AsRef<Path>) -> Result<Vec<ChangeSample>> {
    let root = root.as_ref();
    let dir = root.join("A");
    let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| io_err(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(io_err(&dir, "no .png tiles found"));
    }
    let mut out = Vec::with_capacity(names.len());
    for (i, a) in names.iter().enumerate() {
        let file = a.file_name().expect("listed file");
        let b = root.join("B").join(file);
        let l = root.join("label").join(file);
        for p in [&b, &l] {
            if !p.exists() {
                return Err(io_err(p, format!("missing counterpart of {}", a.display())));
            }
        }
        let t1 = image::open(a).map_err(|e| io_err(a, e))?.to_rgb8();
        let t2 = image::open(&b).map_err(|e| io_err(&b, e))?.to_rgb8();
        let label = image::open(&l).map_err(|e| io_err(&l, e))?.to_luma8();
        if t2.dimensions() != t1.dimensions() {
            return Err(io_err(&b, format!("size {:?} differs from A {:?}", t2.dimensions(), t1.dimensions())));
        }
        if label.dimensions() != t1.dimensions() {
            return Err(io_err(&l, format!("size {:?} differs from A {:?}", label.dimensions(), t1.dimensions())));
        }
        let mut mask = GrayImage::new(label.width(), label.height());
        for (x, y, px) in label.enumerate_pixels() {
            let v = match px[0] {
                0 => 0,
                255 => 1,
                other => return Err(io_err(&l, format!("non-binary label value {other} at ({x}, {y})"))),
            };
            mask.put_pixel(x, y, Luma([v]));
        }
        out.push(ChangeSample { t1, t2, mask, meta: SampleMeta { seed: i as u64, ..Default::default() } });
    }
    Ok(out)
}

/// Disjoint train / validation sets drawn from one benchmark seed: training
/// samples use seeds `seed * 2^20 + i`, validation `seed * 2^20 + 2^19 + i`.
pub fn benchmark_split(
    spec: &GenSpec,
    seed: u64,
    n_train: usize,
    n_val: usize,
) -> Result<(Vec<ChangeSample>, Vec<ChangeSample>)> {
    let base = seed << 20;
    Ok((generate_set(spec, base, n_train)?, generate_set(spec, base + (1 << 19), n_val)?))
}
