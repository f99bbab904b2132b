//! Synthetic gland images, the on-disk dataset layout, labeled/unlabeled
//! splits, augmentation and batching.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use semimoe_autograd::Tensor;

use crate::error::{Error, Result};
use crate::io;
use crate::labels::{BinaryMask, LabelTriple};
use crate::losses::Targets;
use crate::seed::derive_seed;

pub const MIN_SYNTH_SIZE: usize = 32;
pub const FOREGROUND_RANGE: (f64, f64) = (0.05, 0.6);
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// One image with optional ground truth. `image` is `[3, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub labels: Option<LabelTriple>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn mask(&self) -> Option<&BinaryMask> {
        self.labels.as_ref().map(|l| &l.mask)
    }

    pub fn unlabeled(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            image: self.image.clone(),
            labels: None,
        }
    }

    fn from_rgb(id: String, h: usize, w: usize, rgb: &[u8], mask: Option<BinaryMask>) -> Self {
        let mut planar = vec![0.0; 3 * h * w];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planar[c * h * w + i] = f64::from(px[c]) / 255.0;
            }
        }
        Sample {
            id,
            image: Tensor::new(&[3, h, w], planar),
            labels: mask.map(LabelTriple::from_mask),
        }
    }

    /// Interleaved 8-bit RGB.
    pub fn to_rgb(&self) -> Vec<u8> {
        let plane = self.height() * self.width();
        let d = self.image.data();
        (0..plane)
            .flat_map(|i| (0..3).map(move |c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator

#[derive(Clone, Debug)]
struct Gland {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    /// `(order, amplitude, phase)` radial perturbations.
    wobble: [(f64, f64, f64); 3],
}

impl Gland {
    fn random(rng: &mut ChaCha8Rng, cy: f64, cx: f64, scale: f64) -> Self {
        let a = rng.gen_range(0.08..0.19) * scale;
        let b = a * rng.gen_range(0.55..1.0);
        let theta = rng.gen_range(0.0..PI);
        let mut wobble = [(0.0, 0.0, 0.0); 3];
        for (k, w) in wobble.iter_mut().enumerate() {
            *w = ((k + 2) as f64, rng.gen_range(0.0..0.1), rng.gen_range(0.0..2.0 * PI));
        }
        Self {
            cy,
            cx,
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
            wobble,
        }
    }

    fn mean_radius(&self) -> f64 {
        0.5 * (self.a + self.b)
    }

    /// Relative depth: below 1 inside the gland, 0 at its center.
    fn depth(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        let rho = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        let edge = 1.0 + self.wobble.iter().map(|(k, amp, ph)| amp * (k * phi + ph).cos()).sum::<f64>();
        rho / edge
    }
}

fn draw_glands(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<Gland> {
    let scale = h.min(w) as f64;
    let count = rng.gen_range(2..=6);
    let mut glands: Vec<Gland> = Vec::with_capacity(count);
    for _ in 0..count {
        let touching = !glands.is_empty() && rng.gen_bool(0.35);
        let mut g = Gland::random(rng, 0.0, 0.0, scale);
        if touching {
            let prev = glands.last().expect("non-empty");
            let angle = rng.gen_range(0.0..2.0 * PI);
            let dist = prev.mean_radius() + g.mean_radius();
            g.cy = (prev.cy + dist * angle.sin()).clamp(0.0, h as f64 - 1.0);
            g.cx = (prev.cx + dist * angle.cos()).clamp(0.0, w as f64 - 1.0);
        } else {
            g.cy = rng.gen_range(0.1..0.9) * h as f64;
            g.cx = rng.gen_range(0.1..0.9) * w as f64;
        }
        glands.push(g);
    }
    glands
}

/// Smooth random field made of a few plane waves, roughly in `[-1, 1]`.
fn wave_field(rng: &mut ChaCha8Rng, waves: usize, max_freq: f64) -> Vec<(f64, f64, f64, f64)> {
    (0..waves)
        .map(|_| {
            let (fy, fx) = (rng.gen_range(-max_freq..max_freq), rng.gen_range(-max_freq..max_freq));
            (fy, fx, rng.gen_range(0.0..2.0 * PI), 1.0 / waves as f64)
        })
        .collect()
}

fn eval_field(field: &[(f64, f64, f64, f64)], y: f64, x: f64) -> f64 {
    field.iter().map(|(fy, fx, ph, amp)| amp * (fy * y + fx * x + ph).sin()).sum()
}

/// Per-gland appearance.
struct GlandStyle {
    /// Relative depth below which the interior is bright lumen; 0 for solid glands.
    lumen: f64,
    /// Relative depth where the nuclear rim starts.
    rim: f64,
    /// Darkening factor of the rim.
    dark: f64,
}

fn render(rng: &mut ChaCha8Rng, glands: &[Gland], h: usize, w: usize) -> Vec<u8> {
    let stroma = [0.86, 0.60, 0.76];
    let rim = [0.42, 0.24, 0.58];
    let cytoplasm = [0.84, 0.50, 0.70];
    let lumen = [0.96, 0.91, 0.95];
    let nucleus = [0.40, 0.26, 0.56];

    let styles: Vec<GlandStyle> = glands
        .iter()
        .map(|_| GlandStyle {
            lumen: if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.3..0.65) },
            rim: rng.gen_range(0.68..0.85),
            dark: rng.gen_range(0.75..1.25),
        })
        .collect();

    // stain variation between images
    let gain: Vec<f64> = (0..3).map(|_| rng.gen_range(0.78..1.22)).collect();
    let contrast = rng.gen_range(0.6..1.15);
    let shift = rng.gen_range(-0.1..0.08);
    let noise_scale = rng.gen_range(0.8..1.6);
    let field = wave_field(rng, 5, 0.45);
    let noise = Normal::new(0.0, 1.0).expect("valid normal");

    // scattered stromal nuclei and rimless bright vacuoles
    let n_nuclei = (h * w) / 120;
    let nuclei: Vec<(f64, f64, f64)> = (0..n_nuclei)
        .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64), rng.gen_range(0.8..1.6)))
        .collect();
    let n_vacuoles = rng.gen_range(0..=5);
    let vacuoles: Vec<(f64, f64, f64)> = (0..n_vacuoles)
        .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64), rng.gen_range(1.5..4.5)))
        .collect();
    let inside = |spots: &[(f64, f64, f64)], y: f64, x: f64| {
        spots.iter().any(|(sy, sx, r)| (y - sy).powi(2) + (x - sx).powi(2) < r * r)
    };

    let mut rgb = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let (depth, k) = glands
                .iter()
                .enumerate()
                .map(|(k, g)| (g.depth(fy, fx), k))
                .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a });
            let mut color = if depth < 1.0 {
                let st = &styles[k];
                if depth < st.lumen {
                    (lumen, 0.03)
                } else if depth < st.rim {
                    (cytoplasm, 0.06)
                } else {
                    (rim.map(|c| (c * st.dark).min(1.0)), 0.07)
                }
            } else if inside(&vacuoles, fy, fx) {
                (lumen, 0.04)
            } else if inside(&nuclei, fy, fx) {
                (nucleus, 0.05)
            } else {
                (stroma, 0.05)
            };
            color.1 *= noise_scale;
            let tex = 0.08 * eval_field(&field, fy, fx);
            for c in 0..3 {
                let v = color.0[c] + tex + color.1 * noise.sample(rng);
                let v = (0.7 + contrast * (v - 0.7)) * gain[c] + shift;
                rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    rgb
}

/// Generates `n` image/mask pairs with ids `img0000`, `img0001`, ....
/// Every mask's foreground fraction lies in [`FOREGROUND_RANGE`].
pub fn synth_generate(n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Sample>> {
    if height < MIN_SYNTH_SIZE || width < MIN_SYNTH_SIZE {
        return Err(Error::Config(format!(
            "synthetic images must be at least {MIN_SYNTH_SIZE}x{MIN_SYNTH_SIZE}, got {height}x{width}"
        )));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("synth.{i}")));
            loop {
                let glands = draw_glands(&mut rng, height, width);
                let mask = BinaryMask::from_fn(height, width, |y, x| {
                    glands.iter().any(|g| g.depth(y as f64, x as f64) < 1.0)
                })?;
                let frac = mask.foreground_fraction();
                if frac < FOREGROUND_RANGE.0 || frac > FOREGROUND_RANGE.1 {
                    continue;
                }
                let rgb = render(&mut rng, &glands, height, width);
                return Ok(Sample::from_rgb(format!("img{i:04}"), height, width, &rgb, Some(mask)));
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset on disk

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: SplitName,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub samples: Vec<ManifestEntry>,
}

/// Fully labeled train and test pools; labels are hidden later by [`split`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub seed: Option<u64>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// `n_train + n_test` synthetic samples; the last `n_test` ids form the test set.
    pub fn synthetic(n_train: usize, n_test: usize, size: usize, seed: u64) -> Result<Self> {
        let mut all = synth_generate(n_train + n_test, size, size, seed)?;
        let test = all.split_off(n_train);
        Ok(Self {
            height: size,
            width: size,
            seed: Some(seed),
            train: all,
            test,
        })
    }

    pub fn manifest(&self) -> Manifest {
        let entry = |s: &Sample, split| ManifestEntry { id: s.id.clone(), split };
        Manifest {
            version: MANIFEST_VERSION,
            height: self.height,
            width: self.width,
            seed: self.seed,
            samples: self
                .train
                .iter()
                .map(|s| entry(s, SplitName::Train))
                .chain(self.test.iter().map(|s| entry(s, SplitName::Test)))
                .collect(),
        }
    }

    /// Writes `images/*.png`, `masks/*.png` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
        for d in [&img_dir, &mask_dir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for s in self.train.iter().chain(&self.test) {
            let mask = s.mask().ok_or_else(|| Error::Data(format!("sample {} has no mask", s.id)))?;
            io::write_rgb_png(&img_dir.join(format!("{}.png", s.id)), s.height(), s.width(), &s.to_rgb())?;
            io::write_mask_png(&mask_dir.join(format!("{}.png", s.id)), mask)?;
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        let mut seen = HashSet::new();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for entry in &manifest.samples {
            if !seen.insert(entry.id.as_str()) {
                return Err(Error::Data(format!("duplicate id {} in manifest", entry.id)));
            }
            let (h, w, rgb) = io::read_rgb_png(&dir.join("images").join(format!("{}.png", entry.id)))?;
            let mask = io::read_mask_png(&dir.join("masks").join(format!("{}.png", entry.id)))?;
            if (h, w) != (manifest.height, manifest.width) || (mask.height(), mask.width()) != (h, w) {
                return Err(Error::Data(format!(
                    "sample {} is not {}x{}",
                    entry.id, manifest.height, manifest.width
                )));
            }
            let sample = Sample::from_rgb(entry.id.clone(), h, w, &rgb, Some(mask));
            match entry.split {
                SplitName::Train => train.push(sample),
                SplitName::Test => test.push(sample),
            }
        }
        Ok(Self {
            height: manifest.height,
            width: manifest.width,
            seed: manifest.seed,
            train,
            test,
        })
    }
}

// ---------------------------------------------------------------------------
// Splitting

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled_ratio: f64,
    pub fold: usize,
    pub n_folds: usize,
    pub seed: u64,
}

/// Indices into the train pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Number of labeled images for `ratio` of `n` training images.
pub fn labeled_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Deterministic labeled/unlabeled partition of `n_train` images.
///
/// The train pool is shuffled once per seed; fold `f` takes the `f`-th
/// contiguous chunk of that order (wrapping) as the labeled set. The test set
/// is never touched.
pub fn split(n_train: usize, spec: &SplitSpec) -> Result<Partition> {
    if spec.n_folds == 0 || spec.fold >= spec.n_folds {
        return Err(Error::Config(format!("fold {} out of range for {} folds", spec.fold, spec.n_folds)));
    }
    let n_l = labeled_count(n_train, spec.labeled_ratio);
    if n_l < 1 || spec.labeled_ratio > 1.0 {
        return Err(Error::Data(format!(
            "labeled ratio {} of {n_train} training images leaves no labeled image",
            spec.labeled_ratio
        )));
    }
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "split")));
    let start = spec.fold * n_l;
    let mut labeled: Vec<usize> = (0..n_l).map(|k| order[(start + k) % n_train]).collect();
    labeled.sort_unstable();
    let chosen: HashSet<usize> = labeled.iter().copied().collect();
    let unlabeled = (0..n_train).filter(|i| !chosen.contains(i)).collect();
    Ok(Partition { labeled, unlabeled })
}

/// Labeled samples keep their labels; unlabeled samples have them stripped.
pub fn apply_partition(train: &[Sample], part: &Partition) -> (Vec<Sample>, Vec<Sample>) {
    (
        part.labeled.iter().map(|&i| train[i].clone()).collect(),
        part.unlabeled.iter().map(|&i| train[i].unlabeled()).collect(),
    )
}

// ---------------------------------------------------------------------------
// Augmentation

/// Element of the symmetry group of the square: bit 2 transposes, bit 1 flips
/// rows, bit 0 flips columns (applied in that order). `0` is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral(pub u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);
    pub const FLIP_H: Dihedral = Dihedral(1);

    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        if self.0 & 4 != 0 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source coordinate of output pixel `(y, x)`.
    fn source(self, y: usize, x: usize, oh: usize, ow: usize) -> (usize, usize) {
        let y1 = if self.0 & 2 != 0 { oh - 1 - y } else { y };
        let x1 = if self.0 & 1 != 0 { ow - 1 - x } else { x };
        if self.0 & 4 != 0 {
            (x1, y1)
        } else {
            (y1, x1)
        }
    }

    /// Applies the transform to each `h×w` plane of `data`.
    pub fn apply<T: Copy>(self, data: &[T], h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Vec::with_capacity(data.len());
        for plane in data.chunks(h * w) {
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = self.source(y, x, oh, ow);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        out
    }
}

/// Crop window `(top, left, height, width)` resized back to full size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Crop {
    fn map(self, o: usize, out_len: usize, len: usize) -> f64 {
        (o as f64 + 0.5) * len as f64 / out_len as f64 - 0.5
    }

    /// Bilinear resampling of each plane of `data` (`h×w` planes).
    fn resize_bilinear(self, data: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(data.len());
        for plane in data.chunks(h * w) {
            for y in 0..h {
                let sy = self.map(y, h, self.height).clamp(0.0, (self.height - 1) as f64);
                let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
                let y1 = (y0 + 1).min(self.height - 1);
                for x in 0..w {
                    let sx = self.map(x, w, self.width).clamp(0.0, (self.width - 1) as f64);
                    let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
                    let x1 = (x0 + 1).min(self.width - 1);
                    let at = |yy: usize, xx: usize| plane[(self.top + yy) * w + self.left + xx];
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        out
    }

    fn resize_nearest(self, data: &[u8], h: usize, w: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = ((y * self.height) / h).min(self.height - 1);
            for x in 0..w {
                let sx = ((x * self.width) / w).min(self.width - 1);
                out.push(data[(self.top + sy) * w + self.left + sx]);
            }
        }
        out
    }
}

/// Randomly drawn spatial transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub crop: Option<Crop>,
    pub dihedral: Dihedral,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        crop: None,
        dihedral: Dihedral::IDENTITY,
    };

    /// Draws a transform; non-square images only use the flips.
    pub fn random(rng: &mut impl Rng, h: usize, w: usize, crop_fraction: f64) -> Self {
        let crop = (crop_fraction > 0.0).then(|| {
            let ch = ((crop_fraction * h as f64).round() as usize).clamp(1, h);
            let cw = ((crop_fraction * w as f64).round() as usize).clamp(1, w);
            Crop {
                top: rng.gen_range(0..=h - ch),
                left: rng.gen_range(0..=w - cw),
                height: ch,
                width: cw,
            }
        });
        let n = if h == w { 8 } else { 4 };
        Transform {
            crop,
            dihedral: Dihedral(rng.gen_range(0..n)),
        }
    }

    /// Applies the transform to the image and mask; SDF and boundary are
    /// recomputed from the transformed mask.
    pub fn apply(&self, sample: &Sample) -> Result<Sample> {
        let (h, w) = (sample.height(), sample.width());
        let mut pixels = sample.image.data().to_vec();
        let mut mask = sample.mask().map(|m| m.data().to_vec());
        if let Some(crop) = self.crop {
            pixels = crop.resize_bilinear(&pixels, h, w);
            mask = mask.map(|m| crop.resize_nearest(&m, h, w));
        }
        let (oh, ow) = self.dihedral.output_dims(h, w);
        let pixels = self.dihedral.apply(&pixels, h, w);
        let labels = match mask {
            Some(m) => Some(LabelTriple::from_mask(BinaryMask::new(oh, ow, self.dihedral.apply(&m, h, w))?)),
            None => None,
        };
        Ok(Sample {
            id: sample.id.clone(),
            image: Tensor::new(&[3, oh, ow], pixels),
            labels,
        })
    }
}

/// Draws and applies a random transform seeded by `seed`.
pub fn augment(sample: &Sample, seed: u64, crop_fraction: f64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Transform::random(&mut rng, sample.height(), sample.width(), crop_fraction).apply(sample)
}

// ---------------------------------------------------------------------------
// Batching

/// A stacked batch: images `[B, 3, H, W]` and, if every sample is labeled, targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Tensor,
    pub targets: Option<Targets>,
}

pub fn make_batch(samples: &[Sample]) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    if samples.iter().any(|s| s.height() != h || s.width() != w) {
        return Err(Error::Shape("batch images differ in size".into()));
    }
    let b = samples.len();
    let mut images = Vec::with_capacity(b * 3 * h * w);
    for s in samples {
        images.extend_from_slice(s.image.data());
    }
    let targets = if samples.iter().all(|s| s.labels.is_some()) {
        let (mut seg, mut sdf, mut bnd) = (Vec::new(), Vec::new(), Vec::new());
        for s in samples {
            let l = s.labels.as_ref().expect("checked");
            seg.extend(l.mask.data().iter().map(|&v| f64::from(v)));
            sdf.extend_from_slice(l.sdf.data());
            bnd.extend(l.boundary.mask().data().iter().map(|&v| f64::from(v)));
        }
        let shape = [b, 1, h, w];
        Some(Targets {
            seg: Some(Tensor::new(&shape, seg)),
            sdf: Some(Tensor::new(&shape, sdf)),
            bnd: Some(Tensor::new(&shape, bnd)),
        })
    } else {
        None
    };
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images: Tensor::new(&[b, 3, h, w], images),
        targets,
    })
}

/// `k` indices drawn uniformly with replacement from `0..n`.
pub fn sample_with_replacement(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..k).map(|_| rng.gen_range(0..n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{compute_sdf, extract_boundary};

    #[test]
    fn generator_is_deterministic_and_in_range() {
        let a = synth_generate(12, 48, 48, 3).unwrap();
        let b = synth_generate(12, 48, 48, 3).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<_> = a.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), 12);
        for s in &a {
            let f = s.mask().unwrap().foreground_fraction();
            assert!((FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(&f), "{f}");
        }
        assert_ne!(a[0].image, synth_generate(1, 48, 48, 4).unwrap()[0].image);
        assert!(synth_generate(1, 16, 48, 0).is_err());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::synthetic(5, 2, 32, 11).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn split_arithmetic_and_folds() {
        let spec = |ratio, fold| SplitSpec {
            labeled_ratio: ratio,
            fold,
            n_folds: 3,
            seed: 9,
        };
        let p = split(100, &spec(0.1, 0)).unwrap();
        assert_eq!((p.labeled.len(), p.unlabeled.len()), (10, 90));
        let folds: Vec<Partition> = (0..3).map(|f| split(100, &spec(0.1, f)).unwrap()).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(folds[i].labeled, folds[j].labeled);
            }
        }
        assert!(split(100, &spec(1.0, 0)).unwrap().unlabeled.is_empty());
        assert!(split(5, &spec(0.1, 0)).is_err());
        assert_eq!(split(100, &spec(0.2, 1)).unwrap(), split(100, &spec(0.2, 1)).unwrap());
    }

    #[test]
    fn dihedral_group_laws() {
        let data: Vec<u32> = (0..12).collect();
        assert_eq!(Dihedral::IDENTITY.apply(&data, 3, 4), data);
        let once = Dihedral::FLIP_H.apply(&data, 3, 4);
        assert_eq!(Dihedral::FLIP_H.apply(&once, 3, 4), data);
        let sq: Vec<u32> = (0..16).collect();
        let images: HashSet<Vec<u32>> = (0..8).map(|e| Dihedral(e).apply(&sq, 4, 4)).collect();
        assert_eq!(images.len(), 8);
        let t = Dihedral(4).apply(&data, 3, 4);
        assert_eq!(t[1], data[4]);
    }

    #[test]
    fn augmented_labels_stay_consistent() {
        let s = &synth_generate(1, 40, 40, 5).unwrap()[0];
        for seed in 0..10 {
            for crop in [0.0, 0.875] {
                let a = augment(s, seed, crop).unwrap();
                let l = a.labels.as_ref().unwrap();
                assert_eq!(l.sdf, compute_sdf(&l.mask));
                assert_eq!(l.boundary, extract_boundary(&l.mask));
            }
        }
        assert_eq!(Transform::IDENTITY.apply(s).unwrap(), *s);
    }

    #[test]
    fn batches_stack_and_strip() {
        let ds = synth_generate(3, 32, 32, 1).unwrap();
        let b = make_batch(&ds).unwrap();
        assert_eq!(b.images.shape(), &[3, 3, 32, 32]);
        assert_eq!(b.targets.as_ref().unwrap().sdf.as_ref().unwrap().shape(), &[3, 1, 32, 32]);
        let unl: Vec<Sample> = ds.iter().map(Sample::unlabeled).collect();
        assert!(make_batch(&unl).unwrap().targets.is_none());
    }
}
