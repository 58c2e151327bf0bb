//! Deterministic multi-domain synthetic detection benchmark.
//!
//! Every image contains 1..=5 simple shapes (disc, square, triangle; the
//! shape is the class) on a styled background. Object geometry is drawn from
//! an RNG stream keyed only by (config seed, sample seed), so the same seed
//! produces the same boxes in every domain; the domain contributes style
//! only (background palette and texture, a global tint, pixel noise).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::DomainLabel;
use crate::array::Array;
use crate::detector::GroundTruth;
use crate::error::{Error, Result};
use crate::probe::LogisticProbe;

pub const STRIPE_PERIOD: usize = 12;
pub const SPECKLE_DENSITY: f64 = 0.25;
/// Required held-out accuracy of a raw-pixel probe between any two domains.
pub const SEPARABILITY_MIN: f64 = 0.95;
/// Max IoU tolerated between placed objects before re-drawing a position.
const PLACEMENT_MAX_IOU: f64 = 0.2;
const PLACEMENT_ATTEMPTS: usize = 50;
/// Seed block reserved for the separability probe, far above split ranges.
const PROBE_SEED_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Flat,
    Stripes,
    Speckle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: String,
    /// Candidate background colors; one is picked per image.
    pub background_palette: Vec<[f64; 3]>,
    pub texture: Texture,
    /// Added to every pixel after compositing.
    pub global_tint: [f64; 3],
    pub noise_sigma: f64,
}

impl DomainStyle {
    fn validate(&self) -> Result<()> {
        if self.background_palette.is_empty() {
            return Err(Error::invalid(format!("domain {}: empty palette", self.name)));
        }
        for c in self.background_palette.iter().flatten().chain(self.global_tint.iter()) {
            if !c.is_finite() || c.abs() > 1.0 {
                return Err(Error::invalid(format!("domain {}: color component {c}", self.name)));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma < 0.5) {
            return Err(Error::invalid(format!(
                "domain {}: noise sigma {}",
                self.name, self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Five visually distinct styles; benchmarks take the first `n`.
pub fn preset_styles(n: usize) -> Result<Vec<DomainStyle>> {
    let all = vec![
        DomainStyle {
            name: "gray-flat".into(),
            background_palette: vec![[0.82, 0.82, 0.80], [0.74, 0.75, 0.77]],
            texture: Texture::Flat,
            global_tint: [0.0, 0.0, 0.0],
            noise_sigma: 0.01,
        },
        DomainStyle {
            name: "dusk-stripes".into(),
            background_palette: vec![[0.25, 0.30, 0.55], [0.17, 0.22, 0.44]],
            texture: Texture::Stripes,
            global_tint: [-0.05, 0.0, 0.12],
            noise_sigma: 0.02,
        },
        DomainStyle {
            name: "moss-speckle".into(),
            background_palette: vec![[0.30, 0.55, 0.30], [0.24, 0.47, 0.27]],
            texture: Texture::Speckle,
            global_tint: [0.0, 0.10, -0.05],
            noise_sigma: 0.03,
        },
        DomainStyle {
            name: "sand-stripes".into(),
            background_palette: vec![[0.75, 0.60, 0.40], [0.67, 0.52, 0.34]],
            texture: Texture::Stripes,
            global_tint: [0.12, 0.02, -0.08],
            noise_sigma: 0.015,
        },
        DomainStyle {
            name: "violet-speckle".into(),
            background_palette: vec![[0.45, 0.30, 0.55], [0.38, 0.26, 0.50]],
            texture: Texture::Speckle,
            global_tint: [0.08, -0.06, 0.10],
            noise_sigma: 0.025,
        },
    ];
    if n == 0 || n > all.len() {
        return Err(Error::invalid(format!("preset styles support 1..={}, got {n}", all.len())));
    }
    Ok(all.into_iter().take(n).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub image_size: usize,
    /// Shape classes: 1 = disc, 2 = +square, 3 = +triangle.
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// The last entry is the held-out unseen domain.
    pub domains: Vec<DomainStyle>,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            image_size: 128,
            num_classes: 3,
            min_objects: 1,
            max_objects: 5,
            min_object_size: 8.0,
            max_object_size: 96.0,
            domains: preset_styles(3).expect("preset count"),
            seed: 7,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 128 != 0 {
            return Err(Error::invalid(format!(
                "image size {} must be a positive multiple of 128",
                self.image_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("benchmark needs at least one object class"));
        }
        if self.num_classes > 3 {
            return Err(Error::invalid(format!(
                "only 3 shape classes are defined, got {}",
                self.num_classes
            )));
        }
        if self.min_objects < 1 || self.max_objects > 5 || self.min_objects > self.max_objects {
            return Err(Error::invalid(format!(
                "object count range {}..={} outside 1..=5",
                self.min_objects, self.max_objects
            )));
        }
        let limit = self.image_size as f64 * 0.75;
        if !(self.min_object_size >= 4.0
            && self.max_object_size <= limit
            && self.min_object_size < self.max_object_size)
        {
            return Err(Error::invalid(format!(
                "object size range {}..{} outside 4..{limit}",
                self.min_object_size, self.max_object_size
            )));
        }
        if self.domains.is_empty() {
            return Err(Error::invalid("no domains configured"));
        }
        for d in &self.domains {
            d.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: BenchmarkConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct DetectionSample {
    /// `[3, H, W]`, values in [0, 1].
    pub image: Array,
    pub gt: GroundTruth,
    pub domain: DomainLabel,
    pub seed: u64,
}

pub(crate) fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x853C_49E6_748F_EA9Bu64;
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

/// Standard normal via Box-Muller.
fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct PlacedObject {
    class: usize,
    cx: f64,
    cy: f64,
    size: f64,
    brightness: f64,
}

impl PlacedObject {
    fn bbox(&self) -> [f64; 4] {
        let h = self.size / 2.0;
        [self.cx - h, self.cy - h, self.cx + h, self.cy + h]
    }

    fn covers(&self, px: f64, py: f64) -> bool {
        let h = self.size / 2.0;
        match self.class {
            0 => (px - self.cx).powi(2) + (py - self.cy).powi(2) <= h * h,
            1 => (px - self.cx).abs() <= h && (py - self.cy).abs() <= h,
            _ => {
                // Upright isoceles triangle: apex top-center, base at the
                // bottom edge of the box.
                let dy = py - (self.cy - h);
                dy >= 0.0 && dy <= self.size && (px - self.cx).abs() <= dy / self.size * h
            }
        }
    }
}

const CLASS_COLORS: [[f64; 3]; 3] =
    [[0.85, 0.25, 0.20], [0.20, 0.72, 0.30], [0.25, 0.35, 0.85]];

fn sample_geometry(config: &BenchmarkConfig, seed: u64) -> Vec<PlacedObject> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, seed, 0x6E0]));
    let w = config.image_size as f64;
    let count = rng.gen_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<PlacedObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..config.num_classes);
        let size = rng.gen_range(config.min_object_size..config.max_object_size);
        let half = size / 2.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for _ in 0..PLACEMENT_ATTEMPTS {
            cx = rng.gen_range(half..w - half);
            cy = rng.gen_range(half..w - half);
            let candidate = [cx - half, cy - half, cx + half, cy + half];
            let crowded = objects
                .iter()
                .any(|o| crate::detector::box_iou_xyxy(&o.bbox(), &candidate) > PLACEMENT_MAX_IOU);
            if !crowded {
                break;
            }
        }
        let brightness = rng.gen_range(0.85..1.15);
        objects.push(PlacedObject { class, cx, cy, size, brightness });
    }
    objects
}

/// Generate one sample. Pure in (config, domain_index, seed).
pub fn generate_sample(
    config: &BenchmarkConfig,
    domain_index: usize,
    seed: u64,
) -> Result<DetectionSample> {
    config.validate()?;
    let style = config
        .domains
        .get(domain_index)
        .ok_or_else(|| Error::invalid(format!("domain index {domain_index} out of range")))?;
    let objects = sample_geometry(config, seed);

    let n = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, seed, domain_index as u64, 0xD0]));
    let mut image = Array::zeros(&[3, n, n]);

    let palette = &style.background_palette;
    let base = palette[rng.gen_range(0..palette.len())];
    let alt = if palette.len() > 1 {
        palette[(palette.iter().position(|p| *p == base).unwrap_or(0) + 1) % palette.len()]
    } else {
        [base[0] * 0.55, base[1] * 0.55, base[2] * 0.55]
    };
    for y in 0..n {
        for x in 0..n {
            let mut color = base;
            match style.texture {
                Texture::Flat => {}
                Texture::Stripes => {
                    if ((x + y) / STRIPE_PERIOD) % 2 == 1 {
                        color = alt;
                    }
                }
                Texture::Speckle => {
                    let u: f64 = rng.gen();
                    if u < SPECKLE_DENSITY {
                        color = [color[0] * 0.55, color[1] * 0.55, color[2] * 0.55];
                    }
                }
            }
            for c in 0..3 {
                image.data_mut()[(c * n + y) * n + x] = color[c];
            }
        }
    }

    // Paint objects in order; later objects draw over earlier ones.
    for obj in &objects {
        let b = obj.bbox();
        let color = CLASS_COLORS[obj.class];
        let (x0, y0) = (b[0].floor().max(0.0) as usize, b[1].floor().max(0.0) as usize);
        let (x1, y1) = ((b[2].ceil() as usize).min(n), (b[3].ceil() as usize).min(n));
        for y in y0..y1 {
            for x in x0..x1 {
                if obj.covers(x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..3 {
                        image.data_mut()[(c * n + y) * n + x] =
                            (color[c] * obj.brightness).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    // Global style: tint then pixel noise, clamped back into [0, 1].
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                let idx = (c * n + y) * n + x;
                let v = image.data()[idx] + style.global_tint[c] + style.noise_sigma * gauss(&mut rng);
                image.data_mut()[idx] = v.clamp(0.0, 1.0);
            }
        }
    }

    let gt = GroundTruth {
        boxes: objects.iter().map(|o| o.bbox()).collect(),
        classes: objects.iter().map(|o| o.class).collect(),
    };
    gt.validate(config.num_classes, n as f64, n as f64)?;
    Ok(DetectionSample {
        image,
        gt,
        domain: DomainLabel::new(domain_index, config.domains.len())?,
        seed,
    })
}

/// Half-open seed interval [start, start + count).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub count: u64,
}

impl SeedRange {
    pub fn end(&self) -> u64 {
        self.start + self.count
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> {
        self.start..self.end()
    }

    pub fn overlaps(&self, other: &SeedRange) -> bool {
        self.count > 0 && other.count > 0 && self.start < other.end() && other.start < self.end()
    }
}

/// Seed bookkeeping for one benchmark: which domains are sources, which is
/// held out, and which seed blocks feed each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub source_domains: Vec<usize>,
    pub unseen_domain: usize,
    pub train: Vec<(usize, SeedRange)>,
    pub val: Vec<(usize, SeedRange)>,
    pub test: (usize, SeedRange),
}

impl SplitPlan {
    pub fn validate(&self, config: &BenchmarkConfig) -> Result<()> {
        if self.source_domains.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 source domains, got {}",
                self.source_domains.len()
            )));
        }
        let m = config.domains.len();
        for &d in self.source_domains.iter().chain([&self.unseen_domain]) {
            if d >= m {
                return Err(Error::invalid(format!("domain {d} out of range for {m} domains")));
            }
        }
        if self.source_domains.contains(&self.unseen_domain) {
            return Err(Error::invalid(format!(
                "unseen domain {} is also a source",
                self.unseen_domain
            )));
        }
        for (d, _) in self.train.iter().chain(&self.val) {
            if *d == self.unseen_domain {
                return Err(Error::invalid("unseen domain appears in a training-side split"));
            }
            if !self.source_domains.contains(d) {
                return Err(Error::invalid(format!("split domain {d} is not a source")));
            }
        }
        if self.test.0 != self.unseen_domain {
            return Err(Error::invalid("test split must use the unseen domain"));
        }
        let mut ranges: Vec<SeedRange> = Vec::new();
        for &(_, r) in self.train.iter().chain(&self.val).chain([&self.test]) {
            if r.count == 0 {
                return Err(Error::invalid("empty seed range in split plan"));
            }
            for prev in &ranges {
                if prev.overlaps(&r) {
                    return Err(Error::invalid(format!(
                        "overlapping seed ranges {prev:?} and {r:?}"
                    )));
                }
            }
            ranges.push(r);
        }
        Ok(())
    }
}

/// Allocate disjoint consecutive seed blocks: training and validation for
/// every domain except the last, which becomes the held-out test domain.
pub fn make_splits(
    config: &BenchmarkConfig,
    train_per_domain: u64,
    val_per_domain: u64,
    test_count: u64,
) -> Result<SplitPlan> {
    config.validate()?;
    if config.domains.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 2 source domains plus an unseen domain, got {} total",
            config.domains.len()
        )));
    }
    if train_per_domain == 0 || val_per_domain == 0 || test_count == 0 {
        return Err(Error::invalid("split sizes must be positive"));
    }
    let unseen = config.domains.len() - 1;
    let sources: Vec<usize> = (0..unseen).collect();
    let mut cursor = 0u64;
    let mut take = |count: u64| {
        let r = SeedRange { start: cursor, count };
        cursor += count;
        r
    };
    let train = sources.iter().map(|&d| (d, take(train_per_domain))).collect();
    let val = sources.iter().map(|&d| (d, take(val_per_domain))).collect();
    let test = (unseen, take(test_count));
    let plan = SplitPlan { source_domains: sources, unseen_domain: unseen, train, val, test };
    plan.validate(config)?;
    Ok(plan)
}

pub fn generate_range(
    config: &BenchmarkConfig,
    domain_index: usize,
    range: SeedRange,
) -> Result<Vec<DetectionSample>> {
    range.seeds().map(|s| generate_sample(config, domain_index, s)).collect()
}

/// Per-channel mean and standard deviation of an image: the raw-pixel
/// summary the separability probe runs on.
pub fn pixel_stats(image: &Array) -> Vec<f64> {
    let n = image.shape()[1] * image.shape()[2];
    let mut out = Vec::with_capacity(6);
    for c in 0..3 {
        let chan = &image.data()[c * n..(c + 1) * n];
        let mean = chan.iter().sum::<f64>() / n as f64;
        let var = chan.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        out.push(mean);
        out.push(var.sqrt());
    }
    out
}

/// Held-out accuracy of a logistic probe on raw pixel statistics for every
/// unordered domain pair. The benchmark invariant requires each entry to
/// exceed [`SEPARABILITY_MIN`].
pub fn style_separability(
    config: &BenchmarkConfig,
    per_domain: usize,
) -> Result<Vec<((usize, usize), f64)>> {
    config.validate()?;
    if per_domain < 6 {
        return Err(Error::invalid("need at least 6 samples per domain for the probe"));
    }
    let n_train = per_domain * 2 / 3;
    let mut features: Vec<Vec<Vec<f64>>> = Vec::new();
    for d in 0..config.domains.len() {
        let mut rows = Vec::with_capacity(per_domain);
        for i in 0..per_domain {
            let sample = generate_sample(config, d, PROBE_SEED_BASE + i as u64)?;
            rows.push(pixel_stats(&sample.image));
        }
        features.push(rows);
    }
    let mut out = Vec::new();
    for a in 0..config.domains.len() {
        for b in (a + 1)..config.domains.len() {
            let mut train_x = Vec::new();
            let mut train_y = Vec::new();
            let mut eval_x = Vec::new();
            let mut eval_y = Vec::new();
            for (label, &d) in [a, b].iter().enumerate() {
                for (i, row) in features[d].iter().enumerate() {
                    if i < n_train {
                        train_x.push(row.clone());
                        train_y.push(label);
                    } else {
                        eval_x.push(row.clone());
                        eval_y.push(label);
                    }
                }
            }
            let probe = LogisticProbe::fit(&train_x, &train_y, 2)?;
            out.push(((a, b), probe.accuracy(&eval_x, &eval_y)));
        }
    }
    Ok(out)
}

/// Write a `[3,H,W]` image in [0,1] as an 8-bit PNG.
pub fn save_png(image: &Array, path: &Path) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("save_png", format!("want [3,H,W], got {:?}", shape)));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| {
                (image.data()[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            rgb.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    rgb.save(path).map_err(|e| Error::invalid(format!("saving {}: {e}", path.display())))
}
