//! Procedural glyph dataset with an easy support pool and a hard query pool.
//!
//! Each class is a parametric glyph (shape family plus stroke pattern),
//! bright on a uniform dark background. Query images are fresh glyphs
//! passed through one difficulty transform: camouflage, shrinking,
//! occlusion, or blur/noise.

use std::fmt;
use std::fs;
use std::io::{self, Read as _, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng, Rng};
use crate::tensor_autodiff::Tensor;

pub const MIN_IMAGE_SIZE: usize = 16;
/// Distinct (shape, pattern) combinations.
pub const MAX_CLASSES: usize = SHAPES * PATTERNS;
/// Upper bound on the target's share of pixels after the `small` transform.
pub const SMALL_MASK_FRACTION: f64 = 0.01;
/// Lower bound on the share of target pixels an `incomplete` occluder removes.
pub const INCOMPLETE_REMOVED_FRACTION: f64 = 0.5;
pub const CAMOUFLAGE_MEAN_TOLERANCE: f64 = 0.05;
pub const BLUR_RADIUS_RANGE: (usize, usize) = (1, 3);
pub const NOISE_SIGMA_RANGE: (f64, f64) = (0.05, 0.2);

const SHAPES: usize = 6;
const PATTERNS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pool {
    Support,
    Query,
}

impl Pool {
    pub fn as_str(self) -> &'static str {
        match self {
            Pool::Support => "support",
            Pool::Query => "query",
        }
    }
}

impl FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "support" => Ok(Pool::Support),
            "query" => Ok(Pool::Query),
            _ => Err(Error::Config(format!("unknown pool {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Difficulty {
    Camouflaged,
    Small,
    Incomplete,
    BlurryNoisy,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [Difficulty::Camouflaged, Difficulty::Small, Difficulty::Incomplete, Difficulty::BlurryNoisy];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Camouflaged => "camouflaged",
            Difficulty::Small => "small",
            Difficulty::Incomplete => "incomplete",
            Difficulty::BlurryNoisy => "blurry_noisy",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown difficulty tag {s:?}")))
    }
}

/// Parameters of a blur/noise transform; at least one must be non-zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlurNoise {
    pub radius: usize,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    /// `1 x S x S` grayscale in `[0, 1]`.
    pub image: Tensor,
    pub class_id: usize,
    pub pool: Pool,
    pub transforms_applied: Vec<Difficulty>,
    /// Row-major `S x S` map of target pixels in the current geometry.
    pub target_mask: Vec<bool>,
    /// Seed of the base glyph, so it can be regenerated.
    pub base_seed: u64,
    pub background: f64,
    /// Set when a blur/noise transform was applied.
    pub blur_noise: Option<BlurNoise>,
}

impl SyntheticSample {
    pub fn side(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn mask_fraction(&self) -> f64 {
        self.target_mask.iter().filter(|&&m| m).count() as f64 / self.target_mask.len() as f64
    }

    pub fn labeled(&self) -> LabeledImage {
        LabeledImage { id: self.id.clone(), class_id: self.class_id, image: self.image.clone() }
    }
}

fn glyph_contains(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.85 && v.abs() <= 0.85,
        2 => (-1.0..=0.9).contains(&v) && u.abs() <= (v + 1.0) / 1.9,
        3 => (u.abs() <= 0.35 && v.abs() <= 1.0) || (v.abs() <= 0.35 && u.abs() <= 1.0),
        4 => {
            let r2 = u * u + v * v;
            (0.3025..=1.0).contains(&r2)
        }
        _ => u.abs() + v.abs() <= 1.1,
    }
}

fn pattern_dims(pattern: usize, x: usize, y: usize) -> bool {
    match pattern {
        0 => false,
        1 => (y / 2) % 2 == 1,
        2 => (x / 2) % 2 == 1,
        _ => ((x / 2) + (y / 2)) % 2 == 1,
    }
}

/// `(shape family, stroke pattern)` of a class.
pub fn class_style(class_id: usize) -> (usize, usize) {
    let c = class_id % MAX_CLASSES;
    (c % SHAPES, (c / SHAPES + c) % PATTERNS)
}

/// Renders the clean glyph of `class_id`; deterministic in `(class_id, seed, size)`.
pub fn generate_base_image(class_id: usize, seed: u64, size: usize) -> Result<SyntheticSample> {
    if size < MIN_IMAGE_SIZE {
        return Err(Error::Config(format!("image size {size} below minimum {MIN_IMAGE_SIZE}")));
    }
    let mut r = rng(seed);
    let (shape, pattern) = class_style(class_id);
    let s = size as f64;
    let half = 0.3 * s * r.random_range(0.85..1.15);
    let jitter = s / 16.0;
    let cx = (s - 1.0) / 2.0 + r.random_range(-jitter..jitter);
    let cy = (s - 1.0) / 2.0 + r.random_range(-jitter..jitter);
    let theta: f64 = r.random_range(-0.25..0.25);
    let (sin, cos) = theta.sin_cos();
    let bright = r.random_range(0.8..1.0);
    let bg_dark = r.random_range(0.0..0.2);
    let background = bg_dark;
    let mut mask = vec![false; size * size];
    let mut data = vec![background; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = ((x as f64 - cx) / half, (y as f64 - cy) / half);
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            if glyph_contains(shape, u, v) {
                let i = y * size + x;
                mask[i] = true;
                let level = if pattern_dims(pattern, x, y) { bright - 0.2 } else { bright };
                data[i] = level;
            }
        }
    }
    Ok(SyntheticSample {
        id: format!("c{class_id}_base_{seed:016x}"),
        image: Tensor::new(vec![1, size, size], data)?,
        class_id,
        pool: Pool::Support,
        transforms_applied: Vec::new(),
        target_mask: mask,
        base_seed: seed,
        background,
        blur_noise: None,
    })
}

fn require_support(s: &SyntheticSample) -> Result<()> {
    if s.pool != Pool::Support {
        return Err(Error::Contract(format!("sample {} is already a query sample", s.id)));
    }
    Ok(())
}

fn into_query(mut s: SyntheticSample, tag: Difficulty, data: Vec<f64>) -> Result<SyntheticSample> {
    let side = s.side();
    s.image = Tensor::new(vec![1, side, side], data)?;
    s.pool = Pool::Query;
    s.transforms_applied.push(tag);
    Ok(s)
}

fn camouflage(s: SyntheticSample, r: &mut Rng) -> Result<SyntheticSample> {
    let data = s.image.data();
    let target: Vec<f64> = data.iter().zip(&s.target_mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let t_mean = target.iter().sum::<f64>() / target.len() as f64;
    let mut out = data.to_vec();
    let bg_idx: Vec<usize> = (0..out.len()).filter(|&i| !s.target_mask[i]).collect();
    // bootstrap the target's own values so the texture statistics match
    for &i in &bg_idx {
        out[i] = target[r.random_range(0..target.len())];
    }
    for _ in 0..4 {
        let b_mean = bg_idx.iter().map(|&i| out[i]).sum::<f64>() / bg_idx.len() as f64;
        let shift = t_mean - b_mean;
        if shift.abs() < 1e-3 {
            break;
        }
        bg_idx.iter().for_each(|&i| out[i] = (out[i] + shift).clamp(0.0, 1.0));
    }
    into_query(s, Difficulty::Camouflaged, out)
}

fn shrink(mut s: SyntheticSample, r: &mut Rng) -> Result<SyntheticSample> {
    let side = s.side();
    let limit = ((SMALL_MASK_FRACTION * (side * side) as f64).floor() as usize).max(1);
    let idx: Vec<usize> = (0..side * side).filter(|&i| s.target_mask[i]).collect();
    let (mut x0, mut y0, mut x1, mut y1) = (side, side, 0, 0);
    for &i in &idx {
        let (x, y) = (i % side, i / side);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    let src = s.image.data().to_vec();
    // nearest-neighbour downscale of the bounding box into a `t x t` patch
    let mut t = 4usize.min(bw).min(bh);
    let patch = loop {
        let mut cells = Vec::new();
        for py in 0..t {
            for px in 0..t {
                let sx = x0 + (2 * px + 1) * bw / (2 * t);
                let sy = y0 + (2 * py + 1) * bh / (2 * t);
                let i = sy * side + sx;
                if s.target_mask[i] {
                    cells.push((px, py, src[i]));
                }
            }
        }
        if cells.is_empty() {
            let c = (y0 + bh / 2) * side + x0 + bw / 2;
            let v = if s.target_mask[c] { src[c] } else { src[idx[0]] };
            break vec![(0, 0, v)];
        }
        if cells.len() <= limit || t == 1 {
            break cells;
        }
        t -= 1;
    };
    let ox = r.random_range(0..=side - t);
    let oy = r.random_range(0..=side - t);
    let mut out = vec![s.background; side * side];
    let mut mask = vec![false; side * side];
    for (px, py, v) in patch {
        let i = (oy + py) * side + ox + px;
        out[i] = v;
        mask[i] = true;
    }
    s.target_mask = mask;
    into_query(s, Difficulty::Small, out)
}

fn occlude(s: SyntheticSample, r: &mut Rng) -> Result<SyntheticSample> {
    let side = s.side();
    let phi: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = phi.sin_cos();
    let proj = |i: usize| (i % side) as f64 * dx + (i / side) as f64 * dy;
    let mut target: Vec<f64> = (0..side * side).filter(|&i| s.target_mask[i]).map(proj).collect();
    target.sort_by(f64::total_cmp);
    let keep = r.random_range(0.2..0.45);
    let cut = target[((keep * target.len() as f64) as usize).min(target.len() - 1)];
    let mut out = s.image.data().to_vec();
    // everything on the far side of the cut line is painted with the background
    let mut mask = s.target_mask.clone();
    for (i, v) in out.iter_mut().enumerate() {
        if proj(i) >= cut {
            *v = s.background;
            mask[i] = false;
        }
    }
    let mut q = into_query(s, Difficulty::Incomplete, out)?;
    q.target_mask = mask;
    Ok(q)
}

/// Mean over the clamped `(2r+1)^2` window around every pixel.
pub fn box_blur(data: &[f64], side: usize, radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let r = radius as isize;
    for y in 0..side as isize {
        for x in 0..side as isize {
            let (mut acc, mut n) = (0.0, 0usize);
            for yy in (y - r).max(0)..=(y + r).min(side as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(side as isize - 1) {
                    acc += data[yy as usize * side + xx as usize];
                    n += 1;
                }
            }
            out[y as usize * side + x as usize] = acc / n as f64;
        }
    }
    out
}

/// Box blur of `radius` then Gaussian noise of `sigma`, clipped to `[0, 1]`.
pub fn blur_and_noise(s: SyntheticSample, params: BlurNoise, seed: u64) -> Result<SyntheticSample> {
    require_support(&s)?;
    let BlurNoise { radius, sigma } = params;
    if radius == 0 && sigma == 0.0 {
        return Err(Error::Config("blur radius 0 with noise sigma 0 leaves the image unchanged".into()));
    }
    if radius != 0 && !(BLUR_RADIUS_RANGE.0..=BLUR_RADIUS_RANGE.1).contains(&radius) {
        return Err(Error::Config(format!("blur radius {radius} outside {BLUR_RADIUS_RANGE:?}")));
    }
    if sigma != 0.0 && !(NOISE_SIGMA_RANGE.0..=NOISE_SIGMA_RANGE.1).contains(&sigma) {
        return Err(Error::Config(format!("noise sigma {sigma} outside {NOISE_SIGMA_RANGE:?}")));
    }
    let side = s.side();
    let mut out = if radius > 0 { box_blur(s.image.data(), side, radius) } else { s.image.data().to_vec() };
    if sigma > 0.0 {
        let mut r = rng(seed);
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        out.iter_mut().for_each(|v| *v = (*v + normal.sample(&mut r)).clamp(0.0, 1.0));
    }
    let mut q = into_query(s, Difficulty::BlurryNoisy, out)?;
    q.blur_noise = Some(params);
    Ok(q)
}

/// Applies one difficulty transform to a clean support sample.
pub fn apply_difficulty(s: SyntheticSample, tag: Difficulty, seed: u64) -> Result<SyntheticSample> {
    require_support(&s)?;
    let mut r = rng(seed);
    match tag {
        Difficulty::Camouflaged => camouflage(s, &mut r),
        Difficulty::Small => shrink(s, &mut r),
        Difficulty::Incomplete => occlude(s, &mut r),
        Difficulty::BlurryNoisy => {
            let params = match r.random_range(0..3) {
                0 => BlurNoise { radius: r.random_range(1..=3), sigma: 0.0 },
                1 => BlurNoise { radius: 0, sigma: r.random_range(NOISE_SIGMA_RANGE.0..=NOISE_SIGMA_RANGE.1) },
                _ => BlurNoise {
                    radius: r.random_range(1..=3),
                    sigma: r.random_range(NOISE_SIGMA_RANGE.0..=NOISE_SIGMA_RANGE.1),
                },
            };
            blur_and_noise(s, params, r.random())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_classes: usize,
    /// First class id; lets a second dataset hold disjoint classes.
    pub class_offset: usize,
    pub samples_per_class_support: usize,
    pub samples_per_class_query: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Probability of each tag in [`Difficulty::ALL`] order.
    pub transform_mix: [f64; 4],
    pub blur_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            class_offset: 0,
            samples_per_class_support: 20,
            samples_per_class_query: 60,
            image_size: 32,
            seed: 0,
            transform_mix: [0.25; 4],
            blur_fraction: 0.05,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.class_offset + self.n_classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "classes {}..{} outside the {MAX_CLASSES} distinct glyphs",
                self.class_offset,
                self.class_offset + self.n_classes
            )));
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!("image size {} below {MIN_IMAGE_SIZE}", self.image_size)));
        }
        if self.transform_mix.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Config(format!("transform mix {:?} has an entry outside [0, 1]", self.transform_mix)));
        }
        let total: f64 = self.transform_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("transform mix sums to {total}, expected 1")));
        }
        if !(0.0..=1.0).contains(&self.blur_fraction) {
            return Err(Error::Config(format!("blur fraction {} outside [0, 1]", self.blur_fraction)));
        }
        let blur_enabled = self.transform_mix[3] > 0.0 || self.blur_fraction > 0.0;
        if blur_enabled && self.blur_fraction < 0.05 {
            return Err(Error::Config(format!("blur fraction {} below the 0.05 minimum", self.blur_fraction)));
        }
        Ok(())
    }
}

/// Both pools with their per-sample provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub support: Vec<SyntheticSample>,
    pub query: Vec<SyntheticSample>,
}

impl SyntheticDataset {
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            support: self.support.iter().map(SyntheticSample::labeled).collect(),
            query: self.query.iter().map(SyntheticSample::labeled).collect(),
        }
    }
}

fn draw_tag(mix: &[f64; 4], u: f64) -> Difficulty {
    let mut acc = 0.0;
    for (tag, &p) in Difficulty::ALL.iter().zip(mix) {
        acc += p;
        if u < acc {
            return *tag;
        }
    }
    // rounding at the top end: last tag with non-zero weight
    Difficulty::ALL.into_iter().zip(mix).rev().find(|(_, &p)| p > 0.0).map(|(t, _)| t).unwrap_or(Difficulty::BlurryNoisy)
}

/// Generates both pools; deterministic under `cfg.seed`.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let classes: Vec<usize> = (cfg.class_offset..cfg.class_offset + cfg.n_classes).collect();
    let n_s = cfg.samples_per_class_support;
    let n_q = cfg.samples_per_class_query;
    let blur_quota = (cfg.blur_fraction * n_q as f64).ceil() as usize;

    let support_jobs: Vec<(usize, usize)> = classes.iter().flat_map(|&c| (0..n_s).map(move |i| (c, i))).collect();
    let support = support_jobs
        .par_iter()
        .map(|&(c, i)| {
            let mut s = generate_base_image(c, derive_seed(cfg.seed, &[c as u64, 0, i as u64]), cfg.image_size)?;
            s.id = format!("c{c}_support_{i:04}");
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;

    let query_jobs: Vec<(usize, usize)> = classes.iter().flat_map(|&c| (0..n_q).map(move |i| (c, i))).collect();
    let query = query_jobs
        .par_iter()
        .map(|&(c, i)| {
            let base_seed = derive_seed(cfg.seed, &[c as u64, 1, i as u64]);
            let mut tag_rng = rng(derive_seed(cfg.seed, &[c as u64, 2, i as u64]));
            let tag = if i < blur_quota { Difficulty::BlurryNoisy } else { draw_tag(&cfg.transform_mix, tag_rng.random()) };
            let base = generate_base_image(c, base_seed, cfg.image_size)?;
            let mut q = apply_difficulty(base, tag, tag_rng.random())?;
            q.id = format!("c{c}_query_{i:04}_{tag}");
            Ok(q)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset { config: cfg.clone(), support, query })
}

fn write_pgm(path: &Path, side: usize, data: &[f64]) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{side} {side}\n65535\n")?;
    for &v in data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        f.write_all(&q.to_be_bytes())?;
    }
    f.flush()
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max == 0 || max > 65535 {
        return Err(bad("bad maxval"));
    }
    let width = if max > 255 { 2 } else { 1 };
    let body = bytes.get(pos..pos + w * h * width).ok_or_else(|| bad("truncated pixel data"))?;
    let data = body
        .chunks(width)
        .map(|c| {
            let v = if width == 2 { u16::from_be_bytes([c[0], c[1]]) as f64 } else { c[0] as f64 };
            v / max as f64
        })
        .collect();
    Ok((w, h, data))
}

/// Writes `root/class_XXX/{pool}_{index}_{tags}.pgm` for every sample.
pub fn export_image_folder(ds: &SyntheticDataset, root: &Path) -> Result<()> {
    let io_err = |e: io::Error| Error::Data(format!("{}: {e}", root.display()));
    for (pool, samples) in [(Pool::Support, &ds.support), (Pool::Query, &ds.query)] {
        let mut counters = std::collections::BTreeMap::new();
        for s in samples {
            let dir = root.join(format!("class_{:03}", s.class_id));
            fs::create_dir_all(&dir).map_err(io_err)?;
            let n = counters.entry(s.class_id).or_insert(0usize);
            let tags = if s.transforms_applied.is_empty() {
                "clean".to_string()
            } else {
                s.transforms_applied.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("+")
            };
            let name = format!("{}_{:04}_{tags}.pgm", pool.as_str(), n);
            *n += 1;
            write_pgm(&dir.join(name), s.side(), s.image.data()).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Reads an image-folder layout written by [`export_image_folder`] or
/// prepared externally. Class ids follow the sorted directory names.
pub fn ingest_image_folder(root: &Path) -> Result<Dataset> {
    let read_dir = |p: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut v: Vec<_> = fs::read_dir(p)
            .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let mut support = Vec::new();
    let mut query = Vec::new();
    let class_dirs: Vec<_> = read_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        for file in read_dir(dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("pgm") {
                continue;
            }
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let pool: Pool = stem.split('_').next().unwrap_or_default().parse().map_err(|_| {
                Error::Data(format!("{}: file name must start with support_ or query_", file.display()))
            })?;
            let (w, h, data) = read_pgm(&file)?;
            let dir_name = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            let item = LabeledImage { id: format!("{dir_name}/{stem}"), class_id, image: Tensor::new(vec![1, h, w], data)? };
            match pool {
                Pool::Support => support.push(item),
                Pool::Query => query.push(item),
            }
        }
    }
    Dataset::new(support, query)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_image_is_deterministic_and_class_specific() {
        let a = generate_base_image(2, 9, 32).unwrap();
        assert_eq!(a, generate_base_image(2, 9, 32).unwrap());
        for c1 in 0..MAX_CLASSES {
            for c2 in c1 + 1..MAX_CLASSES {
                let (x, y) = (generate_base_image(c1, 3, 32).unwrap(), generate_base_image(c2, 3, 32).unwrap());
                let differ = x.image.data().iter().zip(y.image.data()).filter(|(p, q)| p != q).count();
                assert!(differ as f64 >= 0.01 * 1024.0, "classes {c1} and {c2}");
            }
        }
        assert!(generate_base_image(0, 0, 8).is_err());
    }

    #[test]
    fn target_fraction_range() {
        for c in 0..MAX_CLASSES {
            for seed in 0..100 {
                let f = generate_base_image(c, seed, 32).unwrap().mask_fraction();
                assert!((0.10..=0.50).contains(&f), "class {c} seed {seed}: {f}");
            }
        }
    }

    #[test]
    fn transforms_meet_rules() {
        for seed in 0..50 {
            let base = || generate_base_image((seed % 5) as usize, seed, 32).unwrap();
            let small = apply_difficulty(base(), Difficulty::Small, seed).unwrap();
            assert!(small.mask_fraction() <= SMALL_MASK_FRACTION && small.mask_fraction() > 0.0);
            let b = base();
            let inc = apply_difficulty(b.clone(), Difficulty::Incomplete, seed).unwrap();
            let total = b.target_mask.iter().filter(|&&m| m).count();
            let removed = (0..1024).filter(|&i| b.target_mask[i] && inc.image.data()[i] == b.background).count();
            assert!(removed as f64 > 0.5 * total as f64);
            let cam = apply_difficulty(base(), Difficulty::Camouflaged, seed).unwrap();
            let mean = |want: bool| {
                let v: Vec<f64> = (0..1024).filter(|&i| cam.target_mask[i] == want).map(|i| cam.image.data()[i]).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            assert!((mean(true) - mean(false)).abs() <= CAMOUFLAGE_MEAN_TOLERANCE);
            let blurred = apply_difficulty(base(), Difficulty::BlurryNoisy, seed).unwrap();
            assert_ne!(blurred.image, base().image);
            for q in [&small, &inc, &cam, &blurred] {
                assert!(q.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(q.pool, Pool::Query);
            }
        }
    }

    #[test]
    fn transform_errors() {
        let b = generate_base_image(0, 1, 32).unwrap();
        assert!(matches!(blur_and_noise(b.clone(), BlurNoise { radius: 0, sigma: 0.0 }, 0), Err(Error::Config(_))));
        let q = apply_difficulty(b, Difficulty::Small, 1).unwrap();
        assert!(matches!(apply_difficulty(q, Difficulty::Small, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn dataset_counts_and_quota() {
        let cfg = DatasetConfig::default();
        let ds = build_dataset(&cfg).unwrap();
        assert_eq!((ds.support.len(), ds.query.len()), (100, 300));
        let blurred = ds.query.iter().filter(|q| q.transforms_applied.contains(&Difficulty::BlurryNoisy)).count();
        assert!(blurred >= 15);
        assert_eq!(ds, build_dataset(&cfg).unwrap());
        for c in 0..5 {
            assert_eq!(ds.query.iter().filter(|q| q.class_id == c).count(), 60);
        }
        let bad = DatasetConfig { transform_mix: [0.5, 0.5, 0.5, 0.0], ..cfg.clone() };
        assert!(matches!(build_dataset(&bad), Err(Error::Config(_))));
        let low = DatasetConfig { blur_fraction: 0.01, ..cfg };
        assert!(matches!(build_dataset(&low), Err(Error::Config(_))));
    }

    #[test]
    fn image_folder_round_trip() {
        let cfg = DatasetConfig { n_classes: 2, samples_per_class_support: 2, samples_per_class_query: 3, ..Default::default() };
        let ds = build_dataset(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("crlnet_folder_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        export_image_folder(&ds, &dir).unwrap();
        let back = ingest_image_folder(&dir).unwrap();
        assert_eq!((back.support.len(), back.query.len()), (4, 6));
        for (a, b) in ds.support.iter().zip(&back.support) {
            assert_eq!(a.class_id, b.class_id);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-12);
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }
}
