//! Procedural paired photo/sketch corpus, image files and the SSIM metric.
//!
//! Each pair is drawn from a random face-like geometry: a head ellipse, two
//! eyes, a nose and a mouth. The photo renders that geometry as a shaded
//! scene over background clutter with pixel noise; the sketch renders the
//! same geometry as strokes on white paper. Geometry depends only on the
//! pair seed, so every style and domain of one seed shares it exactly.

mod image;
pub mod ssim;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use self::image::GrayImage;
pub use self::ssim::ssim;
use crate::error::{ensure, Error, Result};
use crate::rng::{derive_seed, normal, rng_for, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Machine-generated pseudo-sketches: exact geometry, no hand jitter.
    Pretrain,
    /// Scarce "hand-drawn" sketches: strokes wobble around the geometry.
    Finetune,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Pretrain => "pretrain",
            Domain::Finetune => "finetune",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Domain::Pretrain),
            "finetune" => Ok(Domain::Finetune),
            other => Err(Error::Config(format!("unknown domain {other:?}"))),
        }
    }
}

/// Stroke rendering parameters of one sketch style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleParams {
    /// Full stroke width in pixels.
    pub stroke_width: f64,
    /// Gray level of ink, 0 is black.
    pub ink: f64,
    /// Extra jitter amplitude in pixels on top of the domain jitter.
    pub jitter: f64,
    /// Diagonal hatching on the shaded cheek.
    pub hatching: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub pretrain_pairs: usize,
    pub finetune_pairs: usize,
    pub heldout_pairs: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Stroke wobble amplitude in pixels for the finetune domain.
    pub finetune_jitter: f64,
    pub styles: Vec<StyleParams>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            pretrain_pairs: 512,
            finetune_pairs: 128,
            heldout_pairs: 32,
            resolution: 32,
            seed: 0,
            finetune_jitter: 0.6,
            styles: vec![
                StyleParams { stroke_width: 1.0, ink: 0.0, jitter: 0.0, hatching: false },
                StyleParams { stroke_width: 2.6, ink: 0.3, jitter: 0.0, hatching: false },
                StyleParams { stroke_width: 1.4, ink: 0.15, jitter: 0.3, hatching: true },
            ],
        }
    }
}

impl CorpusConfig {
    pub fn num_styles(&self) -> usize {
        self.styles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pretrain_pairs == 0 || self.finetune_pairs == 0 || self.heldout_pairs == 0 {
            return Err(Error::Config("corpus pair counts must be at least 1".into()));
        }
        if self.resolution < 8 {
            return Err(Error::Config(format!("corpus resolution {} below 8", self.resolution)));
        }
        if self.styles.is_empty() {
            return Err(Error::Config("corpus needs at least one style".into()));
        }
        for s in &self.styles {
            if !(s.stroke_width > 0.0 && (0.0..1.0).contains(&s.ink) && s.jitter >= 0.0) {
                return Err(Error::Config(format!("invalid style {s:?}")));
            }
        }
        Ok(())
    }

    /// Jitter amplitude applied to every stroke of a style in a domain.
    pub fn jitter_for(&self, style: usize, domain: Domain) -> f64 {
        let base = match domain {
            Domain::Pretrain => 0.0,
            Domain::Finetune => self.finetune_jitter,
        };
        base + self.styles[style].jitter
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhotoSketchPair {
    pub photo: GrayImage,
    pub sketch: GrayImage,
    pub style: usize,
    pub domain: Domain,
    /// Stroke wobble amplitude the sketch was drawn with.
    pub jitter: f64,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    eye_y: f64,
    eye_dx: f64,
    eye_r: f64,
    mouth_y: f64,
    mouth_w: f64,
    mouth_bend: f64,
    nose_top: f64,
    nose_len: f64,
}

impl Geometry {
    /// Geometry parameters take a few discrete levels each so that the
    /// corpus stays within reach of a 4x4 token grid.
    fn sample(rng: &mut Rng, res: f64) -> Self {
        let s = res / 32.0;
        let mut pick = |levels: &[f64]| levels[rng.random_range(0..levels.len())];
        let cx = (16.0 + pick(&[-2.0, 0.0, 2.0])) * s;
        let cy = (16.0 + pick(&[-1.0, 0.0, 1.0])) * s;
        let rx = pick(&[8.5, 10.0]) * s;
        let ry = pick(&[10.5, 12.0]) * s;
        Self {
            cx,
            cy,
            rx,
            ry,
            eye_y: cy - 0.3 * ry,
            eye_dx: 0.42 * rx,
            eye_r: pick(&[1.5, 2.0]) * s,
            mouth_y: cy + 0.5 * ry,
            mouth_w: pick(&[0.3, 0.42]) * rx,
            mouth_bend: pick(&[-1.0, 0.0, 1.2]) * s,
            nose_top: cy - 0.05 * ry,
            nose_len: 0.22 * ry,
        }
    }

    fn inside_head(&self, x: f64, y: f64) -> bool {
        ((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2) <= 1.0
    }

    /// Stroke polylines; `wobble(curve, t)` offsets points along the normal.
    fn curves(&self, wobble: &dyn Fn(usize, f64) -> f64) -> Vec<Vec<(f64, f64)>> {
        let ellipse = |id: usize, cx: f64, cy: f64, rx: f64, ry: f64, n: usize| -> Vec<(f64, f64)> {
            (0..=n)
                .map(|i| {
                    let t = i as f64 / n as f64 * std::f64::consts::TAU;
                    let d = wobble(id, t);
                    ((rx + d) * t.cos() + cx, (ry + d) * t.sin() + cy)
                })
                .collect()
        };
        let mut out = vec![
            ellipse(0, self.cx, self.cy, self.rx, self.ry, 96),
            ellipse(1, self.cx - self.eye_dx, self.eye_y, self.eye_r, self.eye_r, 24),
            ellipse(2, self.cx + self.eye_dx, self.eye_y, self.eye_r, self.eye_r, 24),
        ];
        out.push(
            (0..=16)
                .map(|i| {
                    let u = i as f64 / 16.0 * 2.0 - 1.0;
                    let x = self.cx + u * self.mouth_w;
                    let y = self.mouth_y + self.mouth_bend * (1.0 - u * u) + wobble(3, u * std::f64::consts::PI);
                    (x, y)
                })
                .collect(),
        );
        out.push(
            (0..=8)
                .map(|i| {
                    let u = i as f64 / 8.0;
                    (self.cx + wobble(4, u * std::f64::consts::PI), self.nose_top + u * self.nose_len)
                })
                .collect(),
        );
        out
    }
}

fn segment_distance((px, py): (f64, f64), (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

fn render_photo(geo: &Geometry, seed: u64, res: usize) -> GrayImage {
    let mut rng = rng_for(seed, "photo");
    let base = rng.random_range(0.3..0.6);
    let slope = rng.random_range(-0.25..0.25);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let clutter: Vec<(f64, f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let x0 = rng.random_range(0.0..res as f64);
            let y0 = rng.random_range(0.0..res as f64);
            let w = rng.random_range(3.0..12.0);
            let h = rng.random_range(3.0..12.0);
            (x0, y0, w, h, rng.random_range(0.1..0.9))
        })
        .collect();
    let skin = rng.random_range(0.65..0.85);
    let light = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let curves = geo.curves(&|_, _| 0.0);

    let mut img = GrayImage::filled(res, res, 0.0);
    for yi in 0..res {
        for xi in 0..res {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let mut v = base + slope * (x * angle.cos() + y * angle.sin()) / res as f64;
            for &(x0, y0, w, h, c) in &clutter {
                if x >= x0 && x < x0 + w && y >= y0 && y < y0 + h {
                    v = c;
                }
            }
            if geo.inside_head(x, y) {
                v = skin + 0.15 * light * (x - geo.cx) / geo.rx;
                for eye in &curves[1..3] {
                    let (ex, ey) = (eye[0].0 - geo.eye_r, eye[0].1);
                    if (x - ex).powi(2) + (y - ey).powi(2) <= geo.eye_r * geo.eye_r {
                        v = 0.1;
                    }
                }
                if curves[3].windows(2).any(|s| segment_distance((x, y), s[0], s[1]) <= 0.8) {
                    v = 0.3;
                }
                if curves[4].windows(2).any(|s| segment_distance((x, y), s[0], s[1]) <= 0.6) {
                    v -= 0.15;
                }
            }
            img.set(xi, yi, (v + 0.02 * normal(&mut rng)).clamp(0.0, 1.0) as f32);
        }
    }
    img
}

fn render_sketch(geo: &Geometry, seed: u64, style: &StyleParams, jitter: f64, shade_right: bool, res: usize) -> GrayImage {
    let mut rng = rng_for(seed, "jitter");
    let phases: Vec<(f64, f64)> = (0..5).map(|_| (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(3.0..6.0))).collect();
    let wobble = |id: usize, t: f64| {
        let (phase, freq) = phases[id];
        jitter * (freq.floor() * t + phase).sin()
    };
    let curves = geo.curves(&wobble);
    let half = style.stroke_width / 2.0 + 0.15;
    let ink = style.ink as f32;

    let mut img = GrayImage::filled(res, res, 1.0);
    for yi in 0..res {
        for xi in 0..res {
            let p = (xi as f64 + 0.5, yi as f64 + 0.5);
            let on_stroke = curves[..4].iter().any(|c| c.windows(2).any(|s| segment_distance(p, s[0], s[1]) <= half));
            let side = if shade_right { p.0 - geo.cx } else { geo.cx - p.0 };
            let hatch = style.hatching && geo.inside_head(p.0, p.1) && side > 0.35 * geo.rx && (xi + yi) % 4 == 0;
            if on_stroke || hatch {
                img.set(xi, yi, ink);
            }
        }
    }
    img
}

/// Deterministic pair for `(seed, style, domain)` under `cfg`.
pub fn generate_pair(cfg: &CorpusConfig, seed: u64, style: usize, domain: Domain) -> Result<PhotoSketchPair> {
    ensure!(style < cfg.num_styles(), "style {style} out of range for {} styles", cfg.num_styles());
    let res = cfg.resolution;
    let mut geo_rng = rng_for(seed, "geometry");
    let geo = Geometry::sample(&mut geo_rng, res as f64);
    let shade_right = geo_rng.random_bool(0.5);
    let jitter = cfg.jitter_for(style, domain);
    Ok(PhotoSketchPair {
        photo: render_photo(&geo, seed, res),
        sketch: render_sketch(&geo, seed, &cfg.styles[style], jitter, shade_right, res),
        style,
        domain,
        jitter,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Finetune,
    Heldout,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Pretrain, Split::Finetune, Split::Heldout];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Finetune => "finetune",
            Split::Heldout => "heldout",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::Pretrain => Domain::Pretrain,
            Split::Finetune | Split::Heldout => Domain::Finetune,
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (pretrain, finetune, heldout)")))
    }
}

/// Seed of the `index`-th pair of a split.
pub fn pair_seed(cfg: &CorpusConfig, split: Split, index: usize) -> u64 {
    derive_seed(cfg.seed, &format!("{}:{index}", split.name()))
}

/// All pairs of one split; styles cycle through `0..K`.
pub fn generate_split(cfg: &CorpusConfig, split: Split) -> Result<Vec<PhotoSketchPair>> {
    cfg.validate()?;
    let n = match split {
        Split::Pretrain => cfg.pretrain_pairs,
        Split::Finetune => cfg.finetune_pairs,
        Split::Heldout => cfg.heldout_pairs,
    };
    (0..n).map(|i| generate_pair(cfg, pair_seed(cfg, split, i), i % cfg.num_styles(), split.domain())).collect()
}

pub const MANIFEST: &str = "manifest.txt";

/// One manifest line: `photo<TAB>sketch<TAB>style<TAB>domain`, paths
/// relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub photo: PathBuf,
    pub sketch: PathBuf,
    pub style: usize,
    pub domain: Domain,
}

/// Writes a split's images and its manifest under `dir`.
pub fn write_split(dir: &Path, pairs: &[PhotoSketchPair]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, p) in pairs.iter().enumerate() {
        let photo = format!("{i:05}_photo.pgm");
        let sketch = format!("{i:05}_sketch.pgm");
        p.photo.write_pgm(dir.join(&photo))?;
        p.sketch.write_pgm(dir.join(&sketch))?;
        manifest.push_str(&format!("{photo}\t{sketch}\t{}\t{}\n", p.style, p.domain));
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let mut offset = 0;
    let mut out = Vec::new();
    for line in text.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::Format { offset, message: format!("manifest line {:?}: {what}", line) };
        if fields.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        out.push(ManifestEntry {
            photo: fields[0].into(),
            sketch: fields[1].into(),
            style: fields[2].parse().map_err(|_| bad("invalid style"))?,
            domain: fields[3].parse().map_err(|_| bad("invalid domain"))?,
        });
        offset += line.len() + 1;
    }
    Ok(out)
}

/// Loads a split written by [`write_split`].
pub fn read_split(dir: &Path) -> Result<Vec<PhotoSketchPair>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            Ok(PhotoSketchPair {
                photo: GrayImage::read_pgm(dir.join(&e.photo))?,
                sketch: GrayImage::read_pgm(dir.join(&e.sketch))?,
                style: e.style,
                domain: e.domain,
                jitter: f64::NAN,
            })
        })
        .collect()
}

/// Mean darkness `mean(1 - v)`: how much ink a sketch carries.
pub fn ink_density(img: &GrayImage) -> f64 {
    img.pixels().iter().map(|&v| 1.0 - v as f64).sum::<f64>() / img.pixels().len() as f64
}

/// Stroke width from area over half the boundary length of the ink mask
/// (`v < 0.5`): a 1-pixel line scores about 1, a 3-pixel band about 3.
pub fn stroke_width_estimate(img: &GrayImage) -> f64 {
    let (w, h) = (img.width(), img.height());
    let ink = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && img.get(x as usize, y as usize) < 0.5;
    let (mut area, mut edges) = (0usize, 0usize);
    for y in 0..h as isize {
        for x in 0..w as isize {
            if ink(x, y) {
                area += 1;
                edges += [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().filter(|(dx, dy)| !ink(x + dx, y + dy)).count();
            }
        }
    }
    if edges == 0 {
        0.0
    } else {
        2.0 * area as f64 / edges as f64
    }
}
