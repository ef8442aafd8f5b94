//! Procedurally rendered pedestrians under per-domain styles.
//!
//! Each identity is a fixed appearance (skin, hair, torso, legs, shoes,
//! optional stripe and bag, body proportions). Cameras shift, scale and
//! mirror the figure; a domain style recolours the whole image (hue
//! rotation, contrast, brightness, tint, background texture, noise).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{hsv_to_rgb, rgb_to_hsv};
use super::dataset::{ImageRecord, ReidDataset, Split};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Stripes,
    Checker,
    Gradient,
    Speckle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    /// Degrees added to every pixel's hue.
    pub hue_shift: f64,
    pub contrast: f64,
    pub brightness: f64,
    pub tint: [f64; 3],
    pub background: Background,
    pub background_colors: [[f64; 3]; 2],
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
}

/// Three training styles and one unseen target style, then procedural ones.
pub fn default_styles(n: usize) -> Vec<DomainStyle> {
    let fixed = [
        DomainStyle {
            hue_shift: 0.0,
            contrast: 1.0,
            brightness: 0.0,
            tint: [1.12, 0.96, 0.84],
            background: Background::Stripes,
            background_colors: [[0.55, 0.5, 0.45], [0.4, 0.38, 0.35]],
            noise: 0.02,
        },
        DomainStyle {
            hue_shift: 25.0,
            contrast: 0.8,
            brightness: 0.06,
            tint: [0.84, 0.96, 1.15],
            background: Background::Checker,
            background_colors: [[0.7, 0.72, 0.75], [0.5, 0.52, 0.58]],
            noise: 0.04,
        },
        DomainStyle {
            hue_shift: -25.0,
            contrast: 1.2,
            brightness: -0.08,
            tint: [0.94, 1.1, 0.9],
            background: Background::Gradient,
            background_colors: [[0.25, 0.3, 0.25], [0.45, 0.5, 0.4]],
            noise: 0.03,
        },
        DomainStyle {
            hue_shift: 45.0,
            contrast: 0.9,
            brightness: 0.03,
            tint: [1.02, 0.88, 1.06],
            background: Background::Speckle,
            background_colors: [[0.6, 0.55, 0.62], [0.35, 0.3, 0.4]],
            noise: 0.05,
        },
    ];
    let kinds = [
        Background::Stripes,
        Background::Checker,
        Background::Gradient,
        Background::Speckle,
    ];
    (0..n)
        .map(|i| {
            fixed.get(i).cloned().unwrap_or_else(|| {
                let t = i as f64;
                DomainStyle {
                    hue_shift: (t * 37.0) % 120.0 - 60.0,
                    contrast: 0.8 + 0.1 * (i % 5) as f64,
                    brightness: 0.03 * ((i % 5) as f64 - 2.0),
                    tint: [
                        0.85 + 0.06 * (i % 5) as f64,
                        0.85 + 0.06 * ((i + 2) % 5) as f64,
                        0.85 + 0.06 * ((i + 4) % 5) as f64,
                    ],
                    background: kinds[i % 4],
                    background_colors: [[0.5, 0.5, 0.5], [0.3, 0.3, 0.3]],
                    noise: 0.03,
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Number of training domains K.
    pub domains: usize,
    pub ids_per_domain: usize,
    pub images_per_id: usize,
    pub target_ids: usize,
    pub target_images_per_id: usize,
    pub height: u32,
    pub width: u32,
    pub cameras: u32,
    pub seed: u64,
    /// `domains + 1` styles (the last is the held-out target); empty means
    /// [`default_styles`].
    #[serde(default)]
    pub styles: Vec<DomainStyle>,
    /// Minimum max-channel difference between per-domain mean colours in
    /// `[0, 1]` units.
    pub min_style_gap: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            domains: 3,
            ids_per_domain: 50,
            images_per_id: 8,
            target_ids: 30,
            target_images_per_id: 8,
            height: 96,
            width: 32,
            cameras: 2,
            seed: 0,
            styles: Vec::new(),
            min_style_gap: 0.02,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.domains == 0 {
            return bad("synthetic data needs at least one training domain");
        }
        if self.cameras < 2 {
            return bad("synthetic data needs at least two cameras");
        }
        if self.images_per_id < 2 || self.target_images_per_id < 2 {
            return bad("every identity needs at least two images");
        }
        if self.ids_per_domain < 2 || self.target_ids < 2 {
            return bad("every domain needs at least two identities");
        }
        if self.height < 16 || self.width < 8 {
            return bad("synthetic images must be at least 16x8");
        }
        if !self.styles.is_empty() && self.styles.len() != self.domains + 1 {
            return bad("styles must list one entry per training domain plus the target");
        }
        Ok(())
    }

    fn styles(&self) -> Vec<DomainStyle> {
        if self.styles.is_empty() {
            default_styles(self.domains + 1)
        } else {
            self.styles.clone()
        }
    }
}

/// K training datasets plus the held-out domain's query and gallery splits.
#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    pub train: Vec<ReidDataset>,
    pub query: ReidDataset,
    pub gallery: ReidDataset,
}

#[derive(Debug, Clone)]
struct Appearance {
    skin: [f64; 3],
    hair: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
    shoes: [f64; 3],
    stripe: Option<[f64; 3]>,
    bag: Option<[f64; 3]>,
    torso_width: f64,
    torso_length: f64,
    leg_gap: f64,
}

fn random_color<R: Rng + ?Sized>(rng: &mut R, sat: (f64, f64), val: (f64, f64)) -> [f64; 3] {
    hsv_to_rgb([
        rng.random_range(0.0..360.0),
        rng.random_range(sat.0..sat.1),
        rng.random_range(val.0..val.1),
    ])
}

impl Appearance {
    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let skin_tones = [[0.95, 0.8, 0.68], [0.8, 0.6, 0.45], [0.55, 0.38, 0.26], [0.98, 0.87, 0.78]];
        let skin = skin_tones[rng.random_range(0..skin_tones.len())];
        let hair = random_color(rng, (0.2, 0.6), (0.05, 0.45));
        let torso = random_color(rng, (0.35, 1.0), (0.3, 1.0));
        let legs = random_color(rng, (0.2, 0.9), (0.15, 0.8));
        let shoes = random_color(rng, (0.0, 0.4), (0.05, 0.5));
        let stripe = rng.random_bool(0.5).then(|| random_color(rng, (0.3, 1.0), (0.5, 1.0)));
        let bag = rng.random_bool(0.4).then(|| random_color(rng, (0.2, 0.8), (0.2, 0.7)));
        Self {
            skin,
            hair,
            torso,
            legs,
            shoes,
            stripe,
            bag,
            torso_width: rng.random_range(0.45..0.7),
            torso_length: rng.random_range(0.3..0.42),
            leg_gap: rng.random_range(0.04..0.14),
        }
    }
}

fn background<R: Rng + ?Sized>(style: &DomainStyle, h: u32, w: u32, rng: &mut R) -> Vec<[f64; 3]> {
    let [a, b] = style.background_colors;
    let phase = rng.random_range(0..8u32);
    let mut out = Vec::with_capacity((h * w) as usize);
    for y in 0..h {
        for x in 0..w {
            let c = match style.background {
                Background::Stripes => {
                    if ((y + phase) / 4) % 2 == 0 {
                        a
                    } else {
                        b
                    }
                }
                Background::Checker => {
                    if ((x + phase) / 4 + (y + phase) / 4) % 2 == 0 {
                        a
                    } else {
                        b
                    }
                }
                Background::Gradient => {
                    let t = (y as f64 + phase as f64) / (h as f64 + 8.0);
                    [0, 1, 2].map(|k| a[k] * (1.0 - t) + b[k] * t)
                }
                Background::Speckle => {
                    if rng.random_bool(0.3) {
                        b
                    } else {
                        a
                    }
                }
            };
            out.push(c);
        }
    }
    out
}

fn render<R: Rng + ?Sized>(
    who: &Appearance,
    camera: u32,
    style: &DomainStyle,
    h: u32,
    w: u32,
    rng: &mut R,
) -> RgbImage {
    let mut canvas = background(style, h, w, rng);
    let (hf, wf) = (h as f64, w as f64);
    let cam = camera as f64;
    let scale = (1.0 - 0.06 * cam) * (1.0 + rng.random_range(-0.04..0.04));
    let mirror = camera % 2 == 1;
    let cx = wf / 2.0 + (0.05 * cam - 0.025) * wf + rng.random_range(-0.04..0.04) * wf;
    let fig_h = 0.9 * hf * scale;
    let y0 = (hf - fig_h) / 2.0 + rng.random_range(-0.03..0.03) * hf;
    let head_r = 0.075 * fig_h;
    let head_cy = y0 + head_r + 0.01 * fig_h;
    let torso_top = y0 + 0.17 * fig_h;
    let torso_bot = torso_top + who.torso_length * fig_h;
    let half_torso = who.torso_width * wf * scale / 2.0;
    let leg_bot = y0 + 0.95 * fig_h;
    let shoe_top = leg_bot - 0.05 * fig_h;
    let gap = who.leg_gap * wf * scale / 2.0;
    let leg_w = half_torso * 0.8 - gap;
    let light = 0.04 * cam;

    for py in 0..h {
        for px in 0..w {
            let x = px as f64 + 0.5;
            let y = py as f64 + 0.5;
            let dx = if mirror { cx - x } else { x - cx };
            let mut color = None;
            let hx = dx / (head_r * 0.85);
            let hy = (y - head_cy) / head_r;
            if hx * hx + hy * hy <= 1.0 {
                color = Some(if hy < -0.35 { who.hair } else { who.skin });
            } else if y >= torso_top && y < torso_bot && dx.abs() <= half_torso {
                let mid = (torso_top + torso_bot) / 2.0;
                color = Some(match who.stripe {
                    Some(s) if (y - mid).abs() < 0.04 * fig_h => s,
                    _ => who.torso,
                });
            } else if y >= torso_bot && y < leg_bot && dx.abs() >= gap && dx.abs() <= gap + leg_w {
                color = Some(if y >= shoe_top { who.shoes } else { who.legs });
            }
            if color.is_none() {
                if let Some(bag) = who.bag {
                    let bag_x = dx + half_torso;
                    if (-0.22 * wf..0.02 * wf).contains(&bag_x)
                        && y >= torso_top + 0.3 * (torso_bot - torso_top)
                        && y < torso_bot + 0.05 * fig_h
                    {
                        color = Some(bag);
                    }
                }
            }
            if let Some(c) = color {
                canvas[(py * w + px) as usize] = c.map(|v| v + light);
            }
        }
    }

    let mut img = RgbImage::new(w, h);
    for (i, p) in img.pixels_mut().enumerate() {
        let mut c = canvas[i].map(|v| v.clamp(0.0, 1.0));
        if style.hue_shift != 0.0 {
            let mut hsv = rgb_to_hsv(c);
            hsv[0] += style.hue_shift;
            c = hsv_to_rgb(hsv);
        }
        for (k, v) in c.iter_mut().enumerate() {
            let n = rng.random_range(-1.0..=1.0) * style.noise;
            *v = ((*v - 0.5) * style.contrast + 0.5 + style.brightness) * style.tint[k] + n;
        }
        *p = Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    img
}

fn domain_rng(seed: u64, domain: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (domain as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn render_domain(
    cfg: &SyntheticConfig,
    style: &DomainStyle,
    domain: usize,
    ids: usize,
    per_id: usize,
) -> Vec<ImageRecord> {
    let mut rng = domain_rng(cfg.seed, domain);
    let people: Vec<Appearance> = (0..ids).map(|_| Appearance::sample(&mut rng)).collect();
    let mut records = Vec::with_capacity(ids * per_id);
    for (pid, who) in people.iter().enumerate() {
        for j in 0..per_id {
            let camera = (j as u32) % cfg.cameras;
            let img = render(who, camera, style, cfg.height, cfg.width, &mut rng);
            records.push(ImageRecord {
                image: Arc::new(img),
                path: None,
                identity: 0,
                raw_identity: pid as i64 + 1,
                camera: camera + 1,
                domain,
            });
        }
    }
    records
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticBundle> {
    cfg.validate()?;
    let styles = cfg.styles();
    let train: Vec<ReidDataset> = (0..cfg.domains)
        .map(|d| {
            let recs = render_domain(cfg, &styles[d], d, cfg.ids_per_domain, cfg.images_per_id);
            ReidDataset::from_records(format!("domain{}", d + 1), Split::Train, recs)
        })
        .collect();
    let target = render_domain(
        cfg,
        &styles[cfg.domains],
        cfg.domains,
        cfg.target_ids,
        cfg.target_images_per_id,
    );
    // first image of every identity (camera 1) is its query
    let (query, gallery): (Vec<_>, Vec<_>) = target
        .into_iter()
        .enumerate()
        .partition(|(i, _)| i % cfg.target_images_per_id == 0);
    let strip = |v: Vec<(usize, ImageRecord)>| v.into_iter().map(|(_, r)| r).collect::<Vec<_>>();
    let bundle = SyntheticBundle {
        train,
        query: ReidDataset::from_records("target", Split::Query, strip(query)),
        gallery: ReidDataset::from_records("target", Split::Gallery, strip(gallery)),
    };
    let gap = min_style_gap(&bundle);
    if gap < cfg.min_style_gap {
        return Err(Error::Config(format!(
            "domain styles are too close: mean-colour gap {gap:.4} < {}",
            cfg.min_style_gap
        )));
    }
    Ok(bundle)
}

/// Mean RGB in `[0, 1]` over every pixel of the given datasets.
pub fn channel_means(datasets: &[&ReidDataset]) -> [f64; 3] {
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for d in datasets {
        for r in &d.records {
            for p in r.image.pixels() {
                for (acc, &v) in sum.iter_mut().zip(&p.0) {
                    *acc += v as f64 / 255.0;
                }
                n += 1;
            }
        }
    }
    sum.map(|s| s / n.max(1) as f64)
}

/// Smallest pairwise max-channel difference of per-domain mean colours
/// (training domains and the target).
pub fn min_style_gap(bundle: &SyntheticBundle) -> f64 {
    let mut means: Vec<[f64; 3]> = bundle.train.iter().map(|d| channel_means(&[d])).collect();
    means.push(channel_means(&[&bundle.query, &bundle.gallery]));
    let mut best = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d = (0..3).map(|k| (means[i][k] - means[j][k]).abs()).fold(0.0, f64::max);
            best = best.min(d);
        }
    }
    best
}

fn write_split(dir: &Path, records: &[ImageRecord], written: &mut Vec<PathBuf>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frame = std::collections::HashMap::<i64, u32>::new();
    for r in records {
        let f = frame.entry(r.raw_identity).or_insert(0);
        *f += 1;
        let path = dir.join(format!(
            "{:04}_c{}s1_{:06}_00.png",
            r.raw_identity, r.camera, *f
        ));
        r.image.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(())
}

/// Writes `domain<k>/bounding_box_train` for every training domain and
/// `<target>/{query,bounding_box_test}` in the market-style grammar.
pub fn write_market_tree(bundle: &SyntheticBundle, root: &Path, target: &str) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for d in &bundle.train {
        write_split(&root.join(&d.name).join(Split::Train.market_dir()), &d.records, &mut written)?;
    }
    write_split(&root.join(target).join(Split::Query.market_dir()), &bundle.query.records, &mut written)?;
    write_split(
        &root.join(target).join(Split::Gallery.market_dir()),
        &bundle.gallery.records,
        &mut written,
    )?;
    Ok(written)
}
