//! Synthetic shape-segmentation datasets, augmentation, one-hot encoding,
//! and dataset files on disk (PPM/PGM plus a plain-text manifest).
//!
//! Each sample is a flat-colored background with a few rectangles and
//! ellipses stacked on top (later shapes occlude earlier ones). The label map
//! records the drawing exactly; Gaussian pixel noise perturbs only the image,
//! so the ground truth stays clean while the recognition task gets harder as
//! `noise_std` grows. Everything derives deterministically from the seed;
//! each sample uses its own stream seeded with `seed ^ index`.

use crate::error::{Error, Result};
use crate::netpbm;
use crate::tensor::{idx3, Tensor};
use crate::types::{LabelMap, IGNORE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub kinds: Vec<ShapeKind>,
    pub noise_std: f32,
    pub seed: u64,
    /// Relabel 1-pixel class boundaries as IGNORE after drawing.
    pub boundary_ignore: bool,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config("images must be at least 4x4".into()));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::Config("shapes_min must not exceed shapes_max".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("at least one shape kind is required".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Fixed class palette in [0,1] RGB: dark background, then a golden-angle hue
/// walk for the foreground classes. Used both for drawing synthetic samples
/// and for recoloring predictions, so renders line up with inputs.
pub fn class_color(class: u8) -> [f32; 3] {
    if class == IGNORE {
        return [1.0, 1.0, 1.0];
    }
    if class == 0 {
        return [0.18, 0.18, 0.18];
    }
    let hue = (class as f32 * 0.618_034) % 1.0;
    hsv_to_rgb(hue, 0.65, 0.85)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

pub fn draw_rectangle(sample: &mut Sample, rect: Rect, class: u8) {
    let (h, w) = (sample.labels.height(), sample.labels.width());
    let color = class_color(class);
    for y in rect.y0..(rect.y0 + rect.height).min(h) {
        for x in rect.x0..(rect.x0 + rect.width).min(w) {
            sample.labels.set(y, x, class);
            for c in 0..3 {
                sample.image.values_mut()[idx3(c, y, x, h, w)] = color[c];
            }
        }
    }
}

pub fn draw_ellipse(sample: &mut Sample, cx: f64, cy: f64, rx: f64, ry: f64, class: u8) {
    let (h, w) = (sample.labels.height(), sample.labels.width());
    let color = class_color(class);
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 - cx) / rx;
            let dy = (y as f64 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                sample.labels.set(y, x, class);
                for c in 0..3 {
                    sample.image.values_mut()[idx3(c, y, x, h, w)] = color[c];
                }
            }
        }
    }
}

fn blank_sample(h: usize, w: usize, num_classes: usize) -> Sample {
    let bg = class_color(0);
    let mut values = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        values[c * h * w..(c + 1) * h * w].iter_mut().for_each(|v| *v = bg[c]);
    }
    Sample {
        image: Tensor::new(vec![3, h, w], values).unwrap(),
        labels: LabelMap::filled(h, w, 0, num_classes).unwrap(),
    }
}

pub fn gen_synthetic(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.num_samples);
    for index in 0..spec.num_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index as u64);
        let mut sample = blank_sample(spec.height, spec.width, spec.num_classes);
        let count = rng.gen_range(spec.shapes_min..=spec.shapes_max);
        for _ in 0..count {
            let class = rng.gen_range(1..spec.num_classes) as u8;
            let kind = spec.kinds[rng.gen_range(0..spec.kinds.len())];
            match kind {
                ShapeKind::Rectangle => {
                    let rw = rng.gen_range(spec.width / 4..=spec.width / 2);
                    let rh = rng.gen_range(spec.height / 4..=spec.height / 2);
                    let x0 = rng.gen_range(0..=spec.width - rw);
                    let y0 = rng.gen_range(0..=spec.height - rh);
                    draw_rectangle(&mut sample, Rect { x0, y0, width: rw, height: rh }, class);
                }
                ShapeKind::Ellipse => {
                    let rx = rng.gen_range(spec.width as f64 / 8.0..=spec.width as f64 / 4.0);
                    let ry = rng.gen_range(spec.height as f64 / 8.0..=spec.height as f64 / 4.0);
                    let cx = rng.gen_range(rx..=spec.width as f64 - 1.0 - rx);
                    let cy = rng.gen_range(ry..=spec.height as f64 - 1.0 - ry);
                    draw_ellipse(&mut sample, cx, cy, rx, ry, class);
                }
            }
        }
        if spec.noise_std > 0.0 {
            for v in sample.image.values_mut() {
                let z: f32 = rng.sample(StandardNormal);
                *v = (*v + z * spec.noise_std).clamp(0.0, 1.0);
            }
        }
        if spec.boundary_ignore {
            sample.labels = relabel_boundaries_ignore(&sample.labels);
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Marks pixels whose 4-neighborhood crosses a class boundary as IGNORE.
pub fn relabel_boundaries_ignore(labels: &LabelMap) -> LabelMap {
    let (h, w) = (labels.height(), labels.width());
    let mut out = labels.clone();
    for y in 0..h {
        for x in 0..w {
            let own = labels.get(y, x);
            if own == IGNORE {
                continue;
            }
            let mut boundary = false;
            if y > 0 && labels.get(y - 1, x) != own {
                boundary = true;
            }
            if !boundary && y + 1 < h && labels.get(y + 1, x) != own {
                boundary = true;
            }
            if !boundary && x > 0 && labels.get(y, x - 1) != own {
                boundary = true;
            }
            if !boundary && x + 1 < w && labels.get(y, x + 1) != own {
                boundary = true;
            }
            if boundary {
                out.set(y, x, IGNORE);
            }
        }
    }
    out
}

/// Shared random scale, then crop/pad to the target size at a shared random
/// offset: bilinear for the image, nearest-neighbour for labels. Padded area
/// gets image 0 and label IGNORE. RNG draw order: scale, offset x, offset y.
pub fn augment(
    sample: &Sample,
    scale_range: (f64, f64),
    out_h: usize,
    out_w: usize,
    seed: u64,
) -> Result<Sample> {
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::Config(format!("invalid scale range [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let (h, w) = (sample.labels.height(), sample.labels.width());
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);

    let off_x = offset(&mut rng, sw, out_w);
    let off_y = offset(&mut rng, sh, out_h);

    // Actual per-axis ratios after rounding the scaled size.
    let ry = h as f64 / sh as f64;
    let rx = w as f64 / sw as f64;

    let mut image = vec![0.0f32; 3 * out_h * out_w];
    let mut classes = vec![IGNORE; out_h * out_w];
    let src = sample.image.values();
    for y in 0..out_h {
        let sy = y as isize + off_y;
        for x in 0..out_w {
            let sx = x as isize + off_x;
            if sy < 0 || sx < 0 || sy >= sh as isize || sx >= sw as isize {
                continue;
            }
            // Nearest-neighbour label lookup in original coordinates.
            let ny = (((sy as f64 + 0.5) * ry) as usize).min(h - 1);
            let nx = (((sx as f64 + 0.5) * rx) as usize).min(w - 1);
            classes[y * out_w + x] = sample.labels.get(ny, nx);

            // Bilinear image lookup.
            let fy = ((sy as f64 + 0.5) * ry - 0.5).clamp(0.0, h as f64 - 1.0);
            let fx = ((sx as f64 + 0.5) * rx - 0.5).clamp(0.0, w as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let wy = (fy - y0 as f64) as f32;
            let wx = (fx - x0 as f64) as f32;
            for c in 0..3 {
                let v00 = src[idx3(c, y0, x0, h, w)];
                let v01 = src[idx3(c, y0, x1, h, w)];
                let v10 = src[idx3(c, y1, x0, h, w)];
                let v11 = src[idx3(c, y1, x1, h, w)];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                image[idx3(c, y, x, out_h, out_w)] = top + (bot - top) * wy;
            }
        }
    }
    Ok(Sample {
        image: Tensor::new(vec![3, out_h, out_w], image)?,
        labels: LabelMap::new(out_h, out_w, classes, sample.labels.num_classes())?,
    })
}

/// Window start in scaled coordinates; negative means padding on that side.
fn offset(rng: &mut ChaCha8Rng, scaled: usize, out: usize) -> isize {
    if scaled >= out {
        rng.gen_range(0..=(scaled - out)) as isize
    } else {
        -(rng.gen_range(0..=(out - scaled)) as isize)
    }
}

/// One-hot encoding of a label map as a [C,H,W] tensor; ignored pixels get
/// the uniform distribution so the result stays on the simplex.
pub fn one_hot(labels: &LabelMap) -> Result<Tensor> {
    let (c, h, w) = (labels.num_classes(), labels.height(), labels.width());
    let uniform = 1.0 / c as f32;
    let mut values = vec![0.0f32; c * h * w];
    for (p, &class) in labels.classes().iter().enumerate() {
        if class == IGNORE {
            for ch in 0..c {
                values[ch * h * w + p] = uniform;
            }
        } else {
            values[class as usize * h * w + p] = 1.0;
        }
    }
    Tensor::new(vec![c, h, w], values)
}

// ── dataset files ───────────────────────────────────────────────────────

/// Writes images/, masks/ and manifest.txt under `dir`; manifest lines are
/// "image_path,mask_path" relative to the manifest's directory.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = String::new();
    for (i, sample) in samples.iter().enumerate() {
        let img_rel = format!("images/img_{i:04}.ppm");
        let mask_rel = format!("masks/mask_{i:04}.pgm");
        netpbm::write_ppm(&dir.join(&img_rel), &sample.image)?;
        netpbm::write_pgm(&dir.join(&mask_rel), &sample.labels)?;
        manifest.push_str(&img_rel);
        manifest.push(',');
        manifest.push_str(&mask_rel);
        manifest.push('\n');
    }
    let manifest_path = dir.join("manifest.txt");
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

/// Loads every sample listed in a manifest; relative paths resolve against
/// the manifest's directory.
pub fn read_manifest(manifest_path: &Path, num_classes: usize) -> Result<Vec<Sample>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(manifest_path)?;
    let mut samples = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (img, mask) = line.split_once(',').ok_or_else(|| {
            Error::Config(format!("manifest line {} is not 'image,mask': '{line}'", ln + 1))
        })?;
        let image = netpbm::read_ppm(&base.join(img.trim()))?;
        let labels = netpbm::read_pgm(&base.join(mask.trim()), num_classes)?;
        if image.shape()[1] != labels.height() || image.shape()[2] != labels.width() {
            return Err(Error::ShapeMismatch(format!(
                "sample {}: image {:?} vs mask {}x{}",
                ln + 1,
                image.shape(),
                labels.height(),
                labels.width()
            )));
        }
        samples.push(Sample { image, labels });
    }
    if samples.is_empty() {
        return Err(Error::Config(format!("manifest {} lists no samples", manifest_path.display())));
    }
    Ok(samples)
}
