//! Datasets on disk (a directory of 8-bit images plus `labels.csv`) and
//! deterministic synthetic generators with continuous labels.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{CcdmError, Result};
use crate::rng;

pub const LABELS_FILE: &str = "labels.csv";
pub const GENERATOR_FILE: &str = "generator.json";
const SUPERSAMPLE: usize = 4;

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Directory { path: PathBuf },
    Generator(GeneratorSpec),
    Derived { from: Box<Provenance>, note: String },
}

/// Serialized as `{type, params, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(rename = "type")]
    pub kind: String,
    pub params: serde_json::Value,
    pub seed: u64,
}

/// Images stored as 8-bit pixels; `images()` maps them to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(C, H, W)`.
    pub shape: [usize; 3],
    pixels: Vec<Vec<u8>>,
    pub raw_labels: Vec<f64>,
    pub class_tags: Option<Vec<u32>>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        shape: [usize; 3],
        pixels: Vec<Vec<u8>>,
        raw_labels: Vec<f64>,
        class_tags: Option<Vec<u32>>,
        provenance: Provenance,
    ) -> Result<Self> {
        if pixels.len() != raw_labels.len() {
            return Err(CcdmError::Dataset(format!("{} images but {} labels", pixels.len(), raw_labels.len())));
        }
        if let Some(tags) = &class_tags {
            if tags.len() != pixels.len() {
                return Err(CcdmError::Dataset(format!("{} images but {} class tags", pixels.len(), tags.len())));
            }
        }
        let numel: usize = shape.iter().product();
        if let Some(i) = pixels.iter().position(|p| p.len() != numel) {
            return Err(CcdmError::Dataset(format!("image {i} has {} values, expected {numel}", pixels[i].len())));
        }
        if let Some(i) = raw_labels.iter().position(|y| !y.is_finite()) {
            return Err(CcdmError::Dataset(format!("label {i} is not finite")));
        }
        Ok(Self { shape, pixels, raw_labels, class_tags, provenance })
    }

    pub fn len(&self) -> usize {
        self.raw_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_labels.is_empty()
    }

    pub fn shape_i64(&self) -> [i64; 3] {
        self.shape.map(|v| v as i64)
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        &self.pixels[i]
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.class_tags.as_ref().map(|t| t.iter().map(|&c| c as usize + 1).max().unwrap_or(0))
    }

    /// `x = pixel / 127.5 - 1` for the selected rows, as `(n, C, H, W)`.
    pub fn images_at(&self, idx: &[usize]) -> Tensor {
        let [c, h, w] = self.shape_i64();
        let mut flat = Vec::with_capacity(idx.len() * self.shape.iter().product::<usize>());
        for &i in idx {
            flat.extend_from_slice(&self.pixels[i]);
        }
        let t = Tensor::from_slice(&flat).to_kind(Kind::Float);
        (t / 127.5 - 1.0).reshape([idx.len() as i64, c, h, w])
    }

    pub fn images(&self) -> Tensor {
        self.images_at(&(0..self.len()).collect::<Vec<_>>())
    }

    /// The rows selected by `keep`, in order.
    pub fn subset(&self, keep: &[usize], note: &str) -> Result<Dataset> {
        Dataset::new(
            self.shape,
            keep.iter().map(|&i| self.pixels[i].clone()).collect(),
            keep.iter().map(|&i| self.raw_labels[i]).collect(),
            self.class_tags.as_ref().map(|t| keep.iter().map(|&i| t[i]).collect()),
            Provenance::Derived { from: Box::new(self.provenance.clone()), note: note.into() },
        )
    }

    /// Writes `labels.csv`, one PNG per image and, for generated data, the
    /// generator spec.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(LABELS_FILE))?;
        if self.class_tags.is_some() {
            w.write_record(["filename", "label", "class"])?;
        } else {
            w.write_record(["filename", "label"])?;
        }
        for i in 0..self.len() {
            let name = format!("img_{i:06}.png");
            write_png(&dir.join(&name), self.shape, &self.pixels[i])?;
            let label = self.raw_labels[i].to_string();
            match &self.class_tags {
                Some(t) => w.write_record([name.as_str(), label.as_str(), t[i].to_string().as_str()])?,
                None => w.write_record([name.as_str(), label.as_str()])?,
            }
        }
        w.flush()?;
        match &self.provenance {
            Provenance::Generator(spec) => {
                std::fs::write(dir.join(GENERATOR_FILE), serde_json::to_string_pretty(spec)?)?;
            }
            Provenance::Derived { .. } => {
                std::fs::write(dir.join(GENERATOR_FILE), serde_json::to_string_pretty(&self.provenance)?)?;
            }
            Provenance::Directory { .. } => {}
        }
        Ok(())
    }
}

/// Encodes CHW 8-bit pixels as a grayscale or RGB PNG.
pub fn write_png(path: &Path, shape: [usize; 3], chw: &[u8]) -> Result<()> {
    let [c, h, w] = shape;
    match c {
        1 => image::GrayImage::from_raw(w as u32, h as u32, chw.to_vec())
            .ok_or_else(|| CcdmError::Shape("pixel buffer size".into()))?
            .save(path)?,
        3 => {
            let mut hwc = vec![0u8; chw.len()];
            for ch in 0..3 {
                for p in 0..h * w {
                    hwc[p * 3 + ch] = chw[ch * h * w + p];
                }
            }
            image::RgbImage::from_raw(w as u32, h as u32, hwc)
                .ok_or_else(|| CcdmError::Shape("pixel buffer size".into()))?
                .save(path)?
        }
        _ => return Err(CcdmError::Shape(format!("cannot write {c}-channel images"))),
    }
    Ok(())
}

fn read_image(path: &Path) -> std::result::Result<([usize; 3], Vec<u8>), String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(match img.color().channel_count() {
        1 | 2 => ([1, h, w], img.into_luma8().into_raw()),
        _ => {
            let hwc = img.into_rgb8().into_raw();
            let mut chw = vec![0u8; hwc.len()];
            for p in 0..h * w {
                for ch in 0..3 {
                    chw[ch * h * w + p] = hwc[p * 3 + ch];
                }
            }
            ([3, h, w], chw)
        }
    })
}

/// Reads a dataset directory; rows follow the CSV order.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let csv_path = root.join(LABELS_FILE);
    if !csv_path.exists() {
        return Err(CcdmError::MissingDependency {
            what: format!("dataset manifest {}", csv_path.display()),
            producer: "make-dataset".into(),
        });
    }
    let mut rdr = csv::Reader::from_path(&csv_path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let has_class = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["filename", "label"] => false,
        ["filename", "label", "class"] => true,
        other => {
            return Err(CcdmError::Dataset(format!(
                "{}: header must be `filename,label[,class]`, got `{}`",
                csv_path.display(),
                other.join(",")
            )))
        }
    };
    let (mut pixels, mut labels, mut tags) = (Vec::new(), Vec::new(), Vec::new());
    let mut shape: Option<[usize; 3]> = None;
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| CcdmError::Dataset(format!("row {line}: {e}")))?;
        let name = rec.get(0).unwrap_or_default();
        let fail = |msg: String| CcdmError::Dataset(format!("row {line} ({name}): {msg}"));
        let label: f64 = rec
            .get(1)
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|_| fail(format!("unparsable label `{}`", rec.get(1).unwrap_or_default())))?;
        if !label.is_finite() {
            return Err(fail("label is not finite".into()));
        }
        if has_class {
            let c: u32 = rec
                .get(2)
                .unwrap_or_default()
                .trim()
                .parse()
                .map_err(|_| fail(format!("unparsable class `{}`", rec.get(2).unwrap_or_default())))?;
            tags.push(c);
        }
        let path = root.join(name);
        if !path.exists() {
            return Err(fail("image file is missing".into()));
        }
        let (s, px) = read_image(&path).map_err(fail)?;
        match shape {
            None => shape = Some(s),
            Some(prev) if prev != s => return Err(fail(format!("shape {s:?} differs from {prev:?}"))),
            _ => {}
        }
        pixels.push(px);
        labels.push(label);
    }
    let shape = shape.ok_or_else(|| CcdmError::Dataset(format!("{} lists no images", csv_path.display())))?;
    Dataset::new(
        shape,
        pixels,
        labels,
        has_class.then_some(tags),
        Provenance::Directory { path: root.to_path_buf() },
    )
}

/// Shapes drawn by the rotor generator; the discriminant is the class tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotorShape {
    Bar = 0,
    Triangle = 1,
    Ell = 2,
    Tee = 3,
}

impl RotorShape {
    pub const ALL: [RotorShape; 4] = [RotorShape::Bar, RotorShape::Triangle, RotorShape::Ell, RotorShape::Tee];

    /// Membership test in shape-local coordinates (half length 1).
    fn contains(self, u: f64, v: f64, w: f64) -> bool {
        let rect = |u0: f64, u1: f64, v0: f64, v1: f64| u >= u0 && u <= u1 && v >= v0 && v <= v1;
        match self {
            RotorShape::Bar => rect(-1.0, 1.0, -w, w),
            RotorShape::Ell => rect(-1.0, 1.0, -w, w) || rect(-1.0, -1.0 + 2.0 * w, -w, 0.8),
            RotorShape::Tee => rect(-1.0, 1.0, -w, w) || rect(-w, w, -0.8, w),
            RotorShape::Triangle => {
                let (a, b, c) = ((-1.0, -0.35), (1.0, -0.35), (-0.3, 0.65));
                let side = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (v - p.1) - (q.1 - p.1) * (u - p.0);
                let (d1, d2, d3) = (side(a, b), side(b, c), side(c, a));
                (d1 >= 0.0 && d2 >= 0.0 && d3 >= 0.0) || (d1 <= 0.0 && d2 <= 0.0 && d3 <= 0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotorParams {
    pub n_angles: usize,
    pub per_angle: usize,
    pub size: usize,
    /// Angles form the grid `max_angle * i / (n_angles - 1)`.
    pub max_angle: f64,
    /// Random per-image translation, scale, thickness and brightness.
    pub jitter: bool,
}

impl RotorParams {
    pub fn new(n_angles: usize, per_angle: usize, size: usize) -> Self {
        Self { n_angles, per_angle, size, max_angle: 90.0, jitter: true }
    }
}

/// Anti-aliased rendering of one rotated shape as 8-bit pixels.
pub fn render_rotor(shape: RotorShape, angle_deg: f64, size: usize, jitter: [f64; 5]) -> Vec<u8> {
    let [dx, dy, scale, thick, bright] = jitter;
    let s = size as f64;
    let (cx, cy) = (s / 2.0 + dx * s, s / 2.0 + dy * s);
    let half = s * scale;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut out = vec![0u8; size * size];
    let ss = SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / ss - cx;
                    // image rows grow downward; flip so positive angles turn counter-clockwise
                    let y = cy - (py as f64 + (sy as f64 + 0.5) / ss);
                    let u = (cos * x + sin * y) / half;
                    let v = (-sin * x + cos * y) / half;
                    if shape.contains(u, v, thick) {
                        hits += 1;
                    }
                }
            }
            let cover = hits as f64 / (ss * ss);
            out[py * size + px] = (255.0 * bright * cover).round() as u8;
        }
    }
    out
}

/// Grayscale rotated shapes with the rotation angle (degrees) as label and
/// the shape id as class tag.
pub fn make_rotor_dataset(params: &RotorParams, seed: u64) -> Result<Dataset> {
    let RotorParams { n_angles, per_angle, size, max_angle, jitter } = params.clone();
    if n_angles < 2 || per_angle == 0 {
        return Err(CcdmError::InvalidArgument("rotor grid needs n_angles >= 2 and per_angle >= 1".into()));
    }
    if size < 8 || size % 8 != 0 {
        return Err(CcdmError::InvalidArgument(format!("image size must be a multiple of 8, got {size}")));
    }
    if !(max_angle > 0.0 && max_angle <= 360.0) {
        return Err(CcdmError::InvalidArgument(format!("max_angle must lie in (0, 360], got {max_angle}")));
    }
    let mut pixels = Vec::with_capacity(n_angles * per_angle);
    let mut labels = Vec::with_capacity(n_angles * per_angle);
    let mut tags = Vec::with_capacity(n_angles * per_angle);
    for a in 0..n_angles {
        let angle = max_angle * a as f64 / (n_angles - 1) as f64;
        for k in 0..per_angle {
            let mut r = rng::stream(seed, &[rng::role::DATA, a as u64, k as u64]);
            let shape = RotorShape::ALL[r.gen_range(0..RotorShape::ALL.len())];
            let j = if jitter {
                [
                    r.gen_range(-0.06..0.06),
                    r.gen_range(-0.06..0.06),
                    r.gen_range(0.32..0.40),
                    r.gen_range(0.16..0.24),
                    r.gen_range(0.75..1.0),
                ]
            } else {
                [0.0, 0.0, 0.36, 0.2, 1.0]
            };
            pixels.push(render_rotor(shape, angle, size, j));
            labels.push(angle);
            tags.push(shape as u32);
        }
    }
    let spec = GeneratorSpec { kind: "rotor".into(), params: serde_json::to_value(params)?, seed };
    Dataset::new([1, size, size], pixels, labels, Some(tags), Provenance::Generator(spec))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountParams {
    pub max_count: usize,
    pub per_count: usize,
    pub size: usize,
    /// Disk radius in pixels.
    pub radius: f64,
    /// Keep disks at least two pixels apart so they stay separate components.
    pub non_overlapping: bool,
}

impl CountParams {
    pub fn new(max_count: usize, per_count: usize, size: usize) -> Self {
        Self { max_count, per_count, size, radius: (size as f64 / 16.0).max(1.5), non_overlapping: true }
    }
}

fn render_disks(centers: &[(f64, f64)], radius: f64, size: usize) -> Vec<u8> {
    let mut out = vec![0u8; size * size];
    let ss = SUPERSAMPLE as f64;
    let r2 = radius * radius;
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / ss;
                    let y = py as f64 + (sy as f64 + 0.5) / ss;
                    if centers.iter().any(|&(cx, cy)| (x - cx).powi(2) + (y - cy).powi(2) <= r2) {
                        hits += 1;
                    }
                }
            }
            out[py * size + px] = (255.0 * hits as f64 / (ss * ss)).round() as u8;
        }
    }
    out
}

/// Images of `k` disks labelled `k`, for `k` in `1..=max_count`.
pub fn make_count_dataset(params: &CountParams, seed: u64) -> Result<Dataset> {
    let CountParams { max_count, per_count, size, radius, non_overlapping } = params.clone();
    if max_count == 0 || per_count == 0 {
        return Err(CcdmError::InvalidArgument("count generator needs max_count >= 1 and per_count >= 1".into()));
    }
    if size < 8 || size % 8 != 0 {
        return Err(CcdmError::InvalidArgument(format!("image size must be a multiple of 8, got {size}")));
    }
    let s = size as f64;
    if !(radius > 0.0 && 2.0 * radius + 2.0 < s) {
        return Err(CcdmError::InvalidArgument(format!("radius {radius} does not fit a {size}px image")));
    }
    let min_dist = 2.0 * radius + 2.0;
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for k in 1..=max_count {
        for j in 0..per_count {
            let mut r = rng::stream(seed, &[rng::role::DATA, k as u64, j as u64]);
            let mut centers: Vec<(f64, f64)> = Vec::with_capacity(k);
            let mut tries = 0;
            while centers.len() < k {
                tries += 1;
                if tries > 100_000 {
                    return Err(CcdmError::InvalidArgument(format!(
                        "cannot place {k} separated disks of radius {radius} in {size}px"
                    )));
                }
                let c = (r.gen_range(radius + 1.0..s - radius - 1.0), r.gen_range(radius + 1.0..s - radius - 1.0));
                let clear = !non_overlapping
                    || centers.iter().all(|&(x, y)| ((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt() >= min_dist);
                if clear {
                    centers.push(c);
                }
            }
            pixels.push(render_disks(&centers, radius, size));
            labels.push(k as f64);
        }
    }
    let spec = GeneratorSpec { kind: "count".into(), params: serde_json::to_value(params)?, seed };
    Dataset::new([1, size, size], pixels, labels, None, Provenance::Generator(spec))
}

/// Keeps only rows with an odd label (the sparse-count training split).
pub fn odd_count_subset(ds: &Dataset) -> Result<Dataset> {
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| (ds.raw_labels[i].round() as i64) % 2 == 1).collect();
    ds.subset(&keep, "odd counts only")
}

/// Generates the dataset described by a spec.
pub fn generate(spec: &GeneratorSpec) -> Result<Dataset> {
    match spec.kind.as_str() {
        "rotor" => make_rotor_dataset(&serde_json::from_value(spec.params.clone())?, spec.seed),
        "count" => make_count_dataset(&serde_json::from_value(spec.params.clone())?, spec.seed),
        other => Err(CcdmError::Config(format!("unknown generator type `{other}` (expected rotor or count)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn components(px: &[u8], size: usize) -> usize {
        let mut seen = vec![false; px.len()];
        let mut count = 0;
        for start in 0..px.len() {
            if px[start] == 0 || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (y, x) = ((p / size) as i64, (p % size) as i64);
                for (dy, dx) in [(0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)] {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= size as i64 || nx >= size as i64 {
                        continue;
                    }
                    let q = ny as usize * size + nx as usize;
                    if px[q] > 0 && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        count
    }

    fn digest(dir: &Path) -> String {
        let mut names: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        let mut h = Sha256::new();
        for n in names {
            h.update(std::fs::read(n).unwrap());
        }
        hex::encode(h.finalize())
    }

    #[test]
    fn bar_is_half_turn_symmetric() {
        let j = [0.0, 0.0, 0.36, 0.2, 1.0];
        assert_eq!(render_rotor(RotorShape::Bar, 0.0, 32, j), render_rotor(RotorShape::Bar, 180.0, 32, j));
        assert_ne!(render_rotor(RotorShape::Bar, 0.0, 32, j), render_rotor(RotorShape::Bar, 90.0, 32, j));
        assert_ne!(render_rotor(RotorShape::Ell, 0.0, 32, j), render_rotor(RotorShape::Ell, 180.0, 32, j));
    }

    #[test]
    fn rotor_is_deterministic_and_labelled() {
        let p = RotorParams::new(5, 3, 16);
        let a = make_rotor_dataset(&p, 7).unwrap();
        assert_eq!(a, make_rotor_dataset(&p, 7).unwrap());
        assert_ne!(a.pixels, make_rotor_dataset(&p, 8).unwrap().pixels);
        assert_eq!(a.len(), 15);
        assert_eq!(a.raw_labels[0], 0.0);
        assert_eq!(a.raw_labels[14], 90.0);
        assert_eq!(a.raw_labels[3], 22.5);
        assert!(a.class_tags.as_ref().unwrap().iter().all(|&c| c < 4));
        let x = a.images();
        assert_eq!(x.size(), vec![15, 1, 16, 16]);
        assert!(x.min().double_value(&[]) >= -1.0 && x.max().double_value(&[]) <= 1.0);
        assert!(make_rotor_dataset(&RotorParams::new(1, 3, 16), 0).is_err());
        assert!(make_rotor_dataset(&RotorParams::new(4, 3, 12), 0).is_err());
    }

    #[test]
    fn sparse_regime_shape() {
        let p = RotorParams { jitter: false, ..RotorParams::new(450, 25, 8) };
        let spec = serde_json::to_value(&p).unwrap();
        assert_eq!(spec["n_angles"], 450);
        assert_eq!(spec["per_angle"], 25);
    }

    #[test]
    fn count_images_have_k_components() {
        let p = CountParams::new(9, 3, 32);
        let ds = make_count_dataset(&p, 3).unwrap();
        for i in 0..ds.len() {
            assert_eq!(components(ds.pixels(i), 32) as f64, ds.raw_labels[i], "row {i}");
        }
        let odd = odd_count_subset(&ds).unwrap();
        assert!(odd.raw_labels.iter().all(|&y| y as i64 % 2 == 1));
        assert_eq!(odd.len(), 15);
        assert!(make_count_dataset(&CountParams::new(0, 3, 32), 0).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_stable() {
        let ds = make_rotor_dataset(&RotorParams::new(3, 2, 16), 1).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        ds.save(d1.path()).unwrap();
        let back = load_dataset(d1.path()).unwrap();
        assert_eq!(back.pixels, ds.pixels);
        assert_eq!(back.raw_labels, ds.raw_labels);
        assert_eq!(back.class_tags, ds.class_tags);
        let d2 = tempfile::tempdir().unwrap();
        back.save(d2.path()).unwrap();
        // a loaded dataset records its directory, not a generator spec
        assert!(!d2.path().join(GENERATOR_FILE).exists());
        std::fs::remove_file(d1.path().join(GENERATOR_FILE)).unwrap();
        assert_eq!(digest(d1.path()), digest(d2.path()));
    }

    #[test]
    fn manifest_errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), [1, 8, 8], &[10; 64]).unwrap();
        write_png(&dir.path().join("b.png"), [1, 8, 8], &[20; 64]).unwrap();
        std::fs::write(dir.path().join(LABELS_FILE), "filename,label\na.png,1.5\nb.png,2\n").unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.raw_labels, vec![1.5, 2.0]);

        std::fs::write(dir.path().join(LABELS_FILE), "filename,label\na.png,1.5\nc.png,2\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("c.png"), "{err}");
        std::fs::write(dir.path().join(LABELS_FILE), "filename,label\na.png,abc\n").unwrap();
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("row 2"));
        std::fs::write(dir.path().join(LABELS_FILE), "file,label\na.png,1\n").unwrap();
        assert!(load_dataset(dir.path()).is_err());
        write_png(&dir.path().join("big.png"), [1, 16, 16], &[0; 256]).unwrap();
        std::fs::write(dir.path().join(LABELS_FILE), "filename,label\na.png,1\nbig.png,2\n").unwrap();
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("row 3"));
        assert!(matches!(
            load_dataset(&dir.path().join("none")),
            Err(CcdmError::MissingDependency { .. })
        ));
    }

    #[test]
    fn generator_spec_regenerates() {
        let ds = make_count_dataset(&CountParams::new(3, 2, 16), 4).unwrap();
        let Provenance::Generator(spec) = &ds.provenance else { panic!("generated data carries its spec") };
        let json = serde_json::to_value(spec).unwrap();
        assert_eq!(json["type"], "count");
        assert_eq!(generate(spec).unwrap(), ds);
    }
}
