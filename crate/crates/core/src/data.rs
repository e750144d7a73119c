//! Synthetic detection data: coloured shapes on noisy gradient backgrounds.
//!
//! On disk a dataset is a directory holding `images.lcpt` (binary pixels),
//! `annotations.jsonl` (one object per image) and `manifest.json`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

pub const IMAGES_FILE: &str = "images.lcpt";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_MAGIC: &[u8; 4] = b"LCPT";
pub const IMAGES_VERSION: u32 = 1;

/// Foreground classes; id 0 is background.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle = 1,
    Square = 2,
    Triangle = 3,
    Cross = 4,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn from_label(label: usize) -> Option<Shape> {
        Self::ALL.get(label.checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Pixel mask of the shape drawn into a `w x h` box, row-major.
    ///
    /// Every shape touches all four sides of its box, so the tight extent of
    /// the mask is the box itself.
    pub fn rasterize(self, w: usize, h: usize) -> Vec<bool> {
        let (wf, hf) = (w as f64, h as f64);
        let mut mask = vec![false; w * h];
        for py in 0..h {
            for px in 0..w {
                let cx = px as f64 + 0.5;
                let cy = py as f64 + 0.5;
                let inside = match self {
                    Shape::Square => true,
                    Shape::Circle => {
                        let dx = (cx - 0.5 * wf) / (0.5 * wf);
                        let dy = (cy - 0.5 * hf) / (0.5 * hf);
                        dx * dx + dy * dy <= 1.0
                    }
                    Shape::Triangle => {
                        // apex at the top, base along the bottom row
                        let half = ((py as f64 + 1.0) / hf * 0.5 * wf).max(0.5);
                        (cx - 0.5 * wf).abs() <= half
                    }
                    Shape::Cross => {
                        let t = (wf.min(hf) / 3.0).round().max(2.0);
                        (cx - 0.5 * wf).abs() <= 0.5 * t || (cy - 0.5 * hf).abs() <= 0.5 * t
                    }
                };
                mask[py * w + px] = inside;
            }
        }
        mask
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count: usize,
    pub class_names: Vec<String>,
    pub image_size: usize,
    /// Inclusive range of object side lengths in pixels.
    pub min_size: usize,
    pub max_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Placement rejects a new object whose IoU with an existing one
    /// exceeds this; 0 keeps objects disjoint.
    pub max_overlap_iou: f64,
}

impl DatasetManifest {
    pub fn new(seed: u64, count: usize) -> Self {
        Self {
            seed,
            count,
            class_names: Shape::ALL.iter().map(|s| s.name().to_string()).collect(),
            image_size: 64,
            min_size: 12,
            max_size: 28,
            min_objects: 1,
            max_objects: 3,
            max_overlap_iou: 0.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len() + 1
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("dataset count must be >= 1".into()));
        }
        if self.class_names.is_empty() || self.class_names.len() > Shape::ALL.len() {
            return Err(Error::InvalidArgument(format!(
                "between 1 and {} classes supported",
                Shape::ALL.len()
            )));
        }
        if self.min_size < 4 || self.min_size > self.max_size || self.max_size > self.image_size {
            return Err(Error::InvalidArgument("invalid object size range".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::InvalidArgument("invalid objects-per-image range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, values in `[0, 1]` and exactly representable as `f32`.
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AnnotationRecord {
    id: usize,
    boxes: Vec<[f64; 4]>,
    labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Write `images.lcpt` and `annotations.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(IMAGES_FILE), encode_images(&self.samples)?)?;
        let mut ann = Vec::new();
        for (id, s) in self.samples.iter().enumerate() {
            let rec = AnnotationRecord {
                id,
                boxes: s.boxes.iter().map(|b| b.to_array()).collect(),
                labels: s.labels.clone(),
            };
            serde_json::to_writer(&mut ann, &rec)?;
            ann.push(b'\n');
        }
        fs::write(dir.join(ANNOTATIONS_FILE), ann)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bytes = fs::read(dir.join(IMAGES_FILE))?;
        let images = decode_images(&bytes)?;
        let file = fs::File::open(dir.join(ANNOTATIONS_FILE))?;
        let mut reader = BufReader::new(file);
        let mut records = Vec::new();
        let mut offset = 0u64;
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            if !line.trim().is_empty() {
                let rec: AnnotationRecord = serde_json::from_str(line.trim_end())
                    .map_err(|e| Error::format(offset, format!("{ANNOTATIONS_FILE}: {e}")))?;
                if rec.id != records.len() {
                    return Err(Error::format(offset, format!("expected id {}, found {}", records.len(), rec.id)));
                }
                if rec.boxes.len() != rec.labels.len() {
                    return Err(Error::format(offset, "boxes and labels differ in length"));
                }
                let boxes = rec
                    .boxes
                    .iter()
                    .map(|b| BBox::try_from(*b))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::format(offset, e.to_string()))?;
                records.push((boxes, rec.labels));
            }
            offset += n as u64;
        }
        if records.len() != images.len() {
            return Err(Error::format(
                offset,
                format!("{} annotation records for {} images", records.len(), images.len()),
            ));
        }
        let samples = images
            .into_iter()
            .zip(records)
            .map(|(image, (boxes, labels))| Sample { image, boxes, labels })
            .collect();
        Ok(Self { samples })
    }
}

pub fn encode_images(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(IMAGES_MAGIC);
    out.extend_from_slice(&IMAGES_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(samples.len()).map_err(|_| too_large())?.to_le_bytes());
    for s in samples {
        let shape = s.image.shape();
        if shape.len() != 3 {
            return Err(Error::shape("encode_images", shape, &[3, 0, 0]));
        }
        for &d in shape {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| too_large())?.to_le_bytes());
        }
        for &v in s.image.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn too_large() -> Error {
    Error::InvalidArgument("value does not fit in u32".into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != IMAGES_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"LCPT\""));
    }
    let version = cur.u32("version")?;
    if version != IMAGES_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = cur.u32("count")? as usize;
    let mut images = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = cur.pos as u64;
        let c = cur.u32("channels")? as usize;
        let h = cur.u32("height")? as usize;
        let w = cur.u32("width")? as usize;
        let n = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::format(at, "image dimensions overflow"))?;
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| Error::format(at, "image too large"))?, "pixels")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        images.push(Tensor::new(vec![c, h, w], data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes after last image"));
    }
    Ok(images)
}

/// Render sample `index`; depends only on `(manifest, index)`.
pub fn render_sample(manifest: &DatasetManifest, index: usize) -> Sample {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(manifest.seed, "synth-sample"));
    rng.set_stream(index as u64);

    let n = manifest.image_size;
    let plane = n * n;
    let mut img = vec![0.0f64; 3 * plane];

    // background: per-channel base + linear gradient + uniform noise
    let mut base = [0.0; 3];
    for c in 0..3 {
        base[c] = rng.gen_range(0.2..0.6);
        let gx: f64 = rng.gen_range(-0.15..0.15);
        let gy: f64 = rng.gen_range(-0.15..0.15);
        for y in 0..n {
            for x in 0..n {
                let u = x as f64 / n as f64 - 0.5;
                let v = y as f64 / n as f64 - 0.5;
                img[c * plane + y * n + x] = base[c] + gx * u + gy * v + rng.gen_range(-0.05..0.05);
            }
        }
    }

    let want = rng.gen_range(manifest.min_objects..=manifest.max_objects);
    let mut boxes: Vec<BBox> = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..want {
        let label = rng.gen_range(1..=manifest.class_names.len());
        let shape = Shape::from_label(label).expect("validated class count");
        let mut placed = None;
        for _ in 0..50 {
            let w = rng.gen_range(manifest.min_size..=manifest.max_size);
            let ratio: f64 = rng.gen_range(0.75..1.333);
            let h = ((w as f64 * ratio).round() as usize).clamp(manifest.min_size, manifest.max_size);
            let x1 = rng.gen_range(0..=n - w);
            let y1 = rng.gen_range(0..=n - h);
            let cand = BBox::new(x1 as f64, y1 as f64, (x1 + w) as f64, (y1 + h) as f64).expect("positive size");
            if boxes.iter().all(|b| iou(b, &cand) <= manifest.max_overlap_iou) {
                placed = Some((x1, y1, w, h, cand));
                break;
            }
        }
        let Some((x1, y1, w, h, bbox)) = placed else { continue };

        // colour far enough from the background
        let color = loop {
            let c: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            if (0..3).map(|i| (c[i] - base[i]).abs()).fold(0.0, f64::max) > 0.3 {
                break c;
            }
        };
        let mask = shape.rasterize(w, h);
        for py in 0..h {
            for px in 0..w {
                if !mask[py * w + px] {
                    continue;
                }
                let idx = (y1 + py) * n + x1 + px;
                for c in 0..3 {
                    img[c * plane + idx] = color[c] + rng.gen_range(-0.03..0.03);
                }
            }
        }
        boxes.push(bbox);
        labels.push(label);
    }

    let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32 as f64).collect();
    Sample {
        image: Tensor::new(vec![3, n, n], data).expect("image shape"),
        boxes,
        labels,
    }
}

pub fn generate(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    let idx: Vec<usize> = (0..manifest.count).collect();
    let samples = crate::exec::map_ordered(&idx, |&i| render_sample(manifest, i));
    Ok(Dataset { samples })
}

/// Generate and write a dataset (plus its manifest) into `dir`.
pub fn generate_to(manifest: &DatasetManifest, dir: &Path) -> Result<Dataset> {
    let ds = generate(manifest)?;
    ds.save(dir)?;
    let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut f, manifest)?;
    f.write_all(b"\n")?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tight_extent(mask: &[bool], w: usize, h: usize) -> Option<(usize, usize, usize, usize)> {
        let mut ext: Option<(usize, usize, usize, usize)> = None;
        for y in 0..h {
            for x in 0..w {
                if mask[y * w + x] {
                    ext = Some(match ext {
                        None => (x, y, x + 1, y + 1),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)),
                    });
                }
            }
        }
        ext
    }

    #[test]
    fn every_shape_fills_its_box_extent() {
        for shape in Shape::ALL {
            for w in 4..=30 {
                for h in [w * 3 / 4, w, w * 4 / 3] {
                    if h < 4 {
                        continue;
                    }
                    let m = shape.rasterize(w, h);
                    assert_eq!(tight_extent(&m, w, h), Some((0, 0, w, h)), "{shape:?} {w}x{h}");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let m = DatasetManifest::new(3, 20);
        let a = generate(&m).unwrap();
        let b = generate(&m).unwrap();
        assert_eq!(a, b);
        for s in &a.samples {
            assert_eq!(s.boxes.len(), s.labels.len());
            assert!(!s.boxes.is_empty());
            for (bx, &l) in s.boxes.iter().zip(&s.labels) {
                assert!((1..=4).contains(&l));
                assert!(bx.x1() >= 0.0 && bx.y1() >= 0.0 && bx.x2() <= 64.0 && bx.y2() <= 64.0);
            }
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rendered_pixels_match_annotation() {
        // the object colour differs from the background by > 0.3 in some
        // channel; the border rows/cols of each box must contain object pixels
        let m = DatasetManifest::new(1, 5);
        for i in 0..5 {
            let s = render_sample(&m, i);
            assert!(!s.boxes.is_empty());
            for (bx, &l) in s.boxes.iter().zip(&s.labels) {
                let shape = Shape::from_label(l).unwrap();
                let (w, h) = (bx.width() as usize, bx.height() as usize);
                assert_eq!(tight_extent(&shape.rasterize(w, h), w, h), Some((0, 0, w, h)));
            }
        }
    }

    #[test]
    fn zero_count_rejected() {
        assert!(generate(&DatasetManifest::new(0, 0)).is_err());
    }

    #[test]
    fn corrupt_headers_report_offsets() {
        let m = DatasetManifest::new(0, 2);
        let ds = generate(&m).unwrap();
        let bytes = encode_images(&ds.samples).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_images(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_images(&bad), Err(Error::Format { offset: 4, .. })));

        let cut = &bytes[..bytes.len() - 10];
        match decode_images(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 12),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(decode_images(&bytes[..2]), Err(Error::Format { offset: 0, .. })));
    }
}
