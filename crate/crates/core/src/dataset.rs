//! Labeled datasets: IDX ingestion, synthetic tasks, splits and the
//! random-shift augmentation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{purpose, Matrix, RngState};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled examples, one flattened input per row of `images`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
    /// `(width, height)` when rows are flattened row-major images.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(
        images: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
        image_shape: Option<(usize, usize)>,
    ) -> Result<Self> {
        if labels.len() != images.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} examples",
                labels.len(),
                images.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if let Some((w, h)) = image_shape {
            if w * h != images.cols() {
                return Err(Error::Shape(format!(
                    "{w}x{h} images but rows have {} values",
                    images.cols()
                )));
            }
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            name: name.into(),
            image_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: self.name.clone(),
            image_shape: self.image_shape,
        }
    }

    /// Indices of every example labeled `class`, in dataset order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(field, "truncated header"))
}

/// Raw contents of an IDX3 image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Parses an IDX3 unsigned-byte image file held in memory.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_be_u32(bytes, 0, "images.magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            "images.magic",
            format!("expected 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let count = read_be_u32(bytes, 4, "images.count")? as usize;
    let rows = read_be_u32(bytes, 8, "images.rows")? as usize;
    let cols = read_be_u32(bytes, 12, "images.cols")? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format("images.count", "dimensions overflow"))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::format(
            "images.payload",
            format!(
                "{count}x{rows}x{cols} needs {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

/// Parses an IDX1 unsigned-byte label file held in memory.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0, "labels.magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "labels.magic",
            format!("expected 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let count = read_be_u32(bytes, 4, "labels.count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::format(
            "labels.payload",
            format!("header says {count} labels, found {}", payload.len()),
        ));
    }
    Ok(payload.to_vec())
}

/// Combines parsed image and label payloads into a dataset scaled to [0,1].
pub fn dataset_from_idx(
    images: IdxImages,
    labels: Vec<u8>,
    name: impl Into<String>,
) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(Error::format(
            "labels.count",
            format!(
                "{} labels against {} images",
                labels.len(),
                images.count
            ),
        ));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let data = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let matrix = Matrix::from_vec(images.count, images.rows * images.cols, data)?;
    Dataset::new(
        matrix,
        labels.into_iter().map(usize::from).collect(),
        num_classes,
        name,
        Some((images.cols, images.rows)),
    )
}

/// Loads an IDX image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let name = images_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    dataset_from_idx(parse_idx_images(&img)?, parse_idx_labels(&lab)?, name)
}

/// Serializes a dataset back to IDX byte buffers (images, labels).
///
/// Pixels are rounded from [0,1] back to bytes.
pub fn to_idx_bytes(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (w, h) = ds
        .image_shape
        .ok_or_else(|| Error::Contract("dataset has no image shape".into()))?;
    let mut img = Vec::with_capacity(16 + ds.images.as_slice().len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [ds.len(), h, w] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    img.extend(
        ds.images
            .as_slice()
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        let byte = u8::try_from(l).map_err(|_| Error::Contract(format!("label {l} exceeds a byte")))?;
        lab.push(byte);
    }
    Ok((img, lab))
}

/// Loads the standard MNIST file pair from `dir` (`train` or `t10k`).
pub fn load_mnist(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let mut ds = load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.name = format!("mnist-{prefix}");
    Ok(ds)
}

/// Bounds of the uniform integer shift drawn per image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSpec {
    pub max_shift_x: usize,
    pub max_shift_y: usize,
    pub pad_value: f64,
}

impl AugmentationSpec {
    pub fn none() -> Self {
        AugmentationSpec {
            max_shift_x: 0,
            max_shift_y: 0,
            pad_value: 0.0,
        }
    }

    pub fn shifts(max: usize) -> Self {
        AugmentationSpec {
            max_shift_x: max,
            max_shift_y: max,
            pad_value: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.max_shift_x == 0 && self.max_shift_y == 0
    }

    /// Draws `(sx, sy)` uniformly from `[-max_x, max_x] × [-max_y, max_y]`.
    pub fn draw_offset(&self, rng: &mut impl Rng) -> (i64, i64) {
        let mx = self.max_shift_x as i64;
        let my = self.max_shift_y as i64;
        let sx = if mx == 0 { 0 } else { rng.gen_range(-mx..=mx) };
        let sy = if my == 0 { 0 } else { rng.gen_range(-my..=my) };
        (sx, sy)
    }
}

/// Translates an image by `(sx, sy)`: the pixel at `(x, y)` lands at
/// `(x + sx, y + sy)`. Vacated pixels take `pad`.
pub fn shift_image(
    image: &[f64],
    width: usize,
    height: usize,
    sx: i64,
    sy: i64,
    pad: f64,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; image.len()];
    shift_image_into(image, width, height, sx, sy, pad, &mut out)?;
    Ok(out)
}

pub(crate) fn shift_image_into(
    image: &[f64],
    width: usize,
    height: usize,
    sx: i64,
    sy: i64,
    pad: f64,
    out: &mut [f64],
) -> Result<()> {
    if image.len() != width * height || out.len() != image.len() {
        return Err(Error::Shape(format!(
            "image of {} values is not {width}x{height}",
            image.len()
        )));
    }
    let (w, h) = (width as i64, height as i64);
    for y in 0..h {
        let src_y = y - sy;
        for x in 0..w {
            let src_x = x - sx;
            out[(y * w + x) as usize] = if (0..w).contains(&src_x) && (0..h).contains(&src_y) {
                image[(src_y * w + src_x) as usize]
            } else {
                pad
            };
        }
    }
    Ok(())
}

/// Shifts an image by an offset drawn from `spec` using `rng`.
pub fn random_shift(
    image: &[f64],
    width: usize,
    height: usize,
    spec: &AugmentationSpec,
    rng: &RngState,
) -> Result<Vec<f64>> {
    let (sx, sy) = spec.draw_offset(&mut rng.rng());
    shift_image(image, width, height, sx, sy, spec.pad_value)
}

/// Gaussian clusters centred at `separation · u_k`, where `u_k` runs over
/// `+e_0 .. +e_{dim-1}` and then `-e_0 .. -e_{dim-1}`.
pub fn synth_clusters(
    num_classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    noise: f64,
    rng: &RngState,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::config("classes", "need at least 2 classes"));
    }
    if dim < 2 {
        return Err(Error::config("dim", "need at least 2 dimensions"));
    }
    if num_classes > 2 * dim {
        return Err(Error::config(
            "classes",
            format!("{num_classes} classes do not fit on ±unit vectors of dimension {dim}"),
        ));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::config("separation", "must be positive"));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::config("noise", "must be non-negative"));
    }
    let mut r = rng.split(&[purpose::DATA]).rng();
    let n = num_classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..num_classes {
        let axis = k % dim;
        let sign = if k < dim { 1.0 } else { -1.0 };
        for _ in 0..n_per_class {
            for d in 0..dim {
                let mean = if d == axis { sign * separation } else { 0.0 };
                let eps: f64 = r.sample(StandardNormal);
                data.push(mean + noise * eps);
            }
            labels.push(k);
        }
    }
    Dataset::new(
        Matrix::from_vec(n, dim, data)?,
        labels,
        num_classes,
        "synth-clusters",
        None,
    )
}

/// Parameters of the synthetic glyph images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphSpec {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    /// Gaussian strokes per class prototype.
    pub strokes: usize,
    /// Std-dev (pixels) of per-example stroke displacement.
    pub jitter: f64,
    /// Std-dev of additive pixel noise before clipping to [0,1].
    pub pixel_noise: f64,
}

/// Small grayscale images: every class is a fixed arrangement of Gaussian
/// strokes and each example displaces those strokes independently.
///
/// Stands in for MNIST when exercising shift augmentation without the real
/// files.
pub fn synth_glyphs(spec: &GlyphSpec, rng: &RngState) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::config("classes", "need at least 2 classes"));
    }
    if spec.side < 5 {
        return Err(Error::config("side", "images must be at least 5x5"));
    }
    if spec.strokes == 0 {
        return Err(Error::config("strokes", "need at least one stroke"));
    }
    if !(spec.jitter >= 0.0) || !(spec.pixel_noise >= 0.0) {
        return Err(Error::config("jitter", "noise levels must be non-negative"));
    }
    let side = spec.side as f64;
    let margin = side * 0.25;
    let mut proto_rng = rng.split(&[purpose::DATA, 0]).rng();
    let prototypes: Vec<Vec<(f64, f64, f64)>> = (0..spec.classes)
        .map(|_| {
            (0..spec.strokes)
                .map(|_| {
                    let cx = proto_rng.gen_range(margin..side - margin);
                    let cy = proto_rng.gen_range(margin..side - margin);
                    let width = proto_rng.gen_range(0.8..1.6);
                    (cx, cy, width)
                })
                .collect()
        })
        .collect();

    let mut r = rng.split(&[purpose::DATA, 1]).rng();
    let n = spec.classes * spec.per_class;
    let dim = spec.side * spec.side;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut img = vec![0.0; dim];
    for (k, proto) in prototypes.iter().enumerate() {
        for _ in 0..spec.per_class {
            img.iter_mut().for_each(|v| *v = 0.0);
            for &(cx, cy, width) in proto {
                let jx: f64 = r.sample(StandardNormal);
                let jy: f64 = r.sample(StandardNormal);
                let amp = r.gen_range(0.7..1.0);
                let (x0, y0) = (cx + spec.jitter * jx, cy + spec.jitter * jy);
                let inv = 1.0 / (2.0 * width * width);
                for y in 0..spec.side {
                    for x in 0..spec.side {
                        let d2 = (x as f64 - x0).powi(2) + (y as f64 - y0).powi(2);
                        img[y * spec.side + x] += amp * (-d2 * inv).exp();
                    }
                }
            }
            for v in img.iter_mut() {
                let eps: f64 = r.sample(StandardNormal);
                *v = (*v + spec.pixel_noise * eps).clamp(0.0, 1.0);
            }
            data.extend_from_slice(&img);
            labels.push(k);
        }
    }
    Dataset::new(
        Matrix::from_vec(n, dim, data)?,
        labels,
        spec.classes,
        "synth-glyphs",
        Some((spec.side, spec.side)),
    )
}

/// Random permutation split into `(first n_train, rest)`.
pub fn split(ds: &Dataset, n_train: usize, rng: &RngState) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_train >= ds.len() {
        return Err(Error::config(
            "n_train",
            format!("{n_train} must lie in [1, {})", ds.len()),
        ));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng.split(&[purpose::SPLIT]).rng());
    let (a, b) = order.split_at(n_train);
    Ok((ds.subset(a), ds.subset(b)))
}

/// Takes the first `per_class` examples of each class, in class order.
pub fn take_per_class(ds: &Dataset, classes: &[usize], per_class: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for &c in classes {
        let idx = ds.class_indices(c);
        if idx.len() < per_class {
            return Err(Error::config(
                "per_class",
                format!("class {c} has {} examples, {per_class} requested", idx.len()),
            ));
        }
        out.extend_from_slice(&idx[..per_class]);
    }
    Ok(out)
}
