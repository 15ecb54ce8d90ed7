//! Synthetic lesion-like detection data and its on-disk formats.
//!
//! Images are sparse, small, low-contrast elliptical bumps over spatially
//! correlated noise. Every image is a pure function of `(seed, index)`: the
//! generator is ChaCha8 seeded with `seed` on stream `index`, so any subset of
//! a dataset can be regenerated independently.
//!
//! On disk a dataset directory holds 8-bit binary PGM (`P5`, maxval 255)
//! images plus one `annotations.jsonl` with a line per image:
//! `{"image": "<file>", "objects": [{"class": 1, "box": [cx, cy, w, h]}]}`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{Annotation, BoundingBox};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

/// Smallest side accepted after resizing (the backbone's stride-64 minimum).
pub const MIN_SIDE: usize = 64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Annotation { path: PathBuf, line: usize, message: String },
    #[error("{path}: byte {offset}: {message}")]
    Image { path: PathBuf, offset: usize, message: String },
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("image {index}: object of normalized extent {w:.3}×{h:.3} does not fit inside the image")]
    ObjectTooLarge { index: usize, w: f64, h: f64 },
    #[error("resizing {h}×{w} by {scale} gives {oh}×{ow}, below the {min}×{min} minimum")]
    TooSmall { h: usize, w: usize, scale: f64, oh: usize, ow: usize, min: usize },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    /// Probability that an image contains no object.
    pub empty_fraction: f64,
    /// Mean number of objects in a non-empty image (`1 + Poisson(mean − 1)`).
    pub objects_mean: f64,
    /// Mean of the normalized object size, i.e. box area over image area.
    pub size_mean: f64,
    /// Standard deviation of the normalized object size.
    pub size_sd: f64,
    /// Peak intensity of an object above the local background.
    pub contrast: f64,
    /// Standard deviation of the correlated background noise.
    pub noise: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            empty_fraction: 0.4,
            objects_mean: 1.15,
            size_mean: 0.01,
            size_sd: 0.003,
            contrast: 0.6,
            noise: 0.03,
            num_classes: 2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DataError::Spec(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return fail("image extents must be positive");
        }
        if !(0.0..=1.0).contains(&self.empty_fraction) {
            return fail("empty_fraction must lie in [0, 1]");
        }
        if !(self.objects_mean >= 1.0 && self.objects_mean.is_finite()) {
            return fail("objects_mean must be at least 1");
        }
        if !(self.size_mean > 0.0 && self.size_sd >= 0.0 && self.size_mean.is_finite() && self.size_sd.is_finite()) {
            return fail("size_mean must be positive and size_sd non-negative");
        }
        if !(self.contrast >= 0.0 && self.noise >= 0.0 && self.contrast.is_finite() && self.noise.is_finite()) {
            return fail("contrast and noise must be non-negative");
        }
        if !(1..=2).contains(&self.num_classes) {
            return fail("num_classes must be 1 or 2");
        }
        Ok(())
    }
}

/// A grayscale image with its ground-truth objects.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AnnotatedImage {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// Row-major 8-bit pixels; intensity is `pixel / 255`.
    pub pixels: Vec<u8>,
    pub objects: Vec<AnnotationBits>,
}

/// An [`Annotation`] held by bit pattern so images can be compared and hashed exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AnnotationBits {
    pub class: usize,
    pub bbox: [u64; 4],
}

impl From<Annotation> for AnnotationBits {
    fn from(a: Annotation) -> Self {
        Self { class: a.class, bbox: a.bbox.to_array().map(f64::to_bits) }
    }
}

impl From<AnnotationBits> for Annotation {
    fn from(a: AnnotationBits) -> Self {
        Annotation { class: a.class, bbox: BoundingBox::from_slice(&a.bbox.map(f64::from_bits)) }
    }
}

impl AnnotatedImage {
    pub fn annotations(&self) -> Vec<Annotation> {
        self.objects.iter().map(|&a| a.into()).collect()
    }

    pub fn intensity(&self, i: usize, j: usize) -> f64 {
        f64::from(self.pixels[i * self.width + j]) / 255.0
    }

    /// Pixel intensities in `[0, 1]` as a `[1×H×W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.pixels.iter().map(|&p| T::lit(f64::from(p) / 255.0)).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("extent matches pixel count")
    }
}

pub fn image_name(index: usize) -> String {
    format!("img_{index:06}.pgm")
}

/// Generates images `0..count`.
pub fn generate(spec: &DatasetSpec, count: usize) -> Result<Vec<AnnotatedImage>> {
    generate_range(spec, 0, count)
}

/// Generates images `start..start + count`; image `i` depends only on `(spec, i)`.
pub fn generate_range(spec: &DatasetSpec, start: usize, count: usize) -> Result<Vec<AnnotatedImage>> {
    spec.validate()?;
    (start..start + count).map(|i| generate_one(spec, i)).collect()
}

struct Blob {
    class: usize,
    bbox: BoundingBox,
}

fn sample_size(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> f64 {
    if spec.size_sd == 0.0 {
        return spec.size_mean;
    }
    let dist = Normal::new(spec.size_mean, spec.size_sd).expect("validated");
    // Redraw the (rare, for realistic specs) non-positive tail.
    loop {
        let s = dist.sample(rng);
        if s > 0.05 * spec.size_mean {
            return s;
        }
    }
}

pub fn generate_one(spec: &DatasetSpec, index: usize) -> Result<AnnotatedImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (h, w) = (spec.height, spec.width);

    let mut blobs = Vec::new();
    if !rng.gen_bool(spec.empty_fraction) {
        let extra = if spec.objects_mean > 1.0 {
            Poisson::new(spec.objects_mean - 1.0).expect("positive rate").sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..1 + extra {
            let size = sample_size(spec, &mut rng);
            let aspect: f64 = rng.gen_range(0.75..(1.0 / 0.75));
            let (bw, bh) = ((size * aspect).sqrt(), (size / aspect).sqrt());
            if bw >= 1.0 || bh >= 1.0 {
                return Err(DataError::ObjectTooLarge { index, w: bw, h: bh });
            }
            let cx = rng.gen_range(0.5 * bw..=1.0 - 0.5 * bw);
            let cy = rng.gen_range(0.5 * bh..=1.0 - 0.5 * bh);
            let class = if spec.num_classes == 2 { rng.gen_range(1..=2) } else { 1 };
            blobs.push(Blob { class, bbox: BoundingBox::new(cx, cy, bw, bh) });
        }
    }

    let mut img = correlated_noise(h, w, spec.noise, &mut rng);
    for b in &blobs {
        render_blob(&mut img, h, w, b, spec.contrast);
    }
    let pixels = img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(AnnotatedImage {
        name: image_name(index),
        height: h,
        width: w,
        pixels,
        objects: blobs.iter().map(|b| Annotation { class: b.class, bbox: b.bbox }.into()).collect(),
    })
}

/// Mid-gray background plus white noise smoothed by a separable 5-tap binomial kernel.
fn correlated_noise(h: usize, w: usize, sd: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const K: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
    // The 2-D binomial kernel shrinks unit white noise to SD sqrt(Σk²)/Σk per axis.
    let gain = 16.0 / (K.iter().map(|k| k * k).sum::<f64>()).sqrt();
    let normal = Normal::new(0.0, sd * gain * gain).expect("finite sd");
    let white: Vec<f64> = (0..h * w).map(|_| normal.sample(rng)).collect();
    let blur = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, k) in K.iter().enumerate() {
                    let o = t as isize - 2;
                    let (ii, jj) = if horizontal {
                        (i as isize, (j as isize + o).clamp(0, w as isize - 1))
                    } else {
                        ((i as isize + o).clamp(0, h as isize - 1), j as isize)
                    };
                    acc += k * src[ii as usize * w + jj as usize];
                }
                out[i * w + j] = acc / 16.0;
            }
        }
        out
    };
    let smooth = blur(&blur(&white, true), false);
    smooth.into_iter().map(|v| 0.35 + v).collect()
}

/// Class 1: bright, diffuse (Gaussian falloff that spills past the box edge).
/// Class 2: dimmer, flat-topped with a sharp, well-defined border.
fn render_blob(img: &mut [f64], h: usize, w: usize, b: &Blob, contrast: f64) {
    let (rx, ry) = (0.5 * b.bbox.w, 0.5 * b.bbox.h);
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            let r = (((x - b.bbox.cx) / rx).powi(2) + ((y - b.bbox.cy) / ry).powi(2)).sqrt();
            let profile = match b.class {
                1 => (-2.0 * r * r).exp(),
                _ => 0.4 / (1.0 + ((r - 0.9) * 12.0).exp()),
            };
            img[i * w + j] += contrast * profile;
        }
    }
}

/// Bilinear resampling of a row-major `h×w` grid onto `oh×ow`, pixel-centre aligned.
pub fn resample(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(oh * ow);
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for i in 0..oh {
        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as f64;
        for j in 0..ow {
            let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Resamples the pixel grid by `scale`; normalized boxes are unchanged.
pub fn resize(image: &AnnotatedImage, scale: f64) -> Result<AnnotatedImage> {
    if scale == 1.0 {
        return Ok(image.clone());
    }
    let oh = (image.height as f64 * scale).round() as usize;
    let ow = (image.width as f64 * scale).round() as usize;
    if oh < MIN_SIDE || ow < MIN_SIDE {
        return Err(DataError::TooSmall { h: image.height, w: image.width, scale, oh, ow, min: MIN_SIDE });
    }
    let src: Vec<f64> = image.pixels.iter().map(|&p| f64::from(p)).collect();
    let pixels = resample(&src, image.height, image.width, oh, ow)
        .into_iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(AnnotatedImage { name: image.name.clone(), height: oh, width: ow, pixels, objects: image.objects.clone() })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationLine {
    image: String,
    objects: Vec<Annotation>,
}

pub fn encode_pgm(image: &AnnotatedImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

/// Parses a binary PGM with maxval 255; returns `(height, width, pixels)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let err = |offset: usize, message: &str| DataError::Image {
        path: path.to_path_buf(),
        offset,
        message: message.to_string(),
    };
    let mut pos = 0;
    let next_token = |pos: &mut usize| -> Result<(usize, String)> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(err(start, "unexpected end of header"));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
    };
    let (at, magic) = next_token(&mut pos)?;
    if magic != "P5" {
        return Err(err(at, "not a binary PGM (expected P5)"));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let (at, tok) = next_token(&mut pos)?;
        *d = tok.parse().map_err(|_| err(at, &format!("bad header field `{tok}`")))?;
    }
    let [width, height, maxval] = dims;
    if maxval != 255 {
        return Err(err(at, &format!("maxval {maxval} unsupported (expected 255)")));
    }
    if width == 0 || height == 0 {
        return Err(err(at, "zero image extent"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height;
    if bytes.len() < pos || bytes.len() - pos != need {
        return Err(err(
            pos.min(bytes.len()),
            &format!("raster has {} bytes, expected {need}", bytes.len().saturating_sub(pos)),
        ));
    }
    Ok((height, width, bytes[pos..].to_vec()))
}

/// Writes PGM files and `annotations.jsonl` into `dir` (created if missing).
pub fn write_dataset(images: &[AnnotatedImage], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let mut lines = String::new();
    for img in images {
        let path = dir.join(&img.name);
        fs::write(&path, encode_pgm(img)).map_err(io_err(&path))?;
        let line = AnnotationLine { image: img.name.clone(), objects: img.annotations() };
        lines.push_str(&serde_json::to_string(&line).expect("annotations serialize"));
        lines.push('\n');
    }
    fs::write(&ann_path, lines).map_err(io_err(&ann_path))?;
    Ok(())
}

/// Reads a dataset directory. A directory without an annotation file (for
/// instance an empty one) is an empty dataset.
pub fn read_dataset(dir: &Path) -> Result<Vec<AnnotatedImage>> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    if !ann_path.exists() {
        fs::read_dir(dir).map_err(io_err(dir))?;
        return Ok(Vec::new());
    }
    let file = fs::File::open(&ann_path).map_err(io_err(&ann_path))?;
    let mut images = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(io_err(&ann_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| DataError::Annotation { path: ann_path.clone(), line: line_no, message };
        let rec: AnnotationLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if !seen.insert(rec.image.clone()) {
            return Err(bad(format!("image `{}` listed twice", rec.image)));
        }
        if rec.image.contains(['/', '\\']) {
            return Err(bad(format!("image `{}` must be a plain file name", rec.image)));
        }
        for o in &rec.objects {
            if o.class == 0 {
                return Err(bad("class 0 is reserved for the empty label".into()));
            }
            if !(o.bbox.is_valid() && o.bbox.w > 0.0 && o.bbox.h > 0.0) {
                return Err(bad(format!("invalid box {:?}", o.bbox.to_array())));
            }
        }
        let img_path = dir.join(&rec.image);
        if !img_path.is_file() {
            return Err(bad(format!("image `{}` does not exist", rec.image)));
        }
        let bytes = fs::read(&img_path).map_err(io_err(&img_path))?;
        let (height, width, pixels) = decode_pgm(&bytes, &img_path)?;
        images.push(AnnotatedImage {
            name: rec.image,
            height,
            width,
            pixels,
            objects: rec.objects.into_iter().map(Into::into).collect(),
        });
    }
    Ok(images)
}

/// One scored box in a predictions file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub class: usize,
    #[serde(rename = "box", with = "crate::boxes::box_array")]
    pub bbox: BoundingBox,
    pub score: f64,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image: String,
    pub detections: Vec<DetectionRecord>,
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for r in records {
        let line = serde_json::to_string(r).expect("predictions serialize");
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| DataError::Annotation {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
