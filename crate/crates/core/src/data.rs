//! Crop boxes, the synthetic composition benchmark, manifest ingestion of
//! real images, random-crop augmentation and batching.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalized crop box. `0 ≤ left < right ≤ 1`, `0 ≤ top < bottom ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl CropBox {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Result<Self> {
        let b = Self { left, top, right, bottom };
        b.validate()?;
        Ok(b)
    }

    /// From `[left, right, top, bottom]`, the order the regression heads use.
    pub fn from_boundaries(y: [f64; 4]) -> Result<Self> {
        Self::new(y[0], y[2], y[1], y[3])
    }

    /// Like [`CropBox::from_boundaries`] but without validation, for raw
    /// model output that may be degenerate.
    pub fn unchecked(y: [f64; 4]) -> Self {
        Self {
            left: y[0],
            top: y[2],
            right: y[1],
            bottom: y[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.left
            && self.left < self.right
            && self.right <= 1.0
            && 0.0 <= self.top
            && self.top < self.bottom
            && self.bottom <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidBox(format!(
                "({}, {}, {}, {}) needs 0 <= left < right <= 1 and 0 <= top < bottom <= 1",
                self.left, self.top, self.right, self.bottom
            )))
        }
    }

    /// `[left, right, top, bottom]`.
    pub fn boundaries(&self) -> [f64; 4] {
        [self.left, self.right, self.top, self.bottom]
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_full_frame(&self) -> bool {
        self.left == 0.0 && self.top == 0.0 && self.right == 1.0 && self.bottom == 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleSource {
    Generated { seed: u64, index: usize },
    File(PathBuf),
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub source: SampleSource,
    /// `3×S×S` in `[0, 1]`; `None` until materialized.
    pub image: Option<Tensor>,
    pub gt_box: CropBox,
    /// Box area over image area.
    pub size_ratio: f64,
}

impl Sample {
    pub fn new(source: SampleSource, image: Option<Tensor>, gt_box: CropBox) -> Self {
        Self {
            source,
            image,
            size_ratio: gt_box.area(),
            gt_box,
        }
    }

    pub fn target(&self) -> [f64; 4] {
        self.gt_box.boundaries()
    }
}

// ---- synthetic generator -------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    /// Total number of samples, train and validation.
    pub size: usize,
    pub val_size: usize,
    /// Beta shape parameters of the size ratio.
    pub beta_a: f64,
    pub beta_b: f64,
    /// Box aspect ratio is `exp(U(-j, j))`.
    pub aspect_jitter: f64,
    /// Subject radii as a fraction of the box width and height.
    pub subject_scale: f64,
    pub distractors: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            size: 2200,
            val_size: 200,
            beta_a: 5.0,
            beta_b: 2.0,
            aspect_jitter: 0.25,
            subject_scale: 0.2,
            distractors: 3,
            noise: 0.03,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.beta_a > 0.0 && self.beta_b > 0.0) {
            return fail(format!("beta parameters must be positive, got ({}, {})", self.beta_a, self.beta_b));
        }
        if self.image_size < 4 {
            return fail(format!("image_size {} too small", self.image_size));
        }
        if self.val_size > self.size {
            return fail(format!("val_size {} exceeds dataset size {}", self.val_size, self.size));
        }
        if !(self.aspect_jitter >= 0.0 && self.subject_scale > 0.0 && self.subject_scale <= 0.5 && self.noise >= 0.0) {
            return fail("aspect_jitter >= 0, 0 < subject_scale <= 0.5 and noise >= 0 required".into());
        }
        Ok(())
    }

    fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Rule-of-thirds anchor inside the box, one subject color each.
const THIRDS: [(f64, f64, [f64; 3]); 4] = [
    (1.0 / 3.0, 1.0 / 3.0, [0.9, 0.2, 0.15]),
    (2.0 / 3.0, 1.0 / 3.0, [0.15, 0.8, 0.2]),
    (1.0 / 3.0, 2.0 / 3.0, [0.2, 0.3, 0.95]),
    (2.0 / 3.0, 2.0 / 3.0, [0.95, 0.85, 0.1]),
];

/// Geometry of one synthetic sample, cheap to compute without rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub gt_box: CropBox,
    pub thirds: usize,
    pub subject_center: (f64, f64),
    pub subject_radii: (f64, f64),
}

fn draw_layout(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Layout {
    let beta = Beta::new(config.beta_a, config.beta_b).expect("validated beta parameters");
    let ratio: f64 = beta.sample(rng).max(1e-6);
    let aspect = (rng.random_range(-1.0..=1.0) * config.aspect_jitter).exp();
    let mut w = (ratio * aspect).sqrt();
    let mut h = (ratio / aspect).sqrt();
    if w > 1.0 {
        w = 1.0;
        h = ratio;
    } else if h > 1.0 {
        h = 1.0;
        w = ratio;
    }
    let left = rng.random_range(0.0..=1.0) * (1.0 - w);
    let top = rng.random_range(0.0..=1.0) * (1.0 - h);
    let gt_box = CropBox {
        left,
        top,
        right: (left + w).min(1.0),
        bottom: (top + h).min(1.0),
    };
    let thirds = rng.random_range(0..THIRDS.len());
    let (px, py, _) = THIRDS[thirds];
    Layout {
        subject_center: (left + px * w, top + py * h),
        subject_radii: (config.subject_scale * w, config.subject_scale * h),
        gt_box,
        thirds,
    }
}

/// Ground truth of sample `index` without rendering its image.
pub fn generate_layout(config: &GeneratorConfig, index: usize) -> Layout {
    draw_layout(config, &mut config.rng(index))
}

/// Pixel coverage of an ellipse, anti-aliased over one pixel.
fn ellipse_coverage(x: f64, y: f64, center: (f64, f64), radii: (f64, f64), pixel: f64) -> f64 {
    let dx = (x - center.0) / radii.0;
    let dy = (y - center.1) / radii.1;
    let dist = ((dx * dx + dy * dy).sqrt() - 1.0) * radii.0.min(radii.1);
    (0.5 - dist / pixel).clamp(0.0, 1.0)
}

/// Render sample `index` of the synthetic benchmark.
pub fn generate_sample(config: &GeneratorConfig, index: usize) -> Sample {
    let mut rng = config.rng(index);
    let layout = draw_layout(config, &mut rng);
    let s = config.image_size;
    let pixel = 1.0 / s as f64;

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.55));
    let tilt = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let freq = (rng.random_range(2.0..6.0), rng.random_range(2.0..6.0));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    type Distractor = ((f64, f64), (f64, f64), f64);
    let distractors: Vec<Distractor> = (0..config.distractors)
        .map(|_| {
            let c = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let r = rng.random_range(0.02..0.06);
            let shade = rng.random_range(0.1..0.8);
            (c, (r, r * rng.random_range(0.6..1.4)), shade)
        })
        .collect();
    let color = THIRDS[layout.thirds].2;

    let mut data = vec![0.0; 3 * s * s];
    for row in 0..s {
        let y = (row as f64 + 0.5) * pixel;
        for col in 0..s {
            let x = (col as f64 + 0.5) * pixel;
            let texture = 0.06 * (freq.0 * x * std::f64::consts::TAU + phase).sin() * (freq.1 * y * std::f64::consts::TAU).cos();
            let mut px: [f64; 3] = std::array::from_fn(|c| base[c] + tilt.0 * (x - 0.5) + tilt.1 * (y - 0.5) + texture);
            for &(center, radii, shade) in &distractors {
                let a = ellipse_coverage(x, y, center, radii, pixel);
                if a > 0.0 {
                    for v in px.iter_mut() {
                        *v = (1.0 - a) * *v + a * shade;
                    }
                }
            }
            let a = ellipse_coverage(x, y, layout.subject_center, layout.subject_radii, pixel);
            for c in 0..3 {
                px[c] = (1.0 - a) * px[c] + a * color[c];
            }
            for (c, v) in px.iter().enumerate() {
                data[c * s * s + row * s + col] = *v;
            }
        }
    }
    if config.noise > 0.0 {
        let normal = rand_distr::Normal::new(0.0, config.noise).expect("validated noise");
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let image = Tensor::new(vec![3, s, s], data).expect("positive image size");
    Sample::new(
        SampleSource::Generated {
            seed: config.seed,
            index,
        },
        Some(image),
        layout.gt_box,
    )
}

/// Seeded disjoint `(train, validation)` index sets, each sorted.
pub fn split_dataset(config: &GeneratorConfig) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..config.size).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // per-sample streams use the low indices
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let mut val = order[..config.val_size].to_vec();
    let mut train = order[config.val_size..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

// ---- datasets ------------------------------------------------------------

/// Samples whose images are rendered or loaded on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<Sample>,
    generator: Option<GeneratorConfig>,
    image_size: usize,
}

impl Dataset {
    /// The given indices of the synthetic benchmark, without images.
    pub fn synthetic(config: &GeneratorConfig, indices: &[usize]) -> Self {
        let samples = indices
            .iter()
            .map(|&index| {
                let layout = generate_layout(config, index);
                Sample::new(SampleSource::Generated { seed: config.seed, index }, None, layout.gt_box)
            })
            .collect();
        Self {
            samples,
            generator: Some(config.clone()),
            image_size: config.image_size,
        }
    }

    /// Samples with file-backed or preloaded images.
    pub fn from_samples(samples: Vec<Sample>, image_size: usize) -> Self {
        Self {
            samples,
            generator: None,
            image_size,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn targets(&self) -> Vec<[f64; 4]> {
        self.samples.iter().map(Sample::target).collect()
    }

    pub fn size_ratios(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.size_ratio).collect()
    }

    /// Sample `i` with its image materialized.
    pub fn materialize(&self, i: usize) -> Result<Sample> {
        let sample = &self.samples[i];
        if sample.image.is_some() {
            return Ok(sample.clone());
        }
        let image = match &sample.source {
            SampleSource::Generated { index, .. } => {
                let config = self
                    .generator
                    .as_ref()
                    .ok_or_else(|| Error::Config("generated sample without generator config".into()))?;
                return Ok(generate_sample(config, *index));
            }
            SampleSource::File(path) => load_ppm(path, self.image_size)?,
        };
        Ok(Sample {
            image: Some(image),
            ..sample.clone()
        })
    }
}

// ---- augmentation --------------------------------------------------------

/// Bilinear resample of the normalized window `(x0, y0, x1, y1)` of a
/// `3×H×W` image to `3×S×S`, sampling at pixel centers.
pub fn resample_window(image: &Tensor, window: (f64, f64, f64, f64), size: usize) -> Tensor {
    let (ch, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (x0, y0, x1, y1) = window;
    let src = image.data();
    let coord = |t: f64, lo: f64, hi: f64, n: usize| -> (usize, usize, f64) {
        let pos = ((lo + t * (hi - lo)) * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i = pos.floor() as usize;
        let j = (i + 1).min(n - 1);
        (i, j, pos - i as f64)
    };
    let cols: Vec<_> = (0..size).map(|c| coord((c as f64 + 0.5) / size as f64, x0, x1, w)).collect();
    let mut out = vec![0.0; ch * size * size];
    for r in 0..size {
        let (ya, yb, fy) = coord((r as f64 + 0.5) / size as f64, y0, y1, h);
        for (c, &(xa, xb, fx)) in cols.iter().enumerate() {
            for k in 0..ch {
                let p = |y: usize, x: usize| src[k * h * w + y * w + x];
                let top = p(ya, xa) * (1.0 - fx) + p(ya, xb) * fx;
                let bottom = p(yb, xa) * (1.0 - fx) + p(yb, xb) * fx;
                out[k * size * size + r * size + c] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(vec![ch, size, size], out).expect("positive size")
}

/// Express `b` in the frame of `window`, clamped to `[0, 1]`.
pub fn reframe_box(b: &CropBox, window: (f64, f64, f64, f64)) -> CropBox {
    let (x0, y0, x1, y1) = window;
    let fx = |v: f64| ((v - x0) / (x1 - x0)).clamp(0.0, 1.0);
    let fy = |v: f64| ((v - y0) / (y1 - y0)).clamp(0.0, 1.0);
    CropBox {
        left: fx(b.left),
        top: fy(b.top),
        right: fx(b.right),
        bottom: fy(b.bottom),
    }
}

/// Crop a random window containing the ground-truth box, with margins drawn
/// uniformly from the slack on each side, and rescale it to the full frame.
/// Samples without an image or whose box spans the full frame are returned
/// as is.
pub fn random_crop_augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    let b = sample.gt_box;
    let Some(image) = &sample.image else {
        return sample.clone();
    };
    if b.is_full_frame() {
        return sample.clone();
    }
    let window = (
        rng.random_range(0.0..=b.left),
        rng.random_range(0.0..=b.top),
        rng.random_range(b.right..=1.0),
        rng.random_range(b.bottom..=1.0),
    );
    let size = image.shape()[1];
    let gt_box = reframe_box(&b, window);
    Sample::new(sample.source.clone(), Some(resample_window(image, window, size)), gt_box)
}

// ---- manifest ingestion --------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    image: PathBuf,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

/// JSON-lines manifest of `{"image": path, "box": [left, top, right, bottom]}`
/// records. Relative image paths resolve against the manifest's directory.
/// Images are not read until materialized.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening manifest {}", path.display()), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let manifest_err = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| manifest_err(e.to_string()))?;
        let [l, t, r, b] = record.bbox;
        let gt_box = CropBox::new(l, t, r, b).map_err(|e| manifest_err(format!("record {}: {e}", record.image.display())))?;
        samples.push(Sample::new(SampleSource::File(base.join(&record.image)), None, gt_box));
    }
    Ok(samples)
}

/// Read a binary PPM (P6) with 8-bit channels as a `3×S×S` tensor in
/// `[0, 1]`, bilinearly resized to `size` when needed.
pub fn load_ppm(path: &Path, size: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let image = decode_ppm(&bytes).map_err(|msg| Error::Image {
        path: path.to_path_buf(),
        msg,
    })?;
    if image.shape()[1] == size && image.shape()[2] == size {
        Ok(image)
    } else {
        Ok(resample_window(&image, (0.0, 0.0, 1.0, 1.0), size))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        token()?.parse().map_err(|_| format!("bad {what}"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // single whitespace byte after maxval
    let start = pos + 1;
    let n = width * height;
    let raster = bytes
        .get(start..start + 3 * n)
        .ok_or_else(|| format!("expected {} raster bytes", 3 * n))?;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f64 / maxval as f64;
        }
    }
    Tensor::new(vec![3, height, width], data).map_err(|e| e.to_string())
}

/// Encode a `3×H×W` tensor in `[0, 1]` as binary PPM.
pub fn encode_ppm(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for i in 0..n {
        for c in 0..3 {
            out.push((data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

// ---- batching ------------------------------------------------------------

/// Index batches for one epoch: seeded shuffle, short final batch kept.
pub fn batch_order(len: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub struct Batch {
    /// Dataset positions of the batch members.
    pub indices: Vec<usize>,
    /// `3×S×S` each.
    pub images: Vec<Tensor>,
    /// `[left, right, top, bottom]` per sample.
    pub targets: Vec<[f64; 4]>,
    pub size_ratios: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn image_refs(&self) -> Vec<&Tensor> {
        self.images.iter().collect()
    }
}

/// Materialize the given dataset positions, optionally applying random-crop
/// augmentation from `rng`.
pub fn make_batch(dataset: &Dataset, indices: &[usize], augment: Option<&mut ChaCha8Rng>) -> Result<Batch> {
    let mut samples = indices.iter().map(|&i| dataset.materialize(i)).collect::<Result<Vec<_>>>()?;
    if let Some(rng) = augment {
        samples = samples.iter().map(|s| random_crop_augment(s, rng)).collect();
    }
    Ok(Batch {
        indices: indices.to_vec(),
        targets: samples.iter().map(Sample::target).collect(),
        size_ratios: samples.iter().map(|s| s.size_ratio).collect(),
        images: samples.into_iter().map(|s| s.image.expect("materialized")).collect(),
    })
}

/// Batches of one epoch in shuffled order. Augmentation draws from a stream
/// derived from `seed`.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, seed: u64, augment: bool) -> impl Iterator<Item = Result<Batch>> + '_ {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    batch_order(dataset.len(), batch_size, seed)
        .into_iter()
        .map(move |idx| make_batch(dataset, &idx, augment.then_some(&mut rng)))
}
