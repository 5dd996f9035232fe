//! Dataset container, the synthetic face-like pattern generator, and the
//! binary dataset format.
//!
//! Dataset file layout (all integers little-endian):
//!
//! ```text
//! 0   magic      8 bytes  "FVDATA\0\0"
//! 8   version    u32      1
//! 12  classes    u32
//! 16  samples    u32
//! 20  channels   u32
//! 24  height     u32
//! 28  width      u32
//! 32  labels     u16 x samples
//! ..  pixels     u8 x samples*channels*height*width   (value / 255)
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DATASET_MAGIC: &[u8; 8] = b"FVDATA\0\0";
pub const DATASET_VERSION: u32 = 1;
const DATASET_HEADER_LEN: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    #[default]
    Unspecified,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unspecified => "unspecified",
        }
    }
}

/// Images `[N, c, H, W]` in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    images: Tensor<f32>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    pub split: Split,
}

impl DatasetBundle {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let names = (0..classes).map(|c| format!("class{c}")).collect();
        Self::with_names(images, labels, names, split)
    }

    pub fn with_names(
        images: Tensor<f32>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        split: Split,
    ) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::input(format!(
                "images must be [N,c,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::input(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if class_names.is_empty() {
            return Err(Error::input("a dataset needs at least one class"));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_names.len()) {
            return Err(Error::input(format!(
                "label {l} of sample {i} out of range for {} classes",
                class_names.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            class_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    /// `[c, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let per: usize = self.image_shape().iter().product();
        &self.images.data()[i * per..(i + 1) * per]
    }

    pub fn sample<T: Real>(&self, i: usize) -> Tensor<T> {
        let data = self
            .pixels(i)
            .iter()
            .map(|&v| T::from_f32(v).expect("pixel converts"))
            .collect();
        Tensor::new(self.image_shape().to_vec(), data).expect("sample shape is consistent")
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::input(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(self.pixels(i));
            labels.push(self.labels[i]);
        }
        let images = Tensor::new(vec![indices.len(), c, h, w], data)?;
        Self::with_names(images, labels, self.class_names.clone(), self.split)
    }
}

/// Mirrors every channel of a `[c, H, W]` image left to right.
pub fn flip_horizontal<T: Real>(image: &Tensor<T>) -> Tensor<T> {
    let &[_, _, w] = image.shape() else {
        panic!("flip_horizontal expects [c,H,W], got {:?}", image.shape());
    };
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Settings for [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub size: usize,
    pub noise: f64,
    /// Per-sample shifts, gain, curvature and occluder variation.
    pub jitter: bool,
    pub seed: u64,
}

impl SynthConfig {
    /// Train counts as given, test counts at `test_fraction` of each class
    /// (at least one sample per class).
    pub fn new(train_counts: Vec<usize>, test_fraction: f64, size: usize, noise: f64, seed: u64) -> Self {
        let test_counts = train_counts
            .iter()
            .map(|&n| ((n as f64 * test_fraction).round() as usize).max(1))
            .collect();
        Self {
            classes: train_counts.len(),
            train_counts,
            test_counts,
            size,
            noise,
            jitter: true,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synthetic data needs at least two classes"));
        }
        if self.classes > 24 {
            return Err(Error::config("the pattern family has 24 distinct classes at most"));
        }
        if self.size < 16 {
            return Err(Error::config("synthetic images must be at least 16 pixels wide"));
        }
        if self.train_counts.len() != self.classes || self.test_counts.len() != self.classes {
            return Err(Error::config(format!(
                "expected {} per-class counts",
                self.classes
            )));
        }
        if self.train_counts.iter().chain(&self.test_counts).any(|&n| n == 0) {
            return Err(Error::config("every class needs at least one sample"));
        }
        if self.train_counts.iter().sum::<usize>() > u32::MAX as usize {
            return Err(Error::config("too many samples"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Geometry of one class's face-like pattern. All patterns are left-right
/// symmetric, so horizontal flips never turn one class into another.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatternParams {
    /// Eye row as a fraction of height.
    pub eye_row: f64,
    /// Eye offset from the vertical midline, fraction of width.
    pub eye_offset: f64,
    /// Mouth bend in pixels at the corners: negative frowns, positive smiles.
    pub mouth_bend: f64,
    pub brows: bool,
}

pub fn pattern_params(class: usize) -> PatternParams {
    PatternParams {
        mouth_bend: [-1.0, 0.0, 1.0][class % 3] * 2.2,
        eye_offset: [0.17, 0.29][(class / 3) % 2],
        eye_row: [0.32, 0.42][(class / 6) % 2],
        brows: (class / 12) % 2 == 1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Jitter {
    dy: f64,
    dx: f64,
    gain: f64,
    background: f64,
    bend_scale: f64,
    /// `(top, left, size, value)`.
    occluder: Option<(usize, usize, usize, f64)>,
}

impl Jitter {
    const NONE: Jitter = Jitter {
        dy: 0.0,
        dx: 0.0,
        gain: 1.0,
        background: 0.0,
        bend_scale: 1.0,
        occluder: None,
    };

    fn draw(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let occluder = if rng.gen_bool(0.25) {
            let s = rng.gen_range(size / 5..=size / 3);
            Some((
                rng.gen_range(0..=size - s),
                rng.gen_range(0..=size - s),
                s,
                rng.gen_range(0.0..1.0),
            ))
        } else {
            None
        };
        Jitter {
            dy: rng.gen_range(-1.5..1.5),
            dx: rng.gen_range(-1.5..1.5),
            gain: rng.gen_range(0.6..1.0),
            background: rng.gen_range(0.0..0.25),
            bend_scale: rng.gen_range(0.5..1.3),
            occluder,
        }
    }
}

fn render(class: usize, jitter: &Jitter, size: usize) -> Vec<f64> {
    let p = pattern_params(class);
    let s = size as f64;
    let cx = (s - 1.0) / 2.0 + jitter.dx;
    let eye_y = p.eye_row * s + jitter.dy;
    let eye_dx = p.eye_offset * s;
    let eye_r = 0.075 * s;
    let mouth_y = 0.72 * s + jitter.dy;
    let mouth_half = 0.25 * s;
    let bend = p.mouth_bend * jitter.bend_scale * s / 16.0;
    let stroke = 0.045 * s;
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64, x as f64);
            let mut v: f64 = 0.0;
            for side in [-1.0, 1.0] {
                let d2 = (fy - eye_y).powi(2) + (fx - cx - side * eye_dx).powi(2);
                v = v.max((-d2 / (2.0 * eye_r * eye_r)).exp());
                if p.brows {
                    let by = eye_y - 2.2 * eye_r;
                    if (fx - cx - side * eye_dx).abs() <= 1.5 * eye_r {
                        v = v.max((-(fy - by).powi(2) / (2.0 * stroke * stroke)).exp());
                    }
                }
            }
            let u = (fx - cx) / mouth_half;
            if u.abs() <= 1.0 {
                // corners move up for a smile, down for a frown
                let my = mouth_y - bend * u * u;
                v = v.max((-(fy - my).powi(2) / (2.0 * stroke * stroke)).exp());
            }
            img[y * size + x] = jitter.background + jitter.gain * v;
        }
    }
    if let Some((top, left, n, value)) = jitter.occluder {
        for y in top..top + n {
            for x in left..left + n {
                img[y * size + x] = value;
            }
        }
    }
    img
}

/// Noise-free, jitter-free image of a class.
pub fn prototype(class: usize, size: usize) -> Vec<f32> {
    render(class, &Jitter::NONE, size)
        .into_iter()
        .map(quantize)
        .collect()
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn generate_split(cfg: &SynthConfig, counts: &[usize], split: Split, stream: u64) -> Result<DatasetBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config(format!("noise: {e}")))?;
    let n: usize = counts.iter().sum();
    let per = cfg.size * cfg.size;
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    // interleave classes so files do not come sorted by label
    for i in (1..labels.len()).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    let mut data = Vec::with_capacity(n * per);
    for &label in &labels {
        let jitter = if cfg.jitter {
            Jitter::draw(&mut rng, cfg.size)
        } else {
            Jitter::NONE
        };
        for v in render(label, &jitter, cfg.size) {
            let e = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push(quantize(v + e));
        }
    }
    let images = Tensor::new(vec![n, 1, cfg.size, cfg.size], data)?;
    DatasetBundle::new(images, labels, cfg.classes, split)
}

/// Train and test bundles of single-channel `size x size` images. Each class
/// is a distinct parametric face-like pattern (eyes, mouth, optional brows)
/// with per-sample jitter and additive Gaussian noise, clipped to `[0, 1]`
/// and quantized to the 8-bit grid.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(DatasetBundle, DatasetBundle)> {
    cfg.validate()?;
    let train = generate_split(cfg, &cfg.train_counts, Split::Train, 0)?;
    let test = generate_split(cfg, &cfg.test_counts, Split::Test, 1)?;
    Ok((train, test))
}

fn path_lock(path: &Path) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();
    let key = path
        .canonicalize()
        .unwrap_or_else(|_| std::env::current_dir().unwrap_or_default().join(path));
    LOCKS
        .get_or_init(Default::default)
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .entry(key)
        .or_default()
        .clone()
}

/// Writes `bytes` to `path` under a per-path lock, via a temporary file and
/// rename so readers never observe a partial file.
pub(crate) fn write_locked(path: &Path, bytes: &[u8]) -> Result<()> {
    let lock = path_lock(path);
    let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_dataset(bundle: &DatasetBundle) -> Result<Vec<u8>> {
    let [c, h, w] = bundle.image_shape();
    if bundle.classes() > u16::MAX as usize + 1 {
        return Err(Error::input("too many classes for 16-bit labels"));
    }
    let mut out = Vec::with_capacity(DATASET_HEADER_LEN + bundle.len() * (2 + c * h * w));
    out.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION as usize, bundle.classes(), bundle.len(), c, h, w] {
        let v = u32::try_from(v).map_err(|_| Error::input("dimension exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in bundle.labels() {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    for &v in bundle.images().data() {
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetBundle> {
    if bytes.len() < DATASET_HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated dataset header"));
    }
    if &bytes[..8] != DATASET_MAGIC {
        return Err(Error::format(0, "bad dataset magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != DATASET_VERSION as usize {
        return Err(Error::format(8, format!("unsupported dataset version {}", word(0))));
    }
    let (classes, n, c, h, w) = (word(1), word(2), word(3), word(4), word(5));
    if classes == 0 {
        return Err(Error::format(12, "zero classes"));
    }
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::format(20, format!("degenerate image shape {c}x{h}x{w}")));
    }
    let per = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format(20, "image shape overflows"))?;
    let expected = n
        .checked_mul(2 + per)
        .and_then(|v| v.checked_add(DATASET_HEADER_LEN))
        .ok_or_else(|| Error::format(16, "sample count overflows"))?;
    if bytes.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated dataset: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(expected as u64, "trailing bytes after pixel data"));
    }
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let off = DATASET_HEADER_LEN + 2 * i;
        let l = u16::from_le_bytes([bytes[off], bytes[off + 1]]) as usize;
        if l >= classes {
            return Err(Error::format(off as u64, format!("label {l} out of range")));
        }
        labels.push(l);
    }
    let px = &bytes[DATASET_HEADER_LEN + 2 * n..];
    let data = px.iter().map(|&b| b as f32 / 255.0).collect();
    if n == 0 {
        return Err(Error::format(16, "dataset holds no samples"));
    }
    let images = Tensor::new(vec![n, c, h, w], data)?;
    DatasetBundle::new(images, labels, classes, Split::Unspecified)
        .map_err(|e| Error::format(DATASET_HEADER_LEN as u64, e))
}

pub fn save_dataset(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<()> {
    write_locked(path.as_ref(), &encode_dataset(bundle)?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    decode_dataset(&fs::read(path)?)
}

/// Imports a directory of per-class subdirectories (sorted by name) holding
/// `.raw` files of exactly `channels*height*width` 8-bit pixels.
pub fn import_raw_dir(dir: impl AsRef<Path>, shape: [usize; 3]) -> Result<DatasetBundle> {
    let per: usize = shape.iter().product();
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::input("no class subdirectories found"));
    }
    let mut names = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (c, cdir) in class_dirs.iter().enumerate() {
        names.push(cdir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let mut files: Vec<PathBuf> = fs::read_dir(cdir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "raw"))
            .collect();
        files.sort();
        for f in files {
            let bytes = fs::read(&f)?;
            if bytes.len() != per {
                return Err(Error::format(
                    bytes.len().min(per) as u64,
                    format!("{}: expected {per} bytes, found {}", f.display(), bytes.len()),
                ));
            }
            data.extend(bytes.iter().map(|&b| b as f32 / 255.0));
            labels.push(c);
        }
    }
    if labels.is_empty() {
        return Err(Error::input("no .raw images found"));
    }
    let images = Tensor::new(vec![labels.len(), shape[0], shape[1], shape[2]], data)?;
    DatasetBundle::with_names(images, labels, names, Split::Unspecified)
}
