//! Dataset loading, stratified splitting, batching and normalization.
//!
//! Two on-disk layouts are accepted:
//!
//! * a directory holding `images.mmt` (`[N, S, S, ch]`, values in `[0, 1]`)
//!   and `labels.mmt` (`[N]`, integral class indices);
//! * a manifest file with one `relative/path.ppm,label` per line, paths
//!   resolved against the manifest's directory.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{AnyTensor, Tensor};

pub const IMAGES_FILE: &str = "images.mmt";
pub const LABELS_FILE: &str = "labels.mmt";
pub const DEFAULT_RATIO: [usize; 3] = [6, 2, 2];

/// Binary `P6` image with maxval 255, scaled to `[0, 1]`, shape `[H, W, 3]`.
pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("malformed PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(Error::Format(format!("unsupported image format `{magic}` (only binary P6 is read)")));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse().map_err(|_| Error::Format(format!("malformed PPM header: bad {what} `{t}`")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval} (only 255)")));
    }
    // exactly one whitespace byte separates the header from the payload
    let start = pos + 1;
    let need = w * h * 3;
    if bytes.len() < start + need {
        return Err(Error::Format(format!("truncated PPM payload: need {need} bytes, have {}", bytes.len().saturating_sub(start))));
    }
    let data = bytes[start..start + need].iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Writes `[H, W, 3]` values in `[0, 1]` as a binary PPM.
pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let [h, w, 3] = image.shape()[..] else {
        return Err(Error::shape("write_ppm", format!("expected [H, W, 3], got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Images and labels held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, S, S, ch]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!("images must be [N, H, W, C], got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if n != labels.len() {
            return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
        }
        if n == 0 {
            return Err(Error::Data("empty dataset".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(height, width, channels)`
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Normalized images and labels for the given record indices.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let (h, w, c) = self.geometry();
        let per = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.images.data()[i * per..(i + 1) * per].iter().map(|&v| normalize_value(v)));
        }
        Batch {
            images: Tensor::new(vec![indices.len(), h, w, c], data).expect("batch geometry"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Writes the `.mmt` pair into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.images.write_mmt(dir.join(IMAGES_FILE))?;
        let labels: Vec<f32> = self.labels.iter().map(|&l| l as f32).collect();
        Tensor::new(vec![labels.len()], labels)?.write_mmt(dir.join(LABELS_FILE))
    }
}

/// Loads a dataset directory or manifest; `num_classes` defaults to one past
/// the largest label.
pub fn load_dataset(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    if path.is_dir() {
        load_raw_dataset(path, num_classes)
    } else {
        load_manifest(path, num_classes)
    }
}

fn infer_classes(labels: &[usize], num_classes: Option<usize>) -> usize {
    num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1))
}

pub fn load_raw_dataset(dir: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let images = AnyTensor::read_mmt(dir.join(IMAGES_FILE))?.to::<f32>();
    let raw = AnyTensor::read_mmt(dir.join(LABELS_FILE))?.to::<f64>();
    if raw.rank() != 1 {
        return Err(Error::Data(format!("labels must be [N], got {:?}", raw.shape())));
    }
    let labels = raw
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Data(format!("label {v} is not a class index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let k = infer_classes(&labels, num_classes);
    Dataset::new(images, labels, k)
}

/// `(path, label)` entries of a manifest, paths resolved against its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, usize)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (rel, label) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::Data(format!("{}:{}: expected `path,label`", path.display(), lineno + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad label `{}`", path.display(), lineno + 1, label.trim())))?;
        out.push((base.join(rel.trim()), label));
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let entries = read_manifest(path)?;
    let mut data = Vec::new();
    let mut geometry: Option<Vec<usize>> = None;
    let mut labels = Vec::with_capacity(entries.len());
    for (p, label) in &entries {
        let img = load_ppm(p)?;
        match &geometry {
            None => geometry = Some(img.shape().to_vec()),
            Some(g) if g.as_slice() != img.shape() => {
                return Err(Error::Data(format!("{}: size {:?} differs from {:?}", p.display(), img.shape(), g)))
            }
            Some(_) => {}
        }
        data.extend_from_slice(img.data());
        labels.push(*label);
    }
    let mut shape = vec![entries.len()];
    shape.extend(geometry.unwrap_or_else(|| vec![0, 0, 3]));
    let k = infer_classes(&labels, num_classes);
    Dataset::new(Tensor::new(shape, data)?, labels, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split `{other}` (train, val or test)"))),
        }
    }
}

/// Split assignment of every record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndex {
    pub assignment: Vec<Split>,
}

impl SplitIndex {
    /// Record indices of one split, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.assignment.iter().enumerate().filter(|(_, s)| **s == split).map(|(i, _)| i).collect()
    }
}

/// Largest-remainder allocation of `n` items to the ratio; ties in the
/// fractional part go to the earlier split.
pub fn allocate(n: usize, ratio: [usize; 3]) -> [usize; 3] {
    let total: usize = ratio.iter().sum();
    let mut counts = [0; 3];
    let mut rems = [0; 3];
    for i in 0..3 {
        counts[i] = n * ratio[i] / total;
        rems[i] = n * ratio[i] % total;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Stratified split: each class is shuffled with `seed` and cut by
/// [`allocate`].
pub fn split_dataset(labels: &[usize], num_classes: usize, ratio: [usize; 3], seed: u64) -> Result<SplitIndex> {
    if ratio.contains(&0) {
        return Err(Error::config("split", format!("ratio components must be positive, got {ratio:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![Split::Train; labels.len()];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            log::warn!("class {class} has only {} samples; some splits will not contain it", members.len());
        }
        members.shuffle(&mut rng);
        let [tr, va, _] = allocate(members.len(), ratio);
        for (j, &i) in members.iter().enumerate() {
            assignment[i] = if j < tr {
                Split::Train
            } else if j < tr + va {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(SplitIndex { assignment })
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Partitions `indices` into batches of `batch_size` (last one may be
/// shorter). With `shuffle = Some((seed, epoch))` the order is permuted by a
/// generator derived from both.
pub fn make_batches(indices: &[usize], batch_size: usize, shuffle: Option<(u64, usize)>) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    if let Some((seed, epoch)) = shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[inline]
pub fn normalize_value(v: f32) -> f32 {
    (v - 0.5) / 0.5
}

/// `(x - 0.5) / 0.5` per element, mapping `[0, 1]` to `[-1, 1]`.
pub fn normalize(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(normalize_value)
}

/// Oriented sinusoidal stripe textures: class `k` of `num_classes` has
/// stripes at angle `k * pi / num_classes`, with random frequency, phase,
/// tint and additive noise per sample. Labels cycle through the classes.
pub fn synthetic_textures(n: usize, size: usize, channels: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || size == 0 || channels == 0 {
        return Err(Error::Data("synthetic set needs positive size, channels and classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * size * size * channels);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let theta = class as f64 * PI / num_classes as f64 + rng.gen_range(-0.1..0.1);
        let period = rng.gen_range(3.0..7.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let tint: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.6..1.0)).collect();
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..size {
            for x in 0..size {
                let u = x as f64 * ct + y as f64 * st;
                let base = 0.5 + 0.35 * (2.0 * PI * u / period + phase).sin();
                for t in &tint {
                    let v = base * t + rng.gen_range(-0.1..0.1);
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, size, size, channels], data)?, labels, num_classes)
}
