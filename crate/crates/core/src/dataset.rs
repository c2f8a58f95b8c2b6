//! MNIST ingestion: IDX parsing, checksummed download, splits and
//! deterministic minibatching.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const PIXELS: usize = 784;
pub const CLASSES: usize = 10;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Environment variable naming the MNIST directory.
pub const DATA_DIR_ENV: &str = "RDPB_DATA_DIR";

/// Decoded image file: `count` images of `rows × cols` bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    /// `(count, rows·cols)` tensor with every byte divided by 255.
    pub fn tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::new(vec![self.count, self.rows * self.cols], data).expect("extent checked on parse")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    Images(IdxImages),
    Labels(Vec<u8>),
}

/// Parses an uncompressed IDX payload (image magic 2051 or label magic 2049).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndims = match magic {
        IMAGE_MAGIC => 3,
        LABEL_MAGIC => 1,
        other => {
            return Err(Error::Format(format!(
                "unexpected IDX magic {other} (0x{other:08x}); expected 2051 or 2049"
            )))
        }
    };
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let payload: usize = dims.iter().product();
    let expected = header + payload;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let body = bytes[header..expected].to_vec();
    Ok(match magic {
        IMAGE_MAGIC => IdxData::Images(IdxImages {
            count: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels: body,
        }),
        _ => IdxData::Labels(body),
    })
}

/// Inverse of [`parse_idx`].
pub fn serialize_idx(data: &IdxData) -> Vec<u8> {
    let (magic, dims, body): (u32, Vec<usize>, &[u8]) = match data {
        IdxData::Images(im) => (IMAGE_MAGIC, vec![im.count, im.rows, im.cols], &im.pixels),
        IdxData::Labels(l) => (LABEL_MAGIC, vec![l.len()], l),
    };
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + body.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(body);
    out
}

/// Reads an IDX file, decompressing it first if it is gzipped.
pub fn read_idx_file(path: &Path) -> Result<IdxData> {
    let raw = fs::read(path).map_err(Error::path(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(Error::path(path))?;
        parse_idx(&out)
    } else {
        parse_idx(&raw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Images with labels. Pixels are kept as bytes and scaled to `[0, 1]` when
/// materialized as tensors.
#[derive(Clone, Debug)]
pub struct LabeledImageSet {
    pub split: Split,
    /// Index of the first record in the source file.
    pub first_record: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl LabeledImageSet {
    pub fn new(split: Split, first_record: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * PIXELS {
            return Err(Error::Consistency(format!(
                "{} pixel bytes for {} labels",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(Error::Consistency(format!("label {bad} out of range")));
        }
        Ok(Self {
            split,
            first_record,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    /// `(n, 784)` tensor of the whole set.
    pub fn images(&self) -> Tensor {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }

    /// `(indices.len(), 784)` tensor of the selected records.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            data.extend(self.pixels(i).iter().map(|&p| p as f64 / 255.0));
        }
        Tensor::new(vec![indices.len(), PIXELS], data).expect("extent")
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// The first `n` records (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            split: self.split,
            first_record: self.first_record,
            pixels: self.pixels[..n * PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn label_histogram(&self) -> [usize; CLASSES] {
        let mut h = [0; CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct MnistSplits {
    pub train: LabeledImageSet,
    pub validation: LabeledImageSet,
    pub test: LabeledImageSet,
}

impl MnistSplits {
    pub fn get(&self, split: Split) -> &LabeledImageSet {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

fn locate(dir: &Path, name: &str) -> Option<PathBuf> {
    [name.to_string(), format!("{name}.gz")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

fn load_pair(images: &Path, labels: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let IdxData::Images(im) = read_idx_file(images)? else {
        return Err(Error::Format(format!("{} is not an image file", images.display())));
    };
    let IdxData::Labels(lb) = read_idx_file(labels)? else {
        return Err(Error::Format(format!("{} is not a label file", labels.display())));
    };
    if im.rows * im.cols != PIXELS {
        return Err(Error::Format(format!(
            "{}: images are {}x{}, expected 28x28",
            images.display(),
            im.rows,
            im.cols
        )));
    }
    if im.count != lb.len() {
        return Err(Error::Consistency(format!(
            "{} has {} images but {} has {} labels",
            images.display(),
            im.count,
            labels.display(),
            lb.len()
        )));
    }
    Ok((im.pixels, lb))
}

/// Loads the four standard IDX files (plain or `.gz`) from `dir`.
///
/// The train file is split in file order: the last sixth of its records
/// becomes the validation set, so the standard 60,000-record file yields
/// 50,000 train and 10,000 validation records.
pub fn load_mnist(dir: &Path) -> Result<MnistSplits> {
    let names = [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS];
    let found: Vec<Option<PathBuf>> = names.iter().map(|n| locate(dir, n)).collect();
    let missing: Vec<String> = names
        .iter()
        .zip(&found)
        .filter(|(_, f)| f.is_none())
        .map(|(n, _)| n.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles {
            dir: dir.to_path_buf(),
            missing,
        });
    }
    let found: Vec<PathBuf> = found.into_iter().flatten().collect();
    let (train_px, train_lb) = load_pair(&found[0], &found[1])?;
    let (test_px, test_lb) = load_pair(&found[2], &found[3])?;

    let n = train_lb.len();
    let n_val = n / 6;
    let n_train = n - n_val;
    if n_train == 0 || n_val == 0 {
        return Err(Error::Consistency(format!(
            "train file has {n} records, too few to split"
        )));
    }
    let train = LabeledImageSet::new(
        Split::Train,
        0,
        train_px[..n_train * PIXELS].to_vec(),
        train_lb[..n_train].to_vec(),
    )?;
    let validation = LabeledImageSet::new(
        Split::Validation,
        n_train,
        train_px[n_train * PIXELS..].to_vec(),
        train_lb[n_train..].to_vec(),
    )?;
    let test = LabeledImageSet::new(Split::Test, 0, test_px, test_lb)?;
    Ok(MnistSplits {
        train,
        validation,
        test,
    })
}

/// The 10,000-digit subset shipped with the crate.
pub fn bundled_subset_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/mnist-subset")
}

/// Resolves the dataset directory: explicit path, then `RDPB_DATA_DIR`,
/// then `data/mnist` if it holds the training images, then the bundled
/// subset.
pub fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(DATA_DIR_ENV) {
        return PathBuf::from(p);
    }
    let local = PathBuf::from("data/mnist");
    let has_train = [TRAIN_IMAGES.to_string(), format!("{TRAIN_IMAGES}.gz")]
        .iter()
        .any(|f| local.join(f).is_file());
    if has_train {
        local
    } else {
        bundled_subset_dir()
    }
}

/// One minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<u8>,
    pub indices: Vec<usize>,
}

/// One epoch's worth of minibatches over a seeded permutation. The final
/// short batch is dropped.
pub struct Batches<'a> {
    set: &'a LabeledImageSet,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let start = self.next * self.batch_size;
        if start + self.batch_size > self.order.len() {
            return None;
        }
        self.next += 1;
        let indices = self.order[start..start + self.batch_size].to_vec();
        Some(Batch {
            x: self.set.gather(&indices),
            labels: self.set.gather_labels(&indices),
            indices,
        })
    }
}

pub fn batches(set: &LabeledImageSet, batch_size: usize, seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    if batch_size > set.len() {
        return Err(Error::Contract(format!(
            "batch size {batch_size} exceeds set size {}",
            set.len()
        )));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Batches {
        set,
        order,
        batch_size,
        next: 0,
    })
}

#[derive(Clone, Debug)]
pub struct FetchOptions {
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub initial_backoff: Duration,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(Error::path(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(Error::path(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Downloads `url` to `dest` if `dest` is absent or its digest differs.
/// The file only appears at `dest` once its SHA-256 matches.
pub fn fetch(url: &str, expected_sha256: &str, dest: &Path) -> Result<PathBuf> {
    fetch_with(url, expected_sha256, dest, &FetchOptions::default())
}

pub fn fetch_with(
    url: &str,
    expected_sha256: &str,
    dest: &Path,
    opts: &FetchOptions,
) -> Result<PathBuf> {
    let expected = expected_sha256.to_ascii_lowercase();
    if dest.is_file() && sha256_file(dest)? == expected {
        log::info!("{} already present", dest.display());
        return Ok(dest.to_path_buf());
    }
    if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::path(parent))?;
    }
    let file_name = dest
        .file_name()
        .ok_or_else(|| Error::Contract(format!("{} has no file name", dest.display())))?;
    let tmp = dest.with_file_name(format!(
        ".{}.part-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));

    let mut delay = opts.initial_backoff;
    let mut last_err = String::new();
    let attempts = opts.attempts.max(1);
    for attempt in 1..=attempts {
        match download_to(url, &tmp) {
            Ok(actual) => {
                if actual != expected {
                    let _ = fs::remove_file(&tmp);
                    return Err(Error::Integrity {
                        path: dest.to_path_buf(),
                        expected,
                        actual,
                    });
                }
                fs::rename(&tmp, dest).map_err(Error::path(dest))?;
                return Ok(dest.to_path_buf());
            }
            Err(e) => {
                let _ = fs::remove_file(&tmp);
                log::warn!("fetch {url} attempt {attempt}/{attempts} failed: {e}");
                last_err = e.to_string();
                if attempt < attempts {
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
    Err(Error::Network {
        attempts,
        msg: last_err,
    })
}

/// One file to download.
#[derive(Clone, Debug, PartialEq, Eq, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// File name under the destination directory.
    pub name: String,
    pub url: String,
    pub sha256: String,
}

/// TOML list of `[[file]]` tables, each with `name`, `url` and `sha256`.
#[derive(Clone, Debug, PartialEq, Eq, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FetchManifest {
    pub file: Vec<ManifestEntry>,
}

impl FetchManifest {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let m: FetchManifest = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        for e in &m.file {
            let is_digest = e.sha256.len() == 64 && e.sha256.chars().all(|c| c.is_ascii_hexdigit());
            if !is_digest {
                return Err(Error::Config(format!("manifest entry {}: sha256 must be 64 hex digits", e.name)));
            }
            if e.name.contains(['/', '\\']) || e.name.starts_with('.') {
                return Err(Error::Config(format!("manifest entry name {:?} must be a plain file name", e.name)));
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(Error::path(path))?)
    }

    /// Fetches every entry into `dir`, stopping at the first failure.
    pub fn fetch_all(&self, dir: &Path, opts: &FetchOptions) -> Result<Vec<PathBuf>> {
        self.file
            .iter()
            .map(|e| fetch_with(&e.url, &e.sha256, &dir.join(&e.name), opts))
            .collect()
    }
}

fn download_to(url: &str, tmp: &Path) -> io::Result<String> {
    let resp = ureq::get(url).call().map_err(io::Error::other)?;
    let mut reader = resp.into_body().into_reader();
    let mut out = fs::File::create(tmp)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        out.write_all(&buf[..n])?;
    }
    out.sync_all()?;
    Ok(hex::encode(h.finalize()))
}
