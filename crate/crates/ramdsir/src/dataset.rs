//! On-disk benchmark layout.
//!
//! ```text
//! <root>/manifest.csv            image,label,domain,split
//! <root>/benchmark.toml          generation parameters
//! <root>/domain<k>/<split>_<i>.pgm        16-bit image (single channel)
//! <root>/domain<k>/<split>_<i>.rdt        raw tensor image (multi-channel)
//! <root>/domain<k>/<split>_<i>_label.pgm  label bitmask, bit c = class c
//! ```

use std::cell::RefCell;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use image::codecs::pnm::{GraymapHeader, PnmEncoder, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use ramdsir_core::checkpoint;
use ramdsir_core::synthdata::{Benchmark, DomainSample};
use ramdsir_core::{ImageTensor, Tensor};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.csv";
pub const BENCHMARK_INFO: &str = "benchmark.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One manifest row; paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub label: String,
    pub domain: usize,
    pub split: Split,
}

/// Generation parameters stored next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkInfo {
    pub domains: usize,
    pub per_domain: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8], color: ExtendedColorType) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let maxwhite = if color == ExtendedColorType::L16 { 0xffff } else { 0xff };
    let header = GraymapHeader { encoding: SampleEncoding::Binary, width: width as u32, height: height as u32, maxwhite };
    PnmEncoder::new(BufWriter::new(file))
        .with_header(header.into())
        .write_image(bytes, width as u32, height as u32, color)
        .with_context(|| format!("cannot write {}", path.display()))
}

/// Stores a single-channel image in `[-1, 1]` as a 16-bit PGM.
pub fn write_image_pgm(path: &Path, image: &ImageTensor) -> Result<()> {
    ensure!(image.channels() == 1, "PGM images must have one channel");
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .flat_map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 65535.0).round() as u16).to_ne_bytes())
        .collect();
    write_pgm(path, image.width(), image.height(), &bytes, ExtendedColorType::L16)
}

pub fn read_image_pgm(path: &Path) -> Result<ImageTensor> {
    let img = ImageReader::open(path)
        .with_context(|| format!("cannot open {}", path.display()))?
        .with_guessed_format()?
        .decode()
        .with_context(|| format!("cannot decode {}", path.display()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_luma16().into_raw().into_iter().map(|v| f64::from(v) / 65535.0 * 2.0 - 1.0).collect();
    Ok(ImageTensor::new(h, w, 1, data)?)
}

/// Stores a binary label as an 8-bit PGM whose pixel value has bit `c` set for class `c`.
pub fn write_label_pgm(path: &Path, label: &ImageTensor) -> Result<()> {
    ensure!(label.channels() <= 8, "at most 8 classes fit a label bitmask");
    let (h, w, c) = label.dims();
    let mut bytes = vec![0u8; h * w];
    for (i, px) in bytes.iter_mut().enumerate() {
        for ch in 0..c {
            if label.data()[i * c + ch] > 0.5 {
                *px |= 1 << ch;
            }
        }
    }
    write_pgm(path, w, h, &bytes, ExtendedColorType::L8)
}

pub fn read_label_pgm(path: &Path, classes: usize) -> Result<ImageTensor> {
    let img = ImageReader::open(path)
        .with_context(|| format!("cannot open {}", path.display()))?
        .with_guessed_format()?
        .decode()
        .with_context(|| format!("cannot decode {}", path.display()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_luma8().into_raw();
    ensure!(raw.iter().all(|&v| u32::from(v) < (1u32 << classes)), "{} has bits beyond {classes} classes", path.display());
    let data = raw.iter().flat_map(|&v| (0..classes).map(move |c| f64::from((v >> c) & 1))).collect();
    Ok(ImageTensor::new(h, w, classes, data)?)
}

/// Multi-channel images use the checkpoint container with a single `H x W x C` entry.
pub fn write_image_raw(path: &Path, image: &ImageTensor) -> Result<()> {
    let (h, w, c) = image.dims();
    let t = Tensor::new(vec![h, w, c], image.data().to_vec())?;
    fs::write(path, checkpoint::encode(&[("image".into(), t)])).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_image_raw(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let entries = checkpoint::decode(&bytes)?;
    let [(name, t)] = entries.as_slice() else { bail!("{} must hold exactly one tensor", path.display()) };
    ensure!(name == "image" && t.shape().len() == 3, "{} does not hold an H x W x C image", path.display());
    Ok(ImageTensor::new(t.shape()[0], t.shape()[1], t.shape()[2], t.data().to_vec())?)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let mut reader = csv::Reader::from_path(&path).with_context(|| format!("cannot open {}", path.display()))?;
    reader
        .deserialize()
        .map(|r| r.with_context(|| format!("malformed row in {}", path.display())))
        .collect()
}

pub fn read_info(root: &Path) -> Result<BenchmarkInfo> {
    let path = root.join(BENCHMARK_INFO);
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(toml::from_str(&text)?)
}

/// Writes every domain, split and sample of `benchmark` under `root`.
pub fn save_benchmark(benchmark: &Benchmark, per_domain: usize, root: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(root)?;
    let cfg = benchmark.config;
    let ext = if cfg.channels == 1 { "pgm" } else { "rdt" };
    let mut entries = Vec::new();
    for d in &benchmark.domains {
        let dir = format!("domain{}", d.spec.id);
        fs::create_dir_all(root.join(&dir))?;
        for (split, samples) in [(Split::Train, &d.train), (Split::Test, &d.test)] {
            for (i, s) in samples.iter().enumerate() {
                let image = format!("{dir}/{}_{i:03}.{ext}", split.as_str());
                let label = format!("{dir}/{}_{i:03}_label.pgm", split.as_str());
                if cfg.channels == 1 {
                    write_image_pgm(&root.join(&image), &s.image)?;
                } else {
                    write_image_raw(&root.join(&image), &s.image)?;
                }
                write_label_pgm(&root.join(&label), &s.label)?;
                entries.push(ManifestEntry { image, label, domain: s.domain, split });
            }
        }
    }
    let mut w = csv::Writer::from_path(root.join(MANIFEST))?;
    for e in &entries {
        w.serialize(e)?;
    }
    w.flush()?;
    let info = BenchmarkInfo {
        domains: benchmark.num_domains(),
        per_domain,
        seed: benchmark.seed,
        height: cfg.height,
        width: cfg.width,
        channels: cfg.channels,
        classes: cfg.classes,
    };
    fs::write(root.join(BENCHMARK_INFO), toml::to_string(&info)?)?;
    Ok(entries)
}

/// Reads samples from a dataset root and records every file it opens.
pub struct AuditedLoader {
    root: PathBuf,
    classes: usize,
    reads: RefCell<Vec<PathBuf>>,
}

impl AuditedLoader {
    pub fn new(root: &Path, classes: usize) -> Self {
        Self { root: root.to_path_buf(), classes, reads: RefCell::new(Vec::new()) }
    }

    fn open(&self, rel: &str) -> PathBuf {
        let p = self.root.join(rel);
        self.reads.borrow_mut().push(p.clone());
        p
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<DomainSample> {
        let image_path = self.open(&entry.image);
        let image = if entry.image.ends_with(".pgm") { read_image_pgm(&image_path)? } else { read_image_raw(&image_path)? };
        let label = read_label_pgm(&self.open(&entry.label), self.classes)?;
        ensure!(image.height() == label.height() && image.width() == label.width(), "image and label sizes differ for {}", entry.image);
        Ok(DomainSample { image, label, domain: entry.domain })
    }

    /// Loads every entry accepted by `keep`, in manifest order.
    pub fn load_where(&self, entries: &[ManifestEntry], keep: impl Fn(&ManifestEntry) -> bool) -> Result<Vec<DomainSample>> {
        entries.iter().filter(|e| keep(e)).map(|e| self.load(e)).collect()
    }

    /// Every path opened so far, in order.
    pub fn reads(&self) -> Vec<PathBuf> {
        self.reads.borrow().clone()
    }
}
