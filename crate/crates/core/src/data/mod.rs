//! Corpus manifests, preprocessing and deterministic batch loading.

pub mod synth;

use std::fmt;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{imageops::FilterType, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split `{s}`"))),
        }
    }
}

/// Text manifest: a `split:` and a `count:` header line, then one image path per
/// line relative to the manifest's directory. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub split: Split,
    pub root: PathBuf,
    pub entries: Vec<PathBuf>,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
        let mut split = None;
        let mut count = None;
        let mut entries = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(v) = line.strip_prefix("split:") {
                split = Some(v.trim().parse::<Split>().map_err(|e| bad(e.to_string()))?);
            } else if let Some(v) = line.strip_prefix("count:") {
                count = Some(v.trim().parse::<usize>().map_err(|e| bad(format!("bad count: {e}")))?);
            } else {
                entries.push(PathBuf::from(line));
            }
        }
        let split = split.ok_or_else(|| bad("missing `split:` header".into()))?;
        let count = count.ok_or_else(|| bad("missing `count:` header".into()))?;
        if count != entries.len() {
            return Err(bad(format!("header declares {count} entries but {} are listed", entries.len())));
        }
        let manifest = Self { split, root, entries };
        for i in 0..manifest.entries.len() {
            let p = manifest.path(i);
            if !p.is_file() {
                return Err(bad(format!("listed image {} does not exist", p.display())));
            }
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = format!("split: {}\ncount: {}\n", self.split, self.entries.len());
        for e in &self.entries {
            text.push_str(&e.to_string_lossy());
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i])
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// Size after scaling the shorter side to `target`; the long side rounds half up.
pub fn resized_dims(width: u32, height: u32, target: u32) -> (u32, u32) {
    let scale_long = |long: u32, short: u32| ((2 * long as u64 * target as u64 + short as u64) / (2 * short as u64)) as u32;
    if width <= height {
        (target, scale_long(height, width))
    } else {
        (scale_long(width, height), target)
    }
}

#[derive(Debug)]
pub enum Crop<'a> {
    Random(&'a mut ChaCha8Rng),
    Center,
}

/// Shorter side to `target` (bilinear), `target`×`target` crop, values to [-1, 1].
/// Returns CHW floats.
pub fn preprocess(image: &RgbImage, target: u32, crop: Crop<'_>) -> Result<Vec<f32>> {
    if target == 0 {
        return Err(Error::Data("preprocess target must be positive".into()));
    }
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Data("image has zero size".into()));
    }
    let (w, h) = resized_dims(image.width(), image.height(), target);
    let resized;
    let src = if (w, h) == image.dimensions() {
        image
    } else {
        resized = image::imageops::resize(image, w, h, FilterType::Triangle);
        &resized
    };
    let (x0, y0) = match crop {
        Crop::Random(rng) => (rng.gen_range(0..=w - target), rng.gen_range(0..=h - target)),
        Crop::Center => ((w - target) / 2, (h - target) / 2),
    };
    let t = target as usize;
    let mut out = vec![0f32; 3 * t * t];
    for y in 0..t {
        for x in 0..t {
            let p = src.get_pixel(x0 + x as u32, y0 + y as u32);
            for c in 0..3 {
                out[c * t * t + y * t + x] = p[c] as f32 / 127.5 - 1.0;
            }
        }
    }
    Ok(out)
}

/// (3, H, W) or (B, 3, H, W) in [-1, 1] to 8-bit images, rounding to nearest.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<RgbImage>> {
    let t = if t.rank() == 3 { t.unsqueeze(0)? } else { t.clone() };
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let data = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| {
                let v = data[((i * 3 + ch) * h + y as usize) * w + x as usize];
                ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        });
        out.push(img);
    }
    Ok(out)
}

pub fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Deterministic stream key from up to three integers (splitmix64 finalizer).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoaderMode {
    /// Shuffled each epoch, random crops, partial batch dropped.
    Train,
    /// Manifest order, center crops, partial batch kept.
    Eval,
}

#[derive(Debug, Clone)]
pub struct Loader {
    manifest: CorpusManifest,
    batch_size: usize,
    image_size: u32,
    seed: u64,
    mode: LoaderMode,
}

impl Loader {
    pub fn new(manifest: CorpusManifest, batch_size: usize, image_size: usize, seed: u64, mode: LoaderMode) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if mode == LoaderMode::Train && manifest.len() < batch_size {
            return Err(Error::Data(format!(
                "corpus has {} images, fewer than one batch of {batch_size}",
                manifest.len()
            )));
        }
        Ok(Self {
            manifest,
            batch_size,
            image_size: image_size as u32,
            seed,
            mode,
        })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn num_batches(&self) -> usize {
        match self.mode {
            LoaderMode::Train => self.manifest.len() / self.batch_size,
            LoaderMode::Eval => self.manifest.len().div_ceil(self.batch_size),
        }
    }

    /// Entry indices in visiting order for `epoch`.
    pub fn order(&self, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.manifest.len()).collect();
        if self.mode == LoaderMode::Train {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, epoch])));
        }
        idx
    }

    pub fn batch_entries(&self, epoch: u64, batch: usize) -> Vec<usize> {
        let order = self.order(epoch);
        let start = batch * self.batch_size;
        let end = (start + self.batch_size).min(order.len());
        order[start.min(end)..end].to_vec()
    }

    /// Batch `batch` of `epoch` as a (B, 3, S, S) tensor.
    pub fn batch(&self, epoch: u64, batch: usize) -> Result<Tensor> {
        let entries = self.batch_entries(epoch, batch);
        if entries.is_empty() {
            return Err(Error::Data(format!("batch {batch} is past the end of the epoch")));
        }
        let s = self.image_size as usize;
        let mut data = Vec::with_capacity(entries.len() * 3 * s * s);
        for (k, &i) in entries.iter().enumerate() {
            let img = load_image(&self.manifest.path(i))?;
            let pos = (batch * self.batch_size + k) as u64;
            let item = match self.mode {
                LoaderMode::Train => {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, epoch, pos]));
                    preprocess(&img, self.image_size, Crop::Random(&mut rng))?
                }
                LoaderMode::Eval => preprocess(&img, self.image_size, Crop::Center)?,
            };
            data.extend(item);
        }
        Ok(Tensor::from_vec(data, (entries.len(), 3, s, s), &Device::Cpu)?)
    }

    pub fn batches(&self, epoch: u64) -> impl Iterator<Item = Result<Tensor>> + '_ {
        (0..self.num_batches()).map(move |b| self.batch(epoch, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn resize_examples() {
        assert_eq!(resized_dims(500, 300, 384), (640, 384));
        assert_eq!(resized_dims(384, 384, 384), (384, 384));
        assert_eq!(resized_dims(300, 500, 384), (384, 640));
        // 96·64/63 = 97.52 -> 98; 3·2/4 = 1.5 -> 2 (half up)
        assert_eq!(resized_dims(96, 63, 64), (98, 64));
        assert_eq!(resized_dims(3, 4, 2), (2, 3));
    }

    #[test]
    fn identity_resize_and_range_map() {
        let mut img = RgbImage::new(4, 4);
        img.put_pixel(0, 0, image::Rgb([255, 0, 255]));
        let v = preprocess(&img, 4, Crop::Center).unwrap();
        assert_eq!(v.len(), 48);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[16], -1.0);
        assert_eq!(v[1], -1.0);
        let back = tensor_to_images(&Tensor::from_vec(v, (3, 4, 4), &Device::Cpu).unwrap()).unwrap();
        assert_eq!(back[0], img);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.manifest");
        std::fs::write(&m, "split: train\ncount: 2\na.png\n").unwrap();
        assert!(matches!(CorpusManifest::load(&m), Err(Error::Data(_))));
        std::fs::write(&m, "split: train\ncount: 1\na.png\n").unwrap();
        assert!(matches!(CorpusManifest::load(&m), Err(Error::Data(_))));
        RgbImage::new(2, 2).save(dir.path().join("a.png")).unwrap();
        let c = CorpusManifest::load(&m).unwrap();
        assert_eq!(c.split, Split::Train);
        assert_eq!(c.len(), 1);
        let copy = dir.path().join("n.manifest");
        c.write(&copy).unwrap();
        assert_eq!(CorpusManifest::load(&copy).unwrap(), c);
        assert!(matches!(CorpusManifest::load(&dir.path().join("none")), Err(Error::Io { .. })));
    }

    fn fixture(n: usize) -> (tempfile::TempDir, CorpusManifest) {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = Vec::new();
        for i in 0..n {
            let name = format!("{i}.png");
            RgbImage::from_pixel(6, 5, image::Rgb([i as u8, 0, 0])).save(dir.path().join(&name)).unwrap();
            entries.push(PathBuf::from(name));
        }
        let m = CorpusManifest {
            split: Split::Train,
            root: dir.path().to_path_buf(),
            entries,
        };
        (dir, m)
    }

    #[test]
    fn loader_batches() {
        let (_d, m) = fixture(7);
        let train = Loader::new(m.clone(), 3, 4, 9, LoaderMode::Train).unwrap();
        assert_eq!(train.num_batches(), 2);
        assert_eq!(train.batch(0, 0).unwrap().dims(), &[3, 3, 4, 4]);
        assert_eq!(train.order(1), train.order(1));
        assert_ne!(train.order(0), train.order(1));
        let a = train.batch(2, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = train.batch(2, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        let eval = Loader::new(m, 3, 4, 9, LoaderMode::Eval).unwrap();
        assert_eq!(eval.num_batches(), 3);
        assert_eq!(eval.batch(0, 2).unwrap().dims()[0], 1);
        assert_eq!(eval.order(5), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn empty_and_small_corpora_are_rejected() {
        let (_d, m) = fixture(2);
        assert!(Loader::new(m.clone(), 3, 4, 0, LoaderMode::Train).is_err());
        assert!(Loader::new(m.clone(), 3, 4, 0, LoaderMode::Eval).is_ok());
        let empty = CorpusManifest { entries: vec![], ..m };
        assert!(matches!(Loader::new(empty, 1, 4, 0, LoaderMode::Eval), Err(Error::Data(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn preprocess_is_exact_size_and_in_range(w in 1u32..40, h in 1u32..40, t in 1u32..24, seed in any::<u64>()) {
            let img = RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7) as u8, (y * 13) as u8, ((x + y) * 5) as u8]));
            let (rw, rh) = resized_dims(w, h, t);
            prop_assert_eq!(rw.min(rh), t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = preprocess(&img, t, Crop::Random(&mut rng)).unwrap();
            prop_assert_eq!(v.len(), (3 * t * t) as usize);
            prop_assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        }

        #[test]
        fn long_side_scales_by_the_same_factor(w in 1u32..2000, h in 1u32..2000, t in 1u32..600) {
            let (rw, rh) = resized_dims(w, h, t);
            let (long, short, rlong) = if w <= h { (h, w, rh) } else { (w, h, rw) };
            let exact = long as f64 * t as f64 / short as f64;
            prop_assert!((rlong as f64 - exact).abs() <= 0.5 + 1e-9);
            prop_assert!(rlong >= t);
        }

        #[test]
        fn every_entry_once_per_epoch(n in 1usize..60, seed in any::<u64>(), epoch in 0u64..5) {
            let m = CorpusManifest { split: Split::Train, root: PathBuf::new(), entries: vec![PathBuf::from("x"); n] };
            let l = Loader::new(m, 1, 4, seed, LoaderMode::Train).unwrap();
            let mut o = l.order(epoch);
            o.sort_unstable();
            prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
        }
    }
}
