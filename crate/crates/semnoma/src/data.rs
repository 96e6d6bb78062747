//! Dataset ingestion (CIFAR-10 binary archives, image directories) and
//! multi-user grouping for training and evaluation.
//!
//! Images are stored channel-major (`3*H*W` u8 planes, matching the CIFAR-10
//! record layout) and materialized as `(B, 3, H, W)` f32 tensors in
//! `[0, 255]` on demand.

use crate::error::{Error, Result};
use crate::rng::ChaCha12Rng;
use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use std::path::Path;

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3*32*32 pixels
const CIFAR_PIXELS: usize = 3072;

/// An in-memory image collection of a fixed resolution.
#[derive(Debug, Clone)]
pub struct ImageSet {
    data: Vec<u8>,
    len: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageSet {
    pub fn new(images: Vec<Vec<u8>>, height: usize, width: usize) -> Result<Self> {
        let per = 3 * height * width;
        let mut data = Vec::with_capacity(images.len() * per);
        for (i, img) in images.iter().enumerate() {
            if img.len() != per {
                return Err(Error::shape(format!(
                    "image {i} has {} bytes, expected {per}",
                    img.len()
                )));
            }
            data.extend_from_slice(img);
        }
        Ok(Self { data, len: images.len(), height, width })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Raw channel-major bytes of one image.
    pub fn image(&self, index: usize) -> &[u8] {
        let per = 3 * self.height * self.width;
        &self.data[index * per..(index + 1) * per]
    }

    /// Subset by index (cloning the selected images).
    pub fn subset(&self, indices: impl Iterator<Item = usize>) -> Result<Self> {
        let imgs: Vec<Vec<u8>> = indices.map(|i| self.image(i).to_vec()).collect();
        Self::new(imgs, self.height, self.width)
    }

    /// `(B, 3, H, W)` f32 tensor in `[0, 255]` for the given indices.
    pub fn tensor(&self, indices: &[u32], device: &Device) -> Result<Tensor> {
        let per = 3 * self.height * self.width;
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            out.extend(self.image(i as usize).iter().map(|&b| b as f32));
        }
        Ok(Tensor::from_vec(out, (indices.len(), 3, self.height, self.width), device)?)
    }
}

/// CIFAR-10 train/test splits.
#[derive(Debug, Clone)]
pub struct Cifar10 {
    pub train: ImageSet,
    pub test: ImageSet,
}

fn read_cifar_file(path: &Path) -> Result<Vec<Vec<u8>>> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Ingestion(format!("cannot read {}: {e}", path.display()))
    })?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Ingestion(format!(
            "{}: size {} is not a multiple of the {CIFAR_RECORD}-byte record",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks(CIFAR_RECORD)
        .map(|rec| rec[1..].to_vec()) // drop the label byte
        .collect())
}

/// Load a CIFAR-10 binary archive directory (`data_batch_*.bin` plus
/// `test_batch.bin`, standard record layout).
pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Cifar10> {
    let dir = path.as_ref();
    if !dir.is_dir() {
        return Err(Error::Ingestion(format!(
            "{} is not a directory containing a CIFAR-10 binary archive",
            dir.display()
        )));
    }
    let mut batch_files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
                .unwrap_or(false)
        })
        .collect();
    batch_files.sort();
    if batch_files.is_empty() {
        return Err(Error::Ingestion(format!(
            "no data_batch_*.bin files in {}",
            dir.display()
        )));
    }
    let mut train = Vec::new();
    for f in &batch_files {
        train.extend(read_cifar_file(f)?);
    }
    let test = read_cifar_file(&dir.join("test_batch.bin"))?;
    Ok(Cifar10 {
        train: ImageSet::new(train, 32, 32)?,
        test: ImageSet::new(test, 32, 32)?,
    })
}

/// Write images as a CIFAR-10 binary archive (10,000 records per
/// `data_batch_N.bin`, labels cycling 0..9).
pub fn write_cifar10_archive(
    dir: impl AsRef<Path>,
    train: &[Vec<u8>],
    test: &[Vec<u8>],
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let write = |path: &Path, imgs: &[Vec<u8>], base: usize| -> Result<()> {
        let mut buf = Vec::with_capacity(imgs.len() * CIFAR_RECORD);
        for (i, img) in imgs.iter().enumerate() {
            if img.len() != CIFAR_PIXELS {
                return Err(Error::shape(format!(
                    "CIFAR image must be {CIFAR_PIXELS} bytes, got {}",
                    img.len()
                )));
            }
            buf.push(((base + i) % 10) as u8);
            buf.extend_from_slice(img);
        }
        std::fs::write(path, buf)?;
        Ok(())
    };
    for (bi, chunk) in train.chunks(10_000).enumerate() {
        write(&dir.join(format!("data_batch_{}.bin", bi + 1)), chunk, bi * 10_000)?;
    }
    write(&dir.join("test_batch.bin"), test, 0)?;
    Ok(())
}

/// Load a directory of raster images, bicubic-resized to `target` and
/// forced to 3 channels. Undecodable files are skipped; the count of skips
/// is returned alongside the set.
pub fn load_image_dir(path: impl AsRef<Path>, target: (usize, usize)) -> Result<(ImageSet, usize)> {
    let dir = path.as_ref();
    if !dir.is_dir() {
        return Err(Error::Ingestion(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let (th, tw) = target;
    let mut images = Vec::new();
    let mut skipped = 0usize;
    for f in &files {
        let img = match image::open(f) {
            Ok(i) => i,
            Err(e) => {
                eprintln!("warning: skipping undecodable {}: {e}", f.display());
                skipped += 1;
                continue;
            }
        };
        let resized = image::imageops::resize(
            &img.to_rgb8(),
            tw as u32,
            th as u32,
            image::imageops::FilterType::CatmullRom,
        );
        let mut planes = vec![0u8; 3 * th * tw];
        for (x, y, p) in resized.enumerate_pixels() {
            let o = y as usize * tw + x as usize;
            planes[o] = p.0[0];
            planes[th * tw + o] = p.0[1];
            planes[2 * th * tw + o] = p.0[2];
        }
        images.push(planes);
    }
    if images.is_empty() {
        return Err(Error::Ingestion(format!(
            "no decodable images in {} ({skipped} skipped)",
            dir.display()
        )));
    }
    Ok((ImageSet::new(images, th, tw)?, skipped))
}

/// A batch of B groups of N user images plus the provenance indices.
#[derive(Debug, Clone)]
pub struct MultiUserBatch {
    /// One `(B, 3, H, W)` tensor per user, values in `[0, 255]`.
    pub users: Vec<Tensor>,
    /// `indices[user][group]` into the source dataset.
    pub indices: Vec<Vec<u32>>,
}

impl MultiUserBatch {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn batch_size(&self) -> usize {
        self.users[0].dims()[0]
    }

    /// True when no index appears in two user slots (required of every
    /// evaluation batch).
    pub fn users_disjoint(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        for user in &self.indices {
            for &i in user {
                if !seen.insert(i) {
                    return false;
                }
            }
        }
        true
    }
}

/// Random multi-user grouping for training: each epoch concatenates fresh
/// whole-dataset permutations, truncated to `samples_per_epoch` images, and
/// deals them into batches of `batch` groups times `n_users` slots. Usage is
/// near-uniform within an epoch and regrouping differs across epochs.
pub fn group_train(
    set: &ImageSet,
    n_users: usize,
    batch: usize,
    samples_per_epoch: Option<usize>,
    rng: &mut ChaCha12Rng,
    device: &Device,
) -> Result<Vec<MultiUserBatch>> {
    if n_users < 2 {
        return Err(Error::config(format!("need at least 2 users, got {n_users}")));
    }
    let per_batch = n_users * batch;
    if set.len() < per_batch {
        return Err(Error::config(format!(
            "dataset of {} images cannot fill one {n_users}x{batch} batch",
            set.len()
        )));
    }
    let spe = samples_per_epoch.unwrap_or(set.len());
    let mut order: Vec<u32> = Vec::with_capacity(spe + set.len());
    while order.len() < spe {
        let mut perm: Vec<u32> = (0..set.len() as u32).collect();
        perm.shuffle(rng);
        order.extend(perm);
    }
    order.truncate(spe);
    let mut batches = Vec::new();
    for chunk in order.chunks(per_batch) {
        if chunk.len() < per_batch {
            break;
        }
        let mut indices = Vec::with_capacity(n_users);
        let mut users = Vec::with_capacity(n_users);
        for u in 0..n_users {
            let idx: Vec<u32> = chunk[u * batch..(u + 1) * batch].to_vec();
            users.push(set.tensor(&idx, device)?);
            indices.push(idx);
        }
        batches.push(MultiUserBatch { users, indices });
    }
    Ok(batches)
}

/// Deterministic evaluation grouping: the dataset is split into N disjoint
/// contiguous groups paired positionally; the remainder (`len % n_users`
/// images) is dropped and reported.
pub struct TestGroups {
    pub batches: Vec<MultiUserBatch>,
    pub dropped: usize,
}

pub fn group_test(
    set: &ImageSet,
    n_users: usize,
    batch: usize,
    device: &Device,
) -> Result<TestGroups> {
    if n_users == 0 {
        return Err(Error::config("need at least one user".to_string()));
    }
    let per_group = set.len() / n_users;
    let dropped = set.len() - per_group * n_users;
    let mut batches = Vec::new();
    let mut start = 0usize;
    while start < per_group {
        let b = batch.min(per_group - start);
        let mut users = Vec::with_capacity(n_users);
        let mut indices = Vec::with_capacity(n_users);
        for u in 0..n_users {
            let idx: Vec<u32> =
                (0..b).map(|j| (u * per_group + start + j) as u32).collect();
            users.push(set.tensor(&idx, device)?);
            indices.push(idx);
        }
        batches.push(MultiUserBatch { users, indices });
        start += b;
    }
    Ok(TestGroups { batches, dropped })
}

/// Deterministic synthetic RGB images (smooth gradients plus Gaussian color
/// blobs and mild texture) for smoke tests and demos, channel-major bytes.
pub fn synthetic_images(n: usize, height: usize, width: usize, rng: &mut ChaCha12Rng) -> Vec<Vec<u8>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut img = vec![0f32; 3 * height * width];
        // background gradient
        let base: Vec<f32> = (0..3).map(|_| rng.gen::<f32>() * 200.0 + 25.0).collect();
        let gx: Vec<f32> = (0..3).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        let gy: Vec<f32> = (0..3).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    let u = x as f32 / width as f32 - 0.5;
                    let v = y as f32 / height as f32 - 0.5;
                    img[c * height * width + y * width + x] =
                        base[c] + 80.0 * (gx[c] * u + gy[c] * v);
                }
            }
        }
        // blobs
        let blobs = rng.gen_range(2..5);
        for _ in 0..blobs {
            let cx = rng.gen::<f32>() * width as f32;
            let cy = rng.gen::<f32>() * height as f32;
            let r = rng.gen::<f32>() * 0.25 * width as f32 + 0.08 * width as f32;
            let color: Vec<f32> = (0..3).map(|_| rng.gen::<f32>() * 255.0).collect();
            let strength = rng.gen::<f32>() * 0.8 + 0.2;
            for c in 0..3 {
                for y in 0..height {
                    for x in 0..width {
                        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                        let wgt = strength * (-d2 / (2.0 * r * r)).exp();
                        let o = c * height * width + y * width + x;
                        img[o] = img[o] * (1.0 - wgt) + color[c] * wgt;
                    }
                }
            }
        }
        // mild texture
        for v in img.iter_mut() {
            *v += rng.gen::<f32>() * 6.0 - 3.0;
        }
        out.push(img.into_iter().map(|v| v.clamp(0.0, 255.0) as u8).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    fn synth(n: usize) -> Vec<Vec<u8>> {
        let mut rng = SeedStreams::new(99).stream("synth");
        synthetic_images(n, 32, 32, &mut rng)
    }

    #[test]
    fn cifar_archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let train = synth(25);
        let test = synth(10);
        write_cifar10_archive(dir.path(), &train, &test).unwrap();
        let ds = load_cifar10(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 25);
        assert_eq!(ds.test.len(), 10);
        assert_eq!(ds.train.image(0), &train[0][..]);
        assert_eq!(ds.test.image(9), &test[9][..]);
        // stable across two loads
        let ds2 = load_cifar10(dir.path()).unwrap();
        assert_eq!(ds.train.image(0), ds2.train.image(0));
    }

    #[test]
    fn cifar_missing_and_corrupt_archives_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cifar10(dir.path().join("nope")), Err(Error::Ingestion(_))));
        // corrupt: size not a record multiple
        std::fs::write(dir.path().join("data_batch_1.bin"), [0u8; 100]).unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::Ingestion(_))));
    }

    #[test]
    fn image_dir_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        // one solid-color RGB, one grayscale, one undecodable
        let solid = image::RgbImage::from_pixel(64, 64, image::Rgb([10, 200, 30]));
        solid.save(dir.path().join("a.png")).unwrap();
        let gray = image::GrayImage::from_pixel(48, 48, image::Luma([77]));
        gray.save(dir.path().join("b.png")).unwrap();
        std::fs::write(dir.path().join("c.png"), b"not an image").unwrap();

        let (set, skipped) = load_image_dir(dir.path(), (32, 32)).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(skipped, 1);
        // bicubic on a constant image stays that constant
        let a = set.image(0);
        assert!(a[..1024].iter().all(|&v| v == 10));
        assert!(a[1024..2048].iter().all(|&v| v == 200));
        // grayscale replicated across channels
        let b = set.image(1);
        assert!(b.iter().all(|&v| v == 77));
    }

    #[test]
    fn train_grouping_is_seeded_and_shaped() {
        let set = ImageSet::new(synth(40), 32, 32).unwrap();
        let dev = Device::Cpu;
        let streams = SeedStreams::new(7);
        let a = group_train(&set, 2, 4, None, &mut streams.stream("data"), &dev).unwrap();
        let b = group_train(&set, 2, 4, None, &mut streams.stream("data"), &dev).unwrap();
        assert_eq!(a.len(), 5); // 40 / (2*4)
        assert_eq!(a[0].users.len(), 2);
        assert_eq!(a[0].users[0].dims(), &[4, 3, 32, 32]);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.indices, y.indices);
        }
        let c = group_train(&set, 2, 4, None, &mut streams.substream("data", 1), &dev).unwrap();
        assert_ne!(a[0].indices, c[0].indices, "epochs must regroup");
    }

    #[test]
    fn train_grouping_usage_is_near_uniform() {
        let set = ImageSet::new(synth(1000), 32, 32).unwrap();
        let dev = Device::Cpu;
        let mut rng = SeedStreams::new(11).stream("data");
        let batches = group_train(&set, 2, 4, Some(1000), &mut rng, &dev).unwrap();
        let mut counts = vec![0usize; 1000];
        for b in &batches {
            for u in &b.indices {
                for &i in u {
                    counts[i as usize] += 1;
                }
            }
        }
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap().max(&1) as f64;
        assert!(max / min < 2.0, "usage ratio {max}/{min}");
    }

    #[test]
    fn test_grouping_is_disjoint_and_stable() {
        let set = ImageSet::new(synth(101), 32, 32).unwrap();
        let dev = Device::Cpu;
        let g1 = group_test(&set, 2, 16, &dev).unwrap();
        let g2 = group_test(&set, 2, 16, &dev).unwrap();
        assert_eq!(g1.dropped, 1);
        let total: usize = g1.batches.iter().map(|b| b.batch_size()).sum();
        assert_eq!(total, 50);
        for (a, b) in g1.batches.iter().zip(&g2.batches) {
            assert_eq!(a.indices, b.indices);
            assert!(a.users_disjoint());
        }
        // positional pairing: group 1's j-th image is index 50 + j
        assert_eq!(g1.batches[0].indices[1][0], 50);
    }
}
