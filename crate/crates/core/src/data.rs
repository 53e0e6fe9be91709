//! Dataset ingestion (IDX and CIFAR-10 binary), normalization, crop/flip
//! augmentation, and input-current encoding.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::Encoded;

/// Images in [0,1] (pre-normalization) with class labels.
#[derive(Debug, Clone)]
pub struct Dataset<F: Scalar> {
    pub images: Tensor<F>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<F: Scalar> Dataset<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (C, H, W) of a single image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// First `limit` examples (whole set if `limit` is zero or larger).
    pub fn take(&self, limit: usize) -> Result<Dataset<F>> {
        if limit == 0 || limit >= self.len() {
            return Ok(self.clone());
        }
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        let images = Tensor::from_vec(
            vec![limit, c, h, w],
            self.images.data()[..limit * per].to_vec(),
        )?;
        Ok(Dataset {
            images,
            labels: self.labels[..limit].to_vec(),
            num_classes: self.num_classes,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.images.shape().len() != 4 || self.images.shape()[0] != self.labels.len() {
            return Err(Error::Format(format!(
                "{} labels for image tensor {:?}",
                self.labels.len(),
                self.images.shape()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Format(format!(
                "label {l} outside {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

fn be_u32(bytes: &[u8], off: usize) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("header truncated".into()))
}

const INV255: f64 = 1.0 / 255.0;

/// Parse an IDX image/label file pair (big-endian magic 2051 / 2049).
pub fn load_mnist_idx<F: Scalar>(
    images_path: &Path,
    labels_path: &Path,
) -> Result<Dataset<F>> {
    let ib = fs::read(images_path)?;
    let lb = fs::read(labels_path)?;

    let magic_i = be_u32(&ib, 0)?;
    if magic_i != 2051 {
        return Err(Error::Format(format!(
            "image magic {magic_i} (want 2051) in {}",
            images_path.display()
        )));
    }
    let n = be_u32(&ib, 4)? as usize;
    let h = be_u32(&ib, 8)? as usize;
    let w = be_u32(&ib, 12)? as usize;
    let payload = &ib[16..];
    if payload.len() != n * h * w {
        return Err(Error::Format(format!(
            "image payload {} bytes for {n}x{h}x{w}",
            payload.len()
        )));
    }

    let magic_l = be_u32(&lb, 0)?;
    if magic_l != 2049 {
        return Err(Error::Format(format!(
            "label magic {magic_l} (want 2049) in {}",
            labels_path.display()
        )));
    }
    let nl = be_u32(&lb, 4)? as usize;
    if nl != n {
        return Err(Error::Format(format!("{n} images but {nl} labels")));
    }
    let lpayload = &lb[8..];
    if lpayload.len() != nl {
        return Err(Error::Format(format!(
            "label payload {} bytes for {nl} labels",
            lpayload.len()
        )));
    }

    let data: Vec<F> = payload
        .iter()
        .map(|&b| F::from_f64(b as f64 * INV255))
        .collect();
    let ds = Dataset {
        images: Tensor::from_vec(vec![n, 1, h, w], data)?,
        labels: lpayload.iter().map(|&b| b as usize).collect(),
        num_classes: 10,
    };
    ds.validate()?;
    Ok(ds)
}

/// Parse CIFAR-10 binary batches: 3073-byte records of one label byte plus
/// channel-planar 3x32x32 pixels.
pub fn load_cifar10_bin<F: Scalar>(paths: &[impl AsRef<Path>]) -> Result<Dataset<F>> {
    const REC: usize = 3073;
    const PIX: usize = 3 * 32 * 32;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let bytes = fs::read(p.as_ref())?;
        if bytes.is_empty() || bytes.len() % REC != 0 {
            return Err(Error::Format(format!(
                "{} is {} bytes, not a multiple of {REC}",
                p.as_ref().display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(REC) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::Format(format!("label byte {label} > 9")));
            }
            labels.push(label);
            images.extend(rec[1..].iter().map(|&b| F::from_f64(b as f64 * INV255)));
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Format("no CIFAR-10 records".into()));
    }
    debug_assert_eq!(images.len(), n * PIX);
    let ds = Dataset {
        images: Tensor::from_vec(vec![n, 3, 32, 32], images)?,
        labels,
        num_classes: 10,
    };
    ds.validate()?;
    Ok(ds)
}

/// Re-serialize one image + label back into CIFAR-10 record bytes
/// (round-trip check support).
pub fn cifar10_record_bytes<F: Scalar>(image: &[F], label: usize) -> Vec<u8> {
    let mut rec = Vec::with_capacity(1 + image.len());
    rec.push(label as u8);
    rec.extend(image.iter().map(|&v| (v.to_f64() * 255.0).round() as u8));
    rec
}

/// (x - mean) / std per channel.
pub fn normalize<F: Scalar>(images: &Tensor<F>, mean: &[F], std: &[F]) -> Result<Tensor<F>> {
    let s = images.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("normalize on rank-{}", s.len())));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    if mean.len() != c || std.len() != c {
        return Err(Error::Shape(format!(
            "{} channel stats for {c} channels",
            mean.len()
        )));
    }
    if std.iter().any(|&v| v <= F::ZERO) {
        return Err(Error::Contract("non-positive normalization std".into()));
    }
    let mut out = images.clone();
    {
        let d = out.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let inv = F::ONE / std[ci];
                let m = mean[ci];
                let base = (ni * c + ci) * hw;
                for v in &mut d[base..base + hw] {
                    *v = (*v - m) * inv;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of `normalize`.
pub fn denormalize<F: Scalar>(images: &Tensor<F>, mean: &[F], std: &[F]) -> Result<Tensor<F>> {
    let s = images.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("denormalize on rank-{}", s.len())));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    if mean.len() != c || std.len() != c {
        return Err(Error::Shape(format!(
            "{} channel stats for {c} channels",
            mean.len()
        )));
    }
    let mut out = images.clone();
    {
        let d = out.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for v in &mut d[base..base + hw] {
                    *v = *v * std[ci] + mean[ci];
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentPolicy {
    None,
    CropFlip,
}

/// Random 4-pixel-reflection-pad crop plus horizontal flip, decided per
/// sample from the supplied stream. Output shape equals input shape.
pub fn augment<F: Scalar>(
    images: &Tensor<F>,
    policy: AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    match policy {
        AugmentPolicy::None => Ok(images.clone()),
        AugmentPolicy::CropFlip => crop_flip(images, rng),
    }
}

const PAD: usize = 4;

fn crop_flip<F: Scalar>(images: &Tensor<F>, rng: &mut ChaCha8Rng) -> Result<Tensor<F>> {
    let s = images.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("augment on rank-{}", s.len())));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h <= PAD || w <= PAD {
        return Err(Error::Shape(format!("{h}x{w} too small for {PAD}px padding")));
    }
    let mut out = images.clone();
    let src = images.data();
    let dst = out.data_mut();
    // Reflection indexing into the padded coordinate system: padded index p
    // maps to source index reflect(p - PAD) without repeating the edge pixel.
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= len {
            i = 2 * (len - 1) - i;
        }
        i as usize
    };
    for ni in 0..n {
        let dy = rng.gen_range(0..=2 * PAD) as isize - PAD as isize;
        let dx = rng.gen_range(0..=2 * PAD) as isize - PAD as isize;
        let flip: bool = rng.gen();
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for y in 0..h {
                let sy = reflect(y as isize + dy, h);
                for x in 0..w {
                    let ix = if flip { w - 1 - x } else { x };
                    let sx = reflect(ix as isize + dx, w);
                    dst[base + y * w + x] = src[base + sy * w + sx];
                }
            }
        }
    }
    Ok(out)
}

/// Constant-current (direct) coding: the normalized image at every step.
pub fn encode_direct<F: Scalar>(normalized: &Tensor<F>) -> Encoded<F> {
    Encoded::Constant(normalized.clone())
}

/// Bernoulli rate coding on [0,1] intensities: spike with probability equal
/// to the pixel value, independently per step.
pub fn encode_rate_poisson<F: Scalar>(
    raw01: &Tensor<F>,
    t_steps: usize,
    seed: u64,
) -> Result<Encoded<F>> {
    if t_steps == 0 {
        return Err(Error::Contract("encoding over zero steps".into()));
    }
    if raw01
        .data()
        .iter()
        .any(|&v| v < F::ZERO || v > F::ONE || !v.is_finite())
    {
        return Err(Error::Contract(
            "rate coding needs intensities in [0,1]".into(),
        ));
    }
    let mut r = rng::stream(seed, "poisson");
    let mut steps = Vec::with_capacity(t_steps);
    for _ in 0..t_steps {
        let data: Vec<F> = raw01
            .data()
            .iter()
            .map(|&p| {
                let u: f64 = r.gen::<f64>();
                if u < p.to_f64() {
                    F::ONE
                } else {
                    F::ZERO
                }
            })
            .collect();
        steps.push(Tensor::from_vec(raw01.shape().to_vec(), data)?);
    }
    Ok(Encoded::PerStep(steps))
}

/// Deterministic per-epoch shuffle split into batches; the trailing partial
/// batch is kept.
pub fn epoch_batches(seed: u64, epoch: usize, n: usize, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("zero batch size".into()));
    }
    let mut r = rng::substream(seed, "data", epoch as u64);
    let idx = rng::shuffled_indices(&mut r, n);
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Assemble a batch (images, labels) from dataset indices.
pub fn gather<F: Scalar>(ds: &Dataset<F>, indices: &[usize]) -> Result<(Tensor<F>, Vec<usize>)> {
    let (c, h, w) = ds.image_shape();
    let per = c * h * w;
    let mut data = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= ds.len() {
            return Err(Error::Contract(format!(
                "index {i} outside dataset of {}",
                ds.len()
            )));
        }
        data.extend_from_slice(&ds.images.data()[i * per..(i + 1) * per]);
        labels.push(ds.labels[i]);
    }
    Ok((
        Tensor::from_vec(vec![indices.len(), c, h, w], data)?,
        labels,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_pair(dir: &Path, n: usize, h: usize, w: usize, corrupt: Option<&str>) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lbl");
        let mut ib: Vec<u8> = Vec::new();
        let magic = if corrupt == Some("magic") { 1234u32 } else { 2051 };
        ib.extend(magic.to_be_bytes());
        ib.extend((n as u32).to_be_bytes());
        ib.extend((h as u32).to_be_bytes());
        ib.extend((w as u32).to_be_bytes());
        let mut pix = (0..n * h * w).map(|i| (i % 256) as u8).collect::<Vec<_>>();
        pix[0] = 255;
        if corrupt == Some("truncate") {
            pix.pop();
        }
        ib.extend(&pix);
        fs::File::create(&ip).unwrap().write_all(&ib).unwrap();
        let mut lb: Vec<u8> = Vec::new();
        lb.extend(2049u32.to_be_bytes());
        lb.extend((n as u32).to_be_bytes());
        lb.extend((0..n).map(|i| (i % 10) as u8));
        fs::File::create(&lp).unwrap().write_all(&lb).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_loader_parses_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_pair(dir.path(), 4, 5, 5, None);
        let ds = load_mnist_idx::<f64>(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.image_shape(), (1, 5, 5));
        assert_eq!(ds.images.data()[0], 1.0); // byte 255 -> 1.0
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn idx_loader_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_pair(dir.path(), 2, 3, 3, Some("magic"));
        assert!(matches!(load_mnist_idx::<f64>(&ip, &lp), Err(Error::Format(_))));
        let (ip, lp) = idx_pair(dir.path(), 2, 3, 3, Some("truncate"));
        assert!(matches!(load_mnist_idx::<f64>(&ip, &lp), Err(Error::Format(_))));
    }

    #[test]
    fn bundled_mnist_loads_with_expected_shapes() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
        if !root.exists() {
            return;
        }
        let train = load_mnist_idx::<f32>(
            &root.join("train-images-idx3-ubyte"),
            &root.join("train-labels-idx1-ubyte"),
        )
        .unwrap();
        let test = load_mnist_idx::<f32>(
            &root.join("t10k-images-idx3-ubyte"),
            &root.join("t10k-labels-idx1-ubyte"),
        )
        .unwrap();
        assert_eq!(train.image_shape(), (1, 28, 28));
        assert!(train.len() >= 4096, "train split has {}", train.len());
        assert_eq!(test.len(), 2000);
        // The bundled test split is class-balanced.
        let mut counts = [0usize; 10];
        for &l in &test.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 200), "{counts:?}");
    }

    #[test]
    fn cifar_loader_parses_records_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut bytes = Vec::new();
        for rec in 0..3u8 {
            bytes.push(rec); // label
            bytes.extend((0..3072).map(|i| ((i + rec as usize * 7) % 256) as u8));
        }
        fs::File::create(&p).unwrap().write_all(&bytes).unwrap();
        let ds = load_cifar10_bin::<f64>(&[&p]).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.image_shape(), (3, 32, 32));
        // Re-serialize the second record and compare bytes.
        let per = 3072;
        let img = &ds.images.data()[per..2 * per];
        let rec = cifar10_record_bytes(img, ds.labels[1]);
        assert_eq!(rec, bytes[3073..2 * 3073].to_vec());

        // Size not divisible by the record stride.
        let bad = dir.path().join("bad.bin");
        fs::File::create(&bad).unwrap().write_all(&bytes[..100]).unwrap();
        assert!(matches!(load_cifar10_bin::<f64>(&[&bad]), Err(Error::Format(_))));

        // Label byte out of range.
        let lbl = dir.path().join("lbl.bin");
        let mut b2 = bytes[..3073].to_vec();
        b2[0] = 11;
        fs::File::create(&lbl).unwrap().write_all(&b2).unwrap();
        assert!(matches!(load_cifar10_bin::<f64>(&[&lbl]), Err(Error::Format(_))));
    }

    #[test]
    fn normalize_hand_values_and_round_trip() {
        let x = Tensor::from_vec(vec![1, 1, 1, 2], vec![0.5f64, 0.25]).unwrap();
        let y = normalize(&x, &[0.5], &[0.25]).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], -1.0);
        let ident = normalize(&x, &[0.0], &[1.0]).unwrap();
        assert_eq!(ident.data(), x.data());
        let back = denormalize(&y, &[0.5], &[0.25]).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(matches!(
            normalize(&x, &[0.0], &[0.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn augment_none_is_identity_and_crop_flip_preserves_shape() {
        let mut r = rng::stream(3, "data");
        let x =
            Tensor::from_vec(vec![2, 1, 8, 8], rng::uniform_vec::<f64>(&mut r, 128, 0.0, 1.0))
                .unwrap();
        let mut ar = rng::stream(4, "augment");
        let same = augment(&x, AugmentPolicy::None, &mut ar).unwrap();
        assert_eq!(same.data(), x.data());
        let crop = augment(&x, AugmentPolicy::CropFlip, &mut ar).unwrap();
        assert_eq!(crop.shape(), x.shape());
        // Deterministic under a fixed stream.
        let mut ar1 = rng::stream(5, "augment");
        let mut ar2 = rng::stream(5, "augment");
        let a = augment(&x, AugmentPolicy::CropFlip, &mut ar1).unwrap();
        let b = augment(&x, AugmentPolicy::CropFlip, &mut ar2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let mut r = rng::stream(6, "data");
        let x =
            Tensor::from_vec(vec![1, 1, 6, 6], rng::uniform_vec::<f64>(&mut r, 36, 0.0, 1.0))
                .unwrap();
        let flip = |t: &Tensor<f64>| {
            let mut o = t.clone();
            let (h, w) = (6, 6);
            let src = t.data();
            let d = o.data_mut();
            for y in 0..h {
                for xx in 0..w {
                    d[y * w + xx] = src[y * w + (w - 1 - xx)];
                }
            }
            o
        };
        let twice = flip(&flip(&x));
        assert_eq!(twice.data(), x.data());
    }

    #[test]
    fn direct_encoding_replicates_and_means_exactly() {
        let x = Tensor::from_vec(vec![1, 1, 1, 1], vec![0.7f64]).unwrap();
        let enc = encode_direct(&x);
        for t in 0..4 {
            assert_eq!(enc.at(t).data()[0], 0.7);
        }
        let m = enc.mean(4).unwrap();
        assert_eq!(m.data()[0].to_bits(), 0.7f64.to_bits());
    }

    #[test]
    fn poisson_endpoints_and_law_of_large_numbers() {
        let x = Tensor::from_vec(vec![1, 1, 1, 3], vec![0.0f64, 1.0, 0.5]).unwrap();
        let t_steps = 10_000;
        let enc = encode_rate_poisson(&x, t_steps, 42).unwrap();
        let mut sums = [0.0f64; 3];
        for t in 0..t_steps {
            let d = enc.at(t).data();
            assert!(d.iter().all(|&v| v == 0.0 || v == 1.0));
            for (s, &v) in sums.iter_mut().zip(d) {
                *s += v;
            }
        }
        assert_eq!(sums[0], 0.0);
        assert_eq!(sums[1], t_steps as f64);
        let rate = sums[2] / t_steps as f64;
        assert!((rate - 0.5).abs() < 0.02, "empirical rate {rate}");

        let bad = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.5f64]).unwrap();
        assert!(matches!(
            encode_rate_poisson(&bad, 2, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn epoch_batches_are_deterministic_permutations() {
        let a = epoch_batches(7, 0, 10, 3).unwrap();
        let b = epoch_batches(7, 0, 10, 3).unwrap();
        assert_eq!(a, b);
        let c = epoch_batches(7, 1, 10, 3).unwrap();
        assert_ne!(a, c, "different epochs share an order");
        let mut all: Vec<usize> = a.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(epoch_batches(7, 0, 10, 0).is_err());
    }

    #[test]
    fn gather_assembles_batches_and_take_limits() {
        let images = Tensor::from_vec(vec![3, 1, 1, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let ds = Dataset::<f64> {
            images,
            labels: vec![0, 1, 2],
            num_classes: 3,
        };
        let (x, l) = gather(&ds, &[2, 0]).unwrap();
        assert_eq!(x.data(), &[4., 5., 0., 1.]);
        assert_eq!(l, vec![2, 0]);
        assert!(gather(&ds, &[3]).is_err());
        let t = ds.take(2).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.images.data(), &[0., 1., 2., 3.]);
    }
}
