//! Datasets: synthetic Gaussian blobs, a binary on-disk format, and an IDX
//! loader for grayscale image files.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::numerics::{BoxDomain, RngStream};
use crate::{Error, Result};

use super::io::{Reader, Writer};

const DATASET_MAGIC: &[u8; 4] = b"ADPD";
const DATASET_VERSION: u32 = 1;

/// Labeled feature matrix with its value range and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub box_domain: BoxDomain,
    pub name: String,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.labels.len() {
            return Err(Error::Mismatch(format!(
                "{} rows but {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite feature value".into()));
        }
        if self.box_domain.enabled {
            for row in self.features.axis_iter(Axis(0)) {
                if row
                    .iter()
                    .any(|&v| v < self.box_domain.lo || v > self.box_domain.hi)
                {
                    return Err(Error::Domain(
                        "feature outside the declared box domain".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Serialize to the little-endian binary layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u32(self.classes as u32);
        w.u32(self.features.nrows() as u32);
        w.u32(self.features.ncols() as u32);
        w.u8(u8::from(self.box_domain.enabled));
        w.f64(self.box_domain.lo);
        w.f64(self.box_domain.hi);
        w.u64(self.seed);
        w.str(&self.name);
        for v in self.features.iter() {
            w.f64(*v);
        }
        for &y in &self.labels {
            w.u32(y as u32);
        }
        fs::write(path, w.into_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path)?;
        let mut r = Reader::new(&bytes);
        let magic = r.bytes(4)?;
        if magic != DATASET_MAGIC {
            return Err(Error::Format(format!(
                "{} is not a dataset file (bad magic)",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "dataset version {version} unsupported, reader expects {DATASET_VERSION}"
            )));
        }
        let classes = r.u32()? as usize;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let enabled = r.u8()? != 0;
        let lo = r.f64()?;
        let hi = r.f64()?;
        let seed = r.u64()?;
        let name = r.str()?;
        let mut feats = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            feats.push(r.f64()?);
        }
        let mut labels = Vec::with_capacity(rows);
        for _ in 0..rows {
            labels.push(r.u32()? as usize);
        }
        r.finish()?;
        let box_domain = if enabled {
            BoxDomain::new(lo, hi)?
        } else {
            BoxDomain::disabled()
        };
        let ds = Dataset {
            features: Array2::from_shape_vec((rows, cols), feats)
                .map_err(|e| Error::Format(format!("feature block malformed: {e}")))?,
            labels,
            classes,
            box_domain,
            name,
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Balanced Gaussian blobs: `k` centers on a seeded random sphere of radius
/// `separation`, `n_per_blob` points per center at per-coordinate std
/// `noise_std`, labels equal to the blob index.
pub fn gen_synthetic(
    k: usize,
    dim: usize,
    n_per_blob: usize,
    separation: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::Domain(format!("need at least 2 blobs, got {k}")));
    }
    if dim == 0 || n_per_blob == 0 {
        return Err(Error::Domain(format!(
            "dimension and per-blob count must be positive, got dim={dim}, n={n_per_blob}"
        )));
    }
    if !(separation >= 0.0) || !(noise_std >= 0.0) {
        return Err(Error::Domain(
            "separation and noise std must be non-negative".into(),
        ));
    }
    let mut center_rng = RngStream::derive(seed, 0xce27);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let raw: Vec<f64> = (0..dim).map(|_| center_rng.next_gaussian()).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            raw.iter().map(|v| v / norm * separation).collect()
        })
        .collect();
    let mut noise_rng = RngStream::derive(seed, 0x015e);
    let mut features = Array2::zeros((k * n_per_blob, dim));
    let mut labels = Vec::with_capacity(k * n_per_blob);
    for (b, center) in centers.iter().enumerate() {
        for i in 0..n_per_blob {
            let row = b * n_per_blob + i;
            for (j, &c) in center.iter().enumerate() {
                features[[row, j]] = c + noise_std * noise_rng.next_gaussian();
            }
            labels.push(b);
        }
    }
    Ok(Dataset {
        features,
        labels,
        classes: k,
        box_domain: BoxDomain::disabled(),
        name: format!("blobs-k{k}-d{dim}"),
        seed,
    })
}

/// Independent seeded points on the sphere of radius `separation`.
fn random_sphere_centers(k: usize, dims: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RngStream::derive(seed, 0xce27);
    (0..k)
        .map(|_| {
            let raw: Vec<f64> = (0..dims).map(|_| rng.next_gaussian()).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            raw.iter().map(|v| v / norm * separation).collect()
        })
        .collect()
}

/// Randomly oriented regular-simplex vertices on the sphere of radius
/// `separation` in `dims` coordinates (requires `k <= dims`); falls back to
/// independent sphere points for larger `k`. Equal mutual distances keep the
/// class geometry comparable across seeds.
fn simplex_centers(k: usize, dims: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RngStream::derive(seed, 0xce27);
    if k > dims {
        return (0..k)
            .map(|_| {
                let raw: Vec<f64> = (0..dims).map(|_| rng.next_gaussian()).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                raw.iter().map(|v| v / norm * separation).collect()
            })
            .collect();
    }
    // simplex vertices: e_i minus their centroid, living in a k-dim slice
    let span = k.min(dims);
    let mut vertices = vec![vec![0.0; dims]; k];
    for (i, v) in vertices.iter_mut().enumerate() {
        for j in 0..span {
            v[j] = f64::from(u8::from(i == j)) - 1.0 / k as f64;
        }
    }
    let scale = {
        let norm = vertices[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        separation / norm
    };
    // random orthogonal rotation of the subspace via Gram-Schmidt
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dims);
    for _ in 0..dims {
        let mut cand: Vec<f64> = (0..dims).map(|_| rng.next_gaussian()).collect();
        for prev in &basis {
            let dot: f64 = cand.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (c, p) in cand.iter_mut().zip(prev) {
                *c -= dot * p;
            }
        }
        let norm = cand.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        cand.iter_mut().for_each(|v| *v /= norm);
        basis.push(cand);
    }
    vertices
        .into_iter()
        .map(|v| {
            (0..dims)
                .map(|out| {
                    (0..dims).map(|inp| basis[inp][out] * v[inp] * scale).sum()
                })
                .collect()
        })
        .collect()
}

/// Blobs confined to a low-dimensional coordinate subspace: centers sit on a
/// seeded random sphere of radius `separation` within the first
/// `manifold_dims` coordinates, per-point noise has std `noise_std` inside
/// the subspace and `off_plane_std` outside it. Off-subspace directions are
/// where purification has the most to remove, mirroring how natural-image
/// perturbations leave the data manifold.
#[allow(clippy::too_many_arguments)]
pub fn gen_manifold_blobs(
    k: usize,
    dim: usize,
    manifold_dims: usize,
    n_per_blob: usize,
    separation: f64,
    noise_std: f64,
    off_plane_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if manifold_dims == 0 || manifold_dims > dim {
        return Err(Error::Domain(format!(
            "manifold dims must lie in 1..={dim}, got {manifold_dims}"
        )));
    }
    if k < 2 {
        return Err(Error::Domain(format!("need at least 2 blobs, got {k}")));
    }
    if n_per_blob == 0 {
        return Err(Error::Domain("per-blob count must be positive".into()));
    }
    if !(separation >= 0.0) || !(noise_std >= 0.0) || !(off_plane_std >= 0.0) {
        return Err(Error::Domain(
            "separation and noise levels must be non-negative".into(),
        ));
    }
    let centers = random_sphere_centers(k, manifold_dims, separation, seed);
    let mut noise_rng = RngStream::derive(seed, 0x015e);
    let mut features = Array2::zeros((k * n_per_blob, dim));
    let mut labels = Vec::with_capacity(k * n_per_blob);
    for (b, center) in centers.iter().enumerate() {
        for i in 0..n_per_blob {
            let row = b * n_per_blob + i;
            for j in 0..dim {
                features[[row, j]] = if j < manifold_dims {
                    center[j] + noise_std * noise_rng.next_gaussian()
                } else {
                    off_plane_std * noise_rng.next_gaussian()
                };
            }
            labels.push(b);
        }
    }
    Ok(Dataset {
        features,
        labels,
        classes: k,
        box_domain: BoxDomain::disabled(),
        name: format!("blobs-k{k}-d{dim}-m{manifold_dims}"),
        seed,
    })
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Load a big-endian IDX image/label pair. With `normalize` the pixel values
/// scale into `[0, 1]` and the box domain is the unit box; otherwise raw
/// byte values with box `[0, 255]`.
pub fn load_idx(images_path: &Path, labels_path: &Path, normalize: bool) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let mut r = Reader::new(&img_bytes);
    let magic = r.u32_be()?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let dim = rows * cols;
    let pixels = r.bytes(count * dim)?;
    r.finish()?;

    let lbl_bytes = fs::read(labels_path)?;
    let mut r = Reader::new(&lbl_bytes);
    let magic = r.u32_be()?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let label_count = r.u32_be()? as usize;
    if label_count != count {
        return Err(Error::Mismatch(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let label_bytes = r.bytes(label_count)?;
    r.finish()?;

    let scale = if normalize { 1.0 / 255.0 } else { 1.0 };
    let features = Array2::from_shape_fn((count, dim), |(i, j)| {
        pixels[i * dim + j] as f64 * scale
    });
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let ds = Dataset {
        features,
        labels,
        classes,
        box_domain: if normalize {
            BoxDomain::unit()
        } else {
            BoxDomain::new(0.0, 255.0)?
        },
        name: images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
        seed: 0,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx_images(path: &Path, magic: u32, images: &[Vec<u8>], rows: u32, cols: u32) {
        let mut out = Vec::new();
        out.extend_from_slice(&magic.to_be_bytes());
        out.extend_from_slice(&(images.len() as u32).to_be_bytes());
        out.extend_from_slice(&rows.to_be_bytes());
        out.extend_from_slice(&cols.to_be_bytes());
        for img in images {
            out.extend_from_slice(img);
        }
        fs::write(path, out).unwrap();
    }

    fn write_idx_labels(path: &Path, magic: u32, labels: &[u8]) {
        let mut out = Vec::new();
        out.extend_from_slice(&magic.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        fs::write(path, out).unwrap();
    }

    #[test]
    fn synthetic_is_balanced() {
        let ds = gen_synthetic(2, 3, 50, 4.0, 0.2, 9).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.labels.iter().filter(|&&y| y == 0).count(), 50);
        assert_eq!(ds.labels.iter().filter(|&&y| y == 1).count(), 50);
        ds.validate().unwrap();
    }

    #[test]
    fn synthetic_zero_noise_sits_on_centers() {
        let ds = gen_synthetic(3, 4, 5, 2.0, 0.0, 1).unwrap();
        for b in 0..3 {
            let first = ds.features.row(b * 5).to_owned();
            // every row of the blob equals its center
            for i in 0..5 {
                assert_eq!(ds.features.row(b * 5 + i), first.view());
            }
            // centers lie on the sphere of radius 2
            let norm = first.dot(&first).sqrt();
            assert!((norm - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = gen_synthetic(4, 16, 10, 6.0, 0.3, 7).unwrap();
        let b = gen_synthetic(4, 16, 10, 6.0, 0.3, 7).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(4, 16, 10, 6.0, 0.3, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_rejects_bad_counts() {
        assert!(gen_synthetic(1, 4, 10, 1.0, 0.1, 0).is_err());
        assert!(gen_synthetic(2, 0, 10, 1.0, 0.1, 0).is_err());
        assert!(gen_synthetic(2, 4, 0, 1.0, 0.1, 0).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = gen_synthetic(3, 5, 7, 3.0, 0.4, 11).unwrap();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn dataset_save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        gen_synthetic(2, 4, 6, 2.0, 0.1, 7).unwrap().save(&p1).unwrap();
        gen_synthetic(2, 4, 6, 2.0, 0.1, 7).unwrap().save(&p2).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn dataset_load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"NOPE00000000").unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn idx_round_trip_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("im.idx"), dir.path().join("lb.idx"));
        write_idx_images(&ip, IDX_IMAGE_MAGIC, &[vec![0u8; 4], vec![255u8; 4]], 2, 2);
        write_idx_labels(&lp, IDX_LABEL_MAGIC, &[0, 1]);
        let ds = load_idx(&ip, &lp, true).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert!(ds.features.row(0).iter().all(|&v| v == 0.0));
        assert!(ds.features.row(1).iter().all(|&v| v == 1.0));
        assert_eq!(ds.box_domain, BoxDomain::unit());
    }

    #[test]
    fn idx_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("im.idx"), dir.path().join("lb.idx"));
        // label magic in the image slot
        write_idx_images(&ip, IDX_LABEL_MAGIC, &[vec![0u8; 4]], 2, 2);
        write_idx_labels(&lp, IDX_LABEL_MAGIC, &[0]);
        assert!(matches!(load_idx(&ip, &lp, true), Err(Error::Format(_))));
        // image magic in the label slot
        write_idx_images(&ip, IDX_IMAGE_MAGIC, &[vec![0u8; 4]], 2, 2);
        write_idx_labels(&lp, IDX_IMAGE_MAGIC, &[0]);
        assert!(matches!(load_idx(&ip, &lp, true), Err(Error::Format(_))));
    }

    #[test]
    fn idx_rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("im.idx"), dir.path().join("lb.idx"));
        write_idx_images(&ip, IDX_IMAGE_MAGIC, &[vec![0u8; 4], vec![1u8; 4]], 2, 2);
        write_idx_labels(&lp, IDX_LABEL_MAGIC, &[0]);
        assert!(matches!(load_idx(&ip, &lp, true), Err(Error::Mismatch(_))));
    }

    #[test]
    fn idx_rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("im.idx"), dir.path().join("lb.idx"));
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        out.extend_from_slice(&2u32.to_be_bytes());
        out.extend_from_slice(&2u32.to_be_bytes());
        out.extend_from_slice(&2u32.to_be_bytes());
        out.extend_from_slice(&[0u8; 3]); // needs 8 pixel bytes
        fs::write(&ip, out).unwrap();
        write_idx_labels(&lp, IDX_LABEL_MAGIC, &[0, 1]);
        assert!(matches!(load_idx(&ip, &lp, true), Err(Error::Truncated(_))));
    }

    #[test]
    fn idx_header_mutations_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("im.idx"), dir.path().join("lb.idx"));
        write_idx_images(&ip, IDX_IMAGE_MAGIC, &[vec![7u8; 4]], 2, 2);
        write_idx_labels(&lp, IDX_LABEL_MAGIC, &[1]);
        let good = fs::read(&ip).unwrap();
        // flip each byte of the 8-byte (magic, count) header prefix
        for i in 0..8 {
            let mut bad = good.clone();
            bad[i] ^= 0xFF;
            fs::write(&ip, &bad).unwrap();
            assert!(
                load_idx(&ip, &lp, true).is_err(),
                "mutation at byte {i} accepted"
            );
        }
    }
}
