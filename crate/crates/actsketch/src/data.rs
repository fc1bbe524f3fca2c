//! Dataset ingestion: IDX files and synthetic generators.
//!
//! The IDX format is the classic big-endian container used by the MNIST
//! distribution: a 32-bit magic (`0x0000_0801` for 1-D label files,
//! `0x0000_0803` for 3-D image files), one big-endian u32 per dimension,
//! then raw unsigned bytes in row-major order. Files may be gzip
//! compressed (`.gz`); decompression is transparent in [`load_idx_file`].
//!
//! Synthetic datasets have a controlled spectrum: inputs are latent
//! Gaussian factors pushed through a fixed mixing matrix, so their numeric
//! rank equals the latent rank. Classification labels come from a linear
//! teacher acting on the latent factors with orthonormalized class
//! directions, which keeps the class priors uniform; regression targets
//! come from a linear teacher on the latents.

use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::control::gaussian_matrix;
use crate::error::{Error, Result};

/// A decoded IDX tensor of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxData {
    /// Dimension sizes, outermost first.
    pub dims: Vec<usize>,
    /// Row-major payload.
    pub data: Vec<u8>,
}

/// Parses an IDX byte stream.
///
/// Accepts unsigned-byte tensors of 1 to 3 dimensions (magic
/// `0x0000_0801` ..= `0x0000_0803`) and validates the payload length
/// exactly.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.len() < 4 {
        return Err(Error::Data("IDX header truncated".into()));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(Error::Data(format!("bad IDX magic 0x{magic:08x} (expected unsigned-byte type 0x08)")));
    }
    let ndims = bytes[3] as usize;
    if !(1..=3).contains(&ndims) {
        return Err(Error::Data(format!("unsupported IDX dimension count {ndims}")));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Data("IDX header truncated".into()));
    }
    let mut dims = Vec::with_capacity(ndims);
    let mut total: usize = 1;
    for d in 0..ndims {
        let off = 4 + 4 * d;
        let n = u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]) as usize;
        total = total
            .checked_mul(n)
            .ok_or_else(|| Error::Data("IDX dimension overflow".into()))?;
        dims.push(n);
    }
    let payload = &bytes[header..];
    if payload.len() < total {
        return Err(Error::Data(format!(
            "truncated payload: header declares {total} bytes, {} present",
            payload.len()
        )));
    }
    if payload.len() > total {
        return Err(Error::Data(format!(
            "trailing bytes: header declares {total} bytes, {} present",
            payload.len()
        )));
    }
    Ok(IdxData { dims, data: payload.to_vec() })
}

/// Re-encodes a tensor in IDX format; inverse of [`parse_idx`].
pub fn encode_idx(idx: &IdxData) -> Result<Vec<u8>> {
    if !(1..=3).contains(&idx.dims.len()) {
        return Err(Error::Data(format!("unsupported IDX dimension count {}", idx.dims.len())));
    }
    let total: usize = idx.dims.iter().product();
    if total != idx.data.len() {
        return Err(Error::Data("IDX payload length disagrees with dims".into()));
    }
    let mut out = Vec::with_capacity(4 + 4 * idx.dims.len() + idx.data.len());
    out.extend_from_slice(&[0, 0, 0x08, idx.dims.len() as u8]);
    for &d in &idx.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&idx.data);
    Ok(out)
}

/// Reads and parses an IDX file, gunzipping when the path ends in `.gz`.
pub fn load_idx_file(path: &Path) -> Result<IdxData> {
    let raw = std::fs::read(path).map_err(|e| {
        Error::Data(format!("cannot read {}: {e}", path.display()))
    })?;
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        let mut dec = flate2::read::GzDecoder::new(raw.as_slice());
        let mut out = Vec::new();
        dec.read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("cannot gunzip {}: {e}", path.display())))?;
        out
    } else {
        raw
    };
    parse_idx(&bytes)
}

/// Targets attached to a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetTargets {
    Labels { y: Vec<usize>, classes: usize },
    Values(DMatrix<f64>),
}

/// An in-memory dataset: inputs as rows, plus labels or regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub targets: DatasetTargets,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    /// Output dimension a network must produce for these targets.
    pub fn output_dim(&self) -> usize {
        match &self.targets {
            DatasetTargets::Labels { classes, .. } => *classes,
            DatasetTargets::Values(v) => v.ncols(),
        }
    }

    /// Row subset by index order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(indices.len(), self.x.ncols(), |i, j| self.x[(indices[i], j)]);
        let targets = match &self.targets {
            DatasetTargets::Labels { y, classes } => DatasetTargets::Labels {
                y: indices.iter().map(|&i| y[i]).collect(),
                classes: *classes,
            },
            DatasetTargets::Values(v) => {
                DatasetTargets::Values(DMatrix::from_fn(indices.len(), v.ncols(), |i, j| v[(indices[i], j)]))
            }
        };
        Dataset { x, targets, name: self.name.clone() }
    }
}

const MNIST_FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte", "train images"),
    ("train-labels-idx1-ubyte", "train labels"),
    ("t10k-images-idx3-ubyte", "test images"),
    ("t10k-labels-idx1-ubyte", "test labels"),
];

/// Text shown when MNIST files are absent; no downloads are attempted.
pub fn mnist_instructions(dir: &Path) -> String {
    format!(
        "MNIST IDX files not found under {}.\n\
         Supply the four standard files (optionally gzipped):\n\
         \x20 train-images-idx3-ubyte[.gz]\n\
         \x20 train-labels-idx1-ubyte[.gz]\n\
         \x20 t10k-images-idx3-ubyte[.gz]\n\
         \x20 t10k-labels-idx1-ubyte[.gz]\n\
         They are distributed at https://yann.lecun.com/exdb/mnist/ and \
         mirrored at https://ossci-datasets.s3.amazonaws.com/mnist/. \
         Download them yourself and point --config's mnist_dir (or the \
         MNIST_DIR environment variable) at the directory.",
        dir.display()
    )
}

fn find_idx(dir: &Path, stem: &str) -> Option<std::path::PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Some(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Some(gz);
    }
    None
}

/// Loads MNIST train/test datasets from IDX files in `dir`, truncated to
/// the first `train_n` / `test_n` samples. Pixels are scaled to `[0, 1]`.
pub fn load_mnist(dir: &Path, train_n: usize, test_n: usize) -> Result<(Dataset, Dataset)> {
    for (stem, _) in MNIST_FILES {
        if find_idx(dir, stem).is_none() {
            return Err(Error::Data(mnist_instructions(dir)));
        }
    }
    let load_pair = |img_stem: &str, lbl_stem: &str, take: usize, name: &str| -> Result<Dataset> {
        let images = load_idx_file(&find_idx(dir, img_stem).unwrap())?;
        let labels = load_idx_file(&find_idx(dir, lbl_stem).unwrap())?;
        if images.dims.len() != 3 {
            return Err(Error::Data(format!("{img_stem}: expected 3-D image tensor, got {:?}", images.dims)));
        }
        if labels.dims.len() != 1 {
            return Err(Error::Data(format!("{lbl_stem}: expected 1-D label tensor, got {:?}", labels.dims)));
        }
        let n_avail = images.dims[0];
        if labels.dims[0] != n_avail {
            return Err(Error::Data(format!(
                "{img_stem}/{lbl_stem}: {n_avail} images but {} labels",
                labels.dims[0]
            )));
        }
        let n = take.min(n_avail);
        let pix = images.dims[1] * images.dims[2];
        let x = DMatrix::from_fn(n, pix, |i, j| images.data[i * pix + j] as f64 / 255.0);
        let y: Vec<usize> = labels.data[..n].iter().map(|&b| b as usize).collect();
        if let Some(&bad) = y.iter().find(|&&l| l > 9) {
            return Err(Error::Data(format!("{lbl_stem}: label {bad} outside 0..=9")));
        }
        Ok(Dataset {
            x,
            targets: DatasetTargets::Labels { y, classes: 10 },
            name: name.into(),
        })
    };
    let train = load_pair("train-images-idx3-ubyte", "train-labels-idx1-ubyte", train_n, "mnist-train")?;
    let test = load_pair("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", test_n, "mnist-test")?;
    Ok((train, test))
}

/// Latent factors and mixing shared by the synthetic generators.
fn synthetic_inputs(n: usize, d0: usize, latent_rank: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let latent = gaussian_matrix(rng, n, latent_rank);
    let mixing = gaussian_matrix(rng, latent_rank, d0);
    let x = &latent * &mixing;
    (latent, x)
}

/// Low-rank classification dataset.
///
/// Inputs have numeric rank `latent_rank`; labels are
/// `argmax(latent · Q)` for an orthonormalized random teacher `Q`, which
/// makes class priors uniform whenever `latent_rank >= classes`.
pub fn make_synthetic_lowrank(n: usize, d0: usize, classes: usize, latent_rank: usize, seed: u64) -> Result<Dataset> {
    if latent_rank == 0 || latent_rank > d0 {
        return Err(Error::Config(format!("latent_rank must be in 1..=d0, got {latent_rank} (d0={d0})")));
    }
    if classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (latent, x) = synthetic_inputs(n, d0, latent_rank, &mut rng);
    let teacher = gaussian_matrix(&mut rng, latent_rank, classes);
    let teacher = if latent_rank >= classes { teacher.qr().q() } else { teacher };
    let scores = latent * teacher;
    let y: Vec<usize> = (0..n)
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0usize;
            for j in 1..classes {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok(Dataset {
        x,
        targets: DatasetTargets::Labels { y, classes },
        name: format!("synthetic-classify-n{n}-d{d0}-rho{latent_rank}"),
    })
}

/// Low-rank regression dataset: targets are a linear teacher on the
/// latent factors.
pub fn make_synthetic_regress(n: usize, d0: usize, targets_dim: usize, latent_rank: usize, seed: u64) -> Result<Dataset> {
    if latent_rank == 0 || latent_rank > d0 {
        return Err(Error::Config(format!("latent_rank must be in 1..=d0, got {latent_rank} (d0={d0})")));
    }
    if targets_dim == 0 {
        return Err(Error::Config("need at least 1 target dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (latent, x) = synthetic_inputs(n, d0, latent_rank, &mut rng);
    let teacher = gaussian_matrix(&mut rng, latent_rank, targets_dim);
    let values = latent * teacher * (1.0 / (latent_rank as f64).sqrt());
    Ok(Dataset {
        x,
        targets: DatasetTargets::Values(values),
        name: format!("synthetic-regress-n{n}-d{d0}-rho{latent_rank}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_label_fixture() {
        // magic 0x00000801, two items, values 7 and 3
        let bytes = [0u8, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        let idx = parse_idx(&bytes).unwrap();
        assert_eq!(idx.dims, vec![2]);
        assert_eq!(idx.data, vec![7, 3]);
    }

    #[test]
    fn parse_image_fixture() {
        // magic 0x00000803, one 2x2 image
        let bytes = [0u8, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 10, 20, 30, 40];
        let idx = parse_idx(&bytes).unwrap();
        assert_eq!(idx.dims, vec![1, 2, 2]);
        assert_eq!(idx.data, vec![10, 20, 30, 40]);
    }

    #[test]
    fn parse_rejects_malformed() {
        // truncated payload: declares 10 labels, 9 present
        let mut bytes = vec![0u8, 0, 8, 1, 0, 0, 0, 10];
        bytes.extend_from_slice(&[1; 9]);
        let err = parse_idx(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");

        // bad magic
        let bad = [0u8, 1, 8, 1, 0, 0, 0, 0];
        assert!(parse_idx(&bad).unwrap_err().to_string().contains("bad IDX magic"));

        // trailing bytes
        let extra = [0u8, 0, 8, 1, 0, 0, 0, 1, 5, 6];
        assert!(parse_idx(&extra).is_err());
    }

    #[test]
    fn idx_round_trip() {
        let idx = IdxData { dims: vec![2, 3, 2], data: (0..12).collect() };
        let encoded = encode_idx(&idx).unwrap();
        assert_eq!(parse_idx(&encoded).unwrap(), idx);
    }

    #[test]
    fn gz_loading_round_trip() {
        use std::io::Write;
        let idx = IdxData { dims: vec![4], data: vec![9, 8, 7, 6] };
        let encoded = encode_idx(&idx).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let gz_path = dir.path().join("labels-idx1-ubyte.gz");
        let mut enc = flate2::write::GzEncoder::new(std::fs::File::create(&gz_path).unwrap(), flate2::Compression::default());
        enc.write_all(&encoded).unwrap();
        enc.finish().unwrap();
        assert_eq!(load_idx_file(&gz_path).unwrap(), idx);
    }

    #[test]
    fn synthetic_rank_control() {
        // full latent rank -> numerically full-rank covariance
        let full = make_synthetic_lowrank(200, 16, 4, 16, 3).unwrap();
        let sv = full.x.clone().svd(false, false).singular_values;
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sv[15] / sv[0] > 1e-8);

        // latent rank 2 -> third singular value vanishes
        let low = make_synthetic_lowrank(200, 16, 4, 2, 3).unwrap();
        let sv = low.x.clone().svd(false, false).singular_values;
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sv[2] / sv[0] <= 1e-10, "sigma3/sigma1 = {}", sv[2] / sv[0]);
    }

    #[test]
    fn synthetic_deterministic() {
        let a = make_synthetic_lowrank(50, 8, 3, 4, 11).unwrap();
        let b = make_synthetic_lowrank(50, 8, 3, 4, 11).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_regress(50, 8, 2, 4, 11).unwrap();
        let d = make_synthetic_regress(50, 8, 2, 4, 11).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn synthetic_classify_balanced_priors() {
        let ds = make_synthetic_lowrank(8192, 64, 10, 16, 5).unwrap();
        if let DatasetTargets::Labels { y, classes } = &ds.targets {
            let mut counts = vec![0usize; *classes];
            for &l in y {
                counts[l] += 1;
            }
            for (c, &cnt) in counts.iter().enumerate() {
                let prior = cnt as f64 / y.len() as f64;
                assert!((prior - 0.1).abs() < 0.03, "class {c} prior {prior}");
            }
        } else {
            panic!("expected labels");
        }
    }

    #[test]
    fn mnist_missing_gives_instructions() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_mnist(dir.path(), 100, 100).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train-images-idx3-ubyte"));
        assert!(msg.contains("Download them yourself"));
    }
}
