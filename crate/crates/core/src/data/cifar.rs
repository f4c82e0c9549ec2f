//! CIFAR-10 / CIFAR-100 binary format.
//!
//! CIFAR-10 records are 3073 bytes: one label byte, then 3072 pixel bytes.
//! CIFAR-100 records are 3074 bytes: coarse label, fine label, then pixels.
//! Pixels are three 1024-byte planes (R, G, B), each row-major 32x32.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Normalization, Split, IMAGE_BYTES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            Self::Cifar10 => IMAGE_BYTES + 1,
            Self::Cifar100 => IMAGE_BYTES + 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            Self::Cifar10 => "cifar-10-batches-bin",
            Self::Cifar100 => "cifar-100-binary",
        }
    }

    /// Train files with their record counts, then the test file.
    pub fn files(self) -> (Vec<(&'static str, usize)>, (&'static str, usize)) {
        match self {
            Self::Cifar10 => (
                vec![
                    ("data_batch_1.bin", 10_000),
                    ("data_batch_2.bin", 10_000),
                    ("data_batch_3.bin", 10_000),
                    ("data_batch_4.bin", 10_000),
                    ("data_batch_5.bin", 10_000),
                ],
                ("test_batch.bin", 10_000),
            ),
            Self::Cifar100 => (vec![("train.bin", 50_000)], ("test.bin", 10_000)),
        }
    }

    /// `dir` itself if it holds the files, else its standard subdirectory.
    pub fn resolve_dir(self, dir: &Path) -> PathBuf {
        let (_, (test, _)) = self.files();
        if dir.join(test).exists() {
            dir.to_path_buf()
        } else {
            dir.join(self.subdir())
        }
    }
}

/// Parses one binary file, checking its record count when `expected` is given.
pub fn read_records(
    path: &Path,
    variant: CifarVariant,
    expected: Option<usize>,
) -> Result<(Vec<u8>, Vec<usize>), DataError> {
    if !path.exists() {
        return Err(DataError::Missing { path: path.to_path_buf() });
    }
    let bytes = fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let rec = variant.record_len();
    let whole = bytes.len() / rec;
    if bytes.len() % rec != 0 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            offset: whole * rec,
            len: bytes.len(),
            record: rec,
        });
    }
    if let Some(n) = expected {
        if whole != n {
            return Err(DataError::RecordCount { path: path.to_path_buf(), expected: n, found: whole });
        }
    }
    let mut pixels = Vec::with_capacity(whole * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(whole);
    let classes = variant.num_classes();
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        // Fine label for CIFAR-100.
        let label = r[rec - IMAGE_BYTES - 1] as usize;
        if label >= classes {
            return Err(DataError::Label {
                path: path.to_path_buf(),
                offset: i * rec + rec - IMAGE_BYTES - 1,
                label,
                classes,
            });
        }
        labels.push(label);
        pixels.extend_from_slice(&r[rec - IMAGE_BYTES..]);
    }
    Ok((pixels, labels))
}

/// Loads the official train and test splits. Both are normalized with
/// statistics computed on the train split.
pub fn load_cifar(dir: &Path, variant: CifarVariant) -> Result<(Dataset, Dataset), DataError> {
    let dir = variant.resolve_dir(dir);
    let (train_files, (test_file, test_n)) = variant.files();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (f, n) in train_files {
        let (p, l) = read_records(&dir.join(f), variant, Some(n))?;
        pixels.extend(p);
        labels.extend(l);
    }
    let norm = Normalization::from_pixels(&pixels);
    let train = Dataset::new(Split::Train, variant.num_classes(), pixels, labels)?.with_normalization(norm.clone());
    let (p, l) = read_records(&dir.join(test_file), variant, Some(test_n))?;
    let test = Dataset::new(Split::Test, variant.num_classes(), p, l)?.with_normalization(norm);
    Ok((train, test))
}

/// Writes `ds` in the binary record layout. For CIFAR-100 the coarse label
/// byte is `fine / 5`.
pub fn write_cifar(path: &Path, variant: CifarVariant, ds: &Dataset) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    if ds.num_classes > variant.num_classes() {
        return Err(DataError::Invalid(format!("{} classes do not fit the {variant:?} label range", ds.num_classes)));
    }
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for (i, &label) in ds.labels().iter().enumerate() {
        if variant == CifarVariant::Cifar100 {
            out.push((label / 5) as u8);
        }
        out.push(label as u8);
        out.extend_from_slice(ds.image_bytes(i));
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&out).map_err(io)
}
