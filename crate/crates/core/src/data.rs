//! Dataset manifests, matrix files, split files and the synthetic benchmark
//! generator.
//!
//! Matrix files are either text (one row per line, comma-separated decimals,
//! no header) or binary: the magic `ZSLMAT01`, `u32` rows, `u32` columns, then
//! row-major little-endian `f64` values. Label files hold one class index per
//! line.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ZslError};
use crate::model::{ClassEmbedding, EmbeddingKind, FeatureMatrix, LabeledSet};
use crate::scalar::Scalar;

pub const BINARY_MAGIC: &[u8; 8] = b"ZSLMAT01";

fn default_kind() -> EmbeddingKind {
    EmbeddingKind::Attributes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Paths are relative to the manifest's directory unless absolute.
    pub features: PathBuf,
    pub labels: PathBuf,
    pub embeddings: PathBuf,
    #[serde(default = "default_kind")]
    pub embedding_kind: EmbeddingKind,
    pub feature_dim: usize,
    pub n_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub name: String,
    pub features: FeatureMatrix<T>,
    pub labels: Vec<usize>,
    pub embeddings: ClassEmbedding<T>,
    pub class_names: Vec<String>,
    /// Hex SHA-256 of the input files (or of the generator spec).
    pub checksum: String,
}

impl<T: Scalar> Dataset<T> {
    pub fn n_classes(&self) -> usize {
        self.embeddings.n_classes()
    }

    pub fn n_images(&self) -> usize {
        self.labels.len()
    }

    pub fn labeled(&self, indices: &[usize]) -> Result<LabeledSet<T>> {
        LabeledSet::new(
            self.features.select(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.n_classes(),
        )
    }

    /// Images whose split role is one of `roles`.
    pub fn with_roles(&self, split: &SplitSpec, roles: &[ImageRole]) -> Result<LabeledSet<T>> {
        if split.roles.len() != self.n_images() {
            return Err(ZslError::SplitRole(format!(
                "split `{}` assigns {} roles for {} images",
                split.id,
                split.roles.len(),
                self.n_images()
            )));
        }
        let idx: Vec<usize> = (0..self.n_images())
            .filter(|&i| roles.contains(&split.roles[i]))
            .collect();
        self.labeled(&idx)
    }
}

fn io_read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| ZslError::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> ZslError {
    ZslError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn bin_err(path: &Path, offset: usize, message: impl Into<String>) -> ZslError {
    ZslError::BinaryFormat {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn parse_binary<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<DMatrix<T>> {
    let header = BINARY_MAGIC.len() + 8;
    if bytes.len() < header {
        return Err(bin_err(path, bytes.len(), "truncated header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let rows = u32_at(8);
    let cols = u32_at(12);
    let expected = header + rows * cols * 8;
    if bytes.len() < expected {
        return Err(bin_err(
            path,
            bytes.len(),
            format!("truncated data: {rows}x{cols} needs {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(bin_err(path, expected, "trailing bytes after matrix data"));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (k, chunk) in bytes[header..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(bin_err(path, header + 8 * k, "non-finite value"));
        }
        m[(k / cols, k % cols)] = T::of(v);
    }
    Ok(m)
}

fn parse_text<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<DMatrix<T>> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        parse_err(path, line, "invalid UTF-8")
    })?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            return Err(parse_err(path, line_no, "empty line"));
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| {
                let f = f.trim();
                match f.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(parse_err(path, line_no, format!("`{f}` is not a finite number"))),
                }
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected {c} values, found {}", row.len()),
                ))
            }
            _ => {}
        }
        values.extend(row.into_iter().map(T::of));
        rows += 1;
    }
    let cols = cols.ok_or_else(|| parse_err(path, 1, "empty matrix file"))?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Reads a text or binary matrix file (row per line / row-major).
pub fn read_matrix<T: Scalar>(path: &Path) -> Result<DMatrix<T>> {
    let bytes = io_read(path)?;
    if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(path, &bytes)
    } else {
        parse_text(path, &bytes)
    }
}

pub fn read_labels(path: &Path, n_classes: usize) -> Result<Vec<usize>> {
    let bytes = io_read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| parse_err(path, 1, "invalid UTF-8"))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let label: usize = line
                .trim()
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("`{}` is not a class index", line.trim())))?;
            if label >= n_classes {
                return Err(ZslError::LabelRange {
                    path: path.to_path_buf(),
                    line: i + 1,
                    label,
                    classes: n_classes,
                });
            }
            Ok(label)
        })
        .collect()
}

fn matrix_text<T: Scalar>(m: &DMatrix<T>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| ZslError::io(path, e))
}

pub fn write_matrix_text<T: Scalar>(path: &Path, m: &DMatrix<T>) -> Result<()> {
    write_file(path, matrix_text(m).as_bytes())
}

pub fn write_matrix_binary<T: Scalar>(path: &Path, m: &DMatrix<T>) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 8 * m.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for row in m.row_iter() {
        for v in row.iter() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    write_file(path, &out)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = io_read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| parse_err(path, 1, "invalid UTF-8"))?;
    toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start].matches('\n').count() + 1)
            .unwrap_or(1);
        parse_err(path, line, e.message())
    })
}

/// Loads and validates every file named by the manifest.
pub fn load_dataset<T: Scalar>(manifest_path: &Path) -> Result<Dataset<T>> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let feat_path = resolve(base, &manifest.features);
    let label_path = resolve(base, &manifest.labels);
    let emb_path = resolve(base, &manifest.embeddings);

    let features: DMatrix<T> = read_matrix(&feat_path)?;
    if features.ncols() != manifest.feature_dim {
        return Err(ZslError::FileDimension {
            path: feat_path,
            what: "feature dimension",
            declared: manifest.feature_dim,
            found: features.ncols(),
        });
    }
    let embeddings: DMatrix<T> = read_matrix(&emb_path)?;
    if embeddings.nrows() != manifest.n_classes {
        return Err(ZslError::FileDimension {
            path: emb_path,
            what: "class count",
            declared: manifest.n_classes,
            found: embeddings.nrows(),
        });
    }
    if let Some(a) = manifest.embedding_dim {
        if embeddings.ncols() != a {
            return Err(ZslError::FileDimension {
                path: emb_path,
                what: "embedding dimension",
                declared: a,
                found: embeddings.ncols(),
            });
        }
    }
    let labels = read_labels(&label_path, manifest.n_classes)?;
    if labels.len() != features.nrows() {
        return Err(ZslError::FileDimension {
            path: label_path,
            what: "image count",
            declared: features.nrows(),
            found: labels.len(),
        });
    }
    if !manifest.class_names.is_empty() && manifest.class_names.len() != manifest.n_classes {
        return Err(ZslError::FileDimension {
            path: manifest_path.to_path_buf(),
            what: "class name count",
            declared: manifest.n_classes,
            found: manifest.class_names.len(),
        });
    }

    let mut hasher = Sha256::new();
    for p in [&feat_path, &label_path, &emb_path] {
        hasher.update(io_read(p)?);
    }
    Ok(Dataset {
        name: manifest.name,
        features: FeatureMatrix::from_rows(features)?,
        labels,
        embeddings: ClassEmbedding::from_rows(embeddings, manifest.embedding_kind)?,
        class_names: manifest.class_names,
        checksum: hex::encode(hasher.finalize()),
    })
}

/// Writes the dataset as text files plus `manifest.toml` into `dir`; returns
/// the manifest path.
pub fn save_dataset<T: Scalar>(dataset: &Dataset<T>, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| ZslError::io(dir, e))?;
    write_matrix_text(&dir.join("features.csv"), &dataset.features.to_rows())?;
    let labels: String = dataset.labels.iter().map(|l| format!("{l}\n")).collect();
    write_file(&dir.join("labels.csv"), labels.as_bytes())?;
    write_matrix_text(&dir.join("embeddings.csv"), &dataset.embeddings.to_rows())?;
    let manifest = DatasetManifest {
        name: dataset.name.clone(),
        features: "features.csv".into(),
        labels: "labels.csv".into(),
        embeddings: "embeddings.csv".into(),
        embedding_kind: dataset.embeddings.kind(),
        feature_dim: dataset.features.dim(),
        n_classes: dataset.n_classes(),
        embedding_dim: Some(dataset.embeddings.dim()),
        class_names: dataset.class_names.clone(),
    };
    let path = dir.join("manifest.toml");
    write_file(&path, toml::to_string(&manifest).expect("manifest serializes").as_bytes())?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    Train,
    Val,
    /// Held-out image of a seen class, used only for GZSL evaluation.
    TestSeen,
    TestUnseen,
    /// Label outside every class set of the split.
    Unused,
}

/// On-disk split description; `test_seen` lists image indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    #[serde(default)]
    pub test_seen: Vec<usize>,
}

/// Disjoint train/validation/test classes and a role for every image.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub id: String,
    pub checksum: String,
    pub train: BTreeSet<usize>,
    pub val: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
    pub roles: Vec<ImageRole>,
}

impl SplitSpec {
    /// Validates the class sets against `labels` and assigns roles.
    pub fn new(
        id: impl Into<String>,
        train: BTreeSet<usize>,
        val: BTreeSet<usize>,
        test: BTreeSet<usize>,
        labels: &[usize],
        n_classes: usize,
        test_seen: &[usize],
    ) -> Result<Self> {
        let id = id.into();
        for (name, set) in [("train", &train), ("val", &val), ("test", &test)] {
            if let Some(c) = set.iter().find(|&&c| c >= n_classes) {
                return Err(ZslError::Configuration(format!(
                    "{name} class {c} out of range for {n_classes} classes"
                )));
            }
        }
        if train.is_empty() || test.is_empty() {
            return Err(ZslError::Configuration("train and test class sets must be non-empty".into()));
        }
        for (a, sa, b, sb) in [
            ("train", &train, "val", &val),
            ("train", &train, "test", &test),
            ("val", &val, "test", &test),
        ] {
            if let Some(c) = sa.intersection(sb).next() {
                return Err(ZslError::ProtocolViolation(format!(
                    "class {c} is in both the {a} and {b} sets"
                )));
            }
        }
        let mut roles: Vec<ImageRole> = labels
            .iter()
            .map(|l| {
                if train.contains(l) {
                    ImageRole::Train
                } else if val.contains(l) {
                    ImageRole::Val
                } else if test.contains(l) {
                    ImageRole::TestUnseen
                } else {
                    ImageRole::Unused
                }
            })
            .collect();
        let mut seen_idx = BTreeSet::new();
        for &i in test_seen {
            if i >= labels.len() {
                return Err(ZslError::SplitRole(format!(
                    "test_seen image {i} out of range for {} images",
                    labels.len()
                )));
            }
            if !seen_idx.insert(i) {
                return Err(ZslError::SplitRole(format!("test_seen image {i} listed twice")));
            }
            match roles[i] {
                ImageRole::Train | ImageRole::Val => roles[i] = ImageRole::TestSeen,
                _ => {
                    return Err(ZslError::SplitRole(format!(
                        "test_seen image {i} has label {}, which is not a seen class",
                        labels[i]
                    )))
                }
            }
        }
        let mut spec = Self {
            id,
            checksum: String::new(),
            train,
            val,
            test,
            roles,
        };
        spec.checksum = spec.compute_checksum();
        Ok(spec)
    }

    fn compute_checksum(&self) -> String {
        let text = toml::to_string(&self.to_file()).expect("split serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Train and validation classes.
    pub fn seen(&self) -> BTreeSet<usize> {
        self.train.union(&self.val).copied().collect()
    }

    pub fn indices(&self, role: ImageRole) -> Vec<usize> {
        (0..self.roles.len()).filter(|&i| self.roles[i] == role).collect()
    }

    pub fn to_file(&self) -> SplitFile {
        SplitFile {
            id: Some(self.id.clone()),
            train: self.train.iter().copied().collect(),
            val: self.val.iter().copied().collect(),
            test: self.test.iter().copied().collect(),
            test_seen: self.indices(ImageRole::TestSeen),
        }
    }

    /// Same seen and test classes with a different validation subset of the
    /// seen classes. Held-out seen images keep their role.
    pub fn with_validation(
        &self,
        id: impl Into<String>,
        val: BTreeSet<usize>,
        labels: &[usize],
        n_classes: usize,
    ) -> Result<Self> {
        let seen = self.seen();
        if let Some(c) = val.iter().find(|c| !seen.contains(c)) {
            return Err(ZslError::ProtocolViolation(format!(
                "validation class {c} is not a seen class"
            )));
        }
        let train: BTreeSet<usize> = seen.difference(&val).copied().collect();
        Self::new(
            id,
            train,
            val,
            self.test.clone(),
            labels,
            n_classes,
            &self.indices(ImageRole::TestSeen),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, toml::to_string(&self.to_file()).expect("split serializes").as_bytes())
    }
}

/// Reads and validates a split file against `labels`.
pub fn load_split(path: &Path, labels: &[usize], n_classes: usize) -> Result<SplitSpec> {
    let bytes = io_read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| parse_err(path, 1, "invalid UTF-8"))?;
    let file: SplitFile = toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start].matches('\n').count() + 1)
            .unwrap_or(1);
        parse_err(path, line, e.message())
    })?;
    let id = file.id.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "split".into())
    });
    let to_set = |v: &[usize], name: &str| -> Result<BTreeSet<usize>> {
        let set: BTreeSet<usize> = v.iter().copied().collect();
        if set.len() != v.len() {
            return Err(parse_err(path, 1, format!("duplicate class in `{name}`")));
        }
        Ok(set)
    };
    SplitSpec::new(
        id,
        to_set(&file.train, "train")?,
        to_set(&file.val, "val")?,
        to_set(&file.test, "test")?,
        labels,
        n_classes,
        &file.test_seen,
    )
}

fn default_holdout() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    /// Validation classes carved from the seen classes; defaults to
    /// `n_seen / 4`.
    #[serde(default)]
    pub n_val: Option<usize>,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub images_per_class: usize,
    pub noise: f64,
    pub seed: u64,
    /// Map the unit-sphere embeddings to `[0, 1]` via `(1 + φ)/2` and mark
    /// them as attributes.
    #[serde(default)]
    pub attributes: bool,
    /// Fraction of each seen class's images held out for GZSL testing.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
}

impl SyntheticSpec {
    pub fn new(n_seen: usize, n_unseen: usize, feature_dim: usize, embedding_dim: usize) -> Self {
        Self {
            n_classes: n_seen + n_unseen,
            n_seen,
            n_unseen,
            n_val: None,
            feature_dim,
            embedding_dim,
            images_per_class: 100,
            noise: 0.05,
            seed: 0,
            attributes: false,
            holdout: default_holdout(),
        }
    }

    pub fn n_val(&self) -> usize {
        self.n_val.unwrap_or(self.n_seen / 4)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ZslError::Configuration(format!("synthetic spec: {m}")));
        if self.n_seen == 0 || self.n_unseen == 0 || self.feature_dim == 0 || self.embedding_dim == 0 {
            return bad("sizes must be positive");
        }
        if self.images_per_class < 2 {
            return bad("need at least 2 images per class");
        }
        if self.n_seen + self.n_unseen != self.n_classes {
            return bad("seen + unseen must equal the class count");
        }
        if self.n_val() >= self.n_seen {
            return bad("validation classes must leave at least one training class");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be non-negative");
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad("holdout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Classes `0..n_seen-n_val` train, then validation, then unseen. Each class
/// embedding is a uniform point on the unit sphere, class means are `W*φ(c)`
/// for a Gaussian `W*`, and images add isotropic Gaussian noise.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<(Dataset<T>, SplitSpec)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let (c, a, d) = (spec.n_classes, spec.embedding_dim, spec.feature_dim);

    let mut phi = DMatrix::<f64>::zeros(c, a);
    for mut row in phi.row_iter_mut() {
        loop {
            row.iter_mut().for_each(|v| *v = normal());
            let n = row.norm();
            if n > 1e-8 {
                row /= n;
                break;
            }
        }
    }
    if spec.attributes {
        phi.apply(|v| *v = (1.0 + *v) / 2.0);
    }
    let w_star = DMatrix::<f64>::from_fn(d, a, |_, _| normal());

    let n = c * spec.images_per_class;
    let mut features = DMatrix::<f64>::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for class in 0..c {
        let mean = &w_star * phi.row(class).transpose();
        for _ in 0..spec.images_per_class {
            let i = labels.len();
            for j in 0..d {
                features[(i, j)] = mean[j] + spec.noise * normal();
            }
            labels.push(class);
        }
    }

    let n_train = spec.n_seen - spec.n_val();
    let per_class = ((spec.images_per_class as f64) * spec.holdout).round() as usize;
    let mut test_seen = Vec::new();
    for class in 0..spec.n_seen {
        let mut idx: Vec<usize> = (class * spec.images_per_class..(class + 1) * spec.images_per_class).collect();
        idx.shuffle(&mut rng);
        test_seen.extend_from_slice(&idx[..per_class]);
    }
    test_seen.sort_unstable();

    let kind = if spec.attributes {
        EmbeddingKind::Attributes
    } else {
        EmbeddingKind::Distributed
    };
    let spec_text = toml::to_string(spec).expect("spec serializes");
    let dataset = Dataset {
        name: format!("synthetic-{}", spec.seed),
        features: FeatureMatrix::from_rows(features.map(T::of))?,
        labels: labels.clone(),
        embeddings: ClassEmbedding::from_rows(phi.map(T::of), kind)?,
        class_names: (0..c).map(|i| format!("class{i}")).collect(),
        checksum: hex::encode(Sha256::digest(spec_text.as_bytes())),
    };
    let split = SplitSpec::new(
        format!("synthetic-{}", spec.seed),
        (0..n_train).collect(),
        (n_train..spec.n_seen).collect(),
        (spec.n_seen..c).collect(),
        &labels,
        c,
        &test_seen,
    )?;
    Ok((dataset, split))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            images_per_class: 10,
            seed: 3,
            ..SyntheticSpec::new(4, 2, 5, 3)
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let (ds, split) = generate_synthetic::<f64>(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let back: Dataset<f64> = load_dataset(&manifest).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.embeddings, ds.embeddings);
        assert_eq!(back.class_names, ds.class_names);

        let sp = dir.path().join("split.toml");
        split.save(&sp).unwrap();
        let s2 = load_split(&sp, &ds.labels, ds.n_classes()).unwrap();
        assert_eq!(s2, split);

        let bin = dir.path().join("f.bin");
        write_matrix_binary(&bin, &ds.features.to_rows()).unwrap();
        assert_eq!(read_matrix::<f64>(&bin).unwrap(), ds.features.to_rows());
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "1,2,3\n4,5").unwrap();
        match read_matrix::<f64>(&p).unwrap_err() {
            ZslError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
        let b = dir.path().join("m.bin");
        write_matrix_binary(&b, &DMatrix::<f64>::zeros(2, 2)).unwrap();
        let bytes = fs::read(&b).unwrap();
        fs::write(&b, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_matrix::<f64>(&b).unwrap_err(), ZslError::BinaryFormat { offset, .. } if offset == bytes.len() - 3));

        fs::write(dir.path().join("f.csv"), "1,2,3,4\n5,6,7,8\n").unwrap();
        fs::write(dir.path().join("l.csv"), "0\n1\n").unwrap();
        fs::write(dir.path().join("e.csv"), "0.5,0.5\n0.2,0.9\n").unwrap();
        let man = dir.path().join("manifest.toml");
        fs::write(
            &man,
            "name = \"x\"\nfeatures = \"f.csv\"\nlabels = \"l.csv\"\nembeddings = \"e.csv\"\nfeature_dim = 3\nn_classes = 2\n",
        )
        .unwrap();
        match load_dataset::<f64>(&man).unwrap_err() {
            ZslError::FileDimension { declared, found, .. } => assert_eq!((declared, found), (3, 4)),
            e => panic!("{e}"),
        }
        fs::write(dir.path().join("l.csv"), "0\n7\n").unwrap();
        fs::write(
            &man,
            "name = \"x\"\nfeatures = \"f.csv\"\nlabels = \"l.csv\"\nembeddings = \"e.csv\"\nfeature_dim = 4\nn_classes = 2\n",
        )
        .unwrap();
        assert!(matches!(load_dataset::<f64>(&man).unwrap_err(), ZslError::LabelRange { line: 2, label: 7, .. }));
    }

    #[test]
    fn split_validation() {
        let labels: Vec<usize> = (0..717).collect();
        let set = |r: std::ops::Range<usize>| r.collect::<BTreeSet<_>>();
        let ok = SplitSpec::new("sun", set(0..580), set(580..645), set(645..717), &labels, 717, &[]).unwrap();
        assert_eq!((ok.train.len(), ok.val.len(), ok.test.len()), (580, 65, 72));

        let err = SplitSpec::new("bad", set(0..10), set(10..12), set(9..20), &labels, 717, &[]).unwrap_err();
        assert!(matches!(err, ZslError::ProtocolViolation(_)));

        let err = SplitSpec::new("bad", set(0..10), set(10..12), set(12..20), &labels, 717, &[15]).unwrap_err();
        assert!(matches!(err, ZslError::SplitRole(_)));
    }

    #[test]
    fn synthetic_properties() {
        let spec = SyntheticSpec { noise: 0.0, ..small() };
        let (a, split) = generate_synthetic::<f64>(&spec).unwrap();
        let (b, _) = generate_synthetic::<f64>(&spec).unwrap();
        assert_eq!(a, b);
        // zero noise: each image is exactly its class mean
        for c in 0..spec.n_classes {
            let idx: Vec<usize> = (0..a.n_images()).filter(|&i| a.labels[i] == c).collect();
            for &i in &idx {
                assert_eq!(a.features.image(i), a.features.image(idx[0]));
            }
        }
        // 20% of each seen class held out
        assert_eq!(split.indices(ImageRole::TestSeen).len(), 4 * 2);
        assert_eq!(split.val.len(), 1);

        let attr = SyntheticSpec { attributes: true, ..small() };
        let (ds, _) = generate_synthetic::<f32>(&attr).unwrap();
        assert_eq!(ds.embeddings.kind(), EmbeddingKind::Attributes);
    }

    #[test]
    fn nearest_mean_oracle_is_perfect_without_noise() {
        let spec = SyntheticSpec { noise: 0.0, ..small() };
        let (ds, split) = generate_synthetic::<f64>(&spec).unwrap();
        let unseen: Vec<usize> = split.test.iter().copied().collect();
        let means: Vec<_> = unseen
            .iter()
            .map(|&c| {
                let i = ds.labels.iter().position(|&l| l == c).unwrap();
                ds.features.image(i).into_owned()
            })
            .collect();
        for i in split.indices(ImageRole::TestUnseen) {
            let x = ds.features.image(i);
            let best = (0..unseen.len())
                .min_by(|&p, &q| (x - &means[p]).norm().partial_cmp(&(x - &means[q]).norm()).unwrap())
                .unwrap();
            assert_eq!(unseen[best], ds.labels[i]);
        }
    }

    #[test]
    fn validation_variants_keep_test() {
        let (ds, split) = generate_synthetic::<f64>(&small()).unwrap();
        let v = split.with_validation("v2", [0].into(), &ds.labels, ds.n_classes()).unwrap();
        assert_eq!(v.test, split.test);
        assert_eq!(v.train, [1, 2, 3].into());
        assert_eq!(v.indices(ImageRole::TestSeen), split.indices(ImageRole::TestSeen));
        assert!(split.with_validation("bad", [5].into(), &ds.labels, 6).is_err());
    }
}
