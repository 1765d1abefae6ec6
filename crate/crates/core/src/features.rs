//! Feature ingestion and episode sampling.
//!
//! A [`FeatureStore`] holds the raw, nonnegative feature vectors of a
//! dataset grouped by class. Stores are immutable after load and cheap to
//! share across threads; sampling an [`Episode`] from one is a pure
//! function of `(store, spec)`.
//!
//! Two on-disk formats are supported:
//!
//! * binary (`.fvs`): magic `FVS1`, then little-endian `u32` dim and
//!   `u32` class count; per class a `u32` class id, `u32` vector count and
//!   `count * dim` little-endian `f32` values, row-major;
//! * CSV: header `class,f0,...,f{d-1}`, one row per vector.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_from_seed;

const MAGIC: &[u8; 4] = b"FVS1";

/// On-disk representation of a feature store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Binary,
    Csv,
}

/// All vectors of a single class, one per row.
#[derive(Debug, Clone)]
pub struct ClassBlock {
    pub class_id: u32,
    pub vectors: Array2<f32>,
}

impl ClassBlock {
    pub fn count(&self) -> usize {
        self.vectors.nrows()
    }
}

/// Class-indexed collection of nonnegative raw feature vectors.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    dim: usize,
    classes: Vec<ClassBlock>,
    source_tag: String,
}

impl FeatureStore {
    /// Builds a store and enforces its invariants: uniform dimensionality,
    /// nonnegative entries, nonempty classes, unique class ids.
    pub fn new(dim: usize, classes: Vec<ClassBlock>, source_tag: impl Into<String>) -> Result<Self> {
        let store = FeatureStore {
            dim,
            classes,
            source_tag: source_tag.into(),
        };
        store.validate()?;
        Ok(store)
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Format("dimension must be positive".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Format("store holds no classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for block in &self.classes {
            if !seen.insert(block.class_id) {
                return Err(Error::DuplicateClass(block.class_id));
            }
            if block.count() == 0 {
                return Err(Error::EmptyClass(block.class_id));
            }
            if block.vectors.ncols() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: block.vectors.ncols(),
                    context: format!("class {}", block.class_id),
                });
            }
            for (row, vec) in block.vectors.rows().into_iter().enumerate() {
                for (dim, &v) in vec.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "class {} row {row} dim {dim}",
                            block.class_id
                        )));
                    }
                    if v < 0.0 {
                        return Err(Error::NegativeFeature {
                            class_id: block.class_id,
                            row,
                            dim,
                            value: f64::from(v),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassBlock] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    /// Smallest per-class vector count.
    pub fn min_class_count(&self) -> usize {
        self.classes.iter().map(ClassBlock::count).min().unwrap_or(0)
    }

    pub fn total_vectors(&self) -> usize {
        self.classes.iter().map(ClassBlock::count).sum()
    }

    fn class_by_id(&self, id: u32) -> Option<&ClassBlock> {
        self.classes.iter().find(|b| b.class_id == id)
    }
}

/// Parameters of one few-shot draw: n-way, s-shot, q queries per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn support_size(&self) -> usize {
        self.n_way * self.shots
    }

    pub fn query_size(&self) -> usize {
        self.n_way * self.queries_per_class
    }

    fn check(&self) -> Result<()> {
        if self.n_way == 0 || self.shots == 0 || self.queries_per_class == 0 {
            return Err(Error::InfeasibleSpec(
                "n_way, shots and queries_per_class must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One few-shot task: labelled support rows and query rows whose labels
/// are hidden from the classifier and kept for scoring only. Labels are
/// episode-local (`0..n_way`); `class_ids[label]` maps back to the store's
/// class id.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Array2<f64>,
    pub support_labels: Vec<usize>,
    pub query: Array2<f64>,
    pub hidden_labels: Vec<usize>,
    pub class_ids: Vec<u32>,
    pub dim: usize,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.support_labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn shots(&self) -> usize {
        self.support_labels.len() / self.n_way()
    }

    pub fn queries_per_class(&self) -> usize {
        self.hidden_labels.len() / self.n_way()
    }
}

/// Draws an episode: `n_way` classes uniformly without replacement, then
/// `shots + queries_per_class` vectors per class uniformly without
/// replacement, the first `shots` going to the support set.
///
/// Class ids are sorted before the seeded Fisher-Yates shuffle so the draw
/// depends only on `(store contents, spec.seed)`, not on file order.
pub fn sample_episode(store: &FeatureStore, spec: &EpisodeSpec) -> Result<Episode> {
    spec.check()?;
    if spec.n_way > store.num_classes() {
        return Err(Error::InfeasibleSpec(format!(
            "n_way {} exceeds the {} classes in the store",
            spec.n_way,
            store.num_classes()
        )));
    }

    let mut rng = rng_from_seed(spec.seed);

    let mut ids: Vec<u32> = store.classes.iter().map(|b| b.class_id).collect();
    ids.sort_unstable();
    ids.shuffle(&mut rng);
    let drawn = &ids[..spec.n_way];

    let per_class = spec.shots + spec.queries_per_class;
    let dim = store.dim;
    let mut support = Array2::<f64>::zeros((spec.support_size(), dim));
    let mut query = Array2::<f64>::zeros((spec.query_size(), dim));
    let mut support_labels = Vec::with_capacity(spec.support_size());
    let mut hidden_labels = Vec::with_capacity(spec.query_size());

    for (label, &id) in drawn.iter().enumerate() {
        let block = store.class_by_id(id).expect("drawn id exists");
        if block.count() < per_class {
            return Err(Error::InfeasibleSpec(format!(
                "class {} holds {} vectors, need {}",
                id,
                block.count(),
                per_class
            )));
        }
        let mut rows: Vec<usize> = (0..block.count()).collect();
        rows.shuffle(&mut rng);

        for (k, &row) in rows[..spec.shots].iter().enumerate() {
            let dst = label * spec.shots + k;
            copy_row(&mut support, dst, block.vectors.row(row));
            support_labels.push(label);
        }
        for (k, &row) in rows[spec.shots..per_class].iter().enumerate() {
            let dst = label * spec.queries_per_class + k;
            copy_row(&mut query, dst, block.vectors.row(row));
            hidden_labels.push(label);
        }
    }

    Ok(Episode {
        support,
        support_labels,
        query,
        hidden_labels,
        class_ids: drawn.to_vec(),
        dim,
    })
}

fn copy_row(dst: &mut Array2<f64>, row: usize, src: ArrayView1<f32>) {
    for (d, &v) in src.iter().enumerate() {
        dst[[row, d]] = f64::from(v);
    }
}

/// Marginal shape of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewMode {
    /// Near-Gaussian marginals around well-separated positive centers.
    Gaussian,
    /// Squares of shifted Gaussians: nonnegative, heavily right-skewed,
    /// concentrated near zero -- the shape of post-ReLU backbone features.
    ReluSkewed,
}

/// Generates a desk-scale stand-in for backbone features.
///
/// Class centers sit on a seeded random simplex: coordinate `k` of center
/// `c` is `separation / sqrt(dim)` times a random sign times a magnitude
/// uniform in `[0.5, 1)`, which keeps pairwise center distances
/// proportional to `separation` while bounding every coordinate away from
/// zero.
///
/// * `Gaussian` emits `max(0, offset + mu[c][k] + g)` with `g ~ N(0,1)`
///   and `offset = 6 + separation/sqrt(dim)`, so entries stay nonnegative
///   without visibly truncating the marginals.
/// * `ReluSkewed` emits `(g + mu[c][k])^2`, a noncentral chi-square(1).
pub fn generate_synthetic_store(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    skew_mode: SkewMode,
    seed: u64,
) -> Result<FeatureStore> {
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::InvalidConfig(
            "num_classes, dim and per_class must be positive".into(),
        ));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::InvalidConfig("separation must be finite and >= 0".into()));
    }

    let mut rng = rng_from_seed(seed);
    let scale = separation / (dim as f64).sqrt();

    let mut centers = Array2::<f64>::zeros((num_classes, dim));
    for c in 0..num_classes {
        for k in 0..dim {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let magnitude: f64 = rng.random_range(0.5..1.0);
            centers[[c, k]] = scale * sign * magnitude;
        }
    }

    let offset = 6.0 + scale;
    let mut classes = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let mut vectors = Array2::<f32>::zeros((per_class, dim));
        for i in 0..per_class {
            for k in 0..dim {
                let g: f64 = rng.sample(StandardNormal);
                let value = match skew_mode {
                    SkewMode::Gaussian => (offset + centers[[c, k]] + g).max(0.0),
                    SkewMode::ReluSkewed => {
                        let shifted = g + centers[[c, k]];
                        shifted * shifted
                    }
                };
                vectors[[i, k]] = value as f32;
            }
        }
        classes.push(ClassBlock {
            class_id: c as u32,
            vectors,
        });
    }

    FeatureStore::new(dim, classes, format!("synthetic:{skew_mode:?}:seed{seed}"))
}

/// Concatenates stores feature-wise: vector `i` of class `c` in the output
/// is the concatenation of vector `i` of class `c` from each input store.
pub fn concat_stores(stores: &[FeatureStore]) -> Result<FeatureStore> {
    let first = stores
        .first()
        .ok_or_else(|| Error::StoreMismatch("no stores given".into()))?;
    if stores.len() == 1 {
        return Ok(first.clone());
    }

    for other in &stores[1..] {
        if other.num_classes() != first.num_classes() {
            return Err(Error::StoreMismatch(format!(
                "class counts differ: {} vs {}",
                first.num_classes(),
                other.num_classes()
            )));
        }
        for block in &first.classes {
            let Some(peer) = other.class_by_id(block.class_id) else {
                return Err(Error::StoreMismatch(format!(
                    "class {} missing from a store",
                    block.class_id
                )));
            };
            if peer.count() != block.count() {
                return Err(Error::StoreMismatch(format!(
                    "class {} holds {} vs {} vectors",
                    block.class_id,
                    block.count(),
                    peer.count()
                )));
            }
        }
    }

    let total_dim: usize = stores.iter().map(FeatureStore::dim).sum();
    let mut classes = Vec::with_capacity(first.num_classes());
    for block in &first.classes {
        let mut vectors = Array2::<f32>::zeros((block.count(), total_dim));
        let mut col = 0;
        for store in stores {
            let peer = store.class_by_id(block.class_id).expect("checked above");
            for i in 0..block.count() {
                for k in 0..store.dim {
                    vectors[[i, col + k]] = peer.vectors[[i, k]];
                }
            }
            col += store.dim;
        }
        classes.push(ClassBlock {
            class_id: block.class_id,
            vectors,
        });
    }

    let tag = stores
        .iter()
        .map(FeatureStore::source_tag)
        .collect::<Vec<_>>()
        .join("+");
    FeatureStore::new(total_dim, classes, tag)
}

/// Loads a store from disk in the given format and validates its invariants.
pub fn load_feature_store(path: impl AsRef<Path>, format: FileFormat) -> Result<FeatureStore> {
    let path = path.as_ref();
    let tag = path.display().to_string();
    match format {
        FileFormat::Binary => read_binary(path, tag),
        FileFormat::Csv => read_csv(path, tag),
    }
}

/// Writes a store in the given format; the counterpart of
/// [`load_feature_store`].
pub fn write_feature_store(
    store: &FeatureStore,
    path: impl AsRef<Path>,
    format: FileFormat,
) -> Result<()> {
    match format {
        FileFormat::Binary => write_binary(store, path.as_ref()),
        FileFormat::Csv => write_csv(store, path.as_ref()),
    }
}

fn read_binary(path: &Path, tag: String) -> Result<FeatureStore> {
    let mut reader = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected \"FVS1\"",
            magic
        )));
    }
    let dim = reader.read_u32::<LittleEndian>()? as usize;
    let num_classes = reader.read_u32::<LittleEndian>()? as usize;
    if dim == 0 {
        return Err(Error::Format("header declares dim 0".into()));
    }

    let mut classes = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let class_id = reader.read_u32::<LittleEndian>()?;
        let count = reader.read_u32::<LittleEndian>()? as usize;
        if count == 0 {
            return Err(Error::EmptyClass(class_id));
        }
        let mut values = vec![0f32; count * dim];
        reader.read_f32_into::<LittleEndian>(&mut values)?;
        let vectors = Array2::from_shape_vec((count, dim), values)
            .expect("shape matches buffer length");
        classes.push(ClassBlock { class_id, vectors });
    }

    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last class".into()));
    }

    FeatureStore::new(dim, classes, tag)
}

fn write_binary(store: &FeatureStore, path: &Path) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(MAGIC)?;
    writer.write_u32::<LittleEndian>(store.dim as u32)?;
    writer.write_u32::<LittleEndian>(store.num_classes() as u32)?;
    for block in &store.classes {
        writer.write_u32::<LittleEndian>(block.class_id)?;
        writer.write_u32::<LittleEndian>(block.count() as u32)?;
        for &v in block.vectors.iter() {
            writer.write_f32::<LittleEndian>(v)?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn read_csv(path: &Path, tag: String) -> Result<FeatureStore> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Format(e.to_string()))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .clone();
    if headers.len() < 2 || &headers[0] != "class" {
        return Err(Error::Format(
            "CSV header must be class,f0,...,f{d-1}".into(),
        ));
    }
    let dim = headers.len() - 1;
    for (k, name) in headers.iter().skip(1).enumerate() {
        if name != format!("f{k}") {
            return Err(Error::Format(format!(
                "CSV header column {} is {name:?}, expected \"f{k}\"",
                k + 1
            )));
        }
    }

    // Classes appear in order of first occurrence; rows keep file order.
    let mut order: Vec<u32> = Vec::new();
    let mut rows: std::collections::HashMap<u32, Vec<f32>> = std::collections::HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        if record.len() != dim + 1 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: record.len() - 1,
                context: format!("CSV data row {}", line + 1),
            });
        }
        let class_id: u32 = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("bad class id {:?} on row {}", &record[0], line + 1)))?;
        let entry = rows.entry(class_id).or_insert_with(|| {
            order.push(class_id);
            Vec::new()
        });
        for field in record.iter().skip(1) {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad float {field:?} on row {}", line + 1)))?;
            entry.push(v);
        }
    }
    if order.is_empty() {
        return Err(Error::Format("CSV holds no data rows".into()));
    }

    let mut classes = Vec::with_capacity(order.len());
    for id in order {
        let values = rows.remove(&id).expect("present by construction");
        let count = values.len() / dim;
        let vectors =
            Array2::from_shape_vec((count, dim), values).expect("shape matches buffer length");
        classes.push(ClassBlock {
            class_id: id,
            vectors,
        });
    }
    FeatureStore::new(dim, classes, tag)
}

fn write_csv(store: &FeatureStore, path: &Path) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write!(writer, "class")?;
    for k in 0..store.dim {
        write!(writer, ",f{k}")?;
    }
    writeln!(writer)?;
    for block in &store.classes {
        for row in block.vectors.rows() {
            write!(writer, "{}", block.class_id)?;
            for &v in row.iter() {
                write!(writer, ",{v}")?;
            }
            writeln!(writer)?;
        }
    }
    writer.flush()?;
    Ok(())
}
