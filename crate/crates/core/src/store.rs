//! On-disk ensemble container.
//!
//! Every dataset is a 2D float64 array stored as raw little-endian values in
//! column-major order (`<group>/<name>.bin`), with a JSON sidecar
//! (`<group>/<name>.json`) holding shape, dtype, chunking, attributes and a
//! finalized flag. Column-major order makes one member's column a single
//! contiguous byte range, so workers writing disjoint member ranges touch
//! disjoint parts of the file.
//!
//! Concurrent writers must use disjoint hyperslabs; the store tracks writes in
//! flight and rejects an overlapping one. Finalized datasets are read-only.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::ops::Range;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "enkf-store/1";
const MANIFEST: &str = "store.json";
const DEFAULT_ROW_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub shape: [usize; 2],
    pub dtype: String,
    pub order: String,
    pub chunking: [usize; 2],
    pub finalized: bool,
    #[serde(default)]
    pub attrs: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
}

struct Region {
    id: u64,
    dataset: String,
    rows: Range<usize>,
    cols: Range<usize>,
}

#[derive(Default)]
struct Inner {
    meta: Mutex<HashMap<String, DatasetMeta>>,
    in_flight: Mutex<(u64, Vec<Region>)>,
}

/// Handle to a container directory; cheap to clone and share across threads.
#[derive(Clone)]
pub struct EnsembleStore {
    root: PathBuf,
    inner: Arc<Inner>,
}

impl std::fmt::Debug for EnsembleStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnsembleStore").field("root", &self.root).finish()
    }
}

/// Zero-padded dataset name for time step `t`.
pub fn step_name(group: &str, t: usize) -> String {
    format!("{group}/{t:06}")
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

struct WriteGuard<'a> {
    inner: &'a Inner,
    id: u64,
}

impl Drop for WriteGuard<'_> {
    fn drop(&mut self) {
        let mut guard = self.inner.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        guard.1.retain(|r| r.id != self.id);
    }
}

fn validate_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.split('/').all(|part| {
            !part.is_empty()
                && part != "."
                && part != ".."
                && part
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        });
    if ok {
        Ok(())
    } else {
        Err(Error::invalid("dataset name", format!("`{name}` is not a valid path")))
    }
}

impl EnsembleStore {
    /// Creates a new container. Fails if `root` already holds one.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = root.join(MANIFEST);
        if manifest.exists() {
            return Err(Error::StoreExists(root.display().to_string()));
        }
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let text = serde_json::to_string_pretty(&Manifest {
            format: FORMAT.to_string(),
        })?;
        fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
        Ok(EnsembleStore {
            root,
            inner: Arc::new(Inner::default()),
        })
    }

    /// Opens an existing container.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest = root.join(MANIFEST);
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != FORMAT {
            return Err(Error::invalid("store format", format!("unsupported `{}`", m.format)));
        }
        Ok(EnsembleStore {
            root,
            inner: Arc::new(Inner::default()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn data_path(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.bin"))
    }

    fn meta_path(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.json"))
    }

    fn save_meta(&self, name: &str, meta: &DatasetMeta) -> Result<()> {
        let path = self.meta_path(name);
        let text = serde_json::to_string_pretty(meta)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn exists(&self, name: &str) -> bool {
        self.meta_path(name).exists()
    }

    /// Sidecar metadata of `name`.
    pub fn meta(&self, name: &str) -> Result<DatasetMeta> {
        if let Some(m) = self.inner.meta.lock().unwrap().get(name) {
            return Ok(m.clone());
        }
        let path = self.meta_path(name);
        if !path.exists() {
            return Err(Error::DatasetNotFound(name.to_string()));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        self.inner
            .meta
            .lock()
            .unwrap()
            .insert(name.to_string(), meta.clone());
        Ok(meta)
    }

    /// Allocates a zero-filled `rows x cols` dataset.
    pub fn create_dataset(&self, name: &str, rows: usize, cols: usize) -> Result<()> {
        validate_name(name)?;
        if self.exists(name) {
            return Err(Error::DatasetExists(name.to_string()));
        }
        let path = self.data_path(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.set_len((rows * cols * 8) as u64)
            .map_err(|e| Error::io(&path, e))?;
        let meta = DatasetMeta {
            shape: [rows, cols],
            dtype: "float64-le".into(),
            order: "column-major".into(),
            chunking: [rows.clamp(1, DEFAULT_ROW_CHUNK), 1],
            finalized: false,
            attrs: BTreeMap::new(),
        };
        self.save_meta(name, &meta)?;
        self.inner
            .meta
            .lock()
            .unwrap()
            .insert(name.to_string(), meta);
        Ok(())
    }

    pub fn set_attr(&self, name: &str, key: &str, value: serde_json::Value) -> Result<()> {
        let mut meta = self.meta(name)?;
        meta.attrs.insert(key.to_string(), value);
        self.save_meta(name, &meta)?;
        self.inner.meta.lock().unwrap().insert(name.to_string(), meta);
        Ok(())
    }

    /// Marks a dataset complete; later writes fail with [`Error::DatasetFinalized`].
    pub fn finalize(&self, name: &str) -> Result<()> {
        let mut meta = self.meta(name)?;
        if meta.finalized {
            return Ok(());
        }
        let busy = self
            .inner
            .in_flight
            .lock()
            .unwrap()
            .1
            .iter()
            .any(|r| r.dataset == name);
        if busy {
            return Err(Error::OverlappingWrite(format!(
                "{name}: finalized while a write is in flight"
            )));
        }
        meta.finalized = true;
        self.save_meta(name, &meta)?;
        self.inner.meta.lock().unwrap().insert(name.to_string(), meta);
        Ok(())
    }

    fn check_slab(name: &str, meta: &DatasetMeta, rows: &Range<usize>, cols: &Range<usize>) -> Result<()> {
        let [nr, nc] = meta.shape;
        if rows.start > rows.end || cols.start > cols.end || rows.end > nr || cols.end > nc {
            return Err(Error::HyperslabOutOfBounds {
                dataset: name.to_string(),
                rows: rows.clone(),
                cols: cols.clone(),
                shape: (nr, nc),
            });
        }
        Ok(())
    }

    fn register(&self, name: &str, rows: &Range<usize>, cols: &Range<usize>) -> Result<WriteGuard<'_>> {
        let mut guard = self.inner.in_flight.lock().unwrap();
        if let Some(other) = guard
            .1
            .iter()
            .find(|r| r.dataset == name && overlaps(&r.rows, rows) && overlaps(&r.cols, cols))
        {
            return Err(Error::OverlappingWrite(format!(
                "{name}: rows {:?} cols {:?} overlap a write in flight on rows {:?} cols {:?}",
                rows, cols, other.rows, other.cols
            )));
        }
        guard.0 += 1;
        let id = guard.0;
        guard.1.push(Region {
            id,
            dataset: name.to_string(),
            rows: rows.clone(),
            cols: cols.clone(),
        });
        Ok(WriteGuard {
            inner: &self.inner,
            id,
        })
    }

    /// Writes `data` (`rows.len() x cols.len()`) into the given region.
    pub fn write_hyperslab(
        &self,
        name: &str,
        rows: Range<usize>,
        cols: Range<usize>,
        data: &DMatrix<f64>,
    ) -> Result<()> {
        let meta = self.meta(name)?;
        Self::check_slab(name, &meta, &rows, &cols)?;
        if data.nrows() != rows.len() || data.ncols() != cols.len() {
            return Err(Error::DimensionMismatch {
                context: "hyperslab data",
                expected: rows.len() * cols.len(),
                actual: data.len(),
            });
        }
        if meta.finalized {
            return Err(Error::DatasetFinalized(name.to_string()));
        }
        if rows.is_empty() || cols.is_empty() {
            return Ok(());
        }
        let _guard = self.register(name, &rows, &cols)?;
        let path = self.data_path(name);
        let file = OpenOptions::new()
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let nr = meta.shape[0];
        let mut buf = Vec::with_capacity(rows.len() * 8);
        for (jj, j) in cols.clone().enumerate() {
            buf.clear();
            for v in data.column(jj).iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            let offset = ((j * nr + rows.start) * 8) as u64;
            file.write_all_at(&buf, offset)
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read_hyperslab(&self, name: &str, rows: Range<usize>, cols: Range<usize>) -> Result<DMatrix<f64>> {
        let meta = self.meta(name)?;
        Self::check_slab(name, &meta, &rows, &cols)?;
        let mut out = DMatrix::zeros(rows.len(), cols.len());
        if rows.is_empty() || cols.is_empty() {
            return Ok(out);
        }
        let path = self.data_path(name);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let nr = meta.shape[0];
        let mut buf = vec![0u8; rows.len() * 8];
        for (jj, j) in cols.enumerate() {
            let offset = ((j * nr + rows.start) * 8) as u64;
            file.read_exact_at(&mut buf, offset)
                .map_err(|e| Error::io(&path, e))?;
            for (ii, chunk) in buf.chunks_exact(8).enumerate() {
                out[(ii, jj)] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        Ok(out)
    }

    pub fn shape(&self, name: &str) -> Result<(usize, usize)> {
        let [r, c] = self.meta(name)?.shape;
        Ok((r, c))
    }

    /// Creates, fills and finalizes a dataset in one go.
    pub fn write_matrix(&self, name: &str, data: &DMatrix<f64>) -> Result<()> {
        self.create_dataset(name, data.nrows(), data.ncols())?;
        self.write_hyperslab(name, 0..data.nrows(), 0..data.ncols(), data)?;
        self.finalize(name)
    }

    pub fn write_vector(&self, name: &str, v: &DVector<f64>) -> Result<()> {
        self.write_matrix(name, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
    }

    pub fn read_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let (r, c) = self.shape(name)?;
        self.read_hyperslab(name, 0..r, 0..c)
    }

    pub fn read_vector(&self, name: &str) -> Result<DVector<f64>> {
        let m = self.read_matrix(name)?;
        Ok(DVector::from_column_slice(m.as_slice()))
    }

    /// Dataset names in `group`, sorted.
    pub fn list(&self, group: &str) -> Result<Vec<String>> {
        let dir = self.root.join(group);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut names = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let file_name = entry.file_name();
            let file_name = file_name.to_string_lossy();
            if let Some(stem) = file_name.strip_suffix(".bin") {
                names.push(format!("{group}/{stem}"));
            }
        }
        names.sort();
        Ok(names)
    }

    /// Stores a JSON document under `meta/<key>.json`.
    pub fn write_meta<T: Serialize>(&self, key: &str, value: &T) -> Result<()> {
        validate_name(key)?;
        let path = self.root.join("meta").join(format!("{key}.json"));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(value)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read_meta<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let path = self.root.join("meta").join(format!("{key}.json"));
        if !path.exists() {
            return Err(Error::DatasetNotFound(format!("meta/{key}")));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Path of a free-form file inside the container (created directories included).
    pub fn file_path(&self, relative: &str) -> Result<PathBuf> {
        validate_name(relative)?;
        let path = self.root.join(relative);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(path)
    }
}
