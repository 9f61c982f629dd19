// SPDX-License-Identifier: MIT OR Apache-2.0

//! Artifact persistence.
//!
//! Binary tensor files are containers:
//!
//! ```text
//! b"STLB" | version: u32 | header_len: u32 | header (JSON, UTF-8)
//! then per tensor: rows: u32 | cols: u32 | rows*cols f32
//! ```
//!
//! all little-endian. The header lists tensor names in block order under
//! `"tensors"` plus arbitrary metadata. Every write goes to a temporary file
//! in the destination directory and is renamed into place.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"STLB";
const VERSION: u32 = 1;

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = AtomicWriter::create(path)?;
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.commit()
}

/// Buffered writer that lands at its destination only on [`Self::commit`].
pub struct AtomicWriter {
    path: PathBuf,
    tmp: PathBuf,
    inner: Option<BufWriter<File>>,
}

impl AtomicWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = tmp_path(path);
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            tmp,
            inner: Some(BufWriter::with_capacity(1 << 20, f)),
        })
    }

    pub fn commit(mut self) -> Result<()> {
        let w = self.inner.take().expect("not yet committed");
        let f = w.into_inner().map_err(|e| Error::io(&self.tmp, e.into_error()))?;
        f.sync_all().map_err(|e| Error::io(&self.tmp, e))?;
        drop(f);
        fs::rename(&self.tmp, &self.path).map_err(|e| Error::io(&self.path, e))
    }
}

impl Write for AtomicWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.inner.as_mut().expect("not committed").write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.as_mut().expect("not committed").flush()
    }
}

impl Drop for AtomicWriter {
    fn drop(&mut self) {
        if self.inner.take().is_some() {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// SHA-256 of a file, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::with_capacity(1 << 20, f);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = r.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = AtomicWriter::create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.commit()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Writes serializable rows as CSV with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = AtomicWriter::create(path)?;
    {
        let mut csv = csv::Writer::from_writer(&mut w);
        for r in rows {
            csv.serialize(r).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        }
        csv.flush().map_err(|e| Error::io(path, e))?;
    }
    w.commit()
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn put_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn dim(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("dimension {n} exceeds u32")))
}

/// Streams a container whose tensors are produced incrementally.
pub struct ContainerWriter {
    path: PathBuf,
    w: AtomicWriter,
    pending: Vec<(usize, usize)>,
    written_rows: usize,
}

impl ContainerWriter {
    /// Starts a container; `shapes` fixes every tensor's shape in advance.
    /// `header` must be a JSON object; the tensor name list is added to it.
    pub fn create(path: &Path, mut header: Value, tensors: &[(&str, (usize, usize))]) -> Result<Self> {
        let obj = header
            .as_object_mut()
            .ok_or_else(|| Error::Format("container header must be a JSON object".into()))?;
        obj.insert(
            "tensors".into(),
            Value::Array(tensors.iter().map(|(n, _)| Value::String((*n).into())).collect()),
        );
        let h = serde_json::to_vec(&header)?;
        let mut w = AtomicWriter::create(path)?;
        w.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
        put_u32(&mut w, VERSION, path)?;
        put_u32(&mut w, dim(h.len())?, path)?;
        w.write_all(&h).map_err(|e| Error::io(path, e))?;
        let mut out = Self {
            path: path.to_path_buf(),
            w,
            pending: tensors.iter().rev().map(|(_, s)| *s).collect(),
            written_rows: 0,
        };
        out.start_tensor()?;
        Ok(out)
    }

    fn start_tensor(&mut self) -> Result<()> {
        while let Some(&(rows, cols)) = self.pending.last() {
            put_u32(&mut self.w, dim(rows)?, &self.path)?;
            put_u32(&mut self.w, dim(cols)?, &self.path)?;
            if rows * cols > 0 {
                break;
            }
            self.pending.pop();
        }
        Ok(())
    }

    /// Appends rows to the current tensor (`values.len()` must be a whole
    /// number of rows).
    pub fn write_rows(&mut self, values: &[f32]) -> Result<()> {
        let &(rows, cols) = self
            .pending
            .last()
            .ok_or_else(|| Error::Format("all tensors already written".into()))?;
        if cols == 0 || !values.len().is_multiple_of(cols) || self.written_rows + values.len() / cols > rows {
            return Err(Error::Dimension(format!(
                "{} values do not fit tensor {rows}x{cols} with {} rows written",
                values.len(),
                self.written_rows
            )));
        }
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.w.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
        self.written_rows += values.len() / cols;
        if self.written_rows == rows {
            self.pending.pop();
            self.written_rows = 0;
            self.start_tensor()?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if !self.pending.is_empty() {
            return Err(Error::Format(format!(
                "{}: {} tensors incomplete",
                self.path.display(),
                self.pending.len()
            )));
        }
        self.w.commit()
    }
}

/// Writes a complete container.
pub fn write_container(path: &Path, header: Value, tensors: &[(&str, &Matrix<f32>)]) -> Result<()> {
    let shapes: Vec<(&str, (usize, usize))> = tensors.iter().map(|(n, m)| (*n, m.shape())).collect();
    let mut w = ContainerWriter::create(path, header, &shapes)?;
    for (_, m) in tensors {
        if !m.data().is_empty() {
            w.write_rows(m.data())?;
        }
    }
    w.finish()
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("{}: truncated container", path.display())));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn get_u32(bytes: &mut &[u8], path: &Path) -> Result<u32> {
    let b = take(bytes, 4, path)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Reads a container: header and named tensors.
pub fn read_container(path: &Path) -> Result<(Value, Vec<(String, Matrix<f32>)>)> {
    let data = read_bytes(path)?;
    let mut b: &[u8] = &data;
    if take(&mut b, 4, path)? != MAGIC {
        return Err(Error::Format(format!("{}: not a tensor container", path.display())));
    }
    let version = get_u32(&mut b, path)?;
    if version != VERSION {
        return Err(Error::Format(format!("{}: unsupported version {version}", path.display())));
    }
    let hlen = get_u32(&mut b, path)? as usize;
    let header: Value = serde_json::from_slice(take(&mut b, hlen, path)?)?;
    let names: Vec<String> = header
        .get("tensors")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Format(format!("{}: header lacks tensor list", path.display())))?
        .iter()
        .map(|v| v.as_str().map(str::to_string))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Format(format!("{}: bad tensor names", path.display())))?;
    let mut tensors = Vec::with_capacity(names.len());
    for name in names {
        let rows = get_u32(&mut b, path)? as usize;
        let cols = get_u32(&mut b, path)? as usize;
        let raw = take(&mut b, rows * cols * 4, path)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Matrix::new(rows, cols, values)?));
    }
    if !b.is_empty() {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok((header, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let a = Matrix::new(2, 3, vec![1.0f32, -2.0, 3.5, 0.0, 1e-7, f32::MAX]).unwrap();
        let b = Matrix::<f32>::zeros(0, 4);
        write_container(&p, json!({"layer": 3}), &[("a", &a), ("b", &b)]).unwrap();
        let (h, t) = read_container(&p).unwrap();
        assert_eq!(h["layer"], 3);
        assert_eq!(t[0], ("a".to_string(), a));
        assert_eq!(t[1].1.shape(), (0, 4));
        let bytes = read_bytes(&p).unwrap();
        assert_eq!(&bytes[..4], b"STLB");
    }

    #[test]
    fn streamed_rows_match_whole_write() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_fn(5, 2, |i, j| (i * 2 + j) as f32);
        let whole = dir.path().join("w.bin");
        let streamed = dir.path().join("s.bin");
        write_container(&whole, json!({}), &[("m", &m)]).unwrap();
        let mut w = ContainerWriter::create(&streamed, json!({}), &[("m", (5, 2))]).unwrap();
        w.write_rows(&m.data()[..4]).unwrap();
        w.write_rows(&m.data()[4..]).unwrap();
        assert!(w.write_rows(&[1.0, 2.0]).is_err());
        w.finish().unwrap();
        assert_eq!(read_bytes(&whole).unwrap(), read_bytes(&streamed).unwrap());
    }

    #[test]
    fn truncated_container_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_container(&p, json!({}), &[("a", &Matrix::<f32>::zeros(3, 3))]).unwrap();
        let mut bytes = read_bytes(&p).unwrap();
        bytes.truncate(bytes.len() - 1);
        write_atomic(&p, &bytes).unwrap();
        assert!(matches!(read_container(&p), Err(Error::Format(_))));
    }

    #[test]
    fn abandoned_writer_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        {
            let mut w = AtomicWriter::create(&p).unwrap();
            w.write_all(b"partial").unwrap();
        }
        assert!(!p.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
