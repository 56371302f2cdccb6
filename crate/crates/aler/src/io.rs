//! Record, ground-truth, embedding and chunk files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use aler_core::{CandidatePair, ChunkSet, EmbeddingMatrix, MatchSet, Record, RecordCollection};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"ALEREMB1";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: row {row}: {message}")]
    Row { path: PathBuf, row: u64, message: String },
    #[error("{path}: no column named {column:?} in header")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: duplicate id {id:?} on rows {first} and {second}")]
    DuplicateId { path: PathBuf, id: String, first: u64, second: u64 },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Core { path: PathBuf, source: aler_core::Error },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    fn format(path: &Path, message: impl Into<String>) -> Self {
        IoError::Format { path: path.to_path_buf(), message: message.into() }
    }

    fn core(path: &Path, source: aler_core::Error) -> Self {
        IoError::Core { path: path.to_path_buf(), source }
    }
}

type Result<T> = std::result::Result<T, IoError>;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| IoError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| IoError::io(path, e))
}

fn csv_reader<R: Read>(reader: R, delimiter: u8) -> csv::Reader<R> {
    csv::ReaderBuilder::new().delimiter(delimiter).comment(Some(b'#')).from_reader(reader)
}

fn row_err(path: &Path, e: csv::Error) -> IoError {
    let row = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => IoError::Io { path: path.to_path_buf(), source },
        kind => IoError::Row { path: path.to_path_buf(), row, message: format!("{kind:?}") },
    }
}

/// Loads a delimited record file. Rows are numbered by file line, the
/// header being row 1.
pub fn load_records(path: &Path, id_column: &str, delimiter: u8) -> Result<RecordCollection> {
    read_records(open(path)?, path, id_column, delimiter)
}

pub fn read_records<R: Read>(reader: R, path: &Path, id_column: &str, delimiter: u8) -> Result<RecordCollection> {
    let mut rdr = csv_reader(reader, delimiter);
    let header = rdr.headers().map_err(|e| row_err(path, e))?.clone();
    let id_at = header
        .iter()
        .position(|h| h == id_column)
        .ok_or_else(|| IoError::MissingColumn { path: path.to_path_buf(), column: id_column.to_string() })?;
    let schema: Vec<String> =
        header.iter().enumerate().filter(|(i, _)| *i != id_at).map(|(_, h)| h.to_string()).collect();
    let mut out = RecordCollection::new(schema);
    let mut rows: BTreeMap<String, u64> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| row_err(path, e))?;
        let row = rec.position().map_or(0, |p| p.line());
        let id = rec.get(id_at).unwrap_or("").to_string();
        if let Some(&first) = rows.get(&id) {
            return Err(IoError::DuplicateId { path: path.to_path_buf(), id, first, second: row });
        }
        let values = rec.iter().enumerate().filter(|(i, _)| *i != id_at).map(|(_, v)| v.to_string()).collect();
        out.push(Record { id: id.clone(), values })
            .map_err(|e| IoError::Row { path: path.to_path_buf(), row, message: e.to_string() })?;
        rows.insert(id, row);
    }
    Ok(out)
}

pub fn save_records(path: &Path, records: &RecordCollection, id_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let header = std::iter::once(id_column).chain(records.schema().iter().map(String::as_str));
    w.write_record(header).map_err(|e| row_err(path, e))?;
    for r in records.records() {
        w.write_record(std::iter::once(r.id.as_str()).chain(r.values.iter().map(String::as_str)))
            .map_err(|e| row_err(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// Two-column `r_id,s_id` file with a header row.
pub fn load_truth(path: &Path, delimiter: u8) -> Result<MatchSet> {
    let mut rdr = csv_reader(open(path)?, delimiter);
    let mut out = MatchSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| row_err(path, e))?;
        let row = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(IoError::Row { path: path.to_path_buf(), row, message: "expected two columns".into() });
        }
        out.insert(CandidatePair::new(&rec[0], &rec[1]))
            .map_err(|e| IoError::Row { path: path.to_path_buf(), row, message: e.to_string() })?;
    }
    Ok(out)
}

pub fn save_truth(path: &Path, truth: &MatchSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["r_id", "s_id"]).map_err(|e| row_err(path, e))?;
    for p in truth.iter() {
        w.write_record([&p.r, &p.s]).map_err(|e| row_err(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// Reads either embedding format, picked by the leading magic bytes.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let mut r = open(path)?;
    let head = r.fill_buf().map_err(|e| IoError::io(path, e))?;
    if head.starts_with(EMBEDDING_MAGIC) {
        read_embeddings_binary(r, path)
    } else {
        read_embeddings_text(r, path)
    }
}

fn parse_header(line: &str, path: &Path) -> Result<(usize, usize)> {
    let mut dim = None;
    let mut count = None;
    for field in line.split_whitespace() {
        match field.split_once('=') {
            Some(("dim", v)) => dim = v.parse().ok(),
            Some(("count", v)) => count = v.parse().ok(),
            _ => {}
        }
    }
    match (dim, count) {
        (Some(d), Some(n)) if d > 0 => Ok((d, n)),
        _ => Err(IoError::format(path, format!("bad header {line:?}, expected `dim=<d> count=<n>`"))),
    }
}

pub fn read_embeddings_text<R: BufRead>(reader: R, path: &Path) -> Result<EmbeddingMatrix> {
    let mut lines = reader.lines().enumerate();
    let (dim, count) = match lines.next() {
        Some((_, line)) => parse_header(&line.map_err(|e| IoError::io(path, e))?, path)?,
        None => return Err(IoError::format(path, "empty file")),
    };
    let mut m = EmbeddingMatrix::new(dim).map_err(|e| IoError::core(path, e))?;
    let mut v = Vec::with_capacity(dim);
    for (i, line) in lines {
        let line = line.map_err(|e| IoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = i as u64 + 1;
        let mut parts = line.split_whitespace();
        let id = parts.next().unwrap_or_default().to_string();
        v.clear();
        for p in parts {
            let x: f32 = p.parse().map_err(|_| IoError::Row {
                path: path.to_path_buf(),
                row,
                message: format!("record {id:?}: bad number {p:?}"),
            })?;
            v.push(x);
        }
        m.push(id, &v).map_err(|e| IoError::Row { path: path.to_path_buf(), row, message: e.to_string() })?;
    }
    if m.len() != count {
        return Err(IoError::format(path, format!("header declares {count} rows, found {}", m.len())));
    }
    Ok(m)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => IoError::format(path, "truncated file"),
        _ => IoError::io(path, e),
    })
}

pub fn read_embeddings_binary<R: Read>(mut r: R, path: &Path) -> Result<EmbeddingMatrix> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(IoError::format(path, "bad magic"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact(&mut r, &mut b4, path)?;
    let dim = u32::from_le_bytes(b4) as usize;
    read_exact(&mut r, &mut b8, path)?;
    let count = u64::from_le_bytes(b8);
    let mut m = EmbeddingMatrix::new(dim).map_err(|e| IoError::core(path, e))?;
    let mut raw = vec![0u8; dim * 4];
    let mut v = vec![0f32; dim];
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        read_exact(&mut r, &mut b2, path)?;
        let mut id = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact(&mut r, &mut id, path)?;
        let id = String::from_utf8(id).map_err(|_| IoError::format(path, "id is not UTF-8"))?;
        read_exact(&mut r, &mut raw, path)?;
        for (x, c) in v.iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        m.push(id, &v).map_err(|e| IoError::core(path, e))?;
    }
    Ok(m)
}

pub fn save_embeddings_text(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let mut w = create(path)?;
    let mut go = || -> std::io::Result<()> {
        writeln!(w, "dim={} count={}", m.dim(), m.len())?;
        for (id, v) in m.iter() {
            write!(w, "{id}")?;
            for x in v {
                write!(w, " {x}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    go().map_err(|e| IoError::io(path, e))
}

pub fn save_embeddings_binary(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let mut w = create(path)?;
    let mut go = || -> std::io::Result<()> {
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&(m.dim() as u32).to_le_bytes())?;
        w.write_all(&(m.len() as u64).to_le_bytes())?;
        for (id, v) in m.iter() {
            let len = u16::try_from(id.len())
                .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("id too long: {id}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    };
    go().map_err(|e| IoError::io(path, e))
}

/// `record_id,chunk` in sample order, after an optional `#` header line.
pub fn save_chunks(path: &Path, chunks: &ChunkSet, sample_ids: &[String], header: Option<&str>) -> Result<()> {
    let mut w = create(path)?;
    let mut go = || -> std::io::Result<()> {
        if let Some(h) = header {
            writeln!(w, "# {h}")?;
        }
        writeln!(w, "record_id,chunk")?;
        for (id, c) in sample_ids.iter().zip(&chunks.assignment) {
            writeln!(w, "{id},{c}")?;
        }
        w.flush()
    };
    go().map_err(|e| IoError::io(path, e))
}

/// Rebuilds the chunk set from a chunk file and the query-side embeddings.
pub fn load_chunks(path: &Path, emb: &EmbeddingMatrix) -> Result<ChunkSet> {
    let mut rdr = csv_reader(open(path)?, b',');
    let mut ids = Vec::new();
    let mut assignment = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| row_err(path, e))?;
        let row = rec.position().map_or(0, |p| p.line());
        let chunk = rec.get(1).and_then(|c| c.parse().ok()).ok_or_else(|| IoError::Row {
            path: path.to_path_buf(),
            row,
            message: "expected `record_id,chunk`".into(),
        })?;
        ids.push(rec[0].to_string());
        assignment.push(chunk);
    }
    let sub = emb.subset(ids.iter().map(String::as_str)).map_err(|e| IoError::core(path, e))?;
    ChunkSet::from_assignment(&sub, assignment).map_err(|e| IoError::core(path, e))
}
