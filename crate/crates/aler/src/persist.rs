//! Binary index and model files.
//!
//! Index: `ALERHNSW`, u32 version, u32 m, u32 ef_construction,
//! u32 ef_search, u32 dim, u64 nodes, u32 entry, then per node: u16 id
//! length, id bytes, u8 level, `dim` f32, and for each layer `0..=level` a
//! u32 degree followed by u32 neighbor ids.
//!
//! Model: `ALERMLP1`, u32 version, u32 input dim, u32 hidden1, u32 hidden2,
//! f32 dropout, u64 parameter count, then f32 parameters in layer order
//! (w1, b1, w2, b2, w3, b3). All little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use aler_core::mlp::{HIDDEN1, HIDDEN2};
use aler_core::{AnnIndex, EmbeddingMatrix, HnswParams, MlpModel};

pub const INDEX_MAGIC: &[u8; 8] = b"ALERHNSW";
pub const MODEL_MAGIC: &[u8; 8] = b"ALERMLP1";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("bad file: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] aler_core::Error),
}

type Result<T> = std::result::Result<T, PersistError>;

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => PersistError::Format("truncated".into()),
            _ => e.into(),
        })?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }
    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if &self.bytes::<8>()? != magic {
            return Err(PersistError::Format("bad magic".into()));
        }
        match self.u32()? {
            VERSION => Ok(()),
            v => Err(PersistError::Format(format!("unsupported version {v}"))),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_index<W: Write>(w: &mut W, index: &AnnIndex) -> Result<()> {
    let p = index.params();
    w.write_all(INDEX_MAGIC)?;
    for x in [VERSION, p.m as u32, p.ef_construction as u32, p.ef_search as u32, index.dim() as u32] {
        w.write_all(&x.to_le_bytes())?;
    }
    w.write_all(&(index.len() as u64).to_le_bytes())?;
    w.write_all(&(index.entry_point() as u32).to_le_bytes())?;
    for node in 0..index.len() {
        let id = index.id(node);
        let len = u16::try_from(id.len()).map_err(|_| PersistError::Format(format!("id too long: {id}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        w.write_all(&[index.level(node) as u8])?;
        for x in index.vector(node) {
            w.write_all(&x.to_le_bytes())?;
        }
        for layer in 0..=index.level(node) {
            let nbrs = index.neighbors(node, layer);
            w.write_all(&(nbrs.len() as u32).to_le_bytes())?;
            for n in nbrs {
                w.write_all(&n.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_index<R: Read>(r: R) -> Result<AnnIndex> {
    let mut r = Reader(r);
    r.header(INDEX_MAGIC)?;
    let m = r.u32()? as usize;
    let ef_construction = r.u32()? as usize;
    let ef_search = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let n = r.u64()? as usize;
    let entry = r.u32()?;
    let mut matrix = EmbeddingMatrix::new(dim)?;
    let mut levels = Vec::with_capacity(n);
    let mut links = Vec::with_capacity(n);
    let mut v = vec![0f32; dim];
    for _ in 0..n {
        let len = r.u16()? as usize;
        let mut id = vec![0u8; len];
        r.0.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| PersistError::Format("id is not UTF-8".into()))?;
        let level = r.u8()?;
        for x in v.iter_mut() {
            *x = r.f32()?;
        }
        matrix.push(id, &v)?;
        let mut layers = Vec::with_capacity(level as usize + 1);
        for _ in 0..=level {
            let deg = r.u32()? as usize;
            if deg > 2 * m {
                return Err(PersistError::Format(format!("degree {deg} exceeds bound")));
            }
            layers.push((0..deg).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?);
        }
        levels.push(level);
        links.push(layers);
    }
    Ok(AnnIndex::from_parts(HnswParams { m, ef_construction, ef_search }, matrix, levels, links, entry)?)
}

pub fn save_index(path: &Path, index: &AnnIndex) -> Result<()> {
    let mut w = create(path)?;
    write_index(&mut w, index)?;
    Ok(w.flush()?)
}

pub fn load_index(path: &Path) -> Result<AnnIndex> {
    read_index(BufReader::new(File::open(path)?))
}

pub fn write_model<W: Write>(w: &mut W, model: &MlpModel) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    for x in [VERSION, model.input_dim() as u32, HIDDEN1 as u32, HIDDEN2 as u32] {
        w.write_all(&x.to_le_bytes())?;
    }
    w.write_all(&(model.dropout_rate() as f32).to_le_bytes())?;
    w.write_all(&(model.param_count() as u64).to_le_bytes())?;
    for p in model.params() {
        w.write_all(&(*p as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model<R: Read>(r: R) -> Result<MlpModel> {
    let mut r = Reader(r);
    r.header(MODEL_MAGIC)?;
    let input_dim = r.u32()? as usize;
    let (h1, h2) = (r.u32()? as usize, r.u32()? as usize);
    if (h1, h2) != (HIDDEN1, HIDDEN2) {
        return Err(PersistError::Format(format!("hidden sizes {h1}x{h2} unsupported")));
    }
    let dropout = f64::from(r.f32()?);
    let count = r.u64()? as usize;
    let params = (0..count).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    Ok(MlpModel::from_params(input_dim, dropout, params)?)
}

pub fn save_model(path: &Path, model: &MlpModel) -> Result<()> {
    let mut w = create(path)?;
    write_model(&mut w, model)?;
    Ok(w.flush()?)
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    read_model(BufReader::new(File::open(path)?))
}

/// The model as it will be after a save/load cycle.
pub fn quantize(model: &MlpModel) -> Result<MlpModel> {
    let params = model.params().iter().map(|p| f64::from(*p as f32)).collect();
    Ok(MlpModel::from_params(model.input_dim(), f64::from(model.dropout_rate() as f32), params)?)
}
