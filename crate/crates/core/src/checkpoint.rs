//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "RELPRED\0"
//! version  u32      1
//! d, k, |E|, |R|    u64 each
//! vocab hash        32 bytes (SHA-256, see Vocabulary::content_hash)
//! |E| entity labels then |R| relation labels, each u64 length + UTF-8 bytes
//! E (|E|*d), H (k*2d), b1 (k), W (|R|*k), b2 (|R|) as f64, row-major
//! ```
//!
//! Floats are stored as raw bit patterns, so a save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::kg::Vocabulary;
use crate::model::ModelParams;

const MAGIC: &[u8; 8] = b"RELPRED\0";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(out: &mut W, params: &ModelParams, vocab: &Vocabulary) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for dim in [
        params.embedding_dim(),
        params.hidden_width(),
        params.num_entities(),
        params.num_relations(),
    ] {
        out.write_all(&(dim as u64).to_le_bytes())?;
    }
    out.write_all(&vocab.content_hash())?;
    for label in vocab.entities().iter().chain(vocab.relations()) {
        out.write_all(&(label.len() as u64).to_le_bytes())?;
        out.write_all(label.as_bytes())?;
    }
    let values = params
        .entity
        .iter()
        .chain(params.hidden_weight.iter())
        .chain(params.hidden_bias.iter())
        .chain(params.output_weight.iter())
        .chain(params.output_bias.iter());
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn len(&mut self, limit: u64, what: &str) -> Result<usize> {
        let v = self.u64()?;
        if v > limit {
            return Err(Error::Checkpoint(format!("{what} {v} exceeds sanity limit")));
        }
        Ok(v as usize)
    }

    fn label(&mut self) -> Result<String> {
        let n = self.len(1 << 20, "label length")?;
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        String::from_utf8(buf).map_err(|_| Error::Checkpoint("label is not UTF-8".into()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<(ModelParams, Vocabulary)> {
    let mut r = Reader { inner: input };
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Checkpoint("not a relpred checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.bytes()?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let d = r.len(1 << 16, "embedding size")?;
    let k = r.len(1 << 20, "hidden width")?;
    let num_entities = r.len(1 << 32, "entity count")?;
    let num_relations = r.len(1 << 24, "relation count")?;
    let hash: [u8; 32] = r.bytes()?;
    let entities = (0..num_entities).map(|_| r.label()).collect::<Result<Vec<_>>>()?;
    let relations = (0..num_relations).map(|_| r.label()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_labels(entities, relations)
        .map_err(|e| Error::Checkpoint(format!("invalid vocabulary: {e}")))?;
    if vocab.content_hash() != hash {
        return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
    }

    let shape_err = |e: ndarray::ShapeError| Error::Checkpoint(e.to_string());
    let params = ModelParams {
        entity: Array2::from_shape_vec((num_entities, d), r.floats(num_entities * d)?)
            .map_err(shape_err)?,
        hidden_weight: Array2::from_shape_vec((k, 2 * d), r.floats(k * 2 * d)?)
            .map_err(shape_err)?,
        hidden_bias: Array1::from(r.floats(k)?),
        output_weight: Array2::from_shape_vec((num_relations, k), r.floats(num_relations * k)?)
            .map_err(shape_err)?,
        output_bias: Array1::from(r.floats(num_relations)?),
    };
    let mut rest = [0u8; 1];
    match r.inner.read(&mut rest) {
        Ok(0) => {}
        Ok(_) => return Err(Error::Checkpoint("trailing bytes after tensors".into())),
        Err(e) => return Err(Error::Checkpoint(e.to_string())),
    }
    Ok((params, vocab))
}

pub fn save(path: &Path, params: &ModelParams, vocab: &Vocabulary) -> Result<()> {
    if params.num_entities() != vocab.num_entities()
        || params.num_relations() != vocab.num_relations()
    {
        return Err(Error::Shape("parameters do not match vocabulary sizes".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_checkpoint(&mut out, params, vocab).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, Vocabulary)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
