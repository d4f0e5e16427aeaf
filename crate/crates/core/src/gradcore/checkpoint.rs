//! `BDKD` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BDKD" | version u16 | manifest_len u32 | manifest UTF-8
//! repeated until EOF:
//!   name_len u32 | name UTF-8 | rank u8 | dims u32 × rank | f32 × Π dims
//! ```
//!
//! The manifest is [`Model::manifest`]. Batchnorm running statistics are
//! written as ordinary parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::model::{Mode, Model};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BDKD";
pub const VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let manifest = model.manifest();
    out.write_all(&(manifest.len() as u32).to_le_bytes())?;
    out.write_all(manifest.as_bytes())?;
    for p in model.params() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        let shape = p.tensor.shape();
        out.write_all(&[shape.len() as u8])?;
        for &d in shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Format("truncated file".into())
    } else {
        Error::Io(e)
    }
}

/// Read a checkpoint. The returned model is in eval mode.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Model> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("missing BDKD magic bytes".into()));
    }
    let mut ver = [0u8; 2];
    input.read_exact(&mut ver).map_err(truncated)?;
    let ver = u16::from_le_bytes(ver);
    if ver != VERSION {
        return Err(Error::Format(format!("unsupported BDKD version {ver}")));
    }
    let len = read_u32(&mut input)? as usize;
    let mut manifest = vec![0u8; len];
    input.read_exact(&mut manifest).map_err(truncated)?;
    let manifest = String::from_utf8(manifest).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let mut model = Model::from_manifest(&manifest)?;
    let mut seen = vec![false; model.params().len()];
    loop {
        let mut first = [0u8; 1];
        match input.read(&mut first)? {
            0 => break,
            _ => {}
        }
        let mut rest = [0u8; 3];
        input.read_exact(&mut rest).map_err(truncated)?;
        let name_len = u32::from_le_bytes([first[0], rest[0], rest[1], rest[2]]) as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        input.read_exact(&mut rank).map_err(truncated)?;
        let dims: Vec<usize> = (0..rank[0])
            .map(|_| read_u32(&mut input).map(|d| d as usize))
            .collect::<Result<_>>()?;
        let idx = model
            .params()
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Format(format!("unexpected parameter `{name}`")))?;
        if seen[idx] {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
        seen[idx] = true;
        let tensor = &mut model.params_mut()[idx].tensor;
        if tensor.shape() != dims.as_slice() {
            return Err(Error::Format(format!(
                "parameter `{name}` has shape {dims:?}, manifest implies {:?}",
                tensor.shape()
            )));
        }
        let mut buf = vec![0u8; tensor.numel() * 4];
        input.read_exact(&mut buf).map_err(truncated)?;
        for (v, b) in tensor.data_mut().iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!(
            "parameter `{}` missing",
            model.params()[i].name
        )));
    }
    model.set_mode(Mode::Eval);
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load(path: &Path) -> Result<Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::model::small_cnn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Model::new([3, 8, 8], small_cnn(&[4, 6], 3), &mut rng).unwrap()
    }

    #[test]
    fn round_trip_preserves_parameters() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"BDKD");
        assert_eq!(&buf[4..6], &1u16.to_le_bytes());
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.mode(), Mode::Eval);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        let err = read_checkpoint(bad.as_slice()).unwrap_err();
        assert!(err.to_string().contains("BDKD"));

        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(read_checkpoint(bad.as_slice()).unwrap_err().to_string().contains("version"));

        let short = &buf[..buf.len() - 3];
        assert!(read_checkpoint(short).is_err());
    }
}
