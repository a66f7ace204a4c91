//! Model checkpoints: a little-endian binary file holding the architecture
//! header and every parameter tensor as 32-bit floats. Write→read→write is
//! byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LayerParams, ModelConfig, Parameters, K_MAX};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"LTCM";
const VERSION: u32 = 1;

/// Write `params` under the `"LTCM"` header. Tensor order matches the field
/// declaration order of [`Parameters`].
pub fn save(path: &Path, cfg: &ModelConfig, params: &Parameters<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    for v in [
        cfg.num_layers,
        cfg.hidden,
        cfg.num_heads,
        cfg.mlp_dim,
        cfg.vocab_size,
        cfg.max_seq,
    ] {
        w.write_all(&(v as u32).to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&cfg.rope_base.to_le_bytes()).map_err(io_err)?;

    for tensor in params.flat_tensors() {
        for &v in tensor {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Read a checkpoint back. The header is validated against the expected magic
/// and version, and the file must contain exactly the tensors the
/// architecture implies.
pub fn load(path: &Path) -> Result<(ModelConfig, Parameters<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::parse(path, 0, "not a model checkpoint (bad magic)"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::parse(
            path,
            0,
            format!("unsupported checkpoint version {version} (expected {VERSION})"),
        ));
    }
    let cfg = ModelConfig {
        num_layers: read_u32(&mut r, path)? as usize,
        hidden: read_u32(&mut r, path)? as usize,
        num_heads: read_u32(&mut r, path)? as usize,
        mlp_dim: read_u32(&mut r, path)? as usize,
        vocab_size: read_u32(&mut r, path)? as usize,
        max_seq: read_u32(&mut r, path)? as usize,
        rope_base: read_f64(&mut r, path)?,
    };
    cfg.validate()
        .map_err(|e| Error::parse(path, 0, format!("invalid architecture header: {e}")))?;

    let embedding = read_matrix(&mut r, cfg.vocab_size, cfg.hidden, path)?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for _ in 0..cfg.num_layers {
        layers.push(LayerParams {
            attn_norm_gain: read_vec(&mut r, cfg.hidden, path)?,
            wq: read_matrix(&mut r, cfg.hidden, cfg.hidden, path)?,
            wk: read_matrix(&mut r, cfg.hidden, cfg.hidden, path)?,
            wv: read_matrix(&mut r, cfg.hidden, cfg.hidden, path)?,
            wo: read_matrix(&mut r, cfg.hidden, cfg.hidden, path)?,
            mlp_norm_gain: read_vec(&mut r, cfg.hidden, path)?,
            w_in: read_matrix(&mut r, cfg.hidden, cfg.mlp_dim, path)?,
            w_out: read_matrix(&mut r, cfg.mlp_dim, cfg.hidden, path)?,
        });
    }
    let final_norm_gain = read_vec(&mut r, cfg.hidden, path)?;
    let score_head = read_vec(&mut r, cfg.hidden, path)?;
    let id_logit_rows = read_matrix(&mut r, K_MAX, cfg.hidden, path)?;

    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::parse(path, 0, "trailing bytes after parameters")),
        Err(e) => return Err(Error::io(path, e)),
    }

    Ok((
        cfg,
        Parameters {
            embedding,
            layers,
            final_norm_gain,
            score_head,
            id_logit_rows,
        },
    ))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::parse(path, 0, "checkpoint truncated")
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read, path: &Path) -> Result<f64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_vec(r: &mut impl Read, len: usize, path: &Path) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; len * 4];
    read_exact(r, &mut bytes, path)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_matrix(r: &mut impl Read, rows: usize, cols: usize, path: &Path) -> Result<Matrix<f32>> {
    let data = read_vec(r, rows * cols, path)?;
    Matrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngSeed;

    #[test]
    fn round_trip_is_bit_exact_and_byte_stable() {
        let cfg = ModelConfig::tiny();
        let params = Parameters::<f32>::init(&cfg, RngSeed(31)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");

        save(&p1, &cfg, &params).unwrap();
        let (cfg2, params2) = load(&p1).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params, params2);

        save(&p2, &cfg2, &params2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn bad_magic_and_truncation_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(load(&p), Err(Error::Parse { .. })));

        let cfg = ModelConfig::tiny();
        let params = Parameters::<f32>::init(&cfg, RngSeed(1)).unwrap();
        let full = dir.path().join("full.ckpt");
        save(&full, &cfg, &params).unwrap();
        let bytes = std::fs::read(&full).unwrap();

        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load(&cut), Err(Error::Parse { .. })));

        let padded = dir.path().join("padded.ckpt");
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&padded, &extra).unwrap();
        assert!(matches!(load(&padded), Err(Error::Parse { .. })));
    }
}
