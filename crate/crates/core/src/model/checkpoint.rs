//! Model checkpoints.
//!
//! Binary format (`TLMD`, version 1), all integers little-endian:
//!
//! ```text
//! magic "TLMD" | format version u32 | vocab u32 | d_model u32 | n_layers u32
//! | n_heads u32 | d_ff u32 | window u32 | rope_base f64 | rms_eps f32
//! | raw f32 parameter data in the fixed roster order
//! ```
//!
//! The parameter section is a byte-exact dump, so `save` followed by `load`
//! reproduces the model bit for bit.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub fn save_model(model: &ModelParams, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(format!("write {}", path.display()), e);
    let cfg = &model.cfg;
    w.write_all(b"TLMD").map_err(io)?;
    w.write_all(&1u32.to_le_bytes()).map_err(io)?;
    for field in [cfg.vocab, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.window] {
        w.write_all(&(field as u32).to_le_bytes()).map_err(io)?;
    }
    w.write_all(&cfg.rope_base.to_le_bytes()).map_err(io)?;
    w.write_all(&cfg.rms_eps.to_le_bytes()).map_err(io)?;
    for (_, t) in model.named() {
        for v in t.as_slice() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let f =
        std::fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut r = BufReader::new(f);
    let io = |e| Error::io(format!("read {}", path.display()), e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != b"TLMD" {
        return Err(Error::runtime(format!("{} is not a model file", path.display())));
    }
    let ver = read_u32(&mut r).map_err(io)?;
    if ver != 1 {
        return Err(Error::runtime(format!("unsupported model file version {ver}")));
    }
    let cfg = ModelConfig {
        vocab: read_u32(&mut r).map_err(io)? as usize,
        d_model: read_u32(&mut r).map_err(io)? as usize,
        n_layers: read_u32(&mut r).map_err(io)? as usize,
        n_heads: read_u32(&mut r).map_err(io)? as usize,
        d_ff: read_u32(&mut r).map_err(io)? as usize,
        window: read_u32(&mut r).map_err(io)? as usize,
        rope_base: f64::from_le_bytes(read_arr(&mut r).map_err(io)?),
        rms_eps: f32::from_le_bytes(read_arr(&mut r).map_err(io)?),
    };
    cfg.validate()?;
    // Build with the right shapes, then overwrite every value from the file.
    let mut model = ModelParams::init(&cfg, 0)?;
    for (name, t) in model.named_mut() {
        for v in t.as_mut_slice() {
            *v = f32::from_le_bytes(read_arr(&mut r).map_err(|e| {
                Error::io(format!("read {} (parameter {name})", path.display()), e)
            })?);
        }
    }
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(model),
        Ok(_) => Err(Error::runtime(format!("{} has trailing bytes", path.display()))),
        Err(e) => Err(Error::io(format!("read {}", path.display()), e)),
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_arr<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelParams {
        let cfg = ModelConfig {
            vocab: 32,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            window: 16,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, 77).unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tlmd");
        save_model(&m, &p).unwrap();
        let m2 = load_model(&p).unwrap();
        assert_eq!(m.checksum(), m2.checksum());
        assert_eq!(m.cfg, m2.cfg);
        for ((na, ta), (nb, tb)) in m.named().iter().zip(m2.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.as_slice(), tb.as_slice(), "parameter {na} changed");
        }
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.bin");
        std::fs::write(&p, b"NOPE0000").unwrap();
        let err = load_model(&p).unwrap_err();
        assert!(err.to_string().contains("not a model file"));

        let m = tiny();
        let p2 = dir.path().join("trunc.tlmd");
        save_model(&m, &p2).unwrap();
        let bytes = std::fs::read(&p2).unwrap();
        std::fs::write(&p2, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load_model(&p2).is_err());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("extra.tlmd");
        save_model(&m, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.push(0);
        std::fs::write(&p, &bytes).unwrap();
        let err = load_model(&p).unwrap_err();
        assert!(err.to_string().contains("trailing"));
    }
}
