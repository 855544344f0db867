//! Parameter file:
//!
//! ```text
//! magic      8 bytes   "GLABPRM\0"
//! version    1 byte    1
//! dim        u32 LE
//! time_dim   u32 LE
//! class_dim  u32 LE
//! classes    u32 LE
//! n_hidden   u32 LE, then n_hidden × u32 LE widths
//! n_values   u64 LE
//! values     n_values × f64 LE, parameters in declared order
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Architecture, Denoiser, Tensor};

pub const PARAMS_MAGIC: &[u8; 8] = b"GLABPRM\0";
pub const PARAMS_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: not a parameter file")]
    Magic,
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u8, expected: u8 },
    #[error("file truncated while reading `{0}`")]
    Truncated(&'static str),
    #[error("invalid `{field}`: {detail}")]
    Field { field: &'static str, detail: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

pub fn write_params<W: Write>(model: &Denoiser, mut w: W) -> io::Result<()> {
    let arch = model.arch();
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&[PARAMS_VERSION])?;
    for v in [
        arch.dim,
        arch.time_dim,
        arch.class_dim,
        arch.classes,
        arch.hidden.len(),
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for &h in &arch.hidden {
        w.write_all(&(h as u32).to_le_bytes())?;
    }
    w.write_all(&(model.param_count() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(model.param_count() * 8);
    for p in model.params() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn save_params(model: &Denoiser, path: &Path) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    write_params(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], field: &'static str) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FormatError::Truncated(field),
        _ => FormatError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, field: &'static str) -> Result<usize, FormatError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, field)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn read_params<R: Read>(mut r: R) -> Result<Denoiser, FormatError> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != PARAMS_MAGIC {
        return Err(FormatError::Magic);
    }
    let mut version = [0u8; 1];
    read_exact(&mut r, &mut version, "version")?;
    if version[0] != PARAMS_VERSION {
        return Err(FormatError::Version {
            found: version[0],
            expected: PARAMS_VERSION,
        });
    }
    let dim = read_u32(&mut r, "dim")?;
    let time_dim = read_u32(&mut r, "time_dim")?;
    let class_dim = read_u32(&mut r, "class_dim")?;
    let classes = read_u32(&mut r, "classes")?;
    let n_hidden = read_u32(&mut r, "n_hidden")?;
    if n_hidden > 64 {
        return Err(FormatError::Field {
            field: "n_hidden",
            detail: format!("{n_hidden} layers is implausible"),
        });
    }
    let hidden = (0..n_hidden)
        .map(|_| read_u32(&mut r, "hidden"))
        .collect::<Result<Vec<_>, _>>()?;
    let arch = Architecture {
        dim,
        hidden,
        time_dim,
        class_dim,
        classes,
    };
    arch.validate().map_err(|e| FormatError::Field {
        field: "architecture",
        detail: e.to_string(),
    })?;
    let shapes = Denoiser::param_shapes(&arch);
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let mut n = [0u8; 8];
    read_exact(&mut r, &mut n, "n_values")?;
    let n_values = u64::from_le_bytes(n) as usize;
    if n_values != expected {
        return Err(FormatError::Field {
            field: "n_values",
            detail: format!("architecture needs {expected} values, header says {n_values}"),
        });
    }
    let mut raw = vec![0u8; expected * 8];
    read_exact(&mut r, &mut raw, "values")?;
    let mut values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let tensors = shapes
        .iter()
        .map(|s| {
            let len = s.iter().product();
            Tensor::from_vec(s, values.by_ref().take(len).collect()).expect("sized")
        })
        .collect();
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(FormatError::Field {
            field: "values",
            detail: "trailing bytes after parameter block".into(),
        });
    }
    Ok(Denoiser::from_parts(arch, tensors))
}

pub fn load_params(path: &Path) -> Result<Denoiser, FormatError> {
    read_params(io::BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Condition;

    fn model() -> Denoiser {
        Denoiser::new(
            Architecture {
                dim: 3,
                hidden: vec![5, 4],
                time_dim: 4,
                class_dim: 2,
                classes: 2,
            },
            13,
        )
        .unwrap()
    }

    fn bytes(m: &Denoiser) -> Vec<u8> {
        let mut b = Vec::new();
        write_params(m, &mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back = read_params(bytes(&m).as_slice()).unwrap();
        assert_eq!(back, m);
        let x = [0.1, -0.4, 2.0];
        assert_eq!(
            back.forward(&x, 77, Condition::Class(1)).unwrap(),
            m.forward(&x, 77, Condition::Class(1)).unwrap()
        );
        assert_eq!(bytes(&back), bytes(&m));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let b = bytes(&model());
        for cut in [0, 4, 9, 20, b.len() - 1] {
            assert!(
                matches!(read_params(&b[..cut]), Err(FormatError::Truncated(_))),
                "cut={cut}"
            );
        }
    }

    #[test]
    fn wrong_version_and_magic() {
        let mut b = bytes(&model());
        b[8] = 9;
        assert!(matches!(
            read_params(b.as_slice()),
            Err(FormatError::Version {
                found: 9,
                expected: 1
            })
        ));
        b[0] = b'X';
        assert!(matches!(read_params(b.as_slice()), Err(FormatError::Magic)));
    }

    #[test]
    fn architecture_mismatch_names_field() {
        let mut b = bytes(&model());
        // bump dim: the value count no longer matches
        b[9] = 4;
        let err = read_params(b.as_slice()).unwrap_err();
        assert!(err.to_string().contains("n_values"), "{err}");
        let mut b = bytes(&model());
        b.push(0);
        assert!(read_params(b.as_slice()).is_err());
    }
}
