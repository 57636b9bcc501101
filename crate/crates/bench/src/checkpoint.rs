//! `ASGC` parameter files.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use anchorseg_core::tensor::{ParamStore, Tensor};

use crate::error::{format_err, BenchError, Result};

pub const MAGIC: &[u8; 4] = b"ASGC";
pub const VERSION: u32 = 1;

pub fn write_params(store: &ParamStore<f32>, mut out: impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        out.write_u32::<LittleEndian>(name.len() as u32)?;
        out.write_all(name)?;
        out.write_u32::<LittleEndian>(p.value.rank() as u32)?;
        for &e in p.value.shape() {
            out.write_u32::<LittleEndian>(e as u32)?;
        }
        for &x in p.value.data() {
            out.write_f32::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

/// Named tensors in file order.
pub fn read_params(mut input: impl Read, file: &str) -> Result<Vec<(String, Tensor<f32>)>> {
    let truncated = |e: std::io::Error| -> BenchError {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            format_err(file, "truncated checkpoint")
        } else {
            e.into()
        }
    };
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(format_err(file, format!("bad magic {magic:?}")));
    }
    let version = input.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != VERSION {
        return Err(format_err(file, format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match input.read(&mut len[..1])? {
            0 => break,
            _ => input.read_exact(&mut len[1..]).map_err(truncated)?,
        }
        let len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| format_err(file, "parameter name is not UTF-8"))?;
        let rank = input.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if rank > 8 {
            return Err(format_err(file, format!("{name}: implausible rank {rank}")));
        }
        let mut shape = vec![0usize; rank];
        for e in shape.iter_mut() {
            *e = input.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        }
        let mut data = vec![0f32; shape.iter().product()];
        input.read_f32_into::<LittleEndian>(&mut data).map_err(truncated)?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(store, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = std::fs::File::open(path)?;
    read_params(std::io::BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use anchorseg_core::config::Dims;
    use anchorseg_core::model::Model;

    #[test]
    fn round_trip_restores_every_parameter() {
        let dims = Dims::tiny();
        let src = Model::<f32>::new(&dims, 4).unwrap();
        let mut buf = Vec::new();
        write_params(&src.store, &mut buf).unwrap();
        let named = read_params(&buf[..], "mem").unwrap();
        assert_eq!(named.len(), src.store.len());
        let mut dst = Model::<f32>::new(&dims, 5).unwrap();
        dst.load(named).unwrap();
        for (a, b) in src.store.iter().zip(dst.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn damaged_files_are_rejected() {
        let src = Model::<f32>::new(&Dims::tiny(), 4).unwrap();
        let mut buf = Vec::new();
        write_params(&src.store, &mut buf).unwrap();
        assert!(read_params(&buf[..buf.len() - 2], "mem").is_err());
        let mut bad = buf.clone();
        bad[1] = b'Z';
        assert!(read_params(&bad[..], "mem").is_err());
        let mut bumped = buf;
        bumped[4] = 9;
        assert!(read_params(&bumped[..], "mem").is_err());
    }
}
