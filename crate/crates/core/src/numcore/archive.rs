//! ZPTN tensor archive: magic "ZPTN", version u16 little-endian, then per
//! tensor a length-prefixed UTF-8 name, rank u8, dims u32[], payload f32[]
//! row-major. Entries are read until end of stream.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 4] = b"ZPTN";
pub const VERSION: u16 = 1;

pub fn write_archive<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        let rank = t.shape().len();
        if rank > u8::MAX as usize {
            return Err(Error::Archive(format!("tensor '{name}': rank {rank} too large")));
        }
        w.write_all(&[rank as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Archive("bad magic, not a ZPTN archive".into()));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver)?;
    let version = u16::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::Archive(format!("unsupported archive version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Archive("tensor name is not UTF-8".into()))?;
        let mut rank_buf = [0u8; 1];
        r.read_exact(&mut rank_buf)?;
        let mut shape = Vec::with_capacity(rank_buf[0] as usize);
        for _ in 0..rank_buf[0] {
            let mut d = [0u8; 4];
            r.read_exact(&mut d)?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = [0u8; 4];
            r.read_exact(&mut x)?;
            data.push(f32::from_le_bytes(x));
        }
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save_archive(path: &std::path::Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_archive(std::io::BufWriter::new(file), tensors)
}

pub fn load_archive(path: &std::path::Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let file = std::fs::File::open(path)?;
    read_archive(std::io::BufReader::new(file))
}
