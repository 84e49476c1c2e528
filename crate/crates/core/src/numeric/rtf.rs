//! RTF1 raw tensor files: an ASCII header line `RTF1 <ndim> <dim0> ...\n`
//! followed by little-endian `f32` values in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "RTF1";

pub fn write_rtf<T: Real, W: Write>(w: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    writeln!(w, "{MAGIC} {} {}", dims.len(), dims.join(" "))?;
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &x in t.data() {
        buf.extend_from_slice(&(x.f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

fn parse_header(line: &str) -> std::result::Result<Vec<usize>, String> {
    let mut parts = line.split_ascii_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(format!("missing {MAGIC} magic in header {line:?}"));
    }
    let ndim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("bad ndim in header {line:?}"))?;
    let dims: Vec<usize> = parts
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("bad dimension in header {line:?}"))?;
    if dims.len() != ndim || ndim == 0 || dims.contains(&0) {
        return Err(format!("header {line:?} declares {ndim} dims, found {dims:?}"));
    }
    Ok(dims)
}

/// Reads one RTF1 block; `what` names the source in error messages.
pub fn read_rtf<T: Real, R: BufRead>(r: &mut R, what: &str) -> Result<Tensor<T>> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)
        .map_err(|e| Error::Data(format!("{what}: {e}")))?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Data(format!("{what}: truncated RTF1 header")));
    }
    let header = std::str::from_utf8(&line[..line.len() - 1])
        .map_err(|_| Error::Data(format!("{what}: RTF1 header is not ASCII")))?;
    let shape = parse_header(header).map_err(|e| Error::Data(format!("{what}: {e}")))?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Data(format!("{what}: expected {n} f32 values after header")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_rtf(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let f = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(f);
    let t = read_rtf(&mut r, &path.display().to_string())?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Data(format!("{}: trailing bytes after tensor", path.display())));
    }
    Ok(t)
}
