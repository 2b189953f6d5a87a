//! On-disk tensor formats.
//!
//! `DTF1` is little-endian binary: the magic `DTF1`, a `u32` rank, `rank`
//! `u64` extents, then the row-major `f64` values. The text form is a CSV of
//! values preceded by a `# shape: d1,d2,...` header line.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DenseTensor, Shape};
use crate::error::{Error, Result};

pub const DTF1_MAGIC: &[u8; 4] = b"DTF1";

pub fn to_dtf1_bytes(tensor: &DenseTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * tensor.rank() + 8 * tensor.numel());
    out.extend_from_slice(DTF1_MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated DTF1 data while reading {what}"))
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }
}

pub fn from_dtf1_bytes(bytes: &[u8]) -> Result<DenseTensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != DTF1_MAGIC {
        return Err(Error::Format("missing DTF1 magic".into()));
    }
    let rank = u32::from_le_bytes(cur.take(4, "rank")?.try_into().unwrap()) as usize;
    let mut dims = Vec::with_capacity(rank.min(64));
    for _ in 0..rank {
        let d = u64::from_le_bytes(cur.take(8, "extent")?.try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?);
    }
    let shape = Shape::new(dims).map_err(|e| Error::Format(e.to_string()))?;
    let n = shape.numel();
    let payload = n
        .checked_mul(8)
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let raw = cur.take(payload, "values")?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after DTF1 payload",
            bytes.len() - cur.pos
        )));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("DTF1 payload contains non-finite values".into()));
    }
    DenseTensor::from_vec(shape, data)
}

pub fn write_dtf1(path: impl AsRef<Path>, tensor: &DenseTensor) -> Result<()> {
    fs::write(path, to_dtf1_bytes(tensor))?;
    Ok(())
}

pub fn read_dtf1(path: impl AsRef<Path>) -> Result<DenseTensor> {
    from_dtf1_bytes(&fs::read(path)?)
}

pub fn to_csv_string(tensor: &DenseTensor) -> String {
    let dims: Vec<String> = tensor.dims().iter().map(|d| d.to_string()).collect();
    let mut out = format!("# shape: {}\n", dims.join(","));
    let row = tensor.dims().last().copied().unwrap_or(1);
    for chunk in tensor.data().chunks(row) {
        let vals: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
        out.push_str(&vals.join(","));
        out.push('\n');
    }
    out
}

pub fn from_csv_str(text: &str) -> Result<DenseTensor> {
    let mut shape: Option<Shape> = None;
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(spec) = comment.trim().strip_prefix("shape:") {
                let dims = spec
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<usize>().map_err(|_| {
                            Error::Format(format!("line {}: bad extent '{s}'", lineno + 1))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                shape = Some(Shape::new(dims).map_err(|e| Error::Format(e.to_string()))?);
            }
            continue;
        }
        for field in line.split(',') {
            let field = field.trim();
            let v: f64 = field.parse().map_err(|_| {
                Error::Format(format!("line {}: bad value '{field}'", lineno + 1))
            })?;
            values.push(v);
        }
    }
    let shape = shape.ok_or_else(|| Error::Format("missing '# shape:' header".into()))?;
    if values.len() != shape.numel() {
        return Err(Error::ShapeMismatch(format!(
            "header declares {shape} ({} values) but {} values follow",
            shape.numel(),
            values.len()
        )));
    }
    DenseTensor::from_vec(shape, values)
}

pub fn write_csv(path: impl AsRef<Path>, tensor: &DenseTensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_csv_string(tensor).as_bytes())?;
    Ok(())
}

/// Loads a tensor from either format, chosen by the leading magic bytes.
pub fn ingest_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let result = if bytes.starts_with(DTF1_MAGIC) {
        from_dtf1_bytes(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Format("file is neither DTF1 nor UTF-8 CSV".into()))?;
        from_csv_str(text)
    };
    result.map_err(|e| e.context(format!("reading {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dtf1_layout_is_exact() {
        let t = DenseTensor::new(&[2], vec![1.0, -2.5]).unwrap();
        let bytes = to_dtf1_bytes(&t);
        assert_eq!(&bytes[..4], b"DTF1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[24..32], &(-2.5f64).to_le_bytes());
        assert_eq!(bytes.len(), 32);
    }

    #[test]
    fn truncated_and_trailing_dtf1_are_rejected() {
        let t = DenseTensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = to_dtf1_bytes(&t);
        for cut in [2, 6, 12, bytes.len() - 1] {
            assert!(matches!(from_dtf1_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(from_dtf1_bytes(&long), Err(Error::Format(_))));
    }

    #[test]
    fn scalar_dtf1() {
        let t = DenseTensor::scalar(7.0).unwrap();
        assert_eq!(from_dtf1_bytes(&to_dtf1_bytes(&t)).unwrap(), t);
    }

    #[test]
    fn csv_with_header() {
        let t = from_csv_str("# shape: 2,3\n1,2,3\n4,5,6\n").unwrap();
        assert_eq!(t.dims(), &[2, 3]);
        assert_eq!(t.get(&[1, 0]).unwrap(), 4.0);
        assert!(matches!(
            from_csv_str("# shape: 2,3\n1,2,3\n"),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(from_csv_str("1,2\n"), Err(Error::Format(_))));
        assert!(matches!(from_csv_str("# shape: 2\n1,x\n"), Err(Error::Format(_))));
    }

    #[test]
    fn csv_round_trip() {
        let t = DenseTensor::new(&[2, 2, 2], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(from_csv_str(&to_csv_string(&t)).unwrap(), t);
    }
}
