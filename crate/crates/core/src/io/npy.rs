//! Minimal reader and writer for 2-D little-endian float `.npy` arrays.

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";

fn header_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}':");
    let at = header
        .find(&pat)
        .ok_or_else(|| Error::Format(format!("npy header lacks `{key}`")))?;
    Ok(header[at + pat.len()..].trim_start())
}

/// Reads a C-ordered `<f4` or `<f8` array of rank 2 as `f64`.
pub fn parse_npy(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("not an npy file".into()));
    }
    let (header_len, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize, 12),
        v => return Err(Error::Format(format!("unsupported npy version {v}"))),
    };
    let header = bytes
        .get(start..start + header_len)
        .ok_or_else(|| Error::Format("truncated npy header".into()))?;
    let header = std::str::from_utf8(header).map_err(|e| Error::Format(e.to_string()))?;
    let descr = header_value(header, "descr")?;
    let width = if descr.starts_with("'<f4'") {
        4
    } else if descr.starts_with("'<f8'") {
        8
    } else {
        return Err(Error::Format(format!("unsupported dtype {}", descr.split(',').next().unwrap_or(""))));
    };
    if !header_value(header, "fortran_order")?.starts_with("False") {
        return Err(Error::Format("Fortran-ordered arrays are not supported".into()));
    }
    let shape = header_value(header, "shape")?;
    let close = shape.find(')').ok_or_else(|| Error::Format("malformed shape".into()))?;
    let dims: Vec<usize> = shape[1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Format(format!("bad dimension `{s}`"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Format(format!("expected a 2-D array, found shape {dims:?}")));
    };
    let payload = &bytes[start + header_len..];
    if payload.len() != rows * cols * width {
        return Err(Error::Format(format!("payload is {} bytes, shape implies {}", payload.len(), rows * cols * width)));
    }
    let values: Vec<f64> = if width == 4 {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()
    } else {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))
}

/// Writes a version-1 `<f4` array.
pub fn encode_npy_f32(array: &Array2<f32>) -> Vec<u8> {
    let (r, c) = array.dim();
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({r}, {c}), }}");
    let total = MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + 4 * r * c);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f32() {
        let a = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f32 * 0.5 - 1.0);
        let bytes = encode_npy_f32(&a);
        assert_eq!((bytes.len() - a.len() * 4) % 64, 0);
        let b = parse_npy(&bytes).unwrap();
        assert_eq!(b, a.mapv(f64::from));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(parse_npy(b"hello world").is_err());
        let a = Array2::<f32>::zeros((2, 2));
        let mut bytes = encode_npy_f32(&a);
        bytes.pop();
        assert!(parse_npy(&bytes).is_err());
        let text = String::from_utf8_lossy(&encode_npy_f32(&a)).replace("<f4", "<i4");
        assert!(parse_npy(text.as_bytes()).is_err());
    }
}
