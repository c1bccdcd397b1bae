//! Flat binary parameter files.
//!
//! Each block is: name length (`u32` LE), UTF-8 name, rank (`u32` LE), one
//! `u32` LE per extent, then the payload as `f64` LE. Blocks follow each
//! other with no header or trailer.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint is missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {found:?} in checkpoint, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub fn write_blocks<'a, W: Write>(
    mut w: W,
    blocks: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), CheckpointError> {
    for (name, t) in blocks {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32, CheckpointError> {
    let bytes = buf
        .get(*pos..*pos + 4)
        .ok_or_else(|| CheckpointError::Format(format!("truncated at byte {pos}")))?;
    *pos += 4;
    Ok(u32::from_le_bytes(bytes.try_into().expect("4 bytes")))
}

pub fn read_blocks<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < buf.len() {
        let name_len = read_u32(&buf, &mut pos)? as usize;
        let name_bytes = buf
            .get(pos..pos + name_len)
            .ok_or_else(|| CheckpointError::Format("truncated name".into()))?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| CheckpointError::Format("name is not UTF-8".into()))?;
        pos += name_len;
        let rank = read_u32(&buf, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&buf, &mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = buf
            .get(pos..pos + 8 * n)
            .ok_or_else(|| CheckpointError::Format(format!("truncated payload for `{name}`")))?;
        pos += 8 * n;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut bytes = Vec::new();
        write_blocks(&mut bytes, [("ab", &t)]).unwrap();
        let mut expected = vec![2, 0, 0, 0, b'a', b'b', 2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0];
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
        let back = read_blocks(&bytes[..]).unwrap();
        assert_eq!(back, vec![("ab".to_string(), t)]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let t = Tensor::scalar(3.0);
        let mut bytes = Vec::new();
        write_blocks(&mut bytes, [("x", &t)]).unwrap();
        bytes.pop();
        assert!(matches!(read_blocks(&bytes[..]), Err(CheckpointError::Format(_))));
    }
}
