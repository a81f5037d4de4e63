//! `.xvc` checkpoints: `"XVCK"`, u16 LE version, u32 LE entry count, then
//! per entry a u16 LE name length, the UTF-8 name and an embedded `.xvt`
//! tensor record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_xvt_record, write_xvt_record, Tensor};

pub const XVC_MAGIC: &[u8; 4] = b"XVCK";
pub const XVC_VERSION: u16 = 1;

pub fn encode_checkpoint<'a, I>(entries: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let entries: Vec<_> = entries.into_iter().collect();
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Format("too many checkpoint entries".into()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(XVC_MAGIC);
    buf.extend_from_slice(&XVC_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("entry name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_xvt_record(&mut buf, tensor)?;
    }
    Ok(buf)
}

pub fn decode_checkpoint<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut head = [0u8; 10];
    input
        .read_exact(&mut head)
        .map_err(|e| Error::Format(format!("truncated checkpoint header: {e}")))?;
    if &head[..4] != XVC_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != XVC_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes([head[6], head[7], head[8], head[9]]);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut len = [0u8; 2];
        input
            .read_exact(&mut len)
            .map_err(|e| Error::Format(format!("truncated checkpoint entry: {e}")))?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        input
            .read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated checkpoint entry name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("checkpoint entry name is not UTF-8".into()))?;
        let tensor = read_xvt_record(input)?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn write_checkpoint<'a, I>(path: &Path, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let bytes = encode_checkpoint(entries)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let a = Tensor::vector(&[1.0, 2.0]).unwrap();
        let b = Tensor::full(&[1, 1], -0.5);
        let bytes = encode_checkpoint([("a", &a), ("bb", &b)]).unwrap();
        assert_eq!(&bytes[..4], b"XVCK");
        assert_eq!(&bytes[4..6], &1u16.to_le_bytes());
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..12], &1u16.to_le_bytes());
        assert_eq!(bytes[12], b'a');
        assert_eq!(&bytes[13..17], b"XVAT");
        let back = decode_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("bb".to_string(), b)]);
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let a = Tensor::vector(&[1.0, 2.0]).unwrap();
        let bytes = encode_checkpoint([("a", &a)]).unwrap();
        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(decode_checkpoint(&mut &cut[..]), Err(Error::Format(_))));
    }
}
