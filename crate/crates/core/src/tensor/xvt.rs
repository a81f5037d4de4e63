//! `.xvt` binary tensor records.
//!
//! Layout: `"XVAT"`, u16 LE version (1), u8 dtype (0 = f32), u8 ndim,
//! `ndim` u64 LE dims, then the row-major little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const XVT_MAGIC: &[u8; 4] = b"XVAT";
pub const XVT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub fn write_xvt_record<W: Write>(out: &mut W, tensor: &Tensor) -> Result<()> {
    let ndim = u8::try_from(tensor.ndim())
        .map_err(|_| Error::Format(format!("rank {} exceeds 255", tensor.ndim())))?;
    let mut buf = Vec::with_capacity(8 + 8 * tensor.ndim() + 4 * tensor.len());
    buf.extend_from_slice(XVT_MAGIC);
    buf.extend_from_slice(&XVT_VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.push(ndim);
    for &d in tensor.dims() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        let single = v as f32;
        if !single.is_finite() {
            return Err(Error::Format(format!("value {v} does not fit in f32")));
        }
        buf.extend_from_slice(&single.to_le_bytes());
    }
    out.write_all(&buf)
        .map_err(|e| Error::Format(format!("writing tensor record: {e}")))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated tensor record ({what}): {e}")))
}

pub fn read_xvt_record<R: Read>(input: &mut R) -> Result<Tensor> {
    let mut head = [0u8; 8];
    read_exact(input, &mut head, "header")?;
    if &head[..4] != XVT_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {:?}", &head[..4])));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != XVT_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    if head[6] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", head[6])));
    }
    let ndim = head[7] as usize;
    if ndim == 0 {
        return Err(Error::Format("tensor record with zero dimensions".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for _ in 0..ndim {
        let mut d = [0u8; 8];
        read_exact(input, &mut d, "dims")?;
        let d = usize::try_from(u64::from_le_bytes(d))
            .map_err(|_| Error::Format("dimension overflows usize".into()))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        dims.push(d);
    }
    let mut payload = vec![0u8; count * 4];
    read_exact(input, &mut payload, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(dims, data).map_err(|e| Error::Format(format!("invalid tensor record: {e}")))
}

pub fn write_xvt(path: &Path, tensor: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_xvt_record(&mut out, tensor)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_xvt(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let tensor = read_xvt_record(&mut input)?;
    let mut rest = [0u8; 1];
    match input.read(&mut rest) {
        Ok(0) => Ok(tensor),
        Ok(_) => Err(Error::Format(format!("{}: trailing bytes after tensor", path.display()))),
        Err(e) => Err(Error::io(path, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_xvt_record(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"XVAT");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(buf[6], 0);
        assert_eq!(buf[7], 2);
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[24..28], &1.0f32.to_le_bytes());
        assert_eq!(&buf[28..32], &(-2.0f32).to_le_bytes());
        assert_eq!(buf.len(), 32);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::full(&[3], 0.5);
        let mut buf = Vec::new();
        write_xvt_record(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'Y';
        assert!(matches!(read_xvt_record(&mut bad.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 1];
        assert!(matches!(read_xvt_record(&mut &short[..]), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_values_outside_f32() {
        let t = Tensor::full(&[1], 1e300);
        assert!(write_xvt_record(&mut Vec::new(), &t).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_f32_precision(
            dims in proptest::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| ((seed.wrapping_add(i as u64 * 7919) % 10_000) as f64 - 5000.0) / 37.0)
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            write_xvt_record(&mut buf, &t).unwrap();
            let back = read_xvt_record(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }
}
