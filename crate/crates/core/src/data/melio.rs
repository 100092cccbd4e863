use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::NumArray;

pub const MEL_MAGIC: &[u8; 4] = b"MEL1";

/// Writes `[frames, bands]` as f32 little-endian after the MEL1 header.
pub fn write_mel<W: Write>(mut w: W, mel: &NumArray) -> Result<()> {
    if mel.rank() != 2 || mel.rows() == 0 {
        return Err(Error::Format(format!(
            "mel must be a non-empty matrix, got {:?}",
            mel.shape()
        )));
    }
    let dims = [mel.rows(), mel.cols()];
    w.write_all(MEL_MAGIC)?;
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(mel.len() * 4);
    for &v in mel.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_mel<R: Read>(mut r: R) -> Result<NumArray> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("mel header truncated".into()))?;
    if &header[..4] != MEL_MAGIC {
        return Err(Error::Format(format!("bad mel magic {:?}", &header[..4])));
    }
    let frames = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let bands = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if frames == 0 || bands == 0 {
        return Err(Error::Format(format!("mel has {frames} frames and {bands} bands")));
    }
    let bytes = frames
        .checked_mul(bands)
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| n <= isize::MAX as usize)
        .ok_or_else(|| Error::Format(format!("mel dimensions {frames}x{bands} overflow")))?;
    let mut payload = Vec::new();
    r.take(bytes as u64 + 1).read_to_end(&mut payload)?;
    if payload.len() != bytes {
        return Err(Error::Format(format!(
            "mel payload is {} bytes, header promises {bytes}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    NumArray::from_vec(&[frames, bands], data)
}

pub fn save_mel(path: &Path, mel: &NumArray) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mel(&mut w, mel)?;
    w.flush()?;
    Ok(())
}

pub fn load_mel(path: &Path) -> Result<NumArray> {
    read_mel(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes(mel: &NumArray) -> Vec<u8> {
        let mut b = Vec::new();
        write_mel(&mut b, mel).unwrap();
        b
    }

    #[test]
    fn round_trip_at_f32() {
        let m = NumArray::from_vec(&[2, 3], vec![0.1, -2.5, 1e-3, 3.25, 0.0, 7.0]).unwrap();
        let back = read_mel(bytes(&m).as_slice()).unwrap();
        assert_eq!(back.shape(), m.shape());
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn header_errors() {
        let m = NumArray::filled(&[2, 2], 1.0);
        let mut b = bytes(&m);
        b[0] = b'X';
        assert!(matches!(read_mel(b.as_slice()), Err(Error::Format(_))));

        let b = bytes(&m);
        assert!(read_mel(&b[..b.len() - 1]).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(read_mel(long.as_slice()).is_err());

        let mut zero = b.clone();
        zero[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(read_mel(&zero[..12]).is_err());

        let mut huge = b[..12].to_vec();
        huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(read_mel(huge.as_slice()).is_err());
    }
}
