//! `SPEC` spectrogram files: a little-endian header
//! `{"SPEC", version u16, F u32, T u32, sample_rate u32, hop u32, n_fft u32}`
//! followed by `F·T` little-endian `f64` values in row-major order.

use std::path::Path;

use super::{DspParams, MelSpectrogram};
use crate::binio::{Reader, Writer};
use crate::error::Result;

const MAGIC: &[u8; 4] = b"SPEC";
const VERSION: u16 = 1;

pub fn write_spec(spec: &MelSpectrogram) -> Vec<u8> {
    let p = &spec.params;
    Writer::new()
        .bytes(MAGIC)
        .u16(VERSION)
        .u32(p.n_mels as u32)
        .u32(spec.frames as u32)
        .u32(p.sample_rate)
        .u32(p.hop as u32)
        .u32(p.n_fft as u32)
        .f64s(&spec.values)
        .finish()
}

/// Parses a `SPEC` file. Parameters absent from the header (band edges,
/// floor, scale) take their defaults.
pub fn read_spec(bytes: &[u8]) -> Result<MelSpectrogram> {
    let mut r = Reader::new("spectrogram file", bytes);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let f = r.u32()? as usize;
    let t = r.u32()? as usize;
    let params = DspParams {
        n_mels: f,
        sample_rate: r.u32()?,
        hop: r.u32()? as usize,
        n_fft: r.u32()? as usize,
        ..DspParams::default()
    };
    let values = r.f64s(f.checked_mul(t).ok_or_else(|| r.err("size overflow"))?)?;
    r.expect_end()?;
    MelSpectrogram::new(params, t, values)
}

pub fn write_spec_file(path: impl AsRef<Path>, spec: &MelSpectrogram) -> Result<()> {
    std::fs::write(path, write_spec(spec))?;
    Ok(())
}

pub fn read_spec_file(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    read_spec(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let spec = MelSpectrogram::new(DspParams::default(), 2, vec![0.5; 160]).unwrap();
        let b = write_spec(&spec);
        assert_eq!(&b[..4], b"SPEC");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 80);
        assert_eq!(u32::from_le_bytes(b[10..14].try_into().unwrap()), 2);
        assert_eq!(b.len(), 26 + 160 * 8);
        assert_eq!(read_spec(&b).unwrap(), spec);
        assert!(read_spec(&b[..b.len() - 1]).is_err());
    }
}
