//! Codec mode: a clip's code grid as a bit-exact `.svqb` stream.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::codec::{CodecModel, DOWNSAMPLE};
use crate::codes::{flatten_column_major, unflatten_column_major, CodeGrid};
use crate::dsp::{center_crop_time, filterbank_for, griffin_lim, mel_to_linear, wave_to_logmel, DspParams, MelScale, Waveform};
use crate::error::{invalid, shape_err, Error, Result};

const MAGIC: &[u8; 4] = b"SVQB";
const VERSION: u16 = 1;
const WHAT: &str = "codec bitstream";
/// Upper bound on `K`; indices are at most 16 bits wide.
pub const MAX_CODEBOOK: usize = 1 << 16;

/// `⌈log₂ K⌉`, the width of one packed index.
pub fn bits_per_index(k: usize) -> Result<u32> {
    if !(2..=MAX_CODEBOOK).contains(&k) {
        return Err(invalid!("codebook size {k} outside 2..={MAX_CODEBOOK}"));
    }
    Ok(usize::BITS - (k - 1).leading_zeros())
}

/// Column-major indices at `⌈log₂ K⌉` bits each, most significant bit first,
/// zero-padded to a whole byte.
pub fn pack_indices(grid: &CodeGrid) -> Result<Vec<u8>> {
    let bits = bits_per_index(grid.k)?;
    let mut out = Vec::with_capacity((grid.len() * bits as usize).div_ceil(8));
    let (mut acc, mut filled) = (0u64, 0u32);
    for idx in flatten_column_major(grid) {
        if idx as usize >= grid.k {
            return Err(invalid!("index {idx} does not fit K={}", grid.k));
        }
        acc = (acc << bits) | idx as u64;
        filled += bits;
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
        }
        acc &= (1 << filled) - 1;
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
    Ok(out)
}

pub fn unpack_indices(bytes: &[u8], rows: usize, cols: usize, k: usize) -> Result<CodeGrid> {
    let bits = bits_per_index(k)?;
    let n = rows * cols;
    let need = (n * bits as usize).div_ceil(8);
    if bytes.len() != need {
        return Err(Error::format(
            WHAT,
            format!("payload is {} bytes, {rows}x{cols} at {bits} bits needs {need}", bytes.len()),
        ));
    }
    let mut seq = Vec::with_capacity(n);
    let (mut acc, mut filled) = (0u64, 0u32);
    let mut it = bytes.iter();
    for _ in 0..n {
        while filled < bits {
            acc = (acc << 8) | *it.next().expect("length checked") as u64;
            filled += 8;
        }
        filled -= bits;
        let idx = (acc >> filled) as u32;
        acc &= (1 << filled) - 1;
        if idx as usize >= k {
            return Err(Error::format(WHAT, format!("index {idx} overflows K={k}")));
        }
        seq.push(idx);
    }
    if acc != 0 {
        return Err(Error::format(WHAT, "non-zero padding bits"));
    }
    unflatten_column_major(&seq, rows, cols, k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BitstreamHeader {
    pub k: u32,
    pub rows: u32,
    pub cols: u32,
    pub sample_rate: u32,
    pub hop: u32,
    pub n_fft: u32,
    pub n_mels: u32,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub mel_scale: MelScale,
    /// Frames the framed spectrogram had before the center crop.
    pub frames: u32,
    /// Leading frames removed by the crop.
    pub crop_offset: u32,
    pub duration_samples: u64,
}

impl BitstreamHeader {
    pub fn dsp(&self) -> DspParams {
        DspParams {
            sample_rate: self.sample_rate,
            n_fft: self.n_fft as usize,
            hop: self.hop as usize,
            n_mels: self.n_mels as usize,
            fmin: self.fmin,
            fmax: self.fmax,
            log_floor: self.log_floor,
            mel_scale: self.mel_scale,
            clip_frames: Some(self.frames as usize),
        }
    }

    /// Payload length before byte padding.
    pub fn payload_bits(&self) -> Result<u64> {
        Ok(self.rows as u64 * self.cols as u64 * bits_per_index(self.k as usize)? as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecBitstream {
    pub header: BitstreamHeader,
    pub payload: Vec<u8>,
}

impl CodecBitstream {
    pub fn from_grid(header: BitstreamHeader, grid: &CodeGrid) -> Result<Self> {
        if (grid.rows, grid.cols, grid.k) != (header.rows as usize, header.cols as usize, header.k as usize) {
            return Err(shape_err!("grid does not match the bitstream header"));
        }
        Ok(Self {
            payload: pack_indices(grid)?,
            header,
        })
    }

    pub fn grid(&self) -> Result<CodeGrid> {
        let h = &self.header;
        unpack_indices(&self.payload, h.rows as usize, h.cols as usize, h.k as usize)
    }

    pub fn payload_bits(&self) -> Result<u64> {
        self.header.payload_bits()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut w = Writer::new();
        w.bytes(MAGIC).u16(VERSION);
        for v in [h.k, h.rows, h.cols, h.sample_rate, h.hop, h.n_fft, h.n_mels] {
            w.u32(v);
        }
        w.f64s(&[h.fmin, h.fmax, h.log_floor]);
        w.u16(match h.mel_scale {
            MelScale::Htk => 0,
            MelScale::Slaney => 1,
        });
        w.u32(h.frames).u32(h.crop_offset).u64(h.duration_samples);
        w.u32(self.payload.len() as u32).bytes(&self.payload);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(WHAT, bytes);
        r.magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let mut u = [0u32; 7];
        for v in &mut u {
            *v = r.u32()?;
        }
        let f = r.f64s(3)?;
        let mel_scale = match r.u16()? {
            0 => MelScale::Htk,
            1 => MelScale::Slaney,
            s => return Err(r.err(format!("unknown mel scale {s}"))),
        };
        let header = BitstreamHeader {
            k: u[0],
            rows: u[1],
            cols: u[2],
            sample_rate: u[3],
            hop: u[4],
            n_fft: u[5],
            n_mels: u[6],
            fmin: f[0],
            fmax: f[1],
            log_floor: f[2],
            mel_scale,
            frames: r.u32()?,
            crop_offset: r.u32()?,
            duration_samples: r.u64()?,
        };
        bits_per_index(header.k as usize).map_err(|e| r.err(e.to_string()))?;
        let len = r.u32()? as usize;
        let payload = r.take(len)?.to_vec();
        r.expect_end()?;
        let bs = Self { header, payload };
        bs.grid()?;
        Ok(bs)
    }
}

pub fn save_bitstream(path: impl AsRef<Path>, bs: &CodecBitstream) -> Result<()> {
    std::fs::write(path, bs.to_bytes())?;
    Ok(())
}

pub fn load_bitstream(path: impl AsRef<Path>) -> Result<CodecBitstream> {
    CodecBitstream::from_bytes(&std::fs::read(path)?)
}

/// Payload bits per second of audio.
pub fn bitrate(bs: &CodecBitstream) -> Result<f64> {
    bitrate_for(bs.payload_bits()?, bs.header.duration_samples, bs.header.sample_rate)
}

pub fn bitrate_for(payload_bits: u64, duration_samples: u64, sample_rate: u32) -> Result<f64> {
    if duration_samples == 0 || sample_rate == 0 {
        return Err(invalid!("bitrate of a zero-length clip"));
    }
    Ok(payload_bits as f64 * sample_rate as f64 / duration_samples as f64)
}

/// Frames kept by the crop: the largest multiple of the latent stride.
pub fn cropped_frames(frames: usize) -> usize {
    frames / DOWNSAMPLE * DOWNSAMPLE
}

/// wave → log-mel → center crop → encode → quantize → pack.
pub fn encode_audio(wave: &Waveform, codec: &CodecModel) -> Result<CodecBitstream> {
    let dsp = &codec.cfg.dsp;
    let spec = wave_to_logmel(wave, dsp)?;
    let keep = cropped_frames(spec.frames);
    if keep == 0 {
        return Err(invalid!("{} frames is less than one latent column", spec.frames));
    }
    let crop = center_crop_time(&spec, keep)?;
    let grid = codec.encode_codes(&crop)?;
    let header = BitstreamHeader {
        k: grid.k as u32,
        rows: grid.rows as u32,
        cols: grid.cols as u32,
        sample_rate: dsp.sample_rate,
        hop: dsp.hop as u32,
        n_fft: dsp.n_fft as u32,
        n_mels: dsp.n_mels as u32,
        fmin: dsp.fmin,
        fmax: dsp.fmax,
        log_floor: dsp.log_floor,
        mel_scale: dsp.mel_scale,
        frames: spec.frames as u32,
        crop_offset: ((spec.frames - keep) / 2) as u32,
        duration_samples: wave.len() as u64,
    };
    CodecBitstream::from_grid(header, &grid)
}

fn check_header(h: &BitstreamHeader, codec: &CodecModel) -> Result<()> {
    let c = &codec.cfg;
    let d = &c.dsp;
    let same = h.k as usize == c.codebook_size
        && h.rows as usize == c.latent_rows()
        && h.sample_rate == d.sample_rate
        && h.hop as usize == d.hop
        && h.n_fft as usize == d.n_fft
        && h.n_mels as usize == d.n_mels
        && h.fmin == d.fmin
        && h.fmax == d.fmax
        && h.log_floor == d.log_floor
        && h.mel_scale == d.mel_scale;
    if !same {
        return Err(Error::Config("bitstream header does not match the codec configuration".into()));
    }
    Ok(())
}

/// The spectrogram a bitstream decodes to, before vocoding.
pub fn decode_spectrogram(bs: &CodecBitstream, codec: &CodecModel) -> Result<crate::dsp::MelSpectrogram> {
    check_header(&bs.header, codec)?;
    codec.decode_codes(&bs.grid()?)
}

/// unpack → lookup → decode → mel inversion → Griffin-Lim, trimmed or
/// padded to the recorded duration. The crop offset is restored as leading
/// silence.
pub fn decode_audio(bs: &CodecBitstream, codec: &CodecModel, griffin_lim_iters: usize, seed: u64) -> Result<Waveform> {
    let spec = decode_spectrogram(bs, codec)?;
    let h = &bs.header;
    let fb = filterbank_for(&h.dsp())?;
    let mag = mel_to_linear(&spec, &fb)?;
    let body = griffin_lim(&mag, h.n_fft as usize, h.hop as usize, h.sample_rate, griffin_lim_iters, seed)?;
    let lead = h.crop_offset as usize * h.hop as usize;
    let mut samples = vec![0.0; lead];
    samples.extend_from_slice(&body.samples);
    Ok(Waveform::new(samples, h.sample_rate)?.fit_length(h.duration_samples as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_widths() {
        assert_eq!(bits_per_index(1024).unwrap(), 10);
        assert_eq!(bits_per_index(128).unwrap(), 7);
        assert_eq!(bits_per_index(100).unwrap(), 7);
        assert_eq!(bits_per_index(2).unwrap(), 1);
        assert_eq!(bits_per_index(1 << 16).unwrap(), 16);
        assert!(bits_per_index(1).is_err());
    }

    #[test]
    fn single_index_layout() {
        let g = CodeGrid::new(1, 1, 1024, vec![3]).unwrap();
        // 0000000011 then six padding zeros
        assert_eq!(pack_indices(&g).unwrap(), vec![0b0000_0000, 0b1100_0000]);
        assert_eq!(unpack_indices(&[0, 0b1100_0000], 1, 1, 1024).unwrap(), g);
        assert!(unpack_indices(&[0], 1, 1, 1024).is_err());
        assert!(unpack_indices(&[0, 0b1100_0001], 1, 1, 1024).is_err());
        // the first 7 bits read 127, past K = 100
        assert!(unpack_indices(&[0xfe], 1, 1, 100).is_err());
    }

    #[test]
    fn column_major_packing() {
        // [[1, 2], [3, 0]] over K=4 packs 1,3,2,0 at 2 bits
        let g = CodeGrid::new(2, 2, 4, vec![1, 2, 3, 0]).unwrap();
        assert_eq!(pack_indices(&g).unwrap(), vec![0b01_11_10_00]);
    }

    #[test]
    fn bitrate_examples() {
        assert_eq!(bitrate_for(1, 22050, 22050).unwrap(), 1.0);
        assert!(bitrate_for(1, 0, 22050).is_err());
    }
}
