//! Shared checkpoint framing: `{magic, version u16, u32 header fields,
//! config JSON, layer table}` then a flat `f64` parameter payload.

use crate::binio::{Reader, Writer};
use crate::error::Result;
use crate::nn::ParamStore;

const VERSION: u16 = 1;

pub(crate) fn write(magic: &[u8; 4], fields: &[u32], config_json: &str, store: &ParamStore) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(magic).u16(VERSION);
    for &f in fields {
        w.u32(f);
    }
    w.str(config_json).u32(store.len() as u32);
    for (_, name, t) in store.iter() {
        w.str(name).u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
    }
    let flat = store.flat();
    w.u64(flat.len() as u64).f64s(&flat);
    w.finish()
}

pub(crate) struct Parsed {
    pub fields: Vec<u32>,
    pub config_json: String,
    pub layers: Vec<(String, Vec<usize>)>,
    pub payload: Vec<f64>,
}

pub(crate) fn read(what: &'static str, magic: &[u8; 4], n_fields: usize, bytes: &[u8]) -> Result<Parsed> {
    let mut r = Reader::new(what, bytes);
    r.magic(magic)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let fields = (0..n_fields).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let config_json = r.str()?;
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(r.err(format!("layer {name} has {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        layers.push((name, shape));
    }
    let n = r.u64()? as usize;
    let payload = r.f64s(n)?;
    r.expect_end()?;
    Ok(Parsed {
        fields,
        config_json,
        layers,
        payload,
    })
}

/// Verifies a parsed layer table against a freshly built store and loads
/// the payload into it.
pub(crate) fn restore(what: &'static str, parsed: &Parsed, store: &mut ParamStore) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> =
        store.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect();
    if expected != parsed.layers {
        let at = expected
            .iter()
            .zip(&parsed.layers)
            .position(|(a, b)| a != b)
            .unwrap_or(expected.len().min(parsed.layers.len()));
        return Err(crate::Error::format(
            what,
            format!(
                "layer table disagrees with the configured architecture at entry {at} ({} vs {} layers)",
                parsed.layers.len(),
                expected.len()
            ),
        ));
    }
    store.load_flat(&parsed.payload)
}
