use std::path::Path;

use super::{CodecConfig, CodecModel};
use crate::ckpt;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SVQC";
const WHAT: &str = "codec checkpoint";

/// `SVQC` checkpoint: header fields `K, n_z`.
pub fn write_codec(model: &CodecModel) -> Vec<u8> {
    let json = serde_json::to_string(&model.cfg).expect("codec config serializes");
    ckpt::write(
        MAGIC,
        &[model.cfg.codebook_size as u32, model.cfg.n_z as u32],
        &json,
        &model.store,
    )
}

pub fn read_codec(bytes: &[u8]) -> Result<CodecModel> {
    let parsed = ckpt::read(WHAT, MAGIC, 2, bytes)?;
    let cfg: CodecConfig =
        serde_json::from_str(&parsed.config_json).map_err(|e| Error::format(WHAT, format!("config: {e}")))?;
    if parsed.fields != [cfg.codebook_size as u32, cfg.n_z as u32] {
        return Err(Error::format(WHAT, "header K / n_z disagree with the embedded config"));
    }
    let mut model = CodecModel::new(cfg)?;
    ckpt::restore(WHAT, &parsed, &mut model.store)?;
    Ok(model)
}

pub fn save_codec(path: impl AsRef<Path>, model: &CodecModel) -> Result<()> {
    std::fs::write(path, write_codec(model))?;
    Ok(())
}

pub fn load_codec(path: impl AsRef<Path>) -> Result<CodecModel> {
    read_codec(&std::fs::read(path)?)
}
