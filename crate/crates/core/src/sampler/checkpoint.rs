use std::path::Path;

use super::{SamplerConfig, SamplerModel};
use crate::ckpt;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SVQS";
const WHAT: &str = "sampler checkpoint";

fn fields(cfg: &SamplerConfig) -> [u32; 4] {
    [cfg.codebook_size as u32, cfg.cond_dim as u32, cfg.cond_len as u32, cfg.seq_len() as u32]
}

/// `SVQS` checkpoint: header fields `K, D, N, F'·T'`.
pub fn write_sampler(model: &SamplerModel) -> Vec<u8> {
    let json = serde_json::to_string(&model.cfg).expect("sampler config serializes");
    ckpt::write(MAGIC, &fields(&model.cfg), &json, &model.store)
}

pub fn read_sampler(bytes: &[u8]) -> Result<SamplerModel> {
    let parsed = ckpt::read(WHAT, MAGIC, 4, bytes)?;
    let cfg: SamplerConfig =
        serde_json::from_str(&parsed.config_json).map_err(|e| Error::format(WHAT, format!("config: {e}")))?;
    if parsed.fields != fields(&cfg) {
        return Err(Error::format(WHAT, "header fields disagree with the embedded config"));
    }
    let mut model = SamplerModel::new(cfg)?;
    ckpt::restore(WHAT, &parsed, &mut model.store)?;
    Ok(model)
}

pub fn save_sampler(path: impl AsRef<Path>, model: &SamplerModel) -> Result<()> {
    std::fs::write(path, write_sampler(model))?;
    Ok(())
}

pub fn load_sampler(path: impl AsRef<Path>) -> Result<SamplerModel> {
    read_sampler(&std::fs::read(path)?)
}
