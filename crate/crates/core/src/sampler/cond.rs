use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::error::{invalid, shape_err, Result};

/// An `N × D` feature matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSequence {
    pub n: usize,
    pub dim: usize,
    pub features: Vec<f64>,
}

impl ConditioningSequence {
    pub fn new(n: usize, dim: usize, features: Vec<f64>) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(invalid!("condition must be at least 1x1, got {n}x{dim}"));
        }
        if features.len() != n * dim {
            return Err(shape_err!("{} values for a {n}x{dim} condition", features.len()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("condition features must be finite"));
        }
        Ok(Self { n, dim, features })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// A single `1 × D` vector uniform in `[0, 1)`, fixed by `seed`.
pub fn make_null_condition(dim: usize, seed: u64) -> ConditioningSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..dim.max(1)).map(|_| rng.random::<f64>()).collect();
    ConditioningSequence {
        n: 1,
        dim: dim.max(1),
        features,
    }
}

const MAGIC: &[u8; 4] = b"COND";

/// `{"COND", N u32, D u32}` then row-major little-endian `f64`.
pub fn write_condition(c: &ConditioningSequence) -> Vec<u8> {
    Writer::new()
        .bytes(MAGIC)
        .u32(c.n as u32)
        .u32(c.dim as u32)
        .f64s(&c.features)
        .finish()
}

pub fn read_condition(bytes: &[u8]) -> Result<ConditioningSequence> {
    let mut r = Reader::new("condition file", bytes);
    r.magic(MAGIC)?;
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let features = r.f64s(n.checked_mul(dim).ok_or_else(|| r.err("size overflow"))?)?;
    r.expect_end()?;
    ConditioningSequence::new(n, dim, features).map_err(|e| r.err(e.to_string()))
}

pub fn write_condition_file(path: impl AsRef<Path>, c: &ConditioningSequence) -> Result<()> {
    std::fs::write(path, write_condition(c))?;
    Ok(())
}

pub fn read_condition_file(path: impl AsRef<Path>) -> Result<ConditioningSequence> {
    read_condition(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_condition_contract() {
        let a = make_null_condition(7, 3);
        assert_eq!((a.n, a.dim), (1, 7));
        assert!(a.features.iter().all(|&v| (0.0..1.0).contains(&v)));
        assert_eq!(a, make_null_condition(7, 3));
        assert_ne!(a, make_null_condition(7, 4));
    }

    #[test]
    fn file_layout() {
        let c = ConditioningSequence::new(2, 2, vec![1.0, 2.0, 3.0, 4.5]).unwrap();
        let b = write_condition(&c);
        assert_eq!(b.len(), 12 + 32);
        assert_eq!(read_condition(&b).unwrap(), c);
        assert!(read_condition(&b[..40]).is_err());
    }
}
