//! Binary checkpoint: named parameters, optional Adam state, and a free-form
//! JSON metadata block.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "CWMCKPT\0" | u32 version | u64 header_len | header JSON
//! | f64 parameter data (registration order, row-major)
//! | f64 first moments | f64 second moments        (only when Adam is present)
//! ```
//!
//! Floats are stored as raw bits, so a round trip is bit-exact.

use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{NnError, Result};
use crate::params::{Mat, ParamStore};

pub const MAGIC: &[u8; 8] = b"CWMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    params: Vec<(String, usize, usize)>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

fn write_mats<W: Write>(w: &mut W, mats: &[Mat]) -> Result<()> {
    for m in mats {
        for x in m.iter() {
            w.write_all(&x.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_mat<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Mat> {
    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut buf)?;
        data.push(f64::from_bits(u64::from_le_bytes(buf)));
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| NnError::Checkpoint(e.to_string()))
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            meta: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|(_, n, v)| (n.to_string(), v.nrows(), v.ncols()))
                .collect(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerHeader {
                config: a.config,
                step: a.step,
            }),
        };
        let header = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        write_mats(&mut w, self.params.values())?;
        if let Some(adam) = &self.optimizer {
            write_mats(&mut w, &adam.m)?;
            write_mats(&mut w, &adam.v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| NnError::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(NnError::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;

        let mut params = ParamStore::new();
        for (name, rows, cols) in &header.params {
            params.add(name.clone(), read_mat(&mut r, *rows, *cols)?)?;
        }
        let optimizer = match header.optimizer {
            Some(h) => {
                let mut read_all = || -> Result<Vec<Mat>> {
                    header
                        .params
                        .iter()
                        .map(|(_, rows, cols)| read_mat(&mut r, *rows, *cols))
                        .collect()
                };
                let m = read_all()?;
                let v = read_all()?;
                Some(Adam {
                    config: h.config,
                    step: h.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        Ok(Self {
            meta: header.meta,
            params,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamStore::new();
        params.add_uniform("a", 3, 4, 4, &mut rng).unwrap();
        params.add_uniform("b", 1, 7, 2, &mut rng).unwrap();
        params.get_mut(params.id("b").unwrap())[[0, 2]] = -0.0;
        let mut adam = Adam::new(&params, AdamConfig::default());
        let grads: Vec<Mat> = params
            .values()
            .iter()
            .map(|v| v.mapv(|x| x.sin()))
            .collect();
        adam.step(&mut params, &grads).unwrap();

        let ckpt = Checkpoint {
            meta: serde_json::json!({"epoch": 4, "note": "x"}),
            params,
            optimizer: Some(adam),
        };
        let mut bytes = Vec::new();
        ckpt.write(&mut bytes).unwrap();
        let back = Checkpoint::read(bytes.as_slice()).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        for (a, b) in back.params.values().iter().zip(ckpt.params.values()) {
            let bits_a: Vec<u64> = a.iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back.optimizer, ckpt.optimizer);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn wrong_version_is_rejected() {
        let ckpt = Checkpoint {
            meta: serde_json::Value::Null,
            params: ParamStore::new(),
            optimizer: None,
        };
        let mut bytes = Vec::new();
        ckpt.write(&mut bytes).unwrap();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::read(bytes.as_slice()),
            Err(NnError::CheckpointVersion { found: 9, .. })
        ));
        assert!(matches!(
            Checkpoint::read(&b"NOTACKPT...."[..]),
            Err(NnError::Checkpoint(_))
        ));
    }
}
