//! Split file layout, all integers little endian:
//!
//! | offset | size        | field                                  |
//! |--------|-------------|----------------------------------------|
//! | 0      | 8           | magic `RGTNSPLT`                       |
//! | 8      | 4           | format version (u32, currently 1)      |
//! | 12     | 8           | sample count S (u64)                   |
//! | 20     | 4           | steps K (u32)                          |
//! | 24     | 4           | nodes N (u32)                          |
//! | 28     | 4           | features F (u32)                       |
//! | 32     | 8·S·K·N·F   | values, f64, row-major `[S][K][N][F]`  |
//! | ...    | S           | labels, u8                             |

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RGTNSPLT";
pub const VERSION: u32 = 1;
const HEADER: usize = 32;

/// Raw contents of one split file.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitTensor {
    pub steps: usize,
    pub nodes: usize,
    pub features: usize,
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
}

impl SplitTensor {
    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.values.len() * 8 + self.labels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        for dim in [self.steps, self.nodes, self.features] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a split file (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported split file version {version}")));
        }
        let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let (steps, nodes, features) = (u32_at(20) as usize, u32_at(24) as usize, u32_at(28) as usize);
        let floats = count
            .checked_mul(steps * nodes * features)
            .ok_or_else(|| Error::Format("split header overflows".into()))?;
        let expected = HEADER + floats * 8 + count;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "split file is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let values = bytes[HEADER..HEADER + floats * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let labels = bytes[HEADER + floats * 8..].to_vec();
        Ok(SplitTensor {
            steps,
            nodes,
            features,
            values,
            labels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_fields_sit_at_documented_offsets() {
        let t = SplitTensor {
            steps: 2,
            nodes: 3,
            features: 1,
            values: (0..12).map(|i| i as f64 * 0.5 - 1.0).collect(),
            labels: vec![4, 9],
        };
        let b = t.encode();
        assert_eq!(&b[..8], b"RGTNSPLT");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[24..28].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(b[32..40].try_into().unwrap()), -1.0);
        assert_eq!(&b[b.len() - 2..], &[4, 9]);
        assert_eq!(SplitTensor::decode(&b).unwrap(), t);
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let t = SplitTensor {
            steps: 1,
            nodes: 1,
            features: 1,
            values: vec![1.0],
            labels: vec![0],
        };
        let b = t.encode();
        assert!(SplitTensor::decode(&b[..b.len() - 1]).is_err());
        let mut foreign = b.clone();
        foreign[0] = b'X';
        assert!(SplitTensor::decode(&foreign).is_err());
        let mut future = b;
        future[8] = 2;
        assert!(SplitTensor::decode(&future).is_err());
    }
}
