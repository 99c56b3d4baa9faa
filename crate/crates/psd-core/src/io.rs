//! Binary codecs: the `PSD1` model container and the `TNSR` raw tensor
//! container. Both are little-endian, fixed-layout, and reject wrong magic,
//! truncation and trailing bytes, so write -> read round-trips are
//! bit-identical.

use ndarray::{Array1, Array2};

use crate::error::{PsdError, Result};
use crate::model::{Dictionary, Predictor};

const MODEL_MAGIC: &[u8; 4] = b"PSD1";
const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

/// Guard against absurd allocations from corrupt headers.
const MAX_ELEMENTS: u64 = 100_000_000;

/// Serialize a model: magic, u32 n, u32 m, column-major basis (n*m f64),
/// row-major filters (m*n), bias (m), gain diagonal (m).
pub fn write_model(dict: &Dictionary, pred: &Predictor) -> Result<Vec<u8>> {
    let n = dict.signal_dim();
    let m = dict.code_dim();
    if pred.signal_dim() != n || pred.code_dim() != m {
        return Err(PsdError::ShapeMismatch(format!(
            "dictionary is {n}x{m} but predictor is {}x{}",
            pred.signal_dim(),
            pred.code_dim()
        )));
    }
    if n > u32::MAX as usize || m > u32::MAX as usize {
        return Err(PsdError::SizeLimit("model dimensions exceed u32".into()));
    }
    let mut out = Vec::with_capacity(12 + 8 * (2 * n * m + 2 * m));
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    for j in 0..m {
        for i in 0..n {
            out.extend_from_slice(&dict.basis()[[i, j]].to_le_bytes());
        }
    }
    for i in 0..m {
        for j in 0..n {
            out.extend_from_slice(&pred.filters()[[i, j]].to_le_bytes());
        }
    }
    for i in 0..m {
        out.extend_from_slice(&pred.bias()[i].to_le_bytes());
    }
    for i in 0..m {
        out.extend_from_slice(&pred.gain()[i].to_le_bytes());
    }
    Ok(out)
}

/// Inverse of [`write_model`].
pub fn read_model(bytes: &[u8]) -> Result<(Dictionary, Predictor)> {
    if bytes.len() < 4 || &bytes[0..4] != MODEL_MAGIC {
        return Err(PsdError::Parse {
            offset: 0,
            message: "expected magic 'PSD1'".into(),
        });
    }
    if bytes.len() < 12 {
        return Err(PsdError::Parse {
            offset: bytes.len(),
            message: "truncated header: need n and m".into(),
        });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if n == 0 || m == 0 {
        return Err(PsdError::Parse {
            offset: 4,
            message: format!("degenerate model {n}x{m}"),
        });
    }
    let floats = 2 * (n as u64) * (m as u64) + 2 * (m as u64);
    if floats > MAX_ELEMENTS {
        return Err(PsdError::SizeLimit(format!(
            "model would hold {floats} floats"
        )));
    }
    let expected = 12 + 8 * floats as usize;
    if bytes.len() < expected {
        return Err(PsdError::Parse {
            offset: bytes.len(),
            message: format!(
                "truncated payload: expected {expected} bytes, found {}",
                bytes.len()
            ),
        });
    }
    if bytes.len() > expected {
        return Err(PsdError::Parse {
            offset: expected,
            message: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let mut pos = 12;
    let mut next = || {
        let v = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
        v
    };
    let mut basis = Array2::zeros((n, m));
    for j in 0..m {
        for i in 0..n {
            basis[[i, j]] = next();
        }
    }
    let mut filters = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            filters[[i, j]] = next();
        }
    }
    let mut bias = Array1::zeros(m);
    for i in 0..m {
        bias[i] = next();
    }
    let mut gain = Array1::zeros(m);
    for i in 0..m {
        gain[i] = next();
    }
    let dict = Dictionary::new(basis)?;
    let pred = Predictor::new(gain, filters, bias)?;
    Ok((dict, pred))
}

/// Serialize a tensor: magic, u32 rank, rank u32 dims, row-major f64 data.
pub fn write_tensor(dims: &[u32], data: &[f64]) -> Result<Vec<u8>> {
    let count: u64 = dims.iter().map(|&d| d as u64).product();
    if count > MAX_ELEMENTS {
        return Err(PsdError::SizeLimit(format!(
            "tensor would hold {count} floats"
        )));
    }
    if count as usize != data.len() {
        return Err(PsdError::ShapeMismatch(format!(
            "dims {:?} imply {count} values but {} were provided",
            dims,
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 8 * data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Inverse of [`write_tensor`].
pub fn read_tensor(bytes: &[u8]) -> Result<(Vec<u32>, Vec<f64>)> {
    if bytes.len() < 4 || &bytes[0..4] != TENSOR_MAGIC {
        return Err(PsdError::Parse {
            offset: 0,
            message: "expected magic 'TNSR'".into(),
        });
    }
    if bytes.len() < 8 {
        return Err(PsdError::Parse {
            offset: bytes.len(),
            message: "truncated rank".into(),
        });
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if rank > 16 {
        return Err(PsdError::Parse {
            offset: 4,
            message: format!("implausible rank {rank}"),
        });
    }
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(PsdError::Parse {
            offset: bytes.len(),
            message: "truncated dims".into(),
        });
    }
    let dims: Vec<u32> = (0..rank)
        .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()))
        .collect();
    let count: u64 = dims.iter().map(|&d| d as u64).product();
    if count > MAX_ELEMENTS {
        return Err(PsdError::SizeLimit(format!(
            "tensor would hold {count} floats"
        )));
    }
    let expected = header + 8 * count as usize;
    if bytes.len() < expected {
        return Err(PsdError::Parse {
            offset: bytes.len(),
            message: format!(
                "truncated payload: expected {expected} bytes, found {}",
                bytes.len()
            ),
        });
    }
    if bytes.len() > expected {
        return Err(PsdError::Parse {
            offset: expected,
            message: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    let data: Vec<f64> = (0..count as usize)
        .map(|i| {
            f64::from_le_bytes(
                bytes[header + 8 * i..header + 8 * (i + 1)]
                    .try_into()
                    .unwrap(),
            )
        })
        .collect();
    Ok((dims, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use proptest::prelude::*;

    #[test]
    fn model_round_trip_is_bit_identical() {
        let (dict, pred) = init_model(5, 9, 12345).unwrap();
        let bytes = write_model(&dict, &pred).unwrap();
        let (d2, p2) = read_model(&bytes).unwrap();
        for (a, b) in dict.basis().iter().zip(d2.basis().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in pred.filters().iter().zip(p2.filters().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in pred.gain().iter().zip(p2.gain().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in pred.bias().iter().zip(p2.bias().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // re-serializing reproduces the same bytes
        let bytes2 = write_model(&d2, &p2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn model_reader_rejects_corruption() {
        let (dict, pred) = init_model(3, 4, 1).unwrap();
        let bytes = write_model(&dict, &pred).unwrap();

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(
            read_model(&wrong_magic),
            Err(PsdError::Parse { offset: 0, .. })
        ));

        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(read_model(truncated), Err(PsdError::Parse { .. })));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(read_model(&trailing), Err(PsdError::Parse { .. })));
    }

    #[test]
    fn tensor_round_trip_with_special_values() {
        let dims = vec![2u32, 3];
        let data = vec![
            0.0,
            -0.0,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NAN,
            1.5e-300,
        ];
        let bytes = write_tensor(&dims, &data).unwrap();
        let (d2, v2) = read_tensor(&bytes).unwrap();
        assert_eq!(dims, d2);
        for (a, b) in data.iter().zip(v2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn tensor_reader_rejects_corruption() {
        let bytes = write_tensor(&[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut wrong = bytes.clone();
        wrong[1] = b'X';
        assert!(matches!(
            read_tensor(&wrong),
            Err(PsdError::Parse { offset: 0, .. })
        ));
        assert!(matches!(
            read_tensor(&bytes[..10]),
            Err(PsdError::Parse { .. })
        ));
        let mut trailing = bytes.clone();
        trailing.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(
            read_tensor(&trailing),
            Err(PsdError::Parse { .. })
        ));
        // dims that disagree with the payload length are a writer error
        assert!(write_tensor(&[5], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn tensor_round_trip(rows in 1u32..6, cols in 1u32..6, seed in 0u64..1000) {
            let mut rng = crate::rng::Rng::new(seed);
            let data: Vec<f64> = (0..(rows * cols) as usize).map(|_| rng.next_gaussian()).collect();
            let bytes = write_tensor(&[rows, cols], &data).unwrap();
            let (dims, out) = read_tensor(&bytes).unwrap();
            prop_assert_eq!(dims, vec![rows, cols]);
            for (a, b) in data.iter().zip(out.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
