//! Binary feature cache.
//!
//! Layout (little-endian): magic `VCFT`, version u32, frame count u32, stream
//! dimensions u32 x 4 (uv=1, lf0=1, ap, mcep), frame shift f64, sample rate
//! f64, then each stream row-major as f32 in the order uv, lf0, ap, mcep.

use std::io::{Read, Write};
use std::path::Path;

use super::{AnalysisError, FeatureSequence};

pub const FEATURE_MAGIC: &[u8; 4] = b"VCFT";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features(path: impl AsRef<Path>, fs: &FeatureSequence) -> Result<(), AnalysisError> {
    let bytes = encode_features(fs)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn encode_features(fs: &FeatureSequence) -> Result<Vec<u8>, AnalysisError> {
    fs.validate()?;
    let n = fs.frames();
    let (ad, md) = (fs.ap_dim(), fs.mcep_dim());
    let mut out = Vec::with_capacity(48 + 4 * n * (2 + ad + md));
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, n as u32, 1, 1, ad as u32, md as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&fs.frame_shift.to_le_bytes());
    out.extend_from_slice(&(fs.source_rate as f64).to_le_bytes());
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    fs.uv.iter().for_each(|&v| put(if v { 1.0 } else { 0.0 }));
    fs.lf0.iter().for_each(|&v| put(v));
    fs.ap.iter().flatten().for_each(|&v| put(v));
    fs.mcep.iter().flatten().for_each(|&v| put(v));
    Ok(out)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence, AnalysisError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_features(&bytes)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence, AnalysisError> {
    let corrupt = |m: &str| AnalysisError::Cache(m.to_string());
    if bytes.len() < 44 || &bytes[..4] != FEATURE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let n = u32_at(8) as usize;
    let dims = [u32_at(12), u32_at(16), u32_at(20), u32_at(24)].map(|d| d as usize);
    if dims[0] != 1 || dims[1] != 1 {
        return Err(corrupt("uv and lf0 streams must be one-dimensional"));
    }
    let frame_shift = f64_at(28);
    let rate = f64_at(36);
    let body = &bytes[44..];
    let expected = 4 * n * (2 + dims[2] + dims[3]);
    if body.len() != expected {
        return Err(corrupt(&format!("payload is {} bytes, expected {expected}", body.len())));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let (uv, rest) = vals.split_at(n);
    let (lf0, rest) = rest.split_at(n);
    let (ap, mcep) = rest.split_at(n * dims[2]);
    let rows = |s: &[f64], d: usize| -> Vec<Vec<f64>> {
        if d == 0 {
            vec![Vec::new(); n]
        } else {
            s.chunks_exact(d).map(<[f64]>::to_vec).collect()
        }
    };
    let fs = FeatureSequence {
        uv: uv.iter().map(|&v| v > 0.5).collect(),
        lf0: lf0.to_vec(),
        ap: rows(ap, dims[2]),
        mcep: rows(mcep, dims[3]),
        frame_shift,
        source_rate: rate as u32,
    };
    fs.validate()?;
    Ok(fs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_of_f32_valued_features(
            frames in 0usize..20,
            ad in 1usize..6,
            md in 2usize..10,
            seed in any::<u32>(),
        ) {
            let v = |i: usize| ((seed as usize * 31 + i * 17) % 1000) as f64 / 1024.0;
            let fs = FeatureSequence {
                uv: (0..frames).map(|i| i % 3 != 0).collect(),
                lf0: (0..frames).map(|i| 4.0 + v(i)).collect(),
                ap: (0..frames).map(|i| (0..ad).map(|j| v(i * ad + j)).collect()).collect(),
                mcep: (0..frames).map(|i| (0..md).map(|j| v(i + j) - 0.5).collect()).collect(),
                frame_shift: 0.005,
                source_rate: 16000,
            };
            let back = decode_features(&encode_features(&fs).unwrap()).unwrap();
            if frames > 0 {
                prop_assert_eq!(back, fs);
            } else {
                prop_assert_eq!(back.frames(), 0);
            }
        }
    }

    #[test]
    fn header_layout() {
        let fs = FeatureSequence {
            uv: vec![true, false],
            lf0: vec![5.0, 5.0],
            ap: vec![vec![0.5; 3]; 2],
            mcep: vec![vec![0.25; 4]; 2],
            frame_shift: 0.005,
            source_rate: 24000,
        };
        let b = encode_features(&fs).unwrap();
        assert_eq!(&b[..4], b"VCFT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[20..24].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[24..28].try_into().unwrap()), 4);
        assert_eq!(f64::from_le_bytes(b[36..44].try_into().unwrap()), 24000.0);
        assert_eq!(b.len(), 44 + 4 * 2 * (2 + 3 + 4));
        assert!(decode_features(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_features(&bad).is_err());
    }
}
