//! Model file format: one JSON header line, then flat little-endian f32
//! parameters (embedding matrix, layer weights, frozen feature-extractor
//! weights, in that order). The feature weights ride along so a saved model
//! reproduces losses exactly.

use crate::error::{Error, Result};
use crate::generator::{GeneratorArch, GeneratorModel};
use crate::loss::FeatureExtractor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    arch: GeneratorArch,
    seed: u64,
    param_count: usize,
    feature_seed: u64,
    feature_param_count: usize,
}

pub fn encode(model: &GeneratorModel, features: &FeatureExtractor) -> Vec<u8> {
    let feature_weights = features.weights_flat();
    let header = Header {
        format: "genproj-model-v1".into(),
        arch: model.arch.clone(),
        seed: model.seed,
        param_count: model.w_embed.len() + model.theta.len(),
        feature_seed: features.seed,
        feature_param_count: feature_weights.len(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for v in model.w_embed.iter().chain(&model.theta).chain(&feature_weights) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(GeneratorModel, FeatureExtractor)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(Error::Parse { offset: bytes.len(), msg: "missing header line".into() })?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Parse { offset: 0, msg: format!("bad header: {e}") })?;
    if header.format != "genproj-model-v1" {
        return Err(Error::Parse { offset: 0, msg: format!("unknown format {:?}", header.format) });
    }
    let embed_len = header.arch.embed_len();
    let theta_len = header.arch.theta_len();
    if header.param_count != embed_len + theta_len {
        return Err(Error::Parse {
            offset: 0,
            msg: format!(
                "param_count {} does not match arch ({})",
                header.param_count,
                embed_len + theta_len
            ),
        });
    }
    if header.feature_param_count != FeatureExtractor::weights_len() {
        return Err(Error::Parse {
            offset: 0,
            msg: format!(
                "feature_param_count {} does not match extractor ({})",
                header.feature_param_count,
                FeatureExtractor::weights_len()
            ),
        });
    }
    let body = &bytes[nl + 1..];
    let total = header.param_count + header.feature_param_count;
    if body.len() != total * 4 {
        return Err(Error::Parse {
            offset: nl + 1 + body.len().min(total * 4),
            msg: format!("body length {} != expected {}", body.len(), total * 4),
        });
    }
    let mut floats = Vec::with_capacity(total);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Parse { offset: nl + 1 + 4 * i, msg: "non-finite parameter".into() });
        }
        floats.push(v);
    }
    let w_embed = floats[..embed_len].to_vec();
    let theta = floats[embed_len..embed_len + theta_len].to_vec();
    let model = GeneratorModel::from_parts(header.arch, header.seed, w_embed, theta)?;
    let features =
        FeatureExtractor::from_flat(header.feature_seed, &floats[embed_len + theta_len..])?;
    Ok((model, features))
}

pub fn save(model: &GeneratorModel, features: &FeatureExtractor, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model, features))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(GeneratorModel, FeatureExtractor)> {
    decode(&std::fs::read(path)?)
}
