//! Versioned, self-describing checkpoint files.
//!
//! Layout: the magic line, one line of JSON header, then the parameters as
//! little-endian `f32`. The header records the architecture, the hash of the
//! run configuration and the SHA-256 of the payload.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::{Architecture, Encoder, LinearClassifier, Pretrained};
use crate::error::{IssError, Result};
use crate::provenance::sha256_hex;
use crate::stylizer::{PerceptualEncoder, StyleNet};

pub const MAGIC: &str = "ISSNET-CKPT v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Encoder,
    Stylizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub arch: serde_json::Value,
    pub config_hash: String,
    pub payload_sha256: String,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderArch {
    architecture: Architecture,
    width: usize,
    in_channels: usize,
    label_space: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StylizerArch {
    in_channels: usize,
    encoder_widths: Vec<usize>,
    adain_stage: usize,
    eps: f64,
}

fn payload_bytes(params: &[f32]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

fn encode(kind: CheckpointKind, arch: serde_json::Value, config_hash: &str, params: &[f32]) -> Result<Vec<u8>> {
    let payload = payload_bytes(params);
    let header = CheckpointHeader {
        kind,
        arch,
        config_hash: config_hash.to_string(),
        payload_sha256: sha256_hex(&payload),
        param_count: params.len(),
    };
    let mut out = format!("{MAGIC}\n{}\n", serde_json::to_string(&header)?).into_bytes();
    out.extend(payload);
    Ok(out)
}

/// Parses and integrity-checks checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<f32>)> {
    let bad = |m: &str| IssError::Provenance(format!("checkpoint: {m}"));
    let first = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing magic line"))?;
    if &bytes[..first] != MAGIC.as_bytes() {
        return Err(bad("unknown format or version"));
    }
    let rest = &bytes[first + 1..];
    let second = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&rest[..second])?;
    let payload = &rest[second + 1..];
    if payload.len() != header.param_count * 4 {
        return Err(bad("payload length does not match param_count"));
    }
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(bad("payload hash mismatch"));
    }
    let params = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((header, params))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(IssError::NotFound(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| IssError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IssError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| IssError::io(path, e))?;
    Ok(sha256_hex(bytes))
}

pub fn pretrained_bytes(p: &Pretrained, config_hash: &str) -> Result<Vec<u8>> {
    let arch = EncoderArch {
        architecture: p.encoder.arch,
        width: p.encoder.width,
        in_channels: p.encoder.in_channels,
        label_space: p.label_space.clone(),
    };
    let mut params = p.encoder.net.flat_params();
    params.extend(&p.classifier.layer.weight);
    params.extend(&p.classifier.layer.bias);
    encode(CheckpointKind::Encoder, serde_json::to_value(arch)?, config_hash, &params)
}

/// SHA-256 of the checkpoint bytes, whether or not they were written.
pub fn pretrained_hash(p: &Pretrained, config_hash: &str) -> Result<String> {
    Ok(sha256_hex(&pretrained_bytes(p, config_hash)?))
}

/// Writes the checkpoint and returns its hash.
pub fn save_pretrained(path: &Path, p: &Pretrained, config_hash: &str) -> Result<String> {
    write(path, &pretrained_bytes(p, config_hash)?)
}

pub struct Loaded<T> {
    pub value: T,
    pub header: CheckpointHeader,
    pub hash: String,
}

fn expect_kind(header: &CheckpointHeader, kind: CheckpointKind) -> Result<()> {
    if header.kind != kind {
        return Err(IssError::Provenance(format!("expected a {kind:?} checkpoint, found {:?}", header.kind)));
    }
    Ok(())
}

pub fn load_pretrained(path: &Path) -> Result<Loaded<Pretrained>> {
    let bytes = read(path)?;
    let (header, params) = decode(&bytes)?;
    expect_kind(&header, CheckpointKind::Encoder)?;
    let arch: EncoderArch = serde_json::from_value(header.arch.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut encoder = Encoder::new(arch.architecture, arch.in_channels, arch.width, &mut rng)?;
    let mut classifier = LinearClassifier::new(encoder.embedding_dim(), arch.label_space.len(), &mut rng);
    let n_enc = encoder.net.num_params();
    let n_w = classifier.layer.weight.len();
    let n_b = classifier.layer.bias.len();
    if params.len() != n_enc + n_w + n_b {
        return Err(IssError::Provenance("checkpoint parameter count does not match its architecture".into()));
    }
    encoder.net.load_flat_params(&params[..n_enc])?;
    classifier.layer.weight.copy_from_slice(&params[n_enc..n_enc + n_w]);
    classifier.layer.bias.copy_from_slice(&params[n_enc + n_w..]);
    let value = Pretrained { encoder, classifier, label_space: arch.label_space, history: Vec::new() };
    Ok(Loaded { value, header, hash: sha256_hex(&bytes) })
}

pub fn stylizer_bytes(net: &StyleNet<f32>, config_hash: &str) -> Result<Vec<u8>> {
    let enc = &net.encoder;
    let arch = StylizerArch {
        in_channels: enc.stages()[0]
            .layers
            .iter()
            .find_map(|l| match l {
                issnet_nn::Layer::Conv(c) => Some(c.in_channels),
                _ => None,
            })
            .unwrap_or(3),
        encoder_widths: (1..=enc.stage_count()).map(|i| enc.channels(i)).collect(),
        adain_stage: net.adain_stage,
        eps: net.eps,
    };
    let mut params = enc.flat_params();
    params.extend(net.decoder.flat_params());
    encode(CheckpointKind::Stylizer, serde_json::to_value(arch)?, config_hash, &params)
}

pub fn save_stylizer(path: &Path, net: &StyleNet<f32>, config_hash: &str) -> Result<String> {
    write(path, &stylizer_bytes(net, config_hash)?)
}

/// Loads a trained stylizer. Only nets built by this crate (a conv per
/// stage) can be restored; externally supplied encoders are not saved.
pub fn load_stylizer(path: &Path) -> Result<Loaded<StyleNet<f32>>> {
    let bytes = read(path)?;
    let (header, params) = decode(&bytes)?;
    expect_kind(&header, CheckpointKind::Stylizer)?;
    let arch: StylizerArch = serde_json::from_value(header.arch.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut enc = PerceptualEncoder::new(arch.in_channels, &arch.encoder_widths, &mut rng)?;
    enc.freeze();
    let mut net = StyleNet::new(enc, arch.adain_stage, arch.in_channels, &mut rng)?;
    let n_enc = net.encoder.num_params();
    if params.len() != n_enc + net.decoder.num_params() {
        return Err(IssError::Provenance("checkpoint parameter count does not match its architecture".into()));
    }
    net.encoder.load_flat_params(&params[..n_enc])?;
    net.decoder.load_flat_params(&params[n_enc..])?;
    net.eps = arch.eps;
    net.mark_trained();
    Ok(Loaded { value: net, header, hash: sha256_hex(&bytes) })
}

/// Re-reads a checkpoint file and checks its integrity.
pub fn verify_checkpoint(path: &Path) -> Result<CheckpointHeader> {
    Ok(decode(&read(path)?)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tampered_payload_is_detected() {
        let mut bytes = encode(CheckpointKind::Encoder, serde_json::json!({}), "abc", &[1.0, 2.0]).unwrap();
        assert!(decode(&bytes).is_ok());
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        assert!(matches!(decode(&bytes), Err(IssError::Provenance(_))));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        assert!(decode(b"NOT-A-CKPT\n{}\n").is_err());
    }
}
