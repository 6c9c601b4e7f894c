//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `ABRCKPT1`, a little-endian u64 header length, a
//! JSON header, then every array listed in the header as little-endian f64
//! in header order. Offline checkpoints hold both networks. Tuned checkpoints
//! hold only the new columns and the SHA-256 of the offline checkpoint file
//! they extend; loading one checks that hash against the supplied base.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ea3c::AgentPair;
use crate::error::{AbrError, Result};
use crate::features::{InputConfig, Normalization};
use crate::nn::{Net, NetSpec};
use crate::online::{ColumnSpec, OnlineAgent, ProgressiveNet, Variant};

pub const MAGIC: &[u8; 8] = b"ABRCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Offline,
    Tuned,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub len: usize,
}

/// Seed and free-form provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: CheckpointKind,
    actor: NetSpec,
    critic: NetSpec,
    inputs: InputConfig,
    norm: Normalization,
    meta: CheckpointMeta,
    arrays: Vec<ArrayEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tuned: Option<TunedHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TunedHeader {
    base_sha256: String,
    variant: Variant,
    actor_column: ColumnSpec,
    critic_column: Option<ColumnSpec>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode(header: &Header, arrays: &[&[f64]]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let total: usize = arrays.iter().map(|a| a.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for a in arrays {
        for v in *a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Header, Vec<Vec<f64>>)> {
    let bad = |msg: &str| AbrError::Checkpoint(msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if header_len > body.len() {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| AbrError::Checkpoint(format!("bad header: {e}")))?;
    let mut data = &body[header_len..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in &header.arrays {
        let need = entry.len.checked_mul(8).ok_or_else(|| bad("array length overflow"))?;
        if data.len() < need {
            return Err(AbrError::Checkpoint(format!("array {} truncated", entry.name)));
        }
        let (chunk, rest) = data.split_at(need);
        arrays.push(
            chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        );
        data = rest;
    }
    if !data.is_empty() {
        return Err(AbrError::Checkpoint(format!("{} trailing bytes", data.len())));
    }
    Ok((header, arrays))
}

fn entry(name: &str, len: usize) -> ArrayEntry {
    ArrayEntry {
        name: name.to_string(),
        len,
    }
}

fn expect_names(header: &Header, names: &[&str]) -> Result<()> {
    let got: Vec<&str> = header.arrays.iter().map(|a| a.name.as_str()).collect();
    if got != names {
        return Err(AbrError::Checkpoint(format!("expected arrays {names:?}, found {got:?}")));
    }
    Ok(())
}

pub fn encode_offline(agent: &AgentPair, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header {
        kind: CheckpointKind::Offline,
        actor: agent.actor.spec().clone(),
        critic: agent.critic.spec().clone(),
        inputs: agent.inputs.clone(),
        norm: agent.norm,
        meta: meta.clone(),
        arrays: vec![
            entry("actor", agent.actor.params().len()),
            entry("critic", agent.critic.params().len()),
        ],
        tuned: None,
    };
    encode(&header, &[agent.actor.params(), agent.critic.params()])
}

pub fn decode_offline(bytes: &[u8]) -> Result<(AgentPair, CheckpointMeta)> {
    let (header, mut arrays) = decode(bytes)?;
    if header.kind != CheckpointKind::Offline {
        return Err(AbrError::Checkpoint("not an offline checkpoint".into()));
    }
    expect_names(&header, &["actor", "critic"])?;
    let critic = arrays.pop().expect("two arrays");
    let actor = arrays.pop().expect("two arrays");
    let agent = AgentPair {
        actor: Net::from_flat(header.actor, actor)?,
        critic: Net::from_flat(header.critic, critic)?,
        inputs: header.inputs,
        norm: header.norm,
    };
    agent.validate()?;
    Ok((agent, header.meta))
}

/// `base_bytes` is the offline checkpoint file the agent was tuned from.
pub fn encode_tuned(agent: &OnlineAgent, base_bytes: &[u8], meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let (base, _) = decode_offline(base_bytes)?;
    if base != agent.base {
        return Err(AbrError::Checkpoint("tuned agent does not extend the given base checkpoint".into()));
    }
    let mut arrays = vec![entry("actor_column", agent.actor.tunable().len())];
    let mut data = vec![agent.actor.tunable()];
    if let Some(c) = &agent.critic {
        arrays.push(entry("critic_column", c.tunable().len()));
        data.push(c.tunable());
    }
    let header = Header {
        kind: CheckpointKind::Tuned,
        actor: agent.base.actor.spec().clone(),
        critic: agent.base.critic.spec().clone(),
        inputs: agent.base.inputs.clone(),
        norm: agent.base.norm,
        meta: meta.clone(),
        arrays,
        tuned: Some(TunedHeader {
            base_sha256: sha256_hex(base_bytes),
            variant: agent.variant,
            actor_column: agent.actor.column().clone(),
            critic_column: agent.critic.as_ref().map(|c| c.column().clone()),
        }),
    };
    encode(&header, &data)
}

pub fn decode_tuned(bytes: &[u8], base_bytes: &[u8]) -> Result<(OnlineAgent, CheckpointMeta)> {
    let (header, mut arrays) = decode(bytes)?;
    let Some(tuned) = header.tuned.clone().filter(|_| header.kind == CheckpointKind::Tuned) else {
        return Err(AbrError::Checkpoint("not a tuned checkpoint".into()));
    };
    let hash = sha256_hex(base_bytes);
    if hash != tuned.base_sha256 {
        return Err(AbrError::Checkpoint(format!(
            "base checkpoint hash {hash} does not match recorded {}",
            tuned.base_sha256
        )));
    }
    let (base, _) = decode_offline(base_bytes)?;
    let critic = match (tuned.variant, tuned.critic_column) {
        (Variant::Otp, None) => {
            expect_names(&header, &["actor_column"])?;
            None
        }
        (Variant::Otpv, Some(col)) => {
            expect_names(&header, &["actor_column", "critic_column"])?;
            let params = arrays.pop().expect("two arrays");
            Some(ProgressiveNet::from_tunable(base.critic.clone(), col, params)?)
        }
        _ => return Err(AbrError::Checkpoint("variant and critic column disagree".into())),
    };
    let actor = ProgressiveNet::from_tunable(base.actor.clone(), tuned.actor_column, arrays.pop().expect("actor array"))?;
    Ok((
        OnlineAgent {
            base,
            variant: tuned.variant,
            actor,
            critic,
        },
        header.meta,
    ))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| AbrError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AbrError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| AbrError::io(path, e))
}

pub fn save_offline(path: &Path, agent: &AgentPair, meta: &CheckpointMeta) -> Result<()> {
    write(path, &encode_offline(agent, meta)?)
}

pub fn load_offline(path: &Path) -> Result<(AgentPair, CheckpointMeta)> {
    decode_offline(&read(path)?)
}

pub fn save_tuned(path: &Path, agent: &OnlineAgent, base_path: &Path, meta: &CheckpointMeta) -> Result<()> {
    let base = read(base_path)?;
    write(path, &encode_tuned(agent, &base, meta)?)
}

pub fn load_tuned(path: &Path, base_path: &Path) -> Result<(OnlineAgent, CheckpointMeta)> {
    decode_tuned(&read(path)?, &read(base_path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ea3c::AgentSpec;
    use crate::env::VideoLadder;
    use crate::online::ProgressiveSpec;

    fn agent() -> AgentPair {
        let spec = AgentSpec {
            history_len: 5,
            conv_filter_len: 2,
            actor_hidden: vec![4],
            critic_hidden: vec![3],
            ..Default::default()
        };
        AgentPair::init(&spec, Normalization::from_training(&[], &VideoLadder::standard(), 60.0), 11).unwrap()
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            seed: 11,
            provenance: "test".into(),
        }
    }

    #[test]
    fn offline_round_trip_is_bit_exact() {
        let mut a = agent();
        a.actor.params_mut()[0] = f64::MIN_POSITIVE / 3.0;
        a.critic.params_mut()[1] = -0.1 - 0.2;
        let bytes = encode_offline(&a, &meta()).unwrap();
        let (back, m) = decode_offline(&bytes).unwrap();
        assert_eq!(m, meta());
        let bits = |n: &Net| n.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.actor), bits(&a.actor));
        assert_eq!(bits(&back.critic), bits(&a.critic));
        assert_eq!(back, a);
        assert_eq!(encode_offline(&back, &meta()).unwrap(), bytes);
    }

    #[test]
    fn tuned_round_trip_and_hash_check() {
        let base_bytes = encode_offline(&agent(), &meta()).unwrap();
        for variant in [Variant::Otp, Variant::Otpv] {
            let spec = ProgressiveSpec {
                variant,
                conv_filter_len: 3,
                actor_hidden: vec![2, 2],
                critic_hidden: vec![2],
            };
            let tuned = OnlineAgent::build(agent(), &spec, 3).unwrap();
            let bytes = encode_tuned(&tuned, &base_bytes, &meta()).unwrap();
            let (back, _) = decode_tuned(&bytes, &base_bytes).unwrap();
            assert_eq!(back, tuned);

            let mut other = agent();
            other.actor.params_mut()[0] += 1.0;
            let other_bytes = encode_offline(&other, &meta()).unwrap();
            assert!(matches!(decode_tuned(&bytes, &other_bytes), Err(AbrError::Checkpoint(_))));
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode_offline(&agent(), &meta()).unwrap();
        assert!(decode_offline(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_offline(b"NOTACKPT00000000").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_offline(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.ckpt");
        save_offline(&path, &agent(), &meta()).unwrap();
        assert_eq!(load_offline(&path).unwrap().0, agent());
    }
}
