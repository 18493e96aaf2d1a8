//! Checkpoint files and the pre-training to main-training weight hand-off.
//!
//! Layout: the 8-byte magic `ACPT0001`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header, then
//! the raw little-endian tensor payloads in table order. Network tensors are
//! stored as `f32`; Adam moments are stored as `f64` so that a resumed run
//! continues bit-exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{NetSpec, Network, NnError, TensorRole};
use crate::optim::{AdamConfig, AdamState};

pub const MAGIC: &[u8; 8] = b"ACPT0001";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {found} (this build reads {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("corrupt checkpoint: {0}")]
    Corruption(String),
    #[error("checkpoint is incompatible with the target network at layer {layer}: {reason}")]
    Incompatible { layer: String, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TransferError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Maintrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub seed: u64,
    pub epoch: usize,
    pub frozen_upto: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableEntry {
    name: String,
    dtype: Dtype,
    dims: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: NetSpec,
    meta: CheckpointMeta,
    adam: Option<AdamHeader>,
    tensors: Vec<TableEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub network: Network<f32>,
    pub adam: Option<AdamState>,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TransferError + '_ {
    move |source| TransferError::Io { path: path.display().to_string(), source }
}

/// Serialises a checkpoint to bytes.
pub fn encode(net: &Network<f32>, adam: Option<&AdamState>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let params = net.params();
    if let Some(a) = adam {
        if a.m.len() != params.len() || a.v.len() != params.len() {
            return Err(TransferError::Corruption("optimizer state does not match the network".into()));
        }
    }
    let mut table = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for t in &params.tensors {
        table.push(TableEntry { name: t.name.clone(), dtype: Dtype::F32, dims: t.dims.clone(), offset: payload.len() });
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(a) = adam {
        for (prefix, moments) in [(ADAM_M, &a.m), (ADAM_V, &a.v)] {
            for (t, m) in params.tensors.iter().zip(moments) {
                if t.role == TensorRole::Buffer {
                    continue;
                }
                table.push(TableEntry {
                    name: format!("{prefix}{}", t.name),
                    dtype: Dtype::F64,
                    dims: t.dims.clone(),
                    offset: payload.len(),
                });
                for v in m {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let header = Header {
        spec: net.spec().clone(),
        meta: meta.clone(),
        adam: adam.map(|a| AdamHeader { config: a.config, t: a.t }),
        tensors: table,
    };
    let json = serde_json::to_vec(&header).map_err(|e| TransferError::Corruption(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses and validates checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(TransferError::Format("missing ACPT0001 magic".into()));
    }
    if bytes.len() < PREAMBLE {
        return Err(TransferError::Truncated { expected: PREAMBLE, found: bytes.len() });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(TransferError::UnsupportedVersion { found: version });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE))
        .ok_or_else(|| TransferError::Corruption("header length overflows".into()))?;
    if bytes.len() < header_end {
        return Err(TransferError::Truncated { expected: header_end, found: bytes.len() });
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| TransferError::Corruption(format!("header: {e}")))?;
    let payload = &bytes[header_end..];

    let mut expected = 0usize;
    for e in &header.tensors {
        if e.offset != expected {
            return Err(TransferError::Corruption(format!("tensor {} is not contiguous", e.name)));
        }
        expected += e.dims.iter().product::<usize>() * e.dtype.size();
    }
    if payload.len() != expected {
        if payload.len() < expected {
            return Err(TransferError::Truncated { expected: header_end + expected, found: bytes.len() });
        }
        return Err(TransferError::Corruption(format!("{} trailing bytes", payload.len() - expected)));
    }

    let mut network = Network::<f32>::build_unvalidated_head(&header.spec, 0)
        .map_err(|e| TransferError::Corruption(format!("embedded spec: {e}")))?;
    let mut seen = vec![false; network.params().len()];
    let mut m: Vec<Vec<f64>> = network.params().tensors.iter().map(|_| Vec::new()).collect();
    let mut v = m.clone();
    for e in &header.tensors {
        let (target, store) = if let Some(n) = e.name.strip_prefix(ADAM_M) {
            (n, Some(&mut m))
        } else if let Some(n) = e.name.strip_prefix(ADAM_V) {
            (n, Some(&mut v))
        } else {
            (e.name.as_str(), None)
        };
        let idx = network
            .params()
            .index_of(target)
            .ok_or_else(|| TransferError::Corruption(format!("unknown tensor {}", e.name)))?;
        let tensor = &network.params().tensors[idx];
        if tensor.dims != e.dims {
            return Err(TransferError::Corruption(format!(
                "tensor {} has dims {:?}, the spec needs {:?}",
                e.name, e.dims, tensor.dims
            )));
        }
        let raw = &payload[e.offset..e.offset + tensor.data.len() * e.dtype.size()];
        match (store, e.dtype) {
            (None, Dtype::F32) => {
                if std::mem::replace(&mut seen[idx], true) {
                    return Err(TransferError::Corruption(format!("tensor {} appears twice", e.name)));
                }
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                network.params_mut().tensors[idx].data = data;
            }
            (Some(store), Dtype::F64) => {
                if tensor.role == TensorRole::Buffer || !store[idx].is_empty() {
                    return Err(TransferError::Corruption(format!("unexpected moment {}", e.name)));
                }
                store[idx] = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            }
            _ => return Err(TransferError::Corruption(format!("tensor {} has the wrong dtype", e.name))),
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(TransferError::Corruption(format!("tensor {} is missing", network.params().tensors[i].name)));
    }
    let adam = match header.adam {
        Some(h) => {
            for (i, t) in network.params().tensors.iter().enumerate() {
                let want = if t.role == TensorRole::Trainable { t.data.len() } else { 0 };
                if m[i].len() != want || v[i].len() != want {
                    return Err(TransferError::Corruption(format!("moments of {} are missing", t.name)));
                }
            }
            Some(AdamState { config: h.config, t: h.t, m, v })
        }
        None => None,
    };
    network.set_frozen_upto(header.meta.frozen_upto);
    Ok(Checkpoint { meta: header.meta, network, adam })
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes to a temporary sibling then renames over `path`.
pub fn save_checkpoint(net: &Network<f32>, adam: Option<&AdamState>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode(net, adam, meta)?;
    let tmp = temp_path(path);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io_err(path)(e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

/// Copies every tensor of layers `0..=embedding_layer` into `target`, which
/// keeps its own initialisation for later layers, then freezes layers
/// `<= freeze_upto`.
pub fn transfer_weights(ckpt: &Checkpoint, target: &mut Network<f32>, freeze_upto: Option<usize>) -> Result<()> {
    let src = ckpt.network.spec();
    let dst = target.spec().clone();
    let prefix = src.embedding_layer;
    let input_layer = || dst.layer_name(0);
    if src.input_bins != dst.input_bins || src.input_channels != dst.input_channels {
        return Err(TransferError::Incompatible {
            layer: input_layer(),
            reason: format!(
                "input ({} bins, {} channels) vs ({} bins, {} channels)",
                src.input_bins, src.input_channels, dst.input_bins, dst.input_channels
            ),
        });
    }
    for i in 0..=prefix {
        match (src.layers.get(i), dst.layers.get(i)) {
            (Some(a), Some(b)) if a == b => {}
            (a, b) => {
                return Err(TransferError::Incompatible {
                    layer: dst.layer_name(i.min(dst.layers.len().saturating_sub(1))),
                    reason: format!("checkpoint has {a:?}, target has {b:?}"),
                })
            }
        }
    }
    if dst.embedding_layer != prefix {
        return Err(TransferError::Incompatible {
            layer: dst.layer_name(prefix),
            reason: format!("embedding layer {} vs {}", prefix, dst.embedding_layer),
        });
    }
    if let Some(f) = freeze_upto {
        if f > prefix {
            return Err(TransferError::Incompatible {
                layer: dst.layer_name(f.min(dst.layers.len() - 1)),
                reason: format!("cannot freeze past the transferred prefix (last layer {prefix})"),
            });
        }
    }
    for t in &ckpt.network.params().tensors {
        if t.layer > prefix {
            continue;
        }
        let slot = target
            .params_mut()
            .get_mut(&t.name)
            .ok_or_else(|| TransferError::Corruption(format!("target lacks tensor {}", t.name)))?;
        if slot.dims != t.dims {
            return Err(TransferError::Incompatible {
                layer: dst.layer_name(t.layer),
                reason: format!("{} dims {:?} vs {:?}", t.name, t.dims, slot.dims),
            });
        }
        slot.data.clone_from(&t.data);
    }
    target.set_frozen_upto(freeze_upto);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{DeskNetConfig, Mode, Tensor4};

    fn cfg() -> DeskNetConfig {
        DeskNetConfig {
            input_bins: 9,
            nominal_frames: 10,
            conv1_channels: 3,
            block_channels: vec![3, 4],
            embedding_dim: 5,
            ..DeskNetConfig::default()
        }
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta { phase: Phase::Pretrain, seed: 4, epoch: 2, frozen_upto: None }
    }

    fn probe() -> Tensor4<f32> {
        Tensor4::from_vec([3, 10, 9, 1], (0..270).map(|i| ((i * 31 % 17) as f32) * 0.1).collect())
    }

    fn trained() -> (Network<f32>, AdamState) {
        let mut net = Network::<f32>::build(&cfg().embedder_spec(), 1).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), net.params());
        for _ in 0..3 {
            let pass = net.forward(&probe(), Mode::Train).unwrap();
            let dy = Tensor4::from_vec(pass.output.dims(), vec![0.3; pass.output.data().len()]);
            let g = net.backward(&pass, &dy, false).unwrap();
            adam.step(net.params_mut(), &g.params).unwrap();
        }
        (net, adam)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (net, adam) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&net, Some(&adam), &meta(), &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.meta, meta());
        for (a, b) in net.params().tensors.iter().zip(&ck.network.params().tensors) {
            assert_eq!(a.name, b.name);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let back = ck.adam.unwrap();
        assert_eq!(back.t, adam.t);
        for (a, b) in adam.m.iter().flatten().chain(adam.v.iter().flatten()).zip(back.m.iter().flatten().chain(back.v.iter().flatten())) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert_eq!(encode(&net, Some(&adam), &meta()).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let (net, adam) = trained();
        let bytes = encode(&net, Some(&adam), &meta()).unwrap();
        assert!(matches!(decode(&[]), Err(TransferError::Format(_))));
        assert!(matches!(decode(b"garbage!garbage!"), Err(TransferError::Format(_))));
        let mut bumped = bytes.clone();
        bumped[8] = 2;
        assert!(matches!(decode(&bumped), Err(TransferError::UnsupportedVersion { found: 2 })));
        for cut in [10, 30, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(TransferError::Truncated { .. })), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(TransferError::Corruption(_))));
    }

    #[test]
    fn shape_table_must_match_embedded_spec() {
        let (net, _) = trained();
        let bytes = encode(&net, None, &meta()).unwrap();
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[PREAMBLE..PREAMBLE + header_len]).unwrap();
        let mut header: serde_json::Value = serde_json::from_str(json).unwrap();
        header["spec"]["layers"][0]["out_channels"] = serde_json::json!(4);
        let new_json = serde_json::to_vec(&header).unwrap();
        let mut forged = bytes[..12].to_vec();
        forged.extend_from_slice(&(new_json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&new_json);
        forged.extend_from_slice(&bytes[PREAMBLE + header_len..]);
        assert!(matches!(decode(&forged), Err(TransferError::Corruption(_))));
    }

    #[test]
    fn transfer_copies_prefix_and_keeps_fresh_head() {
        let (pre, _) = trained();
        let ck = decode(&encode(&pre, None, &meta()).unwrap()).unwrap();
        let fresh = Network::<f32>::build(&cfg().classifier_spec(), 99).unwrap();
        let mut main = fresh.clone();
        transfer_weights(&ck, &mut main, None).unwrap();
        let a = pre.forward_pure(&probe(), Mode::Train).unwrap();
        let b = main.forward_pure(&probe(), Mode::Train).unwrap();
        assert_eq!(a.output.data(), b.embedding.data());
        let a = pre.infer(&probe()).unwrap();
        let b = main.infer(&probe()).unwrap();
        assert_eq!(a.output.data(), b.embedding.data());
        let head = main.spec().layers.len() - 1;
        let name = main.spec().layer_name(head);
        assert_eq!(
            main.params().get(&format!("{name}.weight")).unwrap().data,
            fresh.params().get(&format!("{name}.weight")).unwrap().data
        );
        assert!(main.params().tensors.iter().all(|t| !t.frozen));
    }

    #[test]
    fn frozen_layers_survive_training_unchanged() {
        let (pre, _) = trained();
        let ck = decode(&encode(&pre, None, &meta()).unwrap()).unwrap();
        let c = cfg();
        let mut main = Network::<f32>::build(&c.classifier_spec(), 5).unwrap();
        transfer_weights(&ck, &mut main, Some(c.last_block_layer())).unwrap();
        let before = main.params().clone();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.01), main.params());
        for _ in 0..4 {
            let pass = main.forward(&probe(), Mode::Train).unwrap();
            let dy = Tensor4::from_vec(pass.output.dims(), vec![0.5; pass.output.data().len()]);
            let g = main.backward(&pass, &dy, false).unwrap();
            adam.step(main.params_mut(), &g.params).unwrap();
        }
        for (a, b) in before.tensors.iter().zip(&main.params().tensors) {
            if a.layer <= c.last_block_layer() {
                assert_eq!(a.data, b.data, "{}", a.name);
            } else if a.role == TensorRole::Trainable {
                assert_ne!(a.data, b.data, "{}", a.name);
            }
        }
    }

    #[test]
    fn mismatched_prefix_names_layer() {
        let (pre, _) = trained();
        let ck = decode(&encode(&pre, None, &meta()).unwrap()).unwrap();
        let other = DeskNetConfig { conv1_channels: 4, ..cfg() };
        let mut main = Network::<f32>::build(&other.classifier_spec(), 5).unwrap();
        match transfer_weights(&ck, &mut main, None) {
            Err(TransferError::Incompatible { layer, .. }) => assert_eq!(layer, "l00_conv2d"),
            other => panic!("{other:?}"),
        }
    }
}
