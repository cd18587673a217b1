//! Checkpoint serialization.
//!
//! Little-endian binary layout: magic `STPZ`, format version, a config
//! header (variant name, drawing geometry, class count, head width, step),
//! then three sections: parameter tensors, momentum tensors (same names and
//! order as the parameters), and batch-norm buffers. A tensor record is
//! name length, name bytes, rank, per-axis extents, then raw 32-bit floats.
//! Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{BnBuffers, Variant};
use crate::ops::BnState;
use crate::params::NetworkParams;
use crate::sampler::GeometryConfig;
use crate::tensor::Tensor;
use crate::F;

pub const CKPT_MAGIC: &[u8; 4] = b"STPZ";
pub const CKPT_VERSION: u32 = 1;
/// Guards extent fields so a corrupt header cannot trigger a huge allocation.
const MAX_TENSOR_ELEMENTS: u64 = 1 << 28;
const MAX_NAME_BYTES: u32 = 4096;
const MAX_RANK: u32 = 8;

/// Everything about a run that the tensors themselves do not carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub variant: Variant,
    pub geometry: GeometryConfig,
    pub num_classes: u32,
    pub head_width: u32,
    /// Training steps completed when the checkpoint was written.
    pub step: u64,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, tensor: &Tensor<F>) {
    put_str(buf, name);
    put_u32(buf, tensor.rank() as u32);
    for &e in tensor.shape() {
        put_u64(buf, e as u64);
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()?;
        if len > MAX_NAME_BYTES {
            return Err(Error::format(format!("checkpoint string length {len} exceeds limit")));
        }
        String::from_utf8(self.bytes(len as usize)?.to_vec())
            .map_err(|_| Error::format("checkpoint string is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<F>)> {
        let name = self.string()?;
        let rank = self.u32()?;
        if rank > MAX_RANK {
            return Err(Error::format(format!("tensor '{name}' has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let e = self.u64()?;
            numel = numel.saturating_mul(e.max(1));
            if numel > MAX_TENSOR_ELEMENTS {
                return Err(Error::format(format!("tensor '{name}' exceeds element limit")));
            }
            shape.push(e as usize);
        }
        let count: usize = shape.iter().product();
        let raw = self.bytes(count * 4)?;
        let data: Vec<F> = raw
            .chunks_exact(4)
            .map(|c| F::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after checkpoint payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    params: &NetworkParams<F>,
    buffers: &BnBuffers<F>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut buf, CKPT_VERSION);
    put_str(&mut buf, meta.variant.name());
    let g = meta.geometry;
    for v in [
        g.cell.0,
        g.cell.1,
        g.cell.2,
        g.crop.0,
        g.crop.1,
        g.crop.2,
        g.finetune_frames,
        g.finetune_size,
    ] {
        put_u32(&mut buf, v as u32);
    }
    put_u32(&mut buf, meta.num_classes);
    put_u32(&mut buf, meta.head_width);
    put_u64(&mut buf, meta.step);

    put_u32(&mut buf, params.len() as u32);
    for name in params.names() {
        put_tensor(&mut buf, name, params.get(name)?);
    }
    for name in params.names() {
        put_tensor(&mut buf, name, params.momentum(name)?);
    }
    put_u32(&mut buf, buffers.len() as u32);
    for (name, state) in buffers.iter() {
        put_str(&mut buf, name);
        put_tensor(&mut buf, "running_mean", &state.running_mean);
        put_tensor(&mut buf, "running_var", &state.running_var);
        put_u64(&mut buf, state.batches);
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_meta(r: &mut Reader) -> Result<CheckpointMeta> {
    let magic = r.bytes(4)?;
    if magic != CKPT_MAGIC {
        return Err(Error::format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let variant = Variant::from_name(&r.string()?)
        .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    let mut g = [0usize; 8];
    for v in &mut g {
        *v = r.u32()? as usize;
    }
    let geometry = GeometryConfig {
        cell: (g[0], g[1], g[2]),
        crop: (g[3], g[4], g[5]),
        finetune_frames: g[6],
        finetune_size: g[7],
    };
    geometry
        .validate()
        .map_err(|e| Error::format(format!("checkpoint geometry: {e}")))?;
    let num_classes = r.u32()?;
    let head_width = r.u32()?;
    let step = r.u64()?;
    Ok(CheckpointMeta {
        variant,
        geometry,
        num_classes,
        head_width,
        step,
    })
}

fn read_sections(r: &mut Reader) -> Result<(NetworkParams<F>, BnBuffers<F>)> {
    let n_params = r.u32()?;
    let mut params = NetworkParams::new();
    for _ in 0..n_params {
        let (name, tensor) = r.tensor()?;
        let no_decay =
            name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias");
        params.insert(&name, tensor, no_decay)?;
    }
    for _ in 0..n_params {
        let (name, tensor) = r.tensor()?;
        let target = params.momentum_mut(&name).map_err(|_| {
            Error::format(format!("momentum record '{name}' has no matching parameter"))
        })?;
        tensor.expect_shape(target.shape(), "momentum record")?;
        *target = tensor;
    }
    let n_buffers = r.u32()?;
    let mut buffers = BnBuffers::new();
    for _ in 0..n_buffers {
        let name = r.string()?;
        let (tag_m, running_mean) = r.tensor()?;
        let (tag_v, running_var) = r.tensor()?;
        if tag_m != "running_mean" || tag_v != "running_var" {
            return Err(Error::format(format!("malformed buffer record '{name}'")));
        }
        let batches = r.u64()?;
        running_var.expect_shape(running_mean.shape(), "buffer record")?;
        buffers.insert(
            &name,
            BnState {
                running_mean,
                running_var,
                batches,
            },
        )?;
    }
    Ok((params, buffers))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, NetworkParams<F>, BnBuffers<F>)> {
    let raw = fs::read(path)?;
    let mut r = Reader::new(&raw);
    let meta = read_meta(&mut r)?;
    let (params, buffers) = read_sections(&mut r)?;
    r.finish()?;
    Ok((meta, params, buffers))
}

/// Reads only the header, for compatibility checks without the tensor cost.
pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    let raw = fs::read(path)?;
    let mut r = Reader::new(&raw);
    read_meta(&mut r)
}

/// Copies every non-head tensor (and its batch-norm state) from the
/// checkpoint into an existing network, leaving head parameters at their
/// current values. Momenta are not transferred; fine-tuning starts fresh.
/// Returns the loaded parameter names. Errors if any non-head checkpoint
/// tensor is missing from the target or disagrees in shape, listing the
/// offending names.
pub fn load_backbone_into(
    path: &Path,
    params: &mut NetworkParams<F>,
    buffers: &mut BnBuffers<F>,
) -> Result<Vec<String>> {
    let (_, src_params, src_buffers) = load_checkpoint(path)?;
    crate::network::copy_backbone(&src_params, &src_buffers, params, buffers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{
        add_action_head, add_puzzle_head, build_backbone, BackboneConfig,
    };
    use crate::rng::{domain, stream};

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            variant: Variant::Tiny,
            geometry: GeometryConfig::desk(),
            num_classes: 48,
            head_width: 64,
            step: 7,
        }
    }

    fn tiny_net() -> (NetworkParams<F>, BnBuffers<F>) {
        let cfg = BackboneConfig::tiny();
        let mut r = stream([21, domain::TEST, 0, 0]);
        let (mut params, buffers) = build_backbone::<F>(&cfg, &mut r).unwrap();
        add_puzzle_head(&mut params, &cfg, (4, 20, 20), 48, &mut r).unwrap();
        params.momentum_mut("conv1.weight").unwrap().data_mut()[0] = 0.25;
        (params, buffers)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let (params, buffers) = tiny_net();
        save_checkpoint(&path, &meta(), &params, &buffers).unwrap();
        let (m2, p2, b2) = load_checkpoint(&path).unwrap();
        assert_eq!(m2, meta());
        assert_eq!(p2.names(), params.names());
        for name in params.names() {
            assert_eq!(p2.get(name).unwrap(), params.get(name).unwrap());
            assert_eq!(p2.momentum(name).unwrap(), params.momentum(name).unwrap());
            assert_eq!(p2.no_decay(name), params.no_decay(name));
        }
        assert_eq!(b2, buffers);
        // A second save of the loaded state reproduces the file bytes.
        let path2 = dir.path().join("net2.ckpt");
        save_checkpoint(&path2, &m2, &p2, &b2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let (params, buffers) = tiny_net();
        save_checkpoint(&path, &meta(), &params, &buffers).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let mut bad_version = good.clone();
        bad_version[4] = 99;
        let truncated = good[..good.len() - 3].to_vec();
        let mut trailing = good.clone();
        trailing.push(0);
        for (tag, bytes) in [
            ("magic", bad_magic),
            ("version", bad_version),
            ("truncated", truncated),
            ("trailing", trailing),
        ] {
            fs::write(&path, &bytes).unwrap();
            assert!(load_checkpoint(&path).is_err(), "{tag} accepted");
        }
    }

    #[test]
    fn backbone_loads_into_action_net_with_head_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pretrain.ckpt");
        let (params, buffers) = tiny_net();
        save_checkpoint(&path, &meta(), &params, &buffers).unwrap();

        let cfg = BackboneConfig::tiny();
        let mut r = stream([22, domain::TEST, 0, 0]);
        let (mut action, mut act_buffers) = build_backbone::<F>(&cfg, &mut r).unwrap();
        add_action_head(&mut action, &cfg, 8, &mut r).unwrap();
        let head_before = action.get("action.fc.weight").unwrap().clone();
        let loaded = load_backbone_into(&path, &mut action, &mut act_buffers).unwrap();
        assert!(loaded.iter().all(|n| !crate::network::is_head_param(n)));
        assert_eq!(action.get("conv1.weight").unwrap(), params.get("conv1.weight").unwrap());
        assert_eq!(action.get("action.fc.weight").unwrap(), &head_before);
        assert_eq!(act_buffers, buffers);
    }

    #[test]
    fn variant_mismatch_lists_offending_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pretrain.ckpt");
        let (params, buffers) = tiny_net();
        save_checkpoint(&path, &meta(), &params, &buffers).unwrap();

        let cfg = BackboneConfig::resnet10();
        let mut r = stream([23, domain::TEST, 0, 0]);
        let (mut other, mut other_buffers) = build_backbone::<F>(&cfg, &mut r).unwrap();
        let err = load_backbone_into(&path, &mut other, &mut other_buffers)
            .unwrap_err()
            .to_string();
        assert!(err.contains("conv1.weight"), "error was: {err}");
    }
}
