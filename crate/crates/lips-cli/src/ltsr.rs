//! LTSR tensor files: magic `LTSR`, little-endian u32 rank, rank u32
//! extents, then the row-major f32 payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use lips_core::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LTSR";
const MAX_RANK: u32 = 4;

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut bytes =
        Vec::with_capacity(8 + tensor.shape().len() * 4 + tensor.numel() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &dim in tensor.shape() {
        let dim = u32::try_from(dim).context("tensor extent exceeds the u32 file format")?;
        bytes.extend_from_slice(&dim.to_le_bytes());
    }
    for &v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    file.write_all(&bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_to_end(&mut bytes)
        .with_context(|| format!("reading {}", path.display()))?;
    parse_tensor(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn parse_tensor(bytes: &[u8]) -> Result<Tensor> {
    let take_u32 = |offset: usize| -> Result<u32> {
        let end = offset + 4;
        if end > bytes.len() {
            bail!("file truncated at byte {offset}");
        }
        Ok(u32::from_le_bytes(bytes[offset..end].try_into().expect("4-byte slice")))
    };

    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        bail!("missing LTSR magic bytes");
    }
    let rank = take_u32(4)?;
    if rank == 0 || rank > MAX_RANK {
        bail!("rank {rank} outside the supported 1..={MAX_RANK}");
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel = 1usize;
    for i in 0..rank as usize {
        let dim = take_u32(8 + i * 4)? as usize;
        if dim == 0 {
            bail!("zero extent in dimension {i}");
        }
        numel = numel
            .checked_mul(dim)
            .with_context(|| format!("element count overflows at dimension {i}"))?;
        shape.push(dim);
    }
    let payload = &bytes[8 + rank as usize * 4..];
    if payload.len() != numel * 4 {
        bail!("payload holds {} bytes but shape {shape:?} needs {}", payload.len(), numel * 4);
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
        .collect();
    Ok(Tensor::new(&shape, data)?)
}
