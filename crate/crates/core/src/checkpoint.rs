//! Binary model checkpoints.
//!
//! ```text
//! DICF1\n
//! U I variant k k_prime L alpha beta d_1 … d_L\n
//! payload: little-endian f64, tensors in ModelParams storage order
//! ```
//!
//! Floats in the header use the shortest representation that parses back to
//! the same bits, so `load(save(x))` is exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Variant};

pub const MAGIC: &str = "DICF1";

fn header(config: &ModelConfig, params: &ModelParams) -> String {
    let mut fields = vec![
        params.num_users().to_string(),
        params.num_items().to_string(),
        config.variant.name().to_string(),
        config.k.to_string(),
        config.k_prime.to_string(),
        config.depth().to_string(),
        format!("{:?}", config.alpha),
        format!("{:?}", config.beta),
    ];
    fields.extend(config.layer_sizes.iter().map(|d| d.to_string()));
    fields.join(" ")
}

pub fn write_checkpoint<W: Write>(mut out: W, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    params.check_shapes(config)?;
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "{}", header(config, params))?;
    let mut buf = Vec::with_capacity(params.num_values() * 8);
    for t in params.tensors() {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, config, params)?;
    fs::write(path, bytes)?;
    Ok(())
}

fn take_line<'a>(bytes: &'a [u8], what: &str) -> Result<(&'a str, &'a [u8])> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint(format!("missing {what} line")))?;
    let line = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Checkpoint(format!("{what} line is not ASCII")))?;
    Ok((line, &bytes[end + 1..]))
}

/// Decodes a checkpoint into the architecture it describes and its
/// parameters. Training-only settings in the returned config are defaults.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let (magic, rest) = take_line(bytes, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let (head, payload) = take_line(rest, "header")?;
    let fields: Vec<&str> = head.split_whitespace().collect();
    if fields.len() < 8 {
        return Err(Error::Checkpoint(format!("header has {} fields, expected at least 8", fields.len())));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("header field {} is not a count: {:?}", i + 1, fields[i])))
    };
    let real = |i: usize| -> Result<f64> {
        fields[i]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("header field {} is not a number: {:?}", i + 1, fields[i])))
    };
    let (users, items) = (num(0)?, num(1)?);
    let variant: Variant = fields[2]
        .parse()
        .map_err(|_| Error::Checkpoint(format!("unknown variant {:?}", fields[2])))?;
    let depth = num(5)?;
    if fields.len() != 8 + depth {
        return Err(Error::Checkpoint(format!(
            "header declares {depth} layers but lists {} sizes",
            fields.len() - 8
        )));
    }
    let mut config = ModelConfig::new(variant, num(3)?);
    config.k_prime = num(4)?;
    config.alpha = real(6)?;
    config.beta = real(7)?;
    config.layer_sizes = (8..8 + depth).map(num).collect::<Result<_>>()?;
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut params = ModelParams::zeros(&config, users, items);
    let expected = params.num_values() * 8;
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    params.set_flat(&values)?;
    Ok((config, params))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(ModelConfig, ModelParams)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

/// Human-readable dump: the header, then one `name` line per tensor followed
/// by its values, one per line.
pub fn export_text<W: Write>(mut out: W, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "{}", header(config, params))?;
    for (name, values) in params.tensor_names().iter().zip(params.tensors()) {
        writeln!(out, "{name} {}", values.len())?;
        for v in values {
            writeln!(out, "{v:?}")?;
        }
    }
    Ok(())
}
