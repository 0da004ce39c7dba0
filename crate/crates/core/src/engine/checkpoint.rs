//! `SCDCKPT1` checkpoints.
//!
//! ```text
//! SCDCKPT1\n
//! fusion=diff\n
//! gated=true\n
//! encoder_filters=4,8,16\n
//! decoder_filters=16,8,4\n
//! kernel=3\n
//! input_channels=3\n
//! input_size=64x64\n
//! param enc0.conv0.weight 4 3 3 3\n
//! ...
//! end\n
//! <every parameter as little-endian f32, in header order>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{build, Fusion, ModelConfig, ModelState};
use crate::tensor::Float;

pub const CHECKPOINT_MAGIC: &str = "SCDCKPT1";

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn encode_checkpoint<T: Float>(model: &ModelState<T>) -> Vec<u8> {
    let c = model.config();
    let mut header = format!(
        "{CHECKPOINT_MAGIC}\nfusion={}\ngated={}\nencoder_filters={}\ndecoder_filters={}\nkernel={}\ninput_channels={}\ninput_size={}x{}\n",
        c.fusion,
        c.gated,
        list(&c.encoder_filters),
        list(&c.decoder_filters),
        c.kernel,
        c.input_channels,
        c.input_size.0,
        c.input_size.1
    );
    for (name, t) in model.named_parameters() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("param {name} {}\n", dims.join(" ")));
    }
    header.push_str("end\n");
    let mut bytes = header.into_bytes();
    for t in model.parameters() {
        for &v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn save_checkpoint<T: Float>(model: &ModelState<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", detail.into()))
}

fn parse_list(field: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| bad(format!("{field} has non-integer entry `{x}`")))
        })
        .collect()
}

fn parse_usize(field: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(format!("{field} is not an integer: `{v}`")))
}

/// Reads the header lines; returns the config, the parameter table and the data offset.
type ParamTable = Vec<(String, Vec<usize>)>;

fn parse_header(bytes: &[u8]) -> Result<(ModelConfig, ParamTable, usize)> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
    };
    if next_line()? != CHECKPOINT_MAGIC {
        return Err(bad(format!("missing {CHECKPOINT_MAGIC} magic")));
    }
    let mut fields = Vec::new();
    for key in [
        "fusion",
        "gated",
        "encoder_filters",
        "decoder_filters",
        "kernel",
        "input_channels",
        "input_size",
    ] {
        let line = next_line()?;
        let value = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| bad(format!("expected `{key}=`, found `{line}`")))?;
        fields.push(value.to_string());
    }
    let gated = match fields[1].as_str() {
        "true" => true,
        "false" => false,
        other => return Err(bad(format!("gated must be true or false, got `{other}`"))),
    };
    let (h, w) = fields[6]
        .split_once('x')
        .ok_or_else(|| bad(format!("input_size `{}` is not HxW", fields[6])))?;
    let config = ModelConfig {
        fusion: fields[0].parse::<Fusion>()?,
        gated,
        encoder_filters: parse_list("encoder_filters", &fields[2])?,
        decoder_filters: parse_list("decoder_filters", &fields[3])?,
        kernel: parse_usize("kernel", &fields[4])?,
        input_channels: parse_usize("input_channels", &fields[5])?,
        input_size: (parse_usize("input_size", h)?, parse_usize("input_size", w)?),
    };
    let mut params = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let mut parts = line.split(' ');
        if parts.next() != Some("param") {
            return Err(bad(format!("unexpected header line `{line}`")));
        }
        let name = parts
            .next()
            .ok_or_else(|| bad("parameter line without a name"))?
            .to_string();
        let shape = parts
            .map(|d| parse_usize("parameter shape", d))
            .collect::<Result<Vec<_>>>()?;
        params.push((name, shape));
    }
    Ok((config, params, pos))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState<f32>> {
    let (config, table, offset) = parse_header(bytes)?;
    let mut model = build::<f32>(&config, 0)?;
    if table.len() != model.specs().len() {
        return Err(bad(format!(
            "header lists {} parameters, config implies {}",
            table.len(),
            model.specs().len()
        )));
    }
    for ((name, shape), spec) in table.iter().zip(model.specs()) {
        if *name != spec.name || *shape != spec.shape {
            return Err(bad(format!(
                "parameter `{name}` {shape:?} does not match expected `{}` {:?}",
                spec.name, spec.shape
            )));
        }
    }
    let total: usize = table.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let data = &bytes[offset..];
    if data.len() != 4 * total {
        return Err(bad(format!(
            "expected {} bytes of weights, found {}",
            4 * total,
            data.len()
        )));
    }
    let mut floats = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let values = table
        .iter()
        .map(|(_, s)| floats.by_ref().take(s.iter().product()).collect())
        .collect();
    model.set_parameters(values)?;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState<f32>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Fails with the first config field that differs from `expected`.
pub fn check_config(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let mismatch = |field: &str, f: String, e: String| {
        Err(Error::CheckpointField {
            field: field.to_string(),
            detail: format!("checkpoint has {f}, run expects {e}"),
        })
    };
    if found.fusion != expected.fusion {
        return mismatch("fusion", found.fusion.to_string(), expected.fusion.to_string());
    }
    if found.gated != expected.gated {
        return mismatch("gated", found.gated.to_string(), expected.gated.to_string());
    }
    if found.encoder_filters != expected.encoder_filters {
        return mismatch(
            "encoder_filters",
            list(&found.encoder_filters),
            list(&expected.encoder_filters),
        );
    }
    if found.decoder_filters != expected.decoder_filters {
        return mismatch(
            "decoder_filters",
            list(&found.decoder_filters),
            list(&expected.decoder_filters),
        );
    }
    if found.kernel != expected.kernel {
        return mismatch("kernel", found.kernel.to_string(), expected.kernel.to_string());
    }
    if found.input_channels != expected.input_channels {
        return mismatch(
            "input_channels",
            found.input_channels.to_string(),
            expected.input_channels.to_string(),
        );
    }
    Ok(())
}

/// Loads a checkpoint and checks it against the configuration a run expects.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelState<f32>> {
    let model = load_checkpoint(path)?;
    check_config(model.config(), expected)?;
    Ok(model)
}
