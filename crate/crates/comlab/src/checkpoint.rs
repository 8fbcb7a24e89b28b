//! Checkpoint files.
//!
//! Layout: the line `comlab-checkpoint`, the line `header_bytes = N`, `N`
//! bytes of TOML header (format version, model kind, network config, and an
//! array manifest with names, shapes and byte offsets), then the arrays as
//! little-endian `f64` in manifest order.

use std::path::Path;

use comlab_core::models::{Activation, CometMlpParams, ModelKind, NetworkConfig, Parameters, TwinNetParams};
use comlab_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &str = "comlab-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// A trained model of either family.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    MetaComet(TwinNetParams),
    Comet(CometMlpParams),
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::MetaComet(_) => ModelKind::MetaComet,
            TrainedModel::Comet(_) => ModelKind::Comet,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        match self {
            TrainedModel::MetaComet(m) => &m.config,
            TrainedModel::Comet(m) => &m.config,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            TrainedModel::MetaComet(m) => m.num_params(),
            TrainedModel::Comet(m) => m.num_params(),
        }
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        match self {
            TrainedModel::MetaComet(m) => m.named_tensors(),
            TrainedModel::Comet(m) => m.named_tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            TrainedModel::MetaComet(m) => m.tensors_mut(),
            TrainedModel::Comet(m) => m.tensors_mut(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetHeader {
    pub n_s: usize,
    pub n_c: usize,
    pub n_f: usize,
    pub width: usize,
    pub depth_hidden: usize,
    pub rank: usize,
    pub activation: String,
}

impl From<&NetworkConfig> for NetHeader {
    fn from(c: &NetworkConfig) -> Self {
        Self {
            n_s: c.n_s,
            n_c: c.n_c,
            n_f: c.n_f,
            width: c.width,
            depth_hidden: c.depth_hidden,
            rank: c.rank,
            activation: c.activation.tag().to_string(),
        }
    }
}

impl NetHeader {
    fn to_config(&self) -> Result<NetworkConfig> {
        let activation: Activation = self.activation.parse()?;
        Ok(NetworkConfig {
            n_s: self.n_s,
            n_c: self.n_c,
            n_f: self.n_f,
            width: self.width,
            depth_hidden: self.depth_hidden,
            rank: self.rank,
            activation,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub model_kind: String,
    pub factors_frozen: bool,
    pub num_params: usize,
    pub config: NetHeader,
    pub arrays: Vec<ArrayEntry>,
}

/// Serializes a model to the checkpoint byte layout.
pub fn to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut offset = 0;
    for (name, t) in model.named_tensors() {
        arrays.push(ArrayEntry { name, rows: t.rows(), cols: t.cols(), offset });
        offset += t.len() * 8;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model_kind: model.kind().tag().to_string(),
        factors_frozen: matches!(model, TrainedModel::MetaComet(m) if m.factors_frozen()),
        num_params: model.num_params(),
        config: NetHeader::from(model.config()),
        arrays,
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    let mut out = format!("{MAGIC}\nheader_bytes = {}\n{text}", text.len()).into_bytes();
    out.reserve(offset);
    for (_, t) in model.named_tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path, what: &str) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, format!("truncated before {what}")))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::format(path, format!("{what} is not UTF-8")))
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<TrainedModel> {
    let mut pos = 0;
    if take_line(bytes, &mut pos, path, "magic line")? != MAGIC {
        return Err(Error::format(path, "not a comlab checkpoint (bad magic line)"));
    }
    let len_line = take_line(bytes, &mut pos, path, "header_bytes")?;
    let header_len: usize = len_line
        .strip_prefix("header_bytes = ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, format!("field header_bytes: malformed line `{len_line}`")))?;
    let header_end = pos
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let text = std::str::from_utf8(&bytes[pos..header_end]).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(path, format!("field format_version: unsupported value {}", header.format_version)));
    }
    let kind: ModelKind = header.model_kind.parse().map_err(|e| Error::format(path, format!("field model_kind: {e}")))?;
    let config = header.config.to_config().map_err(|e| Error::format(path, format!("field config: {e}")))?;
    config.validate(kind).map_err(|e| Error::format(path, format!("field config: {e}")))?;
    let mut model = match kind {
        ModelKind::MetaComet => {
            let mut m = TwinNetParams::zeros(config);
            m.set_factors_frozen(header.factors_frozen);
            TrainedModel::MetaComet(m)
        }
        ModelKind::Comet => TrainedModel::Comet(CometMlpParams::zeros(config)),
    };
    let expected: Vec<(String, usize, usize)> =
        model.named_tensors().into_iter().map(|(n, t)| (n, t.rows(), t.cols())).collect();
    if expected.len() != header.arrays.len() {
        return Err(Error::format(
            path,
            format!("field arrays: {} entries, config implies {}", header.arrays.len(), expected.len()),
        ));
    }
    let data = &bytes[header_end..];
    let mut cursor = 0;
    for ((entry, (name, rows, cols)), tensor) in header.arrays.iter().zip(&expected).zip(model.tensors_mut()) {
        if &entry.name != name || entry.rows != *rows || entry.cols != *cols {
            return Err(Error::format(
                path,
                format!(
                    "field arrays.{}: shape {}x{} does not match expected {name} {rows}x{cols}",
                    entry.name, entry.rows, entry.cols
                ),
            ));
        }
        if entry.offset != cursor {
            return Err(Error::format(path, format!("field arrays.{name}.offset: expected {cursor}, got {}", entry.offset)));
        }
        let n_bytes = rows * cols * 8;
        let chunk = data
            .get(cursor..cursor + n_bytes)
            .ok_or_else(|| Error::format(path, format!("data truncated in array {name}")))?;
        for (dst, src) in tensor.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().expect("8-byte chunk"));
        }
        cursor += n_bytes;
    }
    if cursor != data.len() {
        return Err(Error::format(path, format!("{} trailing bytes after the last array", data.len() - cursor)));
    }
    if model.num_params() != header.num_params {
        return Err(Error::format(path, format!("field num_params: header says {}, arrays hold {}", header.num_params, model.num_params())));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn twin() -> TrainedModel {
        let cfg = NetworkConfig::new(2, 1, 3).with_width(6);
        TrainedModel::MetaComet(TwinNetParams::init(cfg, 4).unwrap())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for model in [twin(), TrainedModel::Comet(CometMlpParams::init(NetworkConfig::new(4, 2, 0).with_width(5).with_force(1), 2).unwrap())] {
            let bytes = to_bytes(&model).unwrap();
            assert_eq!(from_bytes(&bytes, Path::new("mem")).unwrap(), model);
        }
    }

    #[test]
    fn frozen_flag_survives() {
        let TrainedModel::MetaComet(m) = twin() else { unreachable!() };
        let frozen = TrainedModel::MetaComet(m.reinit_for_phase2(1));
        let back = from_bytes(&to_bytes(&frozen).unwrap(), Path::new("mem")).unwrap();
        assert!(matches!(back, TrainedModel::MetaComet(ref m) if m.factors_frozen()));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = to_bytes(&twin()).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra, Path::new("mem")).is_err());
    }

    /// Rewrites the header text of a checkpoint, keeping its data section.
    fn patch_header(bytes: &[u8], f: impl Fn(&str) -> String) -> Vec<u8> {
        let mut pos = 0;
        take_line(bytes, &mut pos, Path::new("mem"), "magic").unwrap();
        let len: usize = take_line(bytes, &mut pos, Path::new("mem"), "len").unwrap()[15..].parse().unwrap();
        let header = f(std::str::from_utf8(&bytes[pos..pos + len]).unwrap());
        let mut out = format!("{MAGIC}\nheader_bytes = {}\n{header}", header.len()).into_bytes();
        out.extend_from_slice(&bytes[pos + len..]);
        out
    }

    #[test]
    fn shape_mismatch_names_the_field() {
        let bytes = to_bytes(&twin()).unwrap();
        let same = patch_header(&bytes, |h| h.to_string());
        assert_eq!(same, bytes);
        let wider = patch_header(&bytes, |h| h.replacen("width = 6", "width = 7", 1));
        let err = from_bytes(&wider, Path::new("mem")).unwrap_err().to_string();
        assert!(err.contains("arrays.sdot_in.weight"), "{err}");
        let version = patch_header(&bytes, |h| h.replacen("format_version = 1", "format_version = 9", 1));
        assert!(from_bytes(&version, Path::new("mem")).unwrap_err().to_string().contains("format_version"));
        let unknown = patch_header(&bytes, |h| format!("extra = 1\n{h}"));
        assert!(from_bytes(&unknown, Path::new("mem")).is_err());
        let bad_magic = [b"x".as_slice(), &bytes].concat();
        assert!(from_bytes(&bad_magic, Path::new("mem")).unwrap_err().to_string().contains("magic"));
    }
}
