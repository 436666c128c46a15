//! Named tensor archive holding a trained dual encoder.
//!
//! Layout: a text header, then little-endian `f32` payloads concatenated in
//! header order.
//!
//! ```text
//! mammoclip-archive 1
//! <key> = <value>            configuration, prompts, free metadata
//! tensor <name> f32 <dims>   dims as `AxBxC`, or `scalar`
//! data
//! <payload bytes>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use mammoclip_autodiff::Array;

use crate::density::{ClassPromptSet, Density};
use crate::kv::KvFile;
use crate::model::{
    ConvBlock, DualEncoderConfig, DualEncoderModel, Param, TextEncoderConfig, VisionEncoderConfig,
};
use crate::util::{read, write_atomic};
use crate::{Error, Result};

const MAGIC: &str = "mammoclip-archive 1";
const DATA_MARKER: &str = "data";
/// Upper bound on elements in one tensor, to reject absurd headers early.
const MAX_TENSOR_LEN: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DualEncoderModel,
    pub prompts: ClassPromptSet,
    /// Free-form provenance (fold, epoch, seed...).
    pub metadata: BTreeMap<String, String>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

impl Checkpoint {
    pub fn new(model: DualEncoderModel, prompts: ClassPromptSet) -> Self {
        Self {
            model,
            prompts,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = self.model.config();
        let mut kv = KvFile::new();
        kv.push("vision.input_size", cfg.vision.input_size)?;
        kv.push("vision.embed_dim", cfg.vision.embed_dim)?;
        let blocks: Vec<String> = cfg
            .vision
            .conv_blocks
            .iter()
            .map(|b| format!("{}:{}:{}", b.channels, b.kernel, b.pool_stride))
            .collect();
        kv.push("vision.blocks", blocks.join(","))?;
        kv.push("text.token_embed_dim", cfg.text.token_embed_dim)?;
        kv.push("text.embed_dim", cfg.text.embed_dim)?;
        kv.push("text.vocabulary", cfg.text.vocabulary.join(" "))?;
        for d in Density::ALL {
            kv.push(&format!("prompt.{}", d.letter()), self.prompts.prompt(d))?;
        }
        for (k, v) in &self.metadata {
            kv.push(&format!("meta.{k}"), v)?;
        }

        let mut out = format!("{MAGIC}\n{kv}");
        for p in self.model.params() {
            let dims = if p.value.shape().is_empty() {
                "scalar".to_string()
            } else {
                p.value.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            out.push_str(&format!("tensor {} f32 {dims}\n", p.name));
        }
        out.push_str(DATA_MARKER);
        out.push('\n');
        let mut bytes = out.into_bytes();
        for p in self.model.params() {
            for &v in p.value.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| format_err("header is not terminated"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| format_err("header is not UTF-8"))
        };
        if next_line()? != MAGIC {
            return Err(format_err("missing archive signature"));
        }
        let mut preamble = String::new();
        let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line()?;
            if line == DATA_MARKER {
                break;
            }
            if let Some(spec) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = spec.split(' ').collect();
                let [name, dtype, dims] = parts[..] else {
                    return Err(format_err(format!("bad tensor line {line:?}")));
                };
                if dtype != "f32" {
                    return Err(format_err(format!("unsupported dtype {dtype:?}")));
                }
                let shape = if dims == "scalar" {
                    Vec::new()
                } else {
                    dims.split('x')
                        .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| format_err(format!("bad dims {dims:?}")))?
                };
                shape
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                    .filter(|&n| n <= MAX_TENSOR_LEN)
                    .ok_or_else(|| format_err(format!("tensor {name} is too large")))?;
                tensors.push((name.to_string(), shape));
            } else if tensors.is_empty() {
                preamble.push_str(line);
                preamble.push('\n');
            } else {
                return Err(format_err(format!("unexpected header line {line:?}")));
            }
        }

        let kv = KvFile::parse(&preamble).map_err(|e| format_err(e.to_string()))?;
        let mut r = kv.reader();
        let blocks: String = r.require("vision.blocks")?;
        let conv_blocks = blocks
            .split(',')
            .map(|b| {
                let v: Vec<usize> = b.split(':').filter_map(|x| x.parse().ok()).collect();
                match v[..] {
                    [channels, kernel, pool_stride] => Ok(ConvBlock {
                        channels,
                        kernel,
                        pool_stride,
                    }),
                    _ => Err(format_err(format!("bad conv block {b:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let vision = VisionEncoderConfig {
            input_size: r.require("vision.input_size")?,
            conv_blocks,
            embed_dim: r.require("vision.embed_dim")?,
        };
        let vocabulary: String = r.require("text.vocabulary")?;
        let text = TextEncoderConfig {
            vocabulary: vocabulary.split(' ').map(str::to_string).collect(),
            token_embed_dim: r.require("text.token_embed_dim")?,
            embed_dim: r.require("text.embed_dim")?,
        };
        let prompts = ClassPromptSet::new(
            Density::ALL
                .map(|d| r.require::<String>(&format!("prompt.{}", d.letter())))
                .into_iter()
                .collect::<Result<Vec<_>>>()?
                .try_into()
                .expect("four prompts"),
        )?;
        let metadata = r.section("meta");
        r.finish().map_err(|e| format_err(e.to_string()))?;

        let config = DualEncoderConfig { vision, text };
        config.validate().map_err(|e| format_err(e.to_string()))?;
        config.text.covers(&prompts).map_err(|e| format_err(e.to_string()))?;

        let mut payload = &bytes[pos..];
        let mut params = Vec::with_capacity(tensors.len());
        for (name, shape) in tensors {
            let n: usize = shape.iter().product();
            if payload.len() < 4 * n {
                return Err(format_err(format!("payload truncated in tensor {name}")));
            }
            let data = payload[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            payload = &payload[4 * n..];
            params.push(Param {
                name,
                value: Array::new(shape, data).map_err(|e| format_err(e.to_string()))?,
            });
        }
        if !payload.is_empty() {
            return Err(format_err(format!("{} trailing payload bytes", payload.len())));
        }
        let model = DualEncoderModel::from_parts(config, params).map_err(|e| match e {
            Error::Numerical(m) => format_err(m),
            other => other,
        })?;
        Ok(Self {
            model,
            prompts,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format {
                what,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvBlock;

    fn small() -> Checkpoint {
        let prompts = ClassPromptSet::default();
        let config = DualEncoderConfig {
            vision: VisionEncoderConfig {
                input_size: 16,
                conv_blocks: vec![ConvBlock {
                    channels: 3,
                    kernel: 3,
                    pool_stride: 2,
                }],
                embed_dim: 4,
            },
            text: TextEncoderConfig::for_prompts(&prompts, 3, 4),
        };
        let mut c = Checkpoint::new(DualEncoderModel::new(config, 5).unwrap().round_to_f32(), prompts);
        c.metadata.insert("fold".into(), "2".into());
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = small();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_archives_are_format_errors() {
        let bytes = small().to_bytes().unwrap();
        let cases: Vec<Vec<u8>> = vec![
            bytes[..bytes.len() - 1].to_vec(),
            [bytes.as_slice(), &[0]].concat(),
            b"junk\n".to_vec(),
            String::from_utf8_lossy(&bytes[..200]).replace("vision.embed_dim = 4", "vision.embed_dim = 5").into_bytes(),
        ];
        for b in cases {
            assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format { .. } | Error::Config(_))));
        }
    }

    #[test]
    fn nan_payload_is_rejected() {
        let mut bytes = small().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
