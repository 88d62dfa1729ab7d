//! `IVLB` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IVLB" | u32 version | u64 meta_len | meta JSON
//! u32 tensor_count | per tensor: u16 name_len, name, u8 rank, rank × u64 dims, u64 byte offset
//! u64 payload_len | payload (row-major f32) | u32 CRC32 of payload
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::Classifier;
use crate::inference::EpochStats;
use crate::models::{Encoder, GenerativeModel};
use crate::numerics::{Activation, Layer, MlpParams, Parameters, Tensor};

pub const MAGIC: &[u8; 4] = b"IVLB";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Generative,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ArtifactKind,
    pub config: RunConfig,
    #[serde(default)]
    pub history: Vec<EpochStats>,
    #[serde(default)]
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Config(format!("tensor name {name:?} too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        let mut payload = Vec::with_capacity(offset as usize);
        for (_, t) in &self.tensors {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    /// Parses a checkpoint; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(Error::format(origin, "not an IVLB checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::format(origin, format!("checkpoint metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(origin, "tensor name is not UTF-8"))?;
            let rank = r.take(1)?[0] as usize;
            if rank > 4 {
                return Err(Error::format(origin, format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            table.push((name, shape, offset));
        }
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        let crc = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after checksum"));
        }
        if crc32fast::hash(payload) != crc {
            return Err(Error::Integrity(format!("{}: payload checksum mismatch", origin.display())));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape, offset) in table {
            let n: usize = shape.iter().product();
            let end = offset
                .checked_add(4 * n)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::format(origin, format!("tensor {name} lies outside the payload")))?;
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ivlb.partial");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Asset(format!("checkpoint has no tensor {name:?}")))
    }

    fn layers(&self, prefix: &str) -> Result<Vec<Layer>> {
        let mut layers = Vec::new();
        while let Ok(weight) = self.tensor(&format!("{prefix}.{}.weight", layers.len())) {
            let bias = self.tensor(&format!("{prefix}.{}.bias", layers.len()))?;
            layers.push(Layer {
                weight: weight.clone(),
                bias: bias.clone(),
            });
        }
        if layers.is_empty() {
            return Err(Error::Asset(format!("checkpoint has no {prefix} layers")));
        }
        Ok(layers)
    }

    pub fn generative(
        meta: CheckpointMeta,
        model: &GenerativeModel,
        encoder: Option<&Encoder>,
    ) -> Self {
        let mut tensors = named_layers("decoder", &model.decoder.layers);
        if let Some(enc) = encoder {
            tensors.extend(named_layers("encoder", &enc.net.layers));
        }
        Checkpoint { meta, tensors }
    }

    pub fn to_generative(&self) -> Result<(GenerativeModel, Option<Encoder>)> {
        if self.meta.kind != ArtifactKind::Generative {
            return Err(Error::Asset("checkpoint does not hold a generative model".into()));
        }
        let decoder = MlpParams::from_layers(self.layers("decoder")?, Activation::Tanh, Activation::Sigmoid)?;
        let model = GenerativeModel::from_decoder(decoder)?;
        let encoder = if self.meta.config.scheme.uses_encoder() {
            let net = MlpParams::from_layers(self.layers("encoder")?, Activation::Tanh, Activation::Identity)?;
            Some(Encoder::from_net(net)?)
        } else {
            None
        };
        Ok((model, encoder))
    }

    pub fn classifier(meta: CheckpointMeta, clf: &Classifier) -> Self {
        let names = ["conv1", "conv2", "fc1", "fc2"];
        let tensors = clf
            .tensors()
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let part = if i % 2 == 0 { "weight" } else { "bias" };
                (format!("classifier.{}.{part}", names[i / 2]), t.clone())
            })
            .collect();
        Checkpoint { meta, tensors }
    }

    pub fn to_classifier(&self) -> Result<Classifier> {
        if self.meta.kind != ArtifactKind::Classifier {
            return Err(Error::Asset("checkpoint does not hold a classifier".into()));
        }
        let layer = |n: &str| -> Result<Layer> {
            Ok(Layer {
                weight: self.tensor(&format!("classifier.{n}.weight"))?.clone(),
                bias: self.tensor(&format!("classifier.{n}.bias"))?.clone(),
            })
        };
        Classifier::from_layers(layer("conv1")?, layer("conv2")?, layer("fc1")?, layer("fc2")?)
    }
}

fn named_layers(prefix: &str, layers: &[Layer]) -> Vec<(String, Tensor)> {
    layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                (format!("{prefix}.{i}.weight"), l.weight.clone()),
                (format!("{prefix}.{i}.bias"), l.bias.clone()),
            ]
        })
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::io(
                self.origin,
                std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated checkpoint"),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::Profile;
    use crate::inference::Scheme;
    use crate::rng::stream_rng;

    fn meta(scheme: Scheme) -> CheckpointMeta {
        CheckpointMeta {
            kind: ArtifactKind::Generative,
            config: RunConfig::new("train", scheme, Profile::Desk),
            history: vec![],
            test_accuracy: None,
        }
    }

    #[test]
    fn generative_round_trip_is_bit_identical() {
        let mut rng = stream_rng(9, 0);
        let model = GenerativeModel::new(3, &mut rng);
        let enc = Encoder::new(3, &mut rng);
        let ck = Checkpoint::generative(meta(Scheme::Ivae), &model, Some(&enc));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let (m2, e2) = back.to_generative().unwrap();
        assert_eq!(m2.checksum(), model.checksum());
        assert_eq!(e2.unwrap().checksum(), enc.checksum());
    }

    #[test]
    fn rejects_bad_magic_version_and_checksum() {
        let model = GenerativeModel::new(2, &mut stream_rng(1, 0));
        let bytes = Checkpoint::generative(meta(Scheme::Pcn), &model, None).to_bytes().unwrap();
        let p = Path::new("x.ivlb");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Format { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Format { .. })));

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 10] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Integrity(_))));

        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p), Err(Error::Io { .. })));
    }

    #[test]
    fn classifier_round_trip() {
        let clf = Classifier::new(&mut stream_rng(5, 0));
        let mut m = meta(Scheme::Vae);
        m.kind = ArtifactKind::Classifier;
        let ck = Checkpoint::classifier(m, &clf);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back.to_classifier().unwrap(), clf);
        assert!(back.to_generative().is_err());
    }
}
