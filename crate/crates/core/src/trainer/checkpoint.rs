//! Binary checkpoint format.
//!
//! ```text
//! "FTLB" | u32 version | u32 entry count
//! per entry: u16 name length | name | u8 rank | u32 dims[rank] | f64 data[numel]
//! u32 metadata length | metadata (UTF-8 `key=value` lines)
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::{EncoderConfig, ParamMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"FTLB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Initial,
    Pretrained,
    Finetuned,
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckpointKind::Initial => "initial",
            CheckpointKind::Pretrained => "pretrained",
            CheckpointKind::Finetuned => "finetuned",
        })
    }
}

impl FromStr for CheckpointKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "initial" => Ok(Self::Initial),
            "pretrained" => Ok(Self::Pretrained),
            "finetuned" => Ok(Self::Finetuned),
            other => Err(Error::format(0, format!("unknown checkpoint kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metadata {
    pub kind: CheckpointKind,
    pub encoder: EncoderConfig,
    /// Corpus tokens of the vocabulary, in id order after the specials.
    pub vocab_tokens: Vec<String>,
    pub vocab_hash: String,
    pub seed: u64,
    /// Free-form extra fields; keys must not contain `=` or newlines.
    pub extra: BTreeMap<String, String>,
}

impl Metadata {
    pub fn new(kind: CheckpointKind, encoder: EncoderConfig, vocab: &Vocabulary, seed: u64) -> Self {
        Self {
            kind,
            encoder,
            vocab_tokens: vocab.corpus_tokens().to_vec(),
            vocab_hash: vocab.hash(),
            seed,
            extra: BTreeMap::new(),
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let v = Vocabulary::from_corpus_tokens(self.vocab_tokens.iter().cloned())?;
        if v.hash() != self.vocab_hash {
            return Err(Error::format(
                0,
                format!("vocabulary hash {} does not match recorded {}", v.hash(), self.vocab_hash),
            ));
        }
        Ok(v)
    }

    fn to_text(&self) -> String {
        let e = &self.encoder;
        let mut lines = vec![
            format!("kind={}", self.kind),
            format!("encoder.num_layers={}", e.num_layers),
            format!("encoder.hidden={}", e.hidden),
            format!("encoder.heads={}", e.heads),
            format!("encoder.ff_dim={}", e.ff_dim),
            format!("encoder.vocab_size={}", e.vocab_size),
            format!("encoder.max_seq_len={}", e.max_seq_len),
            format!("encoder.dropout_p={}", e.dropout_p),
            format!("vocab.hash={}", self.vocab_hash),
            format!("vocab.tokens={}", self.vocab_tokens.join(" ")),
            format!("seed={}", self.seed),
        ];
        lines.extend(self.extra.iter().map(|(k, v)| format!("extra.{k}={v}")));
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    fn from_text(text: &str, offset: u64) -> Result<Self> {
        let bad = |m: String| Error::format(offset, m);
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("metadata line {line:?} lacks '='")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let take = |k: &str| -> Result<&String> {
            map.get(k).ok_or_else(|| bad(format!("metadata misses {k}")))
        };
        fn num<T: FromStr>(s: &str, k: &str, offset: u64) -> Result<T> {
            s.parse()
                .map_err(|_| Error::format(offset, format!("metadata {k}={s:?} is not a number")))
        }
        let n = |k: &str| -> Result<usize> { num(take(k)?, k, offset) };
        let encoder = EncoderConfig {
            num_layers: n("encoder.num_layers")?,
            hidden: n("encoder.hidden")?,
            heads: n("encoder.heads")?,
            ff_dim: n("encoder.ff_dim")?,
            vocab_size: n("encoder.vocab_size")?,
            max_seq_len: n("encoder.max_seq_len")?,
            dropout_p: num(take("encoder.dropout_p")?, "encoder.dropout_p", offset)?,
        };
        let tokens = take("vocab.tokens")?;
        Ok(Self {
            kind: take("kind")?.parse().map_err(|_| bad("bad checkpoint kind".into()))?,
            encoder,
            vocab_tokens: tokens.split(' ').filter(|t| !t.is_empty()).map(String::from).collect(),
            vocab_hash: take("vocab.hash")?.clone(),
            seed: num(take("seed")?, "seed", offset)?,
            extra: map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: ParamMap,
    pub metadata: Metadata,
}

impl Checkpoint {
    /// Serializes to the on-disk byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::contract("too many checkpoint entries"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::contract(format!("parameter name too long: {name:?}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::contract(format!("rank of {name:?} exceeds 255")))?;
            out.push(rank);
            for &d in t.dims() {
                let d = u32::try_from(d)
                    .map_err(|_| Error::contract(format!("dimension of {name:?} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = self.metadata.to_text();
        let mlen = u32::try_from(meta.len()).map_err(|_| Error::contract("metadata too large"))?;
        out.extend_from_slice(&mlen.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    /// Parses the on-disk byte layout. Any inconsistency is a format error
    /// naming the byte offset where it was detected.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = r.u32("entry count")?;
        let mut tensors = ParamMap::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dimension")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::format(r.pos as u64, format!("{name}: size overflows")))?;
            let payload = r.take(numel, "tensor data")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| Error::format(at, e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::format(at, format!("duplicate entry {name:?}")));
            }
        }
        let meta_at = r.pos as u64;
        let mlen = r.u32("metadata length")? as usize;
        let text = std::str::from_utf8(r.take(mlen, "metadata")?)
            .map_err(|_| Error::format(meta_at, "metadata is not UTF-8"))?;
        let metadata = Metadata::from_text(text, meta_at)?;
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos as u64,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(Self { tensors, metadata })
    }

    /// Encoder tensors only (no `head.*` entries).
    pub fn encoder_params(&self) -> ParamMap {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("head."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    /// Checks that every encoder tensor the metadata implies is present
    /// with the right shape.
    pub fn check_encoder(&self) -> Result<()> {
        self.metadata.encoder.validate()?;
        for (name, dims) in self.metadata.encoder.param_shapes() {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    lhs: t.dims().to_vec(),
                    rhs: dims,
                });
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
