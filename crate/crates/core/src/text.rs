//! Prompt tokenisation and the pluggable text encoder.
//!
//! Two encoders feed the network: a deterministic hash-seeded reference
//! encoder for offline use, and import of embeddings computed elsewhere by a
//! frozen language model. Both produce a [`TextEmbedding`], which is the only
//! conditioning path into the velocity network.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::splitmix64;

/// Maximum number of tokens kept from a prompt.
pub const M_MAX: usize = 64;
/// Embedding width of the reference encoder.
pub const REFERENCE_DIM: usize = 64;
/// Embedding width expected from imported language-model embeddings.
pub const IMPORTED_DIM: usize = 768;
pub const UNK: &str = "<unk>";
pub const UNK_ID: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary with `<unk>` at id 0 followed by the distinct
    /// words in first-seen order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens = vec![UNK.to_string()];
        let mut index = HashMap::from([(UNK.to_string(), UNK_ID)]);
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len() as u32);
                tokens.push(w);
            }
        }
        Self { tokens, index }
    }

    /// The annotator's template lexicon plus the numerals needed to spell
    /// clock times and two-decimal peak values.
    pub fn template_lexicon() -> Self {
        let numerals = (0..100)
            .map(|n| n.to_string())
            .chain((0..10).map(|n| format!("0{n}")));
        Self::from_words(
            crate::agents::annotate::LEXICON
                .iter()
                .map(|s| s.to_string())
                .chain(numerals),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// All tokens in id order, `<unk>` first.
    pub fn words(&self) -> &[String] {
        &self.tokens
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.tokens)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Format {
                record: path.display().to_string(),
                reason: format!("vocabulary must start with {UNK}"),
            });
        }
        Ok(Self::from_words(tokens.into_iter().skip(1)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lower-cases and splits on anything that is not alphanumeric, so
/// `"12:40"` yields `12` and `40`. Truncates to [`M_MAX`].
pub fn split_words(prompt: &str) -> Vec<String> {
    prompt
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn tokenize(prompt: &str, vocab: &Vocabulary) -> Result<TokenSequence> {
    let words = split_words(prompt);
    if words.is_empty() {
        return Err(Error::Argument("prompt has no tokens".into()));
    }
    Ok(TokenSequence {
        ids: words.iter().take(M_MAX).map(|w| vocab.id(w)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Reference,
    Imported,
}

/// `rows x dim` matrix of token states; `mask[i]` is true for real tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
    pub source: EmbeddingSource,
}

impl TextEmbedding {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>, source: EmbeddingSource) -> Result<Self> {
        let e = Self {
            rows,
            dim,
            data,
            mask: vec![true; rows],
            source,
        };
        e.validate().map_err(|reason| Error::Format {
            record: "embedding".into(),
            reason,
        })?;
        Ok(e)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.rows == 0 || self.rows > M_MAX {
            return Err(format!("row count {} outside 1..={M_MAX}", self.rows));
        }
        if self.dim == 0 {
            return Err("zero embedding width".into());
        }
        if self.data.len() != self.rows * self.dim {
            return Err(format!(
                "{} values for a {}x{} matrix",
                self.data.len(),
                self.rows,
                self.dim
            ));
        }
        if self.mask.len() != self.rows {
            return Err("mask length differs from row count".into());
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(format!("non-finite value at flat index {i}"));
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Deterministic offline stand-in for a frozen language model: each token id
/// maps to a unit-norm Gaussian direction drawn from a seed derived from
/// `(seed, id)`, plus a scaled sinusoidal position code.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    pub vocab: Vocabulary,
    pub dim: usize,
    pub seed: u64,
}

impl ReferenceEncoder {
    pub fn new(vocab: Vocabulary, dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(Error::Argument(format!("reference width {dim} < 8")));
        }
        Ok(Self { vocab, dim, seed })
    }

    /// The unit vector for one token id, before position coding.
    pub fn token_vector(&self, id: u32) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ splitmix64(id as u64)));
        let mut v: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    fn position_code(&self, pos: usize) -> Vec<f64> {
        let d = self.dim;
        let scale = 1.0 / (d as f64).sqrt();
        (0..d)
            .map(|j| {
                let freq = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
                let a = pos as f64 / freq;
                scale * if j % 2 == 0 { a.sin() } else { a.cos() }
            })
            .collect()
    }

    pub fn encode(&self, tokens: &TokenSequence) -> Result<TextEmbedding> {
        if tokens.is_empty() || tokens.len() > M_MAX {
            return Err(Error::Argument(format!(
                "token count {} outside 1..={M_MAX}",
                tokens.len()
            )));
        }
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for (pos, &id) in tokens.ids.iter().enumerate() {
            let tv = self.token_vector(id);
            let pc = self.position_code(pos);
            data.extend(tv.iter().zip(&pc).map(|(a, b)| a + b));
        }
        TextEmbedding::new(tokens.len(), self.dim, data, EmbeddingSource::Reference)
    }

    pub fn encode_prompt(&self, prompt: &str) -> Result<TextEmbedding> {
        self.encode(&tokenize(prompt, &self.vocab)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRecord {
    id: String,
    m: usize,
    d: usize,
    data: Vec<f64>,
}

/// Reads newline-delimited `{id, m, d, data}` records. Blank lines are
/// skipped; an empty file yields an empty map.
pub fn import_embeddings(path: &Path) -> Result<BTreeMap<String, TextEmbedding>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            record: format!("line {}", lineno + 1),
            reason: e.to_string(),
        })?;
        let emb = TextEmbedding {
            rows: rec.m,
            dim: rec.d,
            data: rec.data,
            mask: vec![true; rec.m],
            source: EmbeddingSource::Imported,
        };
        emb.validate().map_err(|reason| Error::Format {
            record: rec.id.clone(),
            reason,
        })?;
        if out.insert(rec.id.clone(), emb).is_some() {
            return Err(Error::Format {
                record: rec.id,
                reason: "duplicate id".into(),
            });
        }
    }
    Ok(out)
}

/// Writes embeddings in the format read by [`import_embeddings`]. Floats are
/// written in shortest round-trip form, so re-import is bit-exact.
pub fn export_embeddings<'a, I>(path: &Path, items: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a TextEmbedding)>,
{
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (id, e) in items {
        let rec = EmbeddingRecord {
            id: id.to_string(),
            m: e.rows,
            d: e.dim,
            data: e.data.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of the unmasked rows.
pub fn mean_pool(e: &TextEmbedding) -> Result<Vec<f64>> {
    let live: Vec<usize> = (0..e.rows).filter(|&i| e.mask[i]).collect();
    if live.is_empty() {
        return Err(Error::Argument("every embedding row is masked".into()));
    }
    let mut out = vec![0.0; e.dim];
    for &i in &live {
        out.iter_mut().zip(e.row(i)).for_each(|(o, v)| *o += v);
    }
    let n = live.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// A batch of embeddings padded to a common token count for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBatch {
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
    /// `[batch, tokens, dim]`, zero in padded rows.
    pub data: Vec<f64>,
    /// `[batch, tokens]`.
    pub mask: Vec<bool>,
}

impl ConditionBatch {
    pub fn from_embeddings(items: &[&TextEmbedding]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Argument("empty conditioning batch".into()))?;
        let dim = first.dim;
        let tokens = items.iter().map(|e| e.rows).max().unwrap_or(0);
        let mut data = vec![0.0; items.len() * tokens * dim];
        let mut mask = vec![false; items.len() * tokens];
        for (b, e) in items.iter().enumerate() {
            if e.dim != dim {
                return Err(Error::Shape(format!(
                    "embedding widths {} and {} in one batch",
                    dim, e.dim
                )));
            }
            if !e.mask.iter().any(|&m| m) {
                return Err(Error::Argument(format!("embedding {b} is fully masked")));
            }
            let off = b * tokens * dim;
            data[off..off + e.rows * dim].copy_from_slice(&e.data);
            mask[b * tokens..b * tokens + e.rows].copy_from_slice(&e.mask);
        }
        Ok(Self {
            batch: items.len(),
            tokens,
            dim,
            data,
            mask,
        })
    }

    /// The same embedding repeated `n` times.
    pub fn repeat(e: &TextEmbedding, n: usize) -> Result<Self> {
        Self::from_embeddings(&vec![e; n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::template_lexicon()
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        assert_eq!(tokenize("Sunny day", &v).unwrap().len(), 2);
        let t = tokenize("peak at 12:40", &v).unwrap();
        let expect: Vec<u32> = ["peak", "at", "12", "40"].iter().map(|w| v.id(w)).collect();
        assert_eq!(t.ids, expect);
        assert!(expect.iter().all(|&id| id != UNK_ID));
        let long = vec!["word"; 200].join(" ");
        assert_eq!(tokenize(&long, &v).unwrap().len(), M_MAX);
        assert!(matches!(tokenize("   ", &v), Err(Error::Argument(_))));
        assert_eq!(tokenize("zyzzyva", &v).unwrap().ids, vec![UNK_ID]);
    }

    #[test]
    fn reference_encoder_examples() {
        let enc = ReferenceEncoder::new(vocab(), REFERENCE_DIM, 7).unwrap();
        let a = enc.encode_prompt("A sunny day with stable output").unwrap();
        let b = enc.encode_prompt("A sunny day with stable output").unwrap();
        assert_eq!(a, b);
        for id in [0u32, 5, 17] {
            let n: f64 = enc
                .token_vector(id)
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let c = enc
            .encode_prompt("A cloudy day with stable output")
            .unwrap();
        assert!((0..a.rows).any(|i| a.row(i) != c.row(i)));
        assert!(ReferenceEncoder::new(vocab(), 4, 0).is_err());
    }

    #[test]
    fn mean_pool_examples() {
        let single = TextEmbedding::new(1, 2, vec![0.5, -1.0], EmbeddingSource::Reference).unwrap();
        assert_eq!(mean_pool(&single).unwrap(), vec![0.5, -1.0]);
        let mut two =
            TextEmbedding::new(2, 2, vec![1.0, 1.0, 3.0, 3.0], EmbeddingSource::Reference).unwrap();
        assert_eq!(mean_pool(&two).unwrap(), vec![2.0, 2.0]);
        two.mask[1] = false;
        assert_eq!(mean_pool(&two).unwrap(), vec![1.0, 1.0]);
        two.mask[0] = false;
        assert!(matches!(mean_pool(&two), Err(Error::Argument(_))));
    }

    #[test]
    fn import_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.ndjson");
        let data: Vec<String> = (0..3 * 768)
            .map(|i| format!("{}", i as f64 * 1e-3))
            .collect();
        std::fs::write(
            &p,
            format!(
                "{{\"id\":\"p0\",\"m\":3,\"d\":768,\"data\":[{}]}}\n",
                data.join(",")
            ),
        )
        .unwrap();
        let m = import_embeddings(&p).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m["p0"].source, EmbeddingSource::Imported);

        let nan = dir.path().join("nan.ndjson");
        std::fs::write(
            &nan,
            "{\"id\":\"bad\",\"m\":1,\"d\":2,\"data\":[1.0,NaN]}\n",
        )
        .unwrap();
        assert!(matches!(import_embeddings(&nan), Err(Error::Format { .. })));

        let short = dir.path().join("short.ndjson");
        std::fs::write(
            &short,
            "{\"id\":\"s\",\"m\":2,\"d\":2,\"data\":[1.0,2.0]}\n",
        )
        .unwrap();
        match import_embeddings(&short) {
            Err(Error::Format { record, .. }) => assert_eq!(record, "s"),
            other => panic!("{other:?}"),
        }

        let empty = dir.path().join("empty.ndjson");
        std::fs::write(&empty, "").unwrap();
        assert!(import_embeddings(&empty).unwrap().is_empty());
    }

    #[test]
    fn export_import_is_bit_exact() {
        let enc = ReferenceEncoder::new(vocab(), REFERENCE_DIM, 3).unwrap();
        let e = enc
            .encode_prompt("A stormy day with high output, peaking at 0.37")
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ndjson");
        export_embeddings(&p, [("x", &e)]).unwrap();
        let back = &import_embeddings(&p).unwrap()["x"];
        assert_eq!(back.rows, e.rows);
        assert!(back
            .data
            .iter()
            .zip(&e.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn vocabulary_persists() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        let back = Vocabulary::load(&p).unwrap();
        assert_eq!(back.len(), v.len());
        assert_eq!(back.id("sunny"), v.id("sunny"));
    }

    #[test]
    fn condition_batch_pads_and_masks() {
        let a = TextEmbedding::new(1, 2, vec![1.0, 2.0], EmbeddingSource::Reference).unwrap();
        let b =
            TextEmbedding::new(2, 2, vec![3.0, 4.0, 5.0, 6.0], EmbeddingSource::Imported).unwrap();
        let c = ConditionBatch::from_embeddings(&[&a, &b]).unwrap();
        assert_eq!(c.tokens, 2);
        assert_eq!(c.mask, vec![true, false, true, true]);
        assert_eq!(c.data, vec![1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
