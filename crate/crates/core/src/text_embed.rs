//! Toy text side: a frozen seeded embedding table standing in for a real text
//! encoder, learnable pseudo-token blocks, prompt assembly, semantic deltas
//! between word lists, and linear embedding edits.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sample_normal;
use crate::rng::derive_rng;

/// Default text-embedding dimension at desk scale.
pub const DEFAULT_TEXT_DIM: usize = 64;

/// Word list the toy encoder knows about. Color and shape words name the
/// synthetic corpus scenes; the style words exist to be appended by edits.
pub const DEFAULT_WORDS: &[&str] = &[
    "object", "a", "of", "photo", "red", "green", "blue", "yellow", "white", "purple", "orange",
    "cube", "sphere", "blob", "cluster", "scene", "bright", "dark", "warm", "cool", "sketch",
    "neon", "pastel", "vivid",
];

/// Frozen vocabulary: unique words plus one embedding row per word.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    /// (words, d_text)
    table: Array2<f64>,
    pub seed: u64,
}

impl Vocabulary {
    /// Build the seeded table; rows are unit-scale Gaussian vectors.
    pub fn new(words: &[&str], d_text: usize, seed: u64) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for w in words {
            if !seen.insert(*w) {
                return Err(Error::config(format!("duplicate word {w:?}")));
            }
        }
        let mut rng = derive_rng(seed, "vocabulary");
        let table = Array2::from_shape_vec(
            (words.len(), d_text),
            sample_normal(&mut rng, words.len() * d_text, 1.0 / (d_text as f64).sqrt()),
        )
        .unwrap();
        Ok(Vocabulary {
            words: words.iter().map(|s| s.to_string()).collect(),
            table,
            seed,
        })
    }

    pub fn default_desk(seed: u64) -> Vocabulary {
        Vocabulary::new(DEFAULT_WORDS, DEFAULT_TEXT_DIM, seed).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.iter().any(|w| w == word)
    }

    pub fn embedding(&self, word: &str) -> Result<Array1<f64>> {
        let idx = self
            .words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))?;
        Ok(self.table.row(idx).into_owned())
    }

    /// Content hash over words and table bytes; used to prove the vocabulary
    /// is untouched by optimization.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        for v in self.table.iter() {
            h.update(v.to_le_bytes());
        }
        crate::rng::to_hex(&h.finalize())
    }
}

/// A learnable block of `N` vectors occupying one prompt slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoToken {
    pub name: String,
    /// (N, d_text)
    pub vectors: Array2<f64>,
    pub trainable: bool,
}

impl PseudoToken {
    pub fn num_vectors(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }
}

/// Initialize a pseudo-token: `num_vectors` copies of the init word's row.
pub fn init_pseudo_token(
    init_word: &str,
    num_vectors: usize,
    vocab: &Vocabulary,
) -> Result<PseudoToken> {
    if num_vectors == 0 {
        return Err(Error::config("num_vectors must be >= 1"));
    }
    let row = vocab.embedding(init_word)?;
    let mut vectors = Array2::zeros((num_vectors, vocab.dim()));
    for mut r in vectors.rows_mut() {
        r.assign(&row);
    }
    Ok(PseudoToken {
        name: "S*".to_string(),
        vectors,
        trainable: true,
    })
}

/// One prompt slot: either a vocabulary word or the pseudo-token block.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptSlot {
    Word(String),
    Pseudo,
}

/// Assembled conditioning sequence: one vector per position plus the label of
/// where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    /// (positions, d_text)
    pub vectors: Array2<f64>,
    pub token_labels: Vec<String>,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positions whose vectors came from the pseudo-token block.
    pub fn pseudo_positions(&self, pseudo_name: &str) -> Vec<usize> {
        self.token_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.as_str() == pseudo_name)
            .map(|(i, _)| i)
            .collect()
    }

    /// Positions whose label matches any of the given words.
    pub fn word_positions(&self, words: &[String]) -> Vec<usize> {
        self.token_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| words.iter().any(|w| w == *l))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Expand a template into the conditioning sequence. At most one `Pseudo`
/// slot; it expands to the pseudo-token's N vectors in order.
pub fn assemble_prompt(
    template: &[PromptSlot],
    pseudo: Option<&PseudoToken>,
    vocab: &Vocabulary,
) -> Result<PromptEmbedding> {
    let pseudo_slots = template
        .iter()
        .filter(|s| matches!(s, PromptSlot::Pseudo))
        .count();
    if pseudo_slots > 1 {
        return Err(Error::config("template may contain at most one pseudo slot"));
    }
    if pseudo_slots == 1 && pseudo.is_none() {
        return Err(Error::config("template references a pseudo token but none was given"));
    }
    let mut rows: Vec<Array1<f64>> = Vec::new();
    let mut labels = Vec::new();
    for slot in template {
        match slot {
            PromptSlot::Word(w) => {
                rows.push(vocab.embedding(w)?);
                labels.push(w.clone());
            }
            PromptSlot::Pseudo => {
                let p = pseudo.unwrap();
                if p.dim() != vocab.dim() {
                    return Err(Error::shape(format!(
                        "pseudo dim {} vs vocab dim {}",
                        p.dim(),
                        vocab.dim()
                    )));
                }
                for r in p.vectors.rows() {
                    rows.push(r.into_owned());
                    labels.push(p.name.clone());
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::config("prompt template is empty"));
    }
    let mut vectors = Array2::zeros((rows.len(), vocab.dim()));
    for (i, r) in rows.iter().enumerate() {
        vectors.row_mut(i).assign(r);
    }
    Ok(PromptEmbedding {
        vectors,
        token_labels: labels,
    })
}

/// Helper: turn plain words into template slots.
pub fn word_slots(words: &[String]) -> Vec<PromptSlot> {
    words.iter().map(|w| PromptSlot::Word(w.clone())).collect()
}

/// Mean-pooled embedding of `target` minus mean-pooled embedding of `source`.
pub fn text_delta(target: &[String], source: &[String], vocab: &Vocabulary) -> Result<Array1<f64>> {
    let pool = |words: &[String]| -> Result<Array1<f64>> {
        if words.is_empty() {
            return Err(Error::config("cannot pool an empty word list"));
        }
        let mut acc = Array1::zeros(vocab.dim());
        for w in words {
            acc += &vocab.embedding(w)?;
        }
        Ok(acc / words.len() as f64)
    };
    Ok(pool(target)? - pool(source)?)
}

/// Every pseudo vector shifted by `lambda * delta`; the input is untouched.
pub fn edit_embedding(
    z_star: &PseudoToken,
    delta: &Array1<f64>,
    lambda: f64,
) -> Result<PseudoToken> {
    if delta.len() != z_star.dim() {
        return Err(Error::shape(format!(
            "delta dim {} vs embedding dim {}",
            delta.len(),
            z_star.dim()
        )));
    }
    let mut out = z_star.clone();
    for mut row in out.vectors.rows_mut() {
        row.zip_mut_with(delta, |v, d| *v += lambda * d);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Embedding file format (bit-exact):
//   magic "IV3D" | version u16 LE | count N u32 LE | dim u32 LE
//   | N*dim f32 LE | metadata_len u32 LE | metadata UTF-8 (JSON)
// ---------------------------------------------------------------------------

const EMBEDDING_MAGIC: &[u8; 4] = b"IV3D";
const EMBEDDING_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingMetadata {
    pub init_word: String,
    pub training_seed: u64,
    pub run_id: String,
}

pub fn write_embedding(token: &PseudoToken, meta: &EmbeddingMetadata) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(token.num_vectors() as u32).to_le_bytes());
    out.extend_from_slice(&(token.dim() as u32).to_le_bytes());
    for v in token.vectors.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let meta_json = serde_json::to_vec(meta).expect("metadata serializes");
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out
}

pub fn read_embedding(bytes: &[u8]) -> Result<(PseudoToken, EmbeddingMetadata)> {
    let fail = |msg: &str| Error::Artifact(format!("embedding file: {msg}"));
    if bytes.len() < 14 || &bytes[0..4] != EMBEDDING_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let data_len = n * dim * 4;
    if bytes.len() < 14 + data_len + 4 {
        return Err(fail("truncated"));
    }
    let mut vectors = Array2::zeros((n, dim));
    for i in 0..n * dim {
        let off = 14 + i * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        vectors[(i / dim, i % dim)] = v as f64;
    }
    let meta_off = 14 + data_len;
    let meta_len =
        u32::from_le_bytes(bytes[meta_off..meta_off + 4].try_into().unwrap()) as usize;
    if bytes.len() < meta_off + 4 + meta_len {
        return Err(fail("truncated metadata"));
    }
    let meta: EmbeddingMetadata =
        serde_json::from_slice(&bytes[meta_off + 4..meta_off + 4 + meta_len])?;
    Ok((
        PseudoToken {
            name: "S*".to_string(),
            vectors,
            trainable: true,
        },
        meta,
    ))
}

/// Mean row of a prompt, occasionally useful for diagnostics.
pub fn mean_pool(prompt: &PromptEmbedding) -> Array1<f64> {
    prompt.vectors.mean_axis(Axis(0)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::default_desk(7)
    }

    #[test]
    fn pseudo_token_init_copies_the_word_row() {
        let v = vocab();
        let tok = init_pseudo_token("object", 32, &v).unwrap();
        assert_eq!(tok.num_vectors(), 32);
        let row = v.embedding("object").unwrap();
        for r in tok.vectors.rows() {
            assert_eq!(r.to_vec(), row.to_vec());
        }
        let single = init_pseudo_token("object", 1, &v).unwrap();
        assert_eq!(single.vectors.row(0).to_vec(), row.to_vec());
    }

    #[test]
    fn pseudo_rows_are_independent() {
        let v = vocab();
        let mut tok = init_pseudo_token("object", 4, &v).unwrap();
        let before = tok.vectors.clone();
        tok.vectors[(2, 0)] += 1.0;
        for r in [0, 1, 3] {
            assert_eq!(tok.vectors.row(r).to_vec(), before.row(r).to_vec());
        }
    }

    #[test]
    fn unknown_init_word_is_an_error() {
        assert!(init_pseudo_token("nosuchword", 4, &vocab()).is_err());
    }

    #[test]
    fn prompt_length_counts_pseudo_expansion() {
        let v = vocab();
        let tok = init_pseudo_token("object", 32, &v).unwrap();
        let template = vec![
            PromptSlot::Word("a".into()),
            PromptSlot::Word("photo".into()),
            PromptSlot::Word("of".into()),
            PromptSlot::Pseudo,
        ];
        let p = assemble_prompt(&template, Some(&tok), &v).unwrap();
        assert_eq!(p.len(), 35);
        assert_eq!(p.pseudo_positions("S*").len(), 32);

        let bare = assemble_prompt(&[PromptSlot::Pseudo], Some(&tok), &v).unwrap();
        assert_eq!(bare.len(), 32);
        assert!(bare.token_labels.iter().all(|l| l == "S*"));
    }

    #[test]
    fn word_only_prompt_is_pure_lookup() {
        let v = vocab();
        let words: Vec<String> = ["a", "red", "cube"].iter().map(|s| s.to_string()).collect();
        let p = assemble_prompt(&word_slots(&words), None, &v).unwrap();
        assert_eq!(p.len(), 3);
        for (i, w) in words.iter().enumerate() {
            assert_eq!(p.vectors.row(i).to_vec(), v.embedding(w).unwrap().to_vec());
        }
    }

    #[test]
    fn multiple_pseudo_slots_rejected() {
        let v = vocab();
        let tok = init_pseudo_token("object", 2, &v).unwrap();
        let bad = vec![PromptSlot::Pseudo, PromptSlot::Pseudo];
        assert!(assemble_prompt(&bad, Some(&tok), &v).is_err());
    }

    #[test]
    fn text_delta_identities() {
        let v = vocab();
        let red = vec!["red".to_string()];
        let blue = vec!["blue".to_string()];
        let d0 = text_delta(&red, &red, &v).unwrap();
        assert!(d0.iter().all(|x| *x == 0.0));
        let d = text_delta(&blue, &red, &v).unwrap();
        let expect = v.embedding("blue").unwrap() - v.embedding("red").unwrap();
        assert_eq!(d.to_vec(), expect.to_vec());
        let swapped = text_delta(&red, &blue, &v).unwrap();
        assert!(d.iter().zip(swapped.iter()).all(|(a, b)| *a == -*b));
        assert!(text_delta(&[], &red, &v).is_err());
    }

    #[test]
    fn text_delta_is_additive_over_chains() {
        let v = vocab();
        let a = vec!["red".to_string(), "cube".to_string()];
        let b = vec!["blue".to_string()];
        let c = vec!["dark".to_string(), "sphere".to_string()];
        let ab = text_delta(&a, &b, &v).unwrap();
        let bc = text_delta(&b, &c, &v).unwrap();
        let ac = text_delta(&a, &c, &v).unwrap();
        let err = (&ab + &bc - &ac).iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn edit_embedding_identities() {
        let v = vocab();
        let tok = init_pseudo_token("object", 3, &v).unwrap();
        let delta = v.embedding("blue").unwrap();
        let zero_lambda = edit_embedding(&tok, &delta, 0.0).unwrap();
        assert_eq!(zero_lambda.vectors, tok.vectors);
        let zero_delta = edit_embedding(&tok, &Array1::zeros(v.dim()), 2.7).unwrap();
        assert_eq!(zero_delta.vectors, tok.vectors);
    }

    #[test]
    fn edit_embedding_direct_evaluation() {
        let tok = PseudoToken {
            name: "S*".into(),
            vectors: Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap(),
            trainable: true,
        };
        let delta = Array1::from_vec(vec![0.0, 2.0]);
        let out = edit_embedding(&tok, &delta, 0.5).unwrap();
        assert_eq!(out.vectors.row(0).to_vec(), vec![1.0, 1.0]);
        // Dimension mismatch is rejected.
        assert!(edit_embedding(&tok, &Array1::zeros(3), 1.0).is_err());
    }

    #[test]
    fn edit_embedding_composes_linearly_in_lambda() {
        let v = vocab();
        let tok = init_pseudo_token("object", 5, &v).unwrap();
        let delta = v.embedding("neon").unwrap();
        let once = edit_embedding(&tok, &delta, 0.7 + 0.4).unwrap();
        let twice = edit_embedding(&edit_embedding(&tok, &delta, 0.7).unwrap(), &delta, 0.4).unwrap();
        let err = (&once.vectors - &twice.vectors)
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn embedding_file_round_trips() {
        let v = vocab();
        let mut tok = init_pseudo_token("object", 8, &v).unwrap();
        // Perturb so the payload is not all-identical rows.
        tok.vectors[(3, 5)] = 0.123456;
        let meta = EmbeddingMetadata {
            init_word: "object".into(),
            training_seed: 42,
            run_id: "test-run".into(),
        };
        let bytes = write_embedding(&tok, &meta);
        assert_eq!(&bytes[0..4], b"IV3D");
        let (back, meta2) = read_embedding(&bytes).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back.num_vectors(), 8);
        // Values round-trip at f32 precision.
        for (a, b) in tok.vectors.iter().zip(back.vectors.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        // Same write twice is byte-identical.
        assert_eq!(bytes, write_embedding(&tok, &meta));
    }

    #[test]
    fn embedding_file_rejects_garbage() {
        assert!(read_embedding(b"XXXX").is_err());
        assert!(read_embedding(b"IV3D\x01\x00").is_err());
    }
}
