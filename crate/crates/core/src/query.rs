//! Query side: vocabulary, tokenization and the stacked recurrent encoder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Result, TanError};
use crate::numeric::{Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Number of stacked recurrent layers.
pub const ENCODER_LAYERS: usize = 3;

const INIT_RANGE: f64 = 0.08;

/// Lowercase and split on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary over the given words, reserved entries first, the rest sorted.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut rest: Vec<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .filter(|w| w != PAD_TOKEN && w != UNK_TOKEN)
            .collect();
        rest.sort();
        rest.dedup();
        let tokens: Vec<String> = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(rest)
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Vocabulary over every word appearing in the given texts.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::new(texts.into_iter().flat_map(split_words))
    }

    /// Rebuild from a stored token list; the list must start with the reserved tokens.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(TanError::Data("vocabulary must start with <pad>, <unk>".into()));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(TanError::Data("vocabulary has duplicate tokens".into()));
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, idx: usize) -> Option<&str> {
        self.tokens.get(idx).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    split_words(text).iter().map(|w| vocab.lookup(w)).collect()
}

/// One recurrent layer; gates packed as `[input, forget, cell, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    /// `[d_in × 4h]`
    pub w_input: Tensor,
    /// `[h × 4h]`
    pub w_hidden: Tensor,
    /// `[4h]`
    pub bias: Tensor,
}

impl LstmLayer {
    pub fn init<R: Rng + ?Sized>(d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let mut bias = Tensor::zeros(vec![4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmLayer {
            w_input: Tensor::uniform(vec![d_in, 4 * hidden], -INIT_RANGE, INIT_RANGE, rng),
            w_hidden: Tensor::uniform(vec![hidden, 4 * hidden], -INIT_RANGE, INIT_RANGE, rng),
            bias,
        }
    }

    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        LstmLayer {
            w_input: Tensor::zeros(vec![d_in, 4 * hidden]),
            w_hidden: Tensor::zeros(vec![hidden, 4 * hidden]),
            bias: Tensor::zeros(vec![4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmLayerVars {
        LstmLayerVars {
            w_input: tape.leaf(&self.w_input),
            w_hidden: tape.leaf(&self.w_hidden),
            bias: tape.leaf(&self.bias),
            hidden: self.hidden(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmLayerVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub hidden: usize,
}

/// Embedding table plus the stacked recurrent encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEncoder {
    /// `[|vocab| × d_s]`
    pub embedding: Tensor,
    pub layers: Vec<LstmLayer>,
}

impl QueryEncoder {
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let embedding = Tensor::uniform(vec![vocab_size, dim], -INIT_RANGE, INIT_RANGE, rng);
        let layers = (0..ENCODER_LAYERS).map(|_| LstmLayer::init(dim, dim, rng)).collect();
        QueryEncoder { embedding, layers }
    }

    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        QueryEncoder {
            embedding: Tensor::zeros(vec![vocab_size, dim]),
            layers: (0..ENCODER_LAYERS).map(|_| LstmLayer::zeros(dim, dim)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> QueryEncoderVars {
        QueryEncoderVars {
            embedding: tape.leaf(&self.embedding),
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
        }
    }

    /// Sentence feature for a token sequence, outside any training graph.
    pub fn encode(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = encode_query(&mut tape, tokens, &vars)?;
        Ok(tape.value(out).to_vec())
    }

    /// Overwrite rows of tokens listed in a `token v1 .. vd` text file.
    ///
    /// Returns the number of rows replaced. Tokens absent from the vocabulary
    /// are skipped.
    pub fn load_pretrained_embeddings(&mut self, path: &Path, vocab: &Vocabulary) -> Result<usize> {
        let text = fs::read_to_string(path).map_err(|e| TanError::io(path, e))?;
        let dim = self.dim();
        let mut replaced = 0;
        for (lineno, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| TanError::format(path, format!("line {}: {e}", lineno + 1)))?;
            if values.len() != dim {
                return Err(TanError::format(
                    path,
                    format!("line {}: {} values, expected {dim}", lineno + 1, values.len()),
                ));
            }
            let idx = vocab.lookup(&token.to_lowercase());
            if idx == UNK && token != UNK_TOKEN {
                continue;
            }
            self.embedding.data_mut()[idx * dim..(idx + 1) * dim].copy_from_slice(&values);
            replaced += 1;
        }
        Ok(replaced)
    }
}

#[derive(Clone, Debug)]
pub struct QueryEncoderVars {
    pub embedding: Var,
    pub layers: Vec<LstmLayerVars>,
}

/// Feeds token embeddings through the stacked recurrent layers and returns
/// the top layer's final hidden state as a `[1 × d_s]` row.
pub fn encode_query(tape: &mut Tape, tokens: &[usize], params: &QueryEncoderVars) -> Result<Var> {
    if tokens.is_empty() {
        return Err(TanError::Query("query has no tokens".into()));
    }
    let vocab_size = tape.shape(params.embedding)[0];
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(TanError::Query(format!("token index {bad} outside vocabulary of {vocab_size}")));
    }
    let embedded = tape.gather_rows(params.embedding, tokens.to_vec())?;
    let mut inputs: Vec<Var> = (0..tokens.len())
        .map(|t| tape.gather_rows(embedded, vec![t]))
        .collect::<Result<_>>()?;
    for layer in &params.layers {
        let h_dim = layer.hidden;
        let mut h = tape.leaf_raw(vec![1, h_dim], vec![0.0; h_dim])?;
        let mut c = tape.leaf_raw(vec![1, h_dim], vec![0.0; h_dim])?;
        let mut outputs = Vec::with_capacity(inputs.len());
        for &x in &inputs {
            let xi = tape.matmul(x, layer.w_input)?;
            let hh = tape.matmul(h, layer.w_hidden)?;
            let pre = tape.add(xi, hh)?;
            let gates = tape.add_row_bias(pre, layer.bias)?;
            let i_pre = tape.slice_cols(gates, 0, h_dim)?;
            let f_pre = tape.slice_cols(gates, h_dim, h_dim)?;
            let g_pre = tape.slice_cols(gates, 2 * h_dim, h_dim)?;
            let o_pre = tape.slice_cols(gates, 3 * h_dim, h_dim)?;
            let i = tape.sigmoid(i_pre);
            let f = tape.sigmoid(f_pre);
            let g = tape.tanh(g_pre);
            let o = tape.sigmoid(o_pre);
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
            outputs.push(h);
        }
        inputs = outputs;
    }
    Ok(*inputs.last().expect("non-empty sequence"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn vocab() -> Vocabulary {
        Vocabulary::from_texts(["a guy is playing the saxophone", "again"])
    }

    #[test]
    fn reserved_indices() {
        let v = vocab();
        assert_eq!(v.token(PAD), Some(PAD_TOKEN));
        assert_eq!(v.token(UNK), Some(UNK_TOKEN));
        assert_eq!(v.lookup("zzz"), UNK);
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        let t = tokenize("A guy is playing", &v);
        assert_eq!(t.len(), 4);
        assert!(t.iter().all(|&i| i > UNK));
        assert!(tokenize("", &v).is_empty());
        assert_eq!(tokenize("zzzunseen guy", &v), vec![UNK, v.lookup("guy")]);
        assert_eq!(tokenize("guy,playing!", &v), vec![v.lookup("guy"), v.lookup("playing")]);
    }

    #[test]
    fn zero_parameters_give_zero_feature() {
        let enc = QueryEncoder::zeros(10, 4);
        assert_eq!(enc.encode(&[3, 4, 5]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn empty_query_is_rejected() {
        let enc = QueryEncoder::zeros(10, 4);
        assert!(matches!(enc.encode(&[]), Err(TanError::Query(_))));
    }

    #[test]
    fn encoding_is_deterministic_and_fixed_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = QueryEncoder::init(12, 5, &mut rng);
        assert_eq!(enc.encode(&[7]).unwrap(), enc.encode(&[7]).unwrap());
        for len in 1..6 {
            let toks: Vec<usize> = (0..len).map(|i| 2 + i).collect();
            assert_eq!(enc.encode(&toks).unwrap().len(), 5);
        }
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = LstmLayer::init(3, 4, &mut rng);
        let b = layer.bias.data();
        assert!(b[4..8].iter().all(|&v| v == 1.0));
        assert!(b[..4].iter().chain(&b[8..]).all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_vocabulary_and_rows_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = QueryEncoder::init(6, 3, &mut rng);
        let perm = [0, 1, 5, 2, 4, 3];
        let mut permuted = enc.clone();
        for (old, &new) in perm.iter().enumerate() {
            let row = enc.embedding.row(old).to_vec();
            permuted.embedding.data_mut()[new * 3..(new + 1) * 3].copy_from_slice(&row);
        }
        let tokens = [2, 3, 5, 4];
        let mapped: Vec<usize> = tokens.iter().map(|&t| perm[t]).collect();
        assert_eq!(enc.encode(&tokens).unwrap(), permuted.encode(&mapped).unwrap());
    }

    #[test]
    fn recurrent_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 3;
        let enc = QueryEncoder::init(7, dim, &mut rng);
        // Larger weights so gates leave their linear regime.
        let scale = |t: &Tensor| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v *= 8.0);
            t
        };
        for len in 1..=5 {
            let tokens: Vec<usize> = (0..len).map(|i| 2 + (i * 3) % 5).collect();
            let mut inputs = vec![scale(&enc.embedding)];
            for l in &enc.layers {
                inputs.push(scale(&l.w_input));
                inputs.push(scale(&l.w_hidden));
                inputs.push(l.bias.clone());
            }
            let err = grad_check_many(
                |tape, v| {
                    let vars = QueryEncoderVars {
                        embedding: v[0],
                        layers: (0..ENCODER_LAYERS)
                            .map(|l| LstmLayerVars {
                                w_input: v[1 + 3 * l],
                                w_hidden: v[2 + 3 * l],
                                bias: v[3 + 3 * l],
                                hidden: dim,
                            })
                            .collect(),
                    };
                    let f = encode_query(tape, &tokens, &vars)?;
                    let sq = tape.mul(f, f)?;
                    Ok(tape.sum(sq))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "len {len}: {err}");
        }
    }

    fn write_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn pretrained_embeddings_replace_listed_rows() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut enc = QueryEncoder::init(v.len(), 2, &mut rng);
        let before = enc.embedding.clone();

        let empty = write_file("");
        assert_eq!(enc.load_pretrained_embeddings(empty.path(), &v).unwrap(), 0);
        assert_eq!(enc.embedding, before);

        let one = write_file("guy 0.5 -0.25\nnotinvocab 1 1\n");
        assert_eq!(enc.load_pretrained_embeddings(one.path(), &v).unwrap(), 1);
        let changed: Vec<usize> = (0..v.len())
            .filter(|&r| enc.embedding.row(r) != before.row(r))
            .collect();
        assert_eq!(changed, vec![v.lookup("guy")]);
        assert_eq!(enc.embedding.row(v.lookup("guy")), &[0.5, -0.25]);

        let all: String = v.tokens()[2..].iter().map(|t| format!("{t} 9 9\n")).collect();
        let full = write_file(&all);
        enc.load_pretrained_embeddings(full.path(), &v).unwrap();
        for r in 2..v.len() {
            assert_eq!(enc.embedding.row(r), &[9.0, 9.0]);
        }
    }

    #[test]
    fn pretrained_embeddings_errors() {
        let v = vocab();
        let mut enc = QueryEncoder::zeros(v.len(), 2);
        let bad = write_file("guy 1 2 3\n");
        assert!(matches!(
            enc.load_pretrained_embeddings(bad.path(), &v),
            Err(TanError::Format { .. })
        ));
        assert!(matches!(
            enc.load_pretrained_embeddings(Path::new("/nonexistent/emb.txt"), &v),
            Err(TanError::Io { .. })
        ));
    }
}
