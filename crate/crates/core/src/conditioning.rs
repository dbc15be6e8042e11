//! Text conditions: the toy hashing encoder, the learned null condition,
//! condition dropout, and per-block routing for dual encoders.
//!
//! Prompts are split on Unicode whitespace. Each token maps to an embedding
//! row by FNV-1a (64-bit) of its UTF-8 bytes modulo the table size, so the
//! mapping is stable across platforms and releases.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::params::{Init, LayoutBuilder, ParamId, ParamStore};
use crate::numerics::{Graph, Rng, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Single,
    DualInterleaved,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyEncoderConfig {
    /// Rows of the hashed embedding table.
    pub vocab_hash_dim: usize,
    pub d_text: usize,
    /// Longest prompt in tokens; extra tokens are dropped.
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub mode: EncoderMode,
    pub encoders: Vec<ToyEncoderConfig>,
}

impl EncoderSpec {
    pub fn single(vocab_hash_dim: usize, d_text: usize, max_len: usize) -> Self {
        Self {
            mode: EncoderMode::Single,
            encoders: vec![ToyEncoderConfig { vocab_hash_dim, d_text, max_len }],
        }
    }

    pub fn dual(a: ToyEncoderConfig, b: ToyEncoderConfig) -> Self {
        Self { mode: EncoderMode::DualInterleaved, encoders: vec![a, b] }
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.mode {
            EncoderMode::Single => 1,
            EncoderMode::DualInterleaved => 2,
        };
        if self.encoders.len() != want {
            return Err(Error::Config(format!(
                "{:?} mode needs {want} encoder(s), got {}",
                self.mode,
                self.encoders.len()
            )));
        }
        for e in &self.encoders {
            if e.vocab_hash_dim == 0 || e.d_text == 0 || e.max_len == 0 {
                return Err(Error::Config("encoder dimensions must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Which encoder feeds cross-attention in block `block_index`: even blocks
/// use the first encoder, odd blocks the second.
pub fn encoder_for_block(spec: &EncoderSpec, block_index: usize) -> usize {
    match spec.mode {
        EncoderMode::Single => 0,
        EncoderMode::DualInterleaved => block_index % 2,
    }
}

/// How a condition's embeddings are produced, so the model can rebuild them
/// on the tape and train the encoder jointly.
#[derive(Clone, Debug, PartialEq)]
pub enum ConditionOrigin {
    /// Hashed table rows, one per token, in prompt order.
    Toy { rows: Vec<usize> },
    /// The learned null embedding.
    Null,
    /// Fixed embeddings from an outside encoder; not trained.
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextCondition {
    /// `[L, d_text]`, `L ≥ 1`.
    pub tokens: Tensor,
    /// `[d_text]`.
    pub pooled: Tensor,
    pub is_null: bool,
    /// Index of the producing encoder.
    pub source: usize,
    pub origin: ConditionOrigin,
}

impl TextCondition {
    /// Wraps embeddings from an encoder outside this crate.
    pub fn external(source: usize, tokens: Tensor, pooled: Tensor) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::EmptyContext);
        }
        if pooled.numel() != tokens.cols() {
            return Err(shape_err("pooled width differs from token width"));
        }
        let pooled = pooled.reshape(&[tokens.cols()])?;
        Ok(Self { tokens, pooled, is_null: false, source, origin: ConditionOrigin::External })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One condition per encoder, in encoder order.
pub type ConditionSet = Vec<TextCondition>;

pub fn tokenize(prompt: &str) -> Vec<&str> {
    prompt.split_whitespace().collect()
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

pub fn token_row(token: &str, vocab_hash_dim: usize) -> usize {
    (fnv1a(token.as_bytes()) % vocab_hash_dim as u64) as usize
}

/// Parameters of one toy encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    pub index: usize,
    pub config: ToyEncoderConfig,
    pub embed: ParamId,
    pub positions: ParamId,
    pub null_tokens: ParamId,
    pub null_pooled: ParamId,
}

impl ToyEncoder {
    pub fn build(b: &mut LayoutBuilder, index: usize, config: &ToyEncoderConfig) -> Self {
        let d = config.d_text;
        let p = format!("text.{index}");
        Self {
            index,
            config: config.clone(),
            embed: b.alloc(format!("{p}.embed"), &[config.vocab_hash_dim, d], Init::Normal(1.0)),
            positions: b.alloc(format!("{p}.positions"), &[config.max_len, d], Init::Normal(0.1)),
            null_tokens: b.alloc(format!("{p}.null_tokens"), &[1, d], Init::Normal(1.0)),
            null_pooled: b.alloc(format!("{p}.null_pooled"), &[1, d], Init::Normal(1.0)),
        }
    }

    fn rows(&self, prompt: &str) -> Vec<usize> {
        tokenize(prompt)
            .into_iter()
            .take(self.config.max_len)
            .map(|t| token_row(t, self.config.vocab_hash_dim))
            .collect()
    }

    /// Token and pooled embeddings on the tape: `[L, d]` and `[1, d]`.
    pub fn embed_on<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        cond: &TextCondition,
    ) -> Result<(Var, Var)> {
        let d = self.config.d_text;
        if cond.tokens.cols() != d {
            return Err(shape_err(format!(
                "condition width {} does not match encoder width {d}",
                cond.tokens.cols()
            )));
        }
        match &cond.origin {
            ConditionOrigin::Null => {
                Ok((g.param(store, self.null_tokens), g.param(store, self.null_pooled)))
            }
            ConditionOrigin::External => {
                let tokens = g.constant(cond.tokens.cast());
                let pooled = g.constant(cond.pooled.cast::<F>().reshape(&[1, d])?);
                Ok((tokens, pooled))
            }
            ConditionOrigin::Toy { rows } => {
                let l = rows.len();
                if l == 0 || l > self.config.max_len {
                    return Err(Error::EmptyContext);
                }
                let table = g.param(store, self.embed);
                let idx = rows.iter().flat_map(|&r| r * d..(r + 1) * d).collect();
                let words = g.gather(table, idx, &[l, d])?;
                let pos = g.param(store, self.positions);
                let pos = g.gather(pos, (0..l * d).collect(), &[l, d])?;
                let tokens = g.add(words, pos)?;
                let avg = g.constant(Tensor::full(&[1, l], F::of(1.0 / l as f64)));
                let pooled = g.matmul(avg, tokens)?;
                Ok((tokens, pooled))
            }
        }
    }

    fn evaluate<F: Scalar>(&self, store: &ParamStore<F>, is_null: bool, origin: ConditionOrigin) -> TextCondition {
        let d = self.config.d_text;
        let l = match &origin {
            ConditionOrigin::Toy { rows } => rows.len(),
            _ => 1,
        };
        let placeholder = TextCondition {
            tokens: Tensor::zeros(&[l, d]),
            pooled: Tensor::zeros(&[d]),
            is_null,
            source: self.index,
            origin,
        };
        let mut g = Graph::new();
        let (tokens, pooled) = self.embed_on(&mut g, store, &placeholder).expect("toy encoding");
        TextCondition {
            tokens: g.value(tokens).cast(),
            pooled: g.value(pooled).cast::<f32>().reshape(&[d]).unwrap(),
            ..placeholder
        }
    }

    /// Encodes a prompt; prompts without tokens yield the null condition.
    pub fn encode<F: Scalar>(&self, store: &ParamStore<F>, prompt: &str) -> TextCondition {
        let rows = self.rows(prompt);
        if rows.is_empty() {
            return self.null_condition(store);
        }
        self.evaluate(store, false, ConditionOrigin::Toy { rows })
    }

    pub fn null_condition<F: Scalar>(&self, store: &ParamStore<F>) -> TextCondition {
        self.evaluate(store, true, ConditionOrigin::Null)
    }
}

/// Returns `null` with probability `p_text`, otherwise `cond`. Exactly one
/// uniform draw is consumed either way.
pub fn drop_condition<T: Clone>(cond: &T, null: &T, p_text: f64, rng: &mut Rng) -> T {
    if rng.bernoulli(p_text) {
        null.clone()
    } else {
        cond.clone()
    }
}

/// The condition whose tokens feed cross-attention in `block_index`.
pub fn select_context<'a>(
    spec: &EncoderSpec,
    conditions: &'a [TextCondition],
    block_index: usize,
) -> Result<&'a TextCondition> {
    let e = encoder_for_block(spec, block_index);
    if conditions.len() != spec.encoders.len() {
        return Err(Error::MissingCondition(format!(
            "{} encoder(s) configured, {} condition(s) given",
            spec.encoders.len(),
            conditions.len()
        )));
    }
    Ok(&conditions[e])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder(store: &mut Option<ParamStore>) -> ToyEncoder {
        let mut b = LayoutBuilder::new();
        let enc = ToyEncoder::build(&mut b, 0, &ToyEncoderConfig { vocab_hash_dim: 64, d_text: 8, max_len: 6 });
        *store = Some(ParamStore::initialize(b.specs(), &mut Rng::new(11)));
        enc
    }

    #[test]
    fn fnv1a_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut s = None;
        let enc = encoder(&mut s);
        let s = s.unwrap();
        assert_eq!(enc.encode(&s, "square top left"), enc.encode(&s, "square top left"));
    }

    #[test]
    fn word_order_changes_tokens_not_pooled() {
        let mut s = None;
        let enc = encoder(&mut s);
        let s = s.unwrap();
        let ab = enc.encode(&s, "alpha beta");
        let ba = enc.encode(&s, "beta alpha");
        assert_ne!(ab.tokens, ba.tokens);
        assert!(ab.pooled.max_abs_diff(&ba.pooled) < 1e-6);
    }

    #[test]
    fn empty_prompt_is_null() {
        let mut s = None;
        let enc = encoder(&mut s);
        let s = s.unwrap();
        let empty = enc.encode(&s, "   ");
        let null = enc.null_condition(&s);
        assert_eq!(empty, null);
        assert!(null.is_null);
        assert_eq!(null.len(), 1);
        assert_eq!(null, enc.null_condition(&s));
        assert_eq!(null.tokens.data(), s.get(enc.null_tokens).data());
        assert!(null.tokens.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn long_prompts_truncate() {
        let mut s = None;
        let enc = encoder(&mut s);
        let s = s.unwrap();
        assert_eq!(enc.encode(&s, "a b c d e f g h").len(), 6);
    }

    #[test]
    fn drop_probability_extremes_and_rate() {
        let mut rng = Rng::new(1);
        assert!((0..500).all(|_| drop_condition(&1, &0, 0.0, &mut rng) == 1));
        assert!((0..500).all(|_| drop_condition(&1, &0, 1.0, &mut rng) == 0));
        let nulls = (0..10_000).filter(|_| drop_condition(&1, &0, 0.1, &mut rng) == 0).count();
        let frac = nulls as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&frac), "null fraction {frac}");
    }

    #[test]
    fn context_routing() {
        let mut s = None;
        let enc = encoder(&mut s);
        let s = s.unwrap();
        let a = enc.encode(&s, "one");
        let b = enc.encode(&s, "two");

        let single = EncoderSpec::single(64, 8, 6);
        for i in 0..5 {
            assert_eq!(select_context(&single, std::slice::from_ref(&a), i).unwrap(), &a);
        }

        let cfg = single.encoders[0].clone();
        let dual = EncoderSpec::dual(cfg.clone(), cfg);
        let pair = [a.clone(), b.clone()];
        let picked: Vec<_> = (0..4).map(|i| select_context(&dual, &pair, i).unwrap()).collect();
        assert_eq!(picked, vec![&a, &b, &a, &b]);

        let same = [a.clone(), a.clone()];
        for i in 0..4 {
            assert_eq!(select_context(&dual, &same, i).unwrap(), select_context(&single, &same[..1], i).unwrap());
        }

        assert!(matches!(select_context(&dual, &pair[..1], 0), Err(Error::MissingCondition(_))));
    }
}
