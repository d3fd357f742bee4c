//! Truncated-window tabular softmax policies.
//!
//! A [`TabularPolicy`] keeps one logit vector per window state: the last `W`
//! tokens of the context, left-padded with the policy's pad token. States are
//! created lazily at zero logits, so an unseen state predicts the uniform
//! distribution.

mod checkpoint;
mod optim;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::dist::{self, Categorical, DistError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use optim::{apply_update, OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("vocabulary needs at least 2 symbols, got {0}")]
    VocabTooSmall(usize),
    #[error("duplicate vocabulary symbol {0:?}")]
    DuplicateSymbol(String),
    #[error("invalid vocabulary symbol {0:?} (must be non-empty, without whitespace, ',' or '|')")]
    InvalidSymbol(String),
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("token index {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: usize, size: usize },
    #[error("window must be at least 1")]
    InvalidWindow,
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("logit vector for state [{state}] has length {got}, expected {expected}")]
    LogitLength {
        state: StateKey,
        got: usize,
        expected: usize,
    },
    #[error("non-finite logit for state [{state}]")]
    NonFiniteLogits { state: StateKey },
    #[error("non-finite gradient entry {index} for state [{state}]: {value}")]
    NonFiniteGradient {
        state: StateKey,
        index: usize,
        value: f64,
    },
    #[error("state key [{state}] has length {got}, expected window {expected}")]
    KeyLength {
        state: StateKey,
        got: usize,
        expected: usize,
    },
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("unsupported checkpoint version line {0:?}")]
    UnsupportedVersion(String),
    #[error("malformed checkpoint at line {line}: {reason}")]
    MalformedCheckpoint { line: usize, reason: String },
    #[error("duplicate state key [{state}] at checkpoint line {line}")]
    DuplicateState { state: StateKey, line: usize },
    #[error(transparent)]
    Dist(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// Ordered list of distinct symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = symbols.into_iter().map(Into::into).collect();
        if tokens.len() < 2 {
            return Err(PolicyError::VocabTooSmall(tokens.len()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(|c| c.is_whitespace() || c == ',' || c == '|') {
                return Err(PolicyError::InvalidSymbol(t.clone()));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(PolicyError::DuplicateSymbol(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn symbol(&self, token: usize) -> Option<&str> {
        self.tokens.get(token).map(String::as_str)
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbols(&self) -> &[String] {
        &self.tokens
    }

    pub fn check(&self, token: usize) -> Result<()> {
        if token >= self.len() {
            return Err(PolicyError::TokenOutOfRange {
                token,
                size: self.len(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, symbols: &[&str]) -> Result<Vec<usize>> {
        symbols
            .iter()
            .map(|s| {
                self.index_of(s)
                    .ok_or_else(|| PolicyError::UnknownSymbol((*s).to_string()))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> Vec<&str> {
        tokens
            .iter()
            .map(|&t| self.symbol(t).unwrap_or("?"))
            .collect()
    }
}

/// A context: the prompt plus the tokens generated so far.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Prefix {
    pub prompt: Vec<usize>,
    pub generated: Vec<usize>,
}

impl Prefix {
    pub fn new(prompt: Vec<usize>, generated: Vec<usize>) -> Self {
        Self { prompt, generated }
    }

    pub fn prompt_only(prompt: Vec<usize>) -> Self {
        Self {
            prompt,
            generated: Vec::new(),
        }
    }

    pub fn tokens(&self) -> impl DoubleEndedIterator<Item = usize> + '_ {
        self.prompt.iter().chain(&self.generated).copied()
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extended(&self, token: usize) -> Self {
        let mut next = self.clone();
        next.generated.push(token);
        next
    }
}

/// The last `W` tokens of a context, left-padded.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateKey(pub Vec<usize>);

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// A sampled or greedy rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Vec<usize>,
    pub actions: Vec<usize>,
    pub logprobs: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// The context before step `t` (0-based): prompt plus `actions[..t]`.
    pub fn prefix_at(&self, t: usize) -> Prefix {
        Prefix::new(self.prompt.clone(), self.actions[..t].to_vec())
    }
}

/// Sparse per-state gradients with respect to logits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradTable {
    entries: BTreeMap<StateKey, Vec<f64>>,
}

impl GradTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `scale * grad` into the entry for `key`.
    pub fn add_scaled(&mut self, key: &StateKey, grad: &[f64], scale: f64) {
        let entry = self
            .entries
            .entry(key.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for (e, g) in entry.iter_mut().zip(grad) {
            *e += scale * g;
        }
    }

    pub fn merge_scaled(&mut self, other: &GradTable, scale: f64) {
        for (key, grad) in &other.entries {
            self.add_scaled(key, grad, scale);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for grad in self.entries.values_mut() {
            for g in grad.iter_mut() {
                *g *= c;
            }
        }
    }

    pub fn get(&self, key: &StateKey) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateKey, &[f64])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: StateKey, grad: Vec<f64>) {
        self.entries.insert(key, grad);
    }

    /// Inner product over the union of keys.
    pub fn dot(&self, other: &GradTable) -> f64 {
        self.entries
            .iter()
            .filter_map(|(k, a)| other.entries.get(k).map(|b| (a, b)))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flatten()
            .fold(0.0, |acc, g| acc.max(g.abs()))
    }
}

/// Autoregressive next-token policy keyed by a truncated context window.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    vocab: Vocab,
    window: usize,
    pad: usize,
    logits: BTreeMap<StateKey, Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(vocab: Vocab, window: usize, pad: usize) -> Result<Self> {
        if window == 0 {
            return Err(PolicyError::InvalidWindow);
        }
        vocab.check(pad)?;
        Ok(Self {
            vocab,
            window,
            pad,
            logits: BTreeMap::new(),
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    /// Stored states in key order.
    pub fn states(&self) -> impl Iterator<Item = (&StateKey, &[f64])> {
        self.logits.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn num_states(&self) -> usize {
        self.logits.len()
    }

    /// Window state of a context given as a token sequence.
    pub fn key_for_tokens<I>(&self, tokens: I) -> Result<StateKey>
    where
        I: IntoIterator<Item = usize>,
        I::IntoIter: DoubleEndedIterator,
    {
        let mut key = vec![self.pad; self.window];
        for (slot, token) in key.iter_mut().rev().zip(tokens.into_iter().rev()) {
            self.vocab.check(token)?;
            *slot = token;
        }
        Ok(StateKey(key))
    }

    pub fn state_key(&self, prefix: &Prefix) -> Result<StateKey> {
        for t in prefix.tokens() {
            self.vocab.check(t)?;
        }
        self.key_for_tokens(prefix.tokens())
    }

    /// Stored logits for a state, or `None` if it was never touched.
    pub fn logits(&self, key: &StateKey) -> Option<&[f64]> {
        self.logits.get(key).map(Vec::as_slice)
    }

    /// Logits for a state, zeros when unseen.
    pub fn logits_or_zero(&self, key: &StateKey) -> Vec<f64> {
        self.logits
            .get(key)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab.len()])
    }

    pub(crate) fn logits_mut(&mut self, key: &StateKey) -> &mut Vec<f64> {
        let v = self.vocab.len();
        self.logits
            .entry(key.clone())
            .or_insert_with(|| vec![0.0; v])
    }

    fn check_key(&self, key: &StateKey) -> Result<()> {
        if key.0.len() != self.window {
            return Err(PolicyError::KeyLength {
                state: key.clone(),
                got: key.0.len(),
                expected: self.window,
            });
        }
        for &t in &key.0 {
            self.vocab.check(t)?;
        }
        Ok(())
    }

    pub fn set_logits(&mut self, key: StateKey, logits: Vec<f64>) -> Result<()> {
        self.check_key(&key)?;
        if logits.len() != self.vocab.len() {
            return Err(PolicyError::LogitLength {
                state: key,
                got: logits.len(),
                expected: self.vocab.len(),
            });
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(PolicyError::NonFiniteLogits { state: key });
        }
        self.logits.insert(key, logits);
        Ok(())
    }

    /// Next-token distribution at a window state.
    pub fn dist_at(&self, key: &StateKey) -> Categorical {
        match self.logits.get(key) {
            Some(z) => Categorical::from_logits(z).expect("stored logits are finite"),
            None => Categorical::uniform(self.vocab.len()).expect("vocab is non-empty"),
        }
    }

    pub fn next_dist(&self, prefix: &Prefix) -> Result<Categorical> {
        Ok(self.dist_at(&self.state_key(prefix)?))
    }

    /// Samples `horizon` tokens autoregressively.
    pub fn sample_rollout<R: Rng + ?Sized>(
        &self,
        prompt: &[usize],
        horizon: usize,
        rng: &mut R,
    ) -> Result<Trajectory> {
        self.rollout(prompt, horizon, |dist| {
            dist.inverse_cdf(rng.random::<f64>())
        })
    }

    /// Argmax decoding, ties broken by the lowest token index.
    pub fn greedy_rollout(&self, prompt: &[usize], horizon: usize) -> Result<Trajectory> {
        self.rollout(prompt, horizon, Categorical::argmax)
    }

    fn rollout(
        &self,
        prompt: &[usize],
        horizon: usize,
        mut choose: impl FnMut(&Categorical) -> usize,
    ) -> Result<Trajectory> {
        if horizon == 0 {
            return Err(PolicyError::ZeroHorizon);
        }
        for &t in prompt {
            self.vocab.check(t)?;
        }
        let mut context: Vec<usize> = prompt.to_vec();
        let mut actions = Vec::with_capacity(horizon);
        let mut logprobs = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let key = self.key_for_tokens(context.iter().copied())?;
            let token = match self.logits.get(&key) {
                Some(z) => {
                    let dist = Categorical::from_logits(z)?;
                    let token = choose(&dist);
                    logprobs.push(dist::log_softmax(z)[token]);
                    token
                }
                None => {
                    let dist = Categorical::uniform(self.vocab.len())?;
                    let token = choose(&dist);
                    logprobs.push(-(self.vocab.len() as f64).ln());
                    token
                }
            };
            actions.push(token);
            context.push(token);
        }
        Ok(Trajectory {
            prompt: prompt.to_vec(),
            actions,
            logprobs,
        })
    }
}
