//! Synthetic multi-step reasoning tasks with checkable steps.
//!
//! Two families share one token grammar:
//!
//! * **chain**: prompt `v0 op1 .. opL =`, where each op is `+k` or `-k`
//!   modulo `m`. The only gold trajectory emits every intermediate value and
//!   then repeats the last one as the answer.
//! * **multipath**: prompt `a1 .. an =`. A trajectory consumes operand slots
//!   in any order, emitting `#i` followed by the running sum, then the answer.
//!   Every one of the `n!` orders is gold.
//!
//! Token 0 is always `<pad>`, followed by `=`, the values `0..m`, and the
//! family's op or slot symbols.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::warn;
use rand::Rng;
use thiserror::Error;

use crate::dist::Categorical;
use crate::policy::{
    apply_update, GradTable, OptimizerState, PolicyError, Prefix, TabularPolicy, Vocab,
};
use crate::rng::{self, domain};

pub const PAD_SYMBOL: &str = "<pad>";
pub const EQ_SYMBOL: &str = "=";
/// Largest operand count whose orders are enumerated.
pub const MAX_OPERANDS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("modulus must be at least 2, got {0}")]
    InvalidModulus(usize),
    #[error("chain length must be at least 1")]
    InvalidChainLength,
    #[error("operand count must be between 2 and {MAX_OPERANDS}, got {0}")]
    InvalidOperandCount(usize),
    #[error("vocabulary is missing symbol {0:?} required by the task")]
    VocabTooSmall(String),
    #[error("operation requires a {expected} task, got {got}")]
    WrongKind { expected: TaskKind, got: TaskKind },
    #[error("prefix prompt does not belong to this instance")]
    ForeignPrompt,
    #[error("malformed prompt: {0}")]
    MalformedPrompt(String),
    #[error("malformed dataset line {line}: {reason}")]
    MalformedDataset { line: usize, reason: String },
    #[error("supervised fit diverged in epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type Result<T> = std::result::Result<T, TaskError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Chain,
    Multipath,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Chain => "chain",
            TaskKind::Multipath => "multipath",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "chain" => Ok(TaskKind::Chain),
            "multipath" => Ok(TaskKind::Multipath),
            other => Err(format!("unknown task kind {other:?} (chain|multipath)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    kind: TaskKind,
    vocab: Vocab,
    modulus: usize,
    chain_length: usize,
    operand_count: usize,
}

impl TaskSpec {
    pub fn chain(modulus: usize, chain_length: usize) -> Result<Self> {
        Self::build(TaskKind::Chain, modulus, chain_length, 2, None)
    }

    pub fn multipath(modulus: usize, operand_count: usize) -> Result<Self> {
        Self::build(TaskKind::Multipath, modulus, 1, operand_count, None)
    }

    /// Same task over a caller-supplied vocabulary, which must contain every
    /// required symbol.
    pub fn with_vocab(self, vocab: Vocab) -> Result<Self> {
        Self::build(
            self.kind,
            self.modulus,
            self.chain_length,
            self.operand_count,
            Some(vocab),
        )
    }

    pub fn new(
        kind: TaskKind,
        modulus: usize,
        chain_length: usize,
        operand_count: usize,
    ) -> Result<Self> {
        Self::build(kind, modulus, chain_length, operand_count, None)
    }

    fn build(
        kind: TaskKind,
        modulus: usize,
        chain_length: usize,
        operand_count: usize,
        vocab: Option<Vocab>,
    ) -> Result<Self> {
        if modulus < 2 {
            return Err(TaskError::InvalidModulus(modulus));
        }
        match kind {
            TaskKind::Chain if chain_length == 0 => return Err(TaskError::InvalidChainLength),
            TaskKind::Multipath if !(2..=MAX_OPERANDS).contains(&operand_count) => {
                return Err(TaskError::InvalidOperandCount(operand_count))
            }
            _ => {}
        }
        let required = Self::required_symbols(kind, modulus, operand_count);
        let vocab = match vocab {
            Some(v) => {
                if let Some(missing) = required.iter().find(|s| v.index_of(s).is_none()) {
                    return Err(TaskError::VocabTooSmall(missing.clone()));
                }
                v
            }
            None => Vocab::new(required)?,
        };
        Ok(Self {
            kind,
            vocab,
            modulus,
            chain_length,
            operand_count,
        })
    }

    fn required_symbols(kind: TaskKind, modulus: usize, operand_count: usize) -> Vec<String> {
        let mut symbols = vec![PAD_SYMBOL.to_string(), EQ_SYMBOL.to_string()];
        symbols.extend((0..modulus).map(|v| v.to_string()));
        match kind {
            TaskKind::Chain => {
                symbols.extend((1..modulus).map(|k| format!("+{k}")));
                symbols.extend((1..modulus).map(|k| format!("-{k}")));
            }
            TaskKind::Multipath => {
                symbols.extend((1..=operand_count).map(|i| format!("#{i}")));
            }
        }
        symbols
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn modulus(&self) -> usize {
        self.modulus
    }

    pub fn chain_length(&self) -> usize {
        self.chain_length
    }

    pub fn operand_count(&self) -> usize {
        self.operand_count
    }

    /// Number of generated tokens per trajectory.
    pub fn horizon(&self) -> usize {
        match self.kind {
            TaskKind::Chain => self.chain_length + 1,
            TaskKind::Multipath => 2 * self.operand_count + 1,
        }
    }

    /// Smallest window under which every gold next token is a function of the
    /// window state.
    pub fn min_window(&self) -> usize {
        match self.kind {
            // op_t sits chain_length + 1 tokens back; v0 at step 1 is one further
            TaskKind::Chain => self.chain_length + 2,
            // operand a_1 is 3n tokens back when the last running sum is due
            TaskKind::Multipath => 3 * self.operand_count,
        }
    }

    fn sym(&self, s: &str) -> usize {
        self.vocab.index_of(s).expect("required symbol present")
    }

    pub fn pad_token(&self) -> usize {
        self.sym(PAD_SYMBOL)
    }

    pub fn eq_token(&self) -> usize {
        self.sym(EQ_SYMBOL)
    }

    pub fn value_token(&self, value: usize) -> usize {
        self.sym(&(value % self.modulus).to_string())
    }

    /// Token for `+k` (`k > 0`) or `-k` (`k < 0`).
    pub fn op_token(&self, step: i64) -> usize {
        debug_assert_eq!(self.kind, TaskKind::Chain);
        self.sym(&format!("{step:+}"))
    }

    pub fn slot_token(&self, slot: usize) -> usize {
        debug_assert_eq!(self.kind, TaskKind::Multipath);
        self.sym(&format!("#{}", slot + 1))
    }

    fn value_of(&self, token: usize) -> Option<usize> {
        self.vocab.symbol(token)?.parse::<usize>().ok()
    }

    fn op_of(&self, token: usize) -> Option<i64> {
        let s = self.vocab.symbol(token)?;
        if s.starts_with('+') || s.starts_with('-') {
            s.parse::<i64>().ok()
        } else {
            None
        }
    }

    /// A fresh zero-logit policy over this task's vocabulary.
    pub fn new_policy(&self, window: usize) -> Result<TabularPolicy> {
        Ok(TabularPolicy::new(
            self.vocab.clone(),
            window,
            self.pad_token(),
        )?)
    }
}

/// One problem with its full set of gold trajectories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub prompt: Vec<usize>,
    pub gold_trajectories: Vec<Vec<usize>>,
    pub answer: usize,
}

impl TaskInstance {
    /// Rebuilds an instance from its prompt; gold trajectories are a pure
    /// function of the prompt.
    pub fn from_prompt(spec: &TaskSpec, prompt: &[usize]) -> Result<Self> {
        match spec.kind {
            TaskKind::Chain => chain_from_prompt(spec, prompt),
            TaskKind::Multipath => multipath_from_prompt(spec, prompt),
        }
    }

    pub fn horizon(&self) -> usize {
        self.gold_trajectories[0].len()
    }

    pub fn is_correct(&self, actions: &[usize]) -> bool {
        actions.len() == self.horizon() && actions.last() == Some(&self.answer)
    }
}

fn chain_from_prompt(spec: &TaskSpec, prompt: &[usize]) -> Result<TaskInstance> {
    let l = spec.chain_length;
    if prompt.len() != l + 2 || prompt[l + 1] != spec.eq_token() {
        return Err(TaskError::MalformedPrompt(format!(
            "expected `v0 op x{l} =`, got {:?}",
            spec.vocab.decode(prompt)
        )));
    }
    let m = spec.modulus as i64;
    let mut value = spec
        .value_of(prompt[0])
        .ok_or_else(|| TaskError::MalformedPrompt("first token must be a value".into()))?
        as i64;
    let mut gold = Vec::with_capacity(l + 1);
    for &op in &prompt[1..=l] {
        let step = spec
            .op_of(op)
            .ok_or_else(|| TaskError::MalformedPrompt("expected an op token".into()))?;
        value = (value + step).rem_euclid(m);
        gold.push(spec.value_token(value as usize));
    }
    let answer = *gold.last().expect("chain_length >= 1");
    gold.push(answer);
    Ok(TaskInstance {
        prompt: prompt.to_vec(),
        gold_trajectories: vec![gold],
        answer,
    })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out.sort();
    out
}

fn multipath_from_prompt(spec: &TaskSpec, prompt: &[usize]) -> Result<TaskInstance> {
    let n = spec.operand_count;
    if prompt.len() != n + 1 || prompt[n] != spec.eq_token() {
        return Err(TaskError::MalformedPrompt(format!(
            "expected `a x{n} =`, got {:?}",
            spec.vocab.decode(prompt)
        )));
    }
    let operands = prompt[..n]
        .iter()
        .map(|&t| {
            spec.value_of(t)
                .ok_or_else(|| TaskError::MalformedPrompt("operands must be values".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = spec.modulus;
    let mut gold = Vec::new();
    for order in permutations(n) {
        let mut traj = Vec::with_capacity(2 * n + 1);
        let mut sum = 0;
        for &slot in &order {
            sum = (sum + operands[slot]) % m;
            traj.push(spec.slot_token(slot));
            traj.push(spec.value_token(sum));
        }
        traj.push(spec.value_token(sum));
        gold.push(traj);
    }
    let answer = *gold[0].last().expect("non-empty");
    Ok(TaskInstance {
        prompt: prompt.to_vec(),
        gold_trajectories: gold,
        answer,
    })
}

/// Instance `index` of the stream keyed by `seed`.
pub fn generate_one(spec: &TaskSpec, seed: u64, index: u64) -> TaskInstance {
    let mut r = rng::stream(seed, &[domain::TASK_GEN, index]);
    let m = spec.modulus;
    let prompt = match spec.kind {
        TaskKind::Chain => {
            let mut p = vec![spec.value_token(r.random_range(0..m))];
            for _ in 0..spec.chain_length {
                let k = r.random_range(1..m) as i64;
                let step = if r.random::<bool>() { k } else { -k };
                p.push(spec.op_token(step));
            }
            p.push(spec.eq_token());
            p
        }
        TaskKind::Multipath => {
            let mut p: Vec<usize> = (0..spec.operand_count)
                .map(|_| spec.value_token(r.random_range(0..m)))
                .collect();
            p.push(spec.eq_token());
            p
        }
    };
    TaskInstance::from_prompt(spec, &prompt).expect("generated prompt is well-formed")
}

/// Instances `0..count` of the stream keyed by `seed`.
pub fn generate(spec: &TaskSpec, seed: u64, count: usize) -> Vec<TaskInstance> {
    (0..count as u64)
        .map(|i| generate_one(spec, seed, i))
        .collect()
}

pub fn gen_chain(spec: &TaskSpec, seed: u64, count: usize) -> Result<Vec<TaskInstance>> {
    if spec.kind != TaskKind::Chain {
        return Err(TaskError::WrongKind {
            expected: TaskKind::Chain,
            got: spec.kind,
        });
    }
    Ok(generate(spec, seed, count))
}

pub fn gen_multipath(spec: &TaskSpec, seed: u64, count: usize) -> Result<Vec<TaskInstance>> {
    if spec.kind != TaskKind::Multipath {
        return Err(TaskError::WrongKind {
            expected: TaskKind::Multipath,
            got: spec.kind,
        });
    }
    Ok(generate(spec, seed, count))
}

/// Tokens that continue some gold trajectory from `prefix`.
pub fn valid_next(instance: &TaskInstance, prefix: &Prefix) -> Result<BTreeSet<usize>> {
    if prefix.prompt != instance.prompt {
        return Err(TaskError::ForeignPrompt);
    }
    let t = prefix.generated.len();
    Ok(instance
        .gold_trajectories
        .iter()
        .filter(|g| g.len() > t && g[..t] == prefix.generated[..])
        .map(|g| g[t])
        .collect())
}

/// Fraction of instances whose greedy rollout ends in the right answer.
pub fn final_answer_accuracy(policy: &TabularPolicy, instances: &[TaskInstance]) -> Result<f64> {
    if instances.is_empty() {
        warn!("final-answer accuracy over an empty instance list is vacuously 1.0");
        return Ok(1.0);
    }
    let mut correct = 0usize;
    for inst in instances {
        let traj = policy.greedy_rollout(&inst.prompt, inst.horizon())?;
        if inst.is_correct(&traj.actions) {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}

/// Cross-entropy fit of a tabular policy on gold trajectories.
///
/// One SGD step per trajectory, instances visited in order. Multipath
/// instances draw one gold order per epoch from the `(seed, epoch, index)`
/// stream. Returns the policy and its accuracy on `instances`.
pub fn fit_supervised(
    spec: &TaskSpec,
    instances: &[TaskInstance],
    window: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(TabularPolicy, f64)> {
    let mut policy = spec.new_policy(window)?;
    let mut opt = OptimizerState::sgd(lr)?;
    for epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        for (i, inst) in instances.iter().enumerate() {
            let g = if inst.gold_trajectories.len() == 1 {
                0
            } else {
                let mut r = rng::stream(seed, &[domain::SUPERVISED, epoch as u64, i as u64]);
                r.random_range(0..inst.gold_trajectories.len())
            };
            let gold = &inst.gold_trajectories[g];
            let mut grads = GradTable::new();
            let mut context = inst.prompt.clone();
            for &target in gold {
                let key = policy.key_for_tokens(context.iter().copied())?;
                let q: Categorical = policy.dist_at(&key);
                epoch_loss -= q.prob(target).max(f64::MIN_POSITIVE).ln();
                let mut grad = q.probs().to_vec();
                grad[target] -= 1.0;
                grads.add_scaled(&key, &grad, 1.0);
                context.push(target);
            }
            apply_update(&mut policy, &grads, &mut opt)?;
        }
        if !epoch_loss.is_finite() {
            return Err(TaskError::Divergence { epoch });
        }
    }
    let acc = final_answer_accuracy(&policy, instances)?;
    Ok((policy, acc))
}

/// Supervised fit of the teacher; see [`fit_supervised`].
pub fn fit_teacher(
    spec: &TaskSpec,
    train: &[TaskInstance],
    window: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(TabularPolicy, f64)> {
    fit_supervised(spec, train, window, epochs, lr, seed)
}

/// One instance per line: `prompt-tokens | gold-count | answer-token(s)`.
pub fn write_dataset(spec: &TaskSpec, instances: &[TaskInstance]) -> String {
    let mut out = String::new();
    for inst in instances {
        let _ = writeln!(
            out,
            "{} | {} | {}",
            spec.vocab.decode(&inst.prompt).join(" "),
            inst.gold_trajectories.len(),
            spec.vocab.symbol(inst.answer).unwrap_or("?"),
        );
    }
    out
}

/// Parses a dataset file, regenerating gold trajectories from each prompt
/// and checking them against the recorded count and answer. Blank lines and
/// `#` comments are skipped.
pub fn read_dataset(spec: &TaskSpec, text: &str) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let bad = |reason: String| TaskError::MalformedDataset {
            line: line_no,
            reason,
        };
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('|').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad("expected three `|`-separated fields".into()));
        }
        let prompt_syms: Vec<&str> = fields[0].split_whitespace().collect();
        let prompt = spec
            .vocab
            .encode(&prompt_syms)
            .map_err(|e| bad(e.to_string()))?;
        let inst = TaskInstance::from_prompt(spec, &prompt).map_err(|e| bad(e.to_string()))?;
        let count: usize = fields[1]
            .parse()
            .map_err(|_| bad("bad gold count".into()))?;
        if count != inst.gold_trajectories.len() {
            return Err(bad(format!(
                "gold count {count} does not match regenerated {}",
                inst.gold_trajectories.len()
            )));
        }
        if spec.vocab.symbol(inst.answer) != Some(fields[2]) {
            return Err(bad(format!("answer {:?} does not match prompt", fields[2])));
        }
        out.push(inst);
    }
    Ok(out)
}
