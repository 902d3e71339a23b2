//! Synthetic verifiable-reward tasks and their reward functions.
//!
//! Four task families: decimal addition (exact-match), substitution-cipher
//! decoding (n-gram similarity), the combined cipher+addition task (two
//! reward channels), and a fully enumerable micro task for the brute-force
//! oracles. Rewards are pure functions of (prompt, completion text) with
//! values in [0,1]; exact-match rewards take values only in {0,1}.
//!
//! Train/eval splits partition the underlying instance space by a seeded
//! hash, so held-out prompts can never appear in training samples or
//! pretraining corpora.

use rand::Rng;

use crate::lm::{Vocab, BOS, EOS};
use crate::rng::{derive_rng, mix64};
use crate::{Error, Result};

const WORD_FILE: &str = include_str!("../assets/words.txt");
/// One instance in eight is held out for evaluation.
const EVAL_MODULUS: u64 = 8;
const ADD_MAX_OPERAND: u64 = 99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Add,
    Cipher,
    CipherAdd,
    Micro,
}

/// One sampled prompt. `answer` is the canonical completion text (without
/// EOS) that achieves the maximum reward.
#[derive(Clone, Debug)]
pub struct PromptInstance {
    pub text: String,
    pub tokens: Vec<usize>,
    pub answer: String,
    pub task: &'static str,
    pub split: Split,
}

/// The two reward channels of the combined task. Single-channel tasks
/// report the same value on both.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardChannels {
    pub decode: f64,
    pub answer: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardChannel {
    Answer,
    Decode,
}

#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub name: &'static str,
    kind: Kind,
    seed: u64,
    /// Substitution over a-z; identity for non-cipher tasks.
    sigma: [u8; 26],
    words: Vec<&'static str>,
    zero_reward: bool,
    /// When set, the scalar reward is this single channel. Guide
    /// specialists for the composition sweep train against one channel of
    /// the combined task each.
    channel: Option<RewardChannel>,
}

pub fn task_add(seed: u64) -> TaskSpec {
    TaskSpec::new("add", Kind::Add, seed)
}

pub fn task_cipher(seed: u64) -> TaskSpec {
    TaskSpec::new("cipher", Kind::Cipher, seed)
}

pub fn task_cipher_add(seed: u64) -> TaskSpec {
    TaskSpec::new("cipher_add", Kind::CipherAdd, seed)
}

pub fn task_micro(seed: u64) -> TaskSpec {
    TaskSpec::new("micro", Kind::Micro, seed)
}

pub fn task_by_name(name: &str, seed: u64) -> Result<TaskSpec> {
    match name {
        "add" => Ok(task_add(seed)),
        "cipher" => Ok(task_cipher(seed)),
        "cipher_add" => Ok(task_cipher_add(seed)),
        "micro" => Ok(task_micro(seed)),
        other => Err(Error::Config(format!("unknown task {other:?}"))),
    }
}

impl TaskSpec {
    fn new(name: &'static str, kind: Kind, seed: u64) -> TaskSpec {
        let mut sigma: [u8; 26] = std::array::from_fn(|i| i as u8);
        if matches!(kind, Kind::Cipher | Kind::CipherAdd) {
            // Fisher-Yates over a-z; cipher and cipher_add share sigma for
            // equal seeds by construction.
            let mut rng = derive_rng(seed, "task-sigma", &[]);
            for i in (1..26).rev() {
                let j = rng.random_range(0..=i);
                sigma.swap(i, j);
            }
        }
        let words: Vec<&'static str> = WORD_FILE.lines().filter(|w| !w.is_empty()).collect();
        TaskSpec { name, kind, seed, sigma, words, zero_reward: false, channel: None }
    }

    /// Same prompts, reward identically zero. Oracle diagnostic only; the
    /// max-reward-reachable invariant intentionally does not hold here.
    pub fn zero_reward_variant(&self) -> TaskSpec {
        TaskSpec { zero_reward: true, ..self.clone() }
    }

    /// Same prompts, scalar reward restricted to one channel.
    pub fn channel_variant(&self, channel: RewardChannel) -> TaskSpec {
        TaskSpec { channel: Some(channel), ..self.clone() }
    }

    pub fn vocab(&self) -> Vocab {
        match self.kind {
            Kind::Micro => Vocab::micro(),
            _ => Vocab::lab(),
        }
    }

    /// Generous cap on useful completion length, EOS included.
    pub fn max_completion_len(&self) -> usize {
        match self.kind {
            Kind::Add => 5,
            Kind::Cipher => 10,
            Kind::CipherAdd => 20,
            Kind::Micro => 4,
        }
    }

    fn encipher(&self, plain: &str) -> String {
        plain
            .chars()
            .map(|c| {
                if c.is_ascii_lowercase() {
                    (b'a' + self.sigma[(c as u8 - b'a') as usize]) as char
                } else {
                    c
                }
            })
            .collect()
    }

    /// Split membership of an abstract instance key. Eval gets 1/EVAL_MODULUS
    /// of the space.
    fn is_eval_key(&self, key: u64) -> bool {
        mix64(self.seed ^ mix64(key)) % EVAL_MODULUS == 0
    }

    fn instance(&self, word_idx: usize, a: u64, b: u64, perm: usize, split: Split) -> PromptInstance {
        let (text, answer) = match self.kind {
            Kind::Add => (format!("{a}+{b}="), format!("{}", a + b)),
            Kind::Cipher => {
                let w = self.words[word_idx];
                (format!("T:{}=", self.encipher(w)), w.to_string())
            }
            Kind::CipherAdd => {
                // sum first: each phase of the completion then sits in the
                // context its specialist guide was trained on — digits right
                // after '=', the decoded word after ':'
                let w = self.words[word_idx];
                (format!("T:{}:{a}+{b}=", self.encipher(w)), format!("{}:{w}", a + b))
            }
            Kind::Micro => {
                // perm indexes the 6 orderings of "abc" in lexicographic order
                let orders = ["abc", "acb", "bac", "bca", "cab", "cba"];
                (format!("{}=", orders[perm % 6]), "abc".to_string())
            }
        };
        let vocab = self.vocab();
        let mut tokens = vec![BOS];
        tokens.extend(vocab.encode(&text).expect("task text stays within its vocabulary"));
        PromptInstance { text, tokens, answer, task: self.name, split }
    }

    /// Deterministic train-side prompt for a draw index. Instances hashing
    /// to the eval side are rejected and redrawn from the same stream.
    pub fn train_prompt(&self, index: u64) -> PromptInstance {
        let mut rng = derive_rng(self.seed, "task-train-prompt", &[index]);
        loop {
            match self.kind {
                Kind::Add => {
                    let a = rng.random_range(0..=ADD_MAX_OPERAND);
                    let b = rng.random_range(0..=ADD_MAX_OPERAND);
                    if self.is_eval_key(a * 100 + b) {
                        continue;
                    }
                    return self.instance(0, a, b, 0, Split::Train);
                }
                Kind::Cipher | Kind::CipherAdd => {
                    let w = rng.random_range(0..self.words.len());
                    if self.is_eval_key(w as u64) {
                        continue;
                    }
                    let a = rng.random_range(0..=ADD_MAX_OPERAND);
                    let b = rng.random_range(0..=ADD_MAX_OPERAND);
                    return self.instance(w, a, b, 0, Split::Train);
                }
                Kind::Micro => {
                    let perm = rng.random_range(0..6);
                    return self.instance(0, 0, 0, perm, Split::Train);
                }
            }
        }
    }

    /// The fixed held-out set, in canonical enumeration order. May return
    /// fewer than `n` prompts when the eval side of the instance space is
    /// smaller (cipher words; the 6 micro permutations).
    pub fn eval_prompts(&self, n: usize) -> Vec<PromptInstance> {
        let mut out = Vec::with_capacity(n);
        match self.kind {
            Kind::Add => {
                for key in 0..=(ADD_MAX_OPERAND * 100 + ADD_MAX_OPERAND) {
                    if out.len() == n {
                        break;
                    }
                    let (a, b) = (key / 100, key % 100);
                    if b <= ADD_MAX_OPERAND && self.is_eval_key(key) {
                        out.push(self.instance(0, a, b, 0, Split::Eval));
                    }
                }
            }
            Kind::Cipher => {
                for w in 0..self.words.len() {
                    if out.len() == n {
                        break;
                    }
                    if self.is_eval_key(w as u64) {
                        out.push(self.instance(w, 0, 0, 0, Split::Eval));
                    }
                }
            }
            Kind::CipherAdd => {
                let eval_words: Vec<usize> =
                    (0..self.words.len()).filter(|&w| self.is_eval_key(w as u64)).collect();
                for i in 0..n {
                    let mut rng = derive_rng(self.seed, "task-eval-operands", &[i as u64]);
                    let a = rng.random_range(0..=ADD_MAX_OPERAND);
                    let b = rng.random_range(0..=ADD_MAX_OPERAND);
                    out.push(self.instance(eval_words[i % eval_words.len()], a, b, 0, Split::Eval));
                }
            }
            Kind::Micro => {
                for perm in 0..6.min(n) {
                    out.push(self.instance(0, 0, 0, perm, Split::Eval));
                }
            }
        }
        out
    }

    /// Scalar reward in [0,1]. `completion` is decoded text, already
    /// truncated at the first EOS by the caller.
    pub fn reward(&self, prompt: &PromptInstance, completion: &str) -> f64 {
        let ch = self.reward_channels(prompt, completion);
        if let Some(c) = self.channel {
            return match c {
                RewardChannel::Answer => ch.answer,
                RewardChannel::Decode => ch.decode,
            };
        }
        match self.kind {
            Kind::Add | Kind::Micro => ch.answer,
            Kind::Cipher => ch.decode,
            Kind::CipherAdd => 0.5 * (ch.decode + ch.answer),
        }
    }

    /// Decode-quality and answer-accuracy channels. Single-channel tasks
    /// mirror their value across both fields.
    pub fn reward_channels(&self, prompt: &PromptInstance, completion: &str) -> RewardChannels {
        if self.zero_reward {
            return RewardChannels { decode: 0.0, answer: 0.0 };
        }
        match self.kind {
            Kind::Add | Kind::Micro => {
                let v = if completion == prompt.answer { 1.0 } else { 0.0 };
                RewardChannels { decode: v, answer: v }
            }
            Kind::Cipher => {
                let v = ngram_similarity(completion, &prompt.answer);
                RewardChannels { decode: v, answer: v }
            }
            Kind::CipherAdd => {
                // canonical answer "sum:word"; a completion without ':' is
                // all sum candidate and no decode candidate
                let (ref_sum, ref_word) =
                    prompt.answer.split_once(':').expect("combined answers contain ':'");
                let (got_sum, got_word) = match completion.split_once(':') {
                    Some((s, w)) => (s, w),
                    None => (completion, ""),
                };
                RewardChannels {
                    decode: ngram_similarity(got_word, ref_word),
                    answer: if got_sum == ref_sum { 1.0 } else { 0.0 },
                }
            }
        }
    }

    /// True when the completion achieves the task's maximum reward.
    pub fn is_correct(&self, prompt: &PromptInstance, completion: &str) -> bool {
        self.reward(prompt, completion) == 1.0
    }
}

/// Character n-gram similarity for n in {1,2}: the geometric mean of the
/// four clipped precision/recall terms. Equals 1 only when candidate and
/// reference match exactly (the bundled word list is curated so that no
/// other string shares a word's combined 1-/2-gram profile).
pub fn ngram_similarity(candidate: &str, reference: &str) -> f64 {
    let mut acc = 1.0f64;
    for n in 1..=2usize {
        let c = ngram_counts(candidate, n);
        let r = ngram_counts(reference, n);
        let (c_total, r_total) = (candidate.chars().count(), reference.chars().count());
        let (c_total, r_total) = (
            c_total.saturating_sub(n - 1),
            r_total.saturating_sub(n - 1),
        );
        if c_total == 0 || r_total == 0 {
            return 0.0;
        }
        let mut matched = 0usize;
        for (g, &cnt) in &c {
            if let Some(&rc) = r.get(g) {
                matched += cnt.min(rc);
            }
        }
        acc *= matched as f64 / c_total as f64; // precision
        acc *= matched as f64 / r_total as f64; // recall
    }
    acc.powf(0.25)
}

fn ngram_counts(s: &str, n: usize) -> std::collections::BTreeMap<Vec<char>, usize> {
    let chars: Vec<char> = s.chars().collect();
    let mut m = std::collections::BTreeMap::new();
    if chars.len() < n {
        return m;
    }
    for w in chars.windows(n) {
        *m.entry(w.to_vec()).or_insert(0) += 1;
    }
    m
}

/// Token-stream pretraining corpus: each example is prompt tokens (with
/// leading BOS) followed by completion tokens and EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub task: String,
    pub vocab_content: String,
    pub examples: Vec<Vec<usize>>,
}

/// Builds a corpus whose completions are the true answer with probability
/// `correctness_rate` and a checker-rejected corruption otherwise. Prompts
/// come from the train side of the split only.
pub fn make_pretrain_corpus(
    task: &TaskSpec,
    correctness_rate: f64,
    size: usize,
    seed: u64,
) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&correctness_rate) {
        return Err(Error::Config(format!("correctness_rate {correctness_rate} outside [0,1]")));
    }
    let vocab = task.vocab();
    let mut examples = Vec::with_capacity(size);
    for i in 0..size {
        let inst = task.train_prompt(i as u64);
        let mut rng = derive_rng(seed, "corpus-example", &[i as u64]);
        let completion = if rng.random::<f64>() < correctness_rate {
            inst.answer.clone()
        } else {
            corrupt_answer(task, &inst, &mut rng)
        };
        let mut toks = inst.tokens.clone();
        toks.extend(vocab.encode(&completion)?);
        toks.push(EOS);
        examples.push(toks);
    }
    Ok(Corpus {
        task: task.name.to_string(),
        vocab_content: vocab.content_chars().to_string(),
        examples,
    })
}

/// A plausible wrong answer: well-formed, but rejected by the checker.
fn corrupt_answer(task: &TaskSpec, inst: &PromptInstance, rng: &mut impl Rng) -> String {
    match task.kind {
        Kind::Add => {
            let sum: i64 = inst.answer.parse().expect("canonical sum");
            corrupt_sum(sum, rng).to_string()
        }
        Kind::Cipher => corrupt_word(&inst.answer, rng),
        Kind::CipherAdd => {
            let (sum, word) = inst.answer.split_once(':').expect("combined answer shape");
            if rng.random::<bool>() {
                format!("{sum}:{}", corrupt_word(word, rng))
            } else {
                let sum: i64 = sum.parse().expect("canonical sum");
                format!("{}:{word}", corrupt_sum(sum, rng))
            }
        }
        Kind::Micro => {
            let orders = ["acb", "bac", "bca", "cab", "cba"];
            orders[rng.random_range(0..orders.len())].to_string()
        }
    }
}

fn corrupt_sum(sum: i64, rng: &mut impl Rng) -> i64 {
    let delta = rng.random_range(1..=10i64);
    let wrong = if rng.random::<bool>() { sum + delta } else { (sum - delta).max(0) };
    if wrong == sum {
        sum + delta
    } else {
        wrong
    }
}

fn corrupt_word(word: &str, rng: &mut impl Rng) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    let pos = rng.random_range(0..chars.len());
    let old = chars[pos];
    loop {
        let c = (b'a' + rng.random_range(0..26u8)) as char;
        if c != old {
            chars[pos] = c;
            break;
        }
    }
    chars.into_iter().collect()
}

pub fn save_corpus(path: &std::path::Path, corpus: &Corpus) -> Result<()> {
    let kv = vec![
        ("format".to_string(), "corpus".to_string()),
        ("task".to_string(), corpus.task.clone()),
        ("vocab".to_string(), corpus.vocab_content.clone()),
        ("count".to_string(), corpus.examples.len().to_string()),
    ];
    // token ids are < 64, exactly representable in f32
    let lengths: Vec<f32> = corpus.examples.iter().map(|e| e.len() as f32).collect();
    let tokens: Vec<f32> =
        corpus.examples.iter().flat_map(|e| e.iter().map(|&t| t as f32)).collect();
    let tensors = vec![
        ("lengths".to_string(), vec![lengths.len().max(1)], if lengths.is_empty() { vec![0.0] } else { lengths }),
        ("tokens".to_string(), vec![tokens.len().max(1)], if tokens.is_empty() { vec![0.0] } else { tokens }),
    ];
    crate::lm::write_container(path, &crate::lm::Container { kv, tensors })
}

pub fn load_corpus(path: &std::path::Path) -> Result<Corpus> {
    let c = crate::lm::read_container(path)?;
    if c.get("format")? != "corpus" {
        return Err(Error::Checkpoint(format!("not a corpus file: format {}", c.get("format")?)));
    }
    let count = c.get_u64("count")? as usize;
    let task = c.get("task")?.to_string();
    let vocab_content = c.get("vocab")?.to_string();
    let find = |name: &str| {
        c.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, d)| d.clone())
            .ok_or_else(|| Error::Checkpoint(format!("corpus missing tensor {name}")))
    };
    let lengths = find("lengths")?;
    let tokens = find("tokens")?;
    let mut examples = Vec::with_capacity(count);
    let mut offset = 0usize;
    for i in 0..count {
        let len = lengths[i] as usize;
        if offset + len > tokens.len() {
            return Err(Error::Checkpoint("corpus lengths exceed token stream".into()));
        }
        examples.push(tokens[offset..offset + len].iter().map(|&t| t as usize).collect());
        offset += len;
    }
    Ok(Corpus { task, vocab_content, examples })
}
