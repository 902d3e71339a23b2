//! Run configuration, run directories, and the scripted experiments.
//!
//! Every experiment is a command over one `RunConfig`: pretraining a model
//! on a task corpus, training a guide with GRPO, evaluating compositions,
//! the weak-to-strong transfer pair, the two-guide composition sweep, the
//! brute-force oracle checks, and the structural memory check. A command
//! owns its run directory exclusively and snapshots the resolved config
//! there, so a run can be reproduced from the directory alone.
//!
//! Layout of a run directory:
//!   config.toml     resolved configuration snapshot
//!   metrics.jsonl   one self-describing record per training step
//!   checkpoints/    model containers
//!   reports/        JSON reports per command
//!   transcripts/    per-prompt decode transcripts (opt-in)

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::grpo::{GrpoConfig, GrpoTrainer};
use crate::lm::{self, LmConfig, LmParams};
use crate::numkit::{AdamW, AdamWConfig, GradMap, Tape};
use crate::oracle;
use crate::policy::{decode_greedy, ComposedPolicy};
use crate::tasks::{self, RewardChannel, TaskSpec};
use crate::{Error, Result};

/// Shared context window for every model in the lab.
pub const CONTEXT_LEN: usize = 64;

/// Architecture sizes; vocabulary and context come from the task and the
/// lab-wide constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape { n_layers: 1, d_model: 32, n_heads: 2 }
    }
}

impl ModelShape {
    pub fn lm_config(&self, vocab_size: usize, seed: u64) -> LmConfig {
        LmConfig {
            vocab_size,
            context_length: CONTEXT_LEN,
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: 4 * self.d_model,
            seed,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Which shape to pretrain: "backbone-s", "backbone-l", or "guide".
    pub model: String,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub corpus_size: usize,
    pub heldout_size: usize,
    /// Fraction of corpus completions that are the true answer; the rest are
    /// checker-rejected corruptions, which keeps the pretrained model
    /// imperfect enough for the guide to have something to fix.
    pub correctness_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: "backbone-s".into(),
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            corpus_size: 4096,
            heldout_size: 256,
            correctness_rate: 0.9,
        }
    }
}

/// Everything a command needs, in one serializable document. The `seed`
/// derives every random stream of the run; `grpo.seed = 0` (the default)
/// means "derive from the run seed", and the resolved value is what gets
/// snapshotted, so re-running a snapshot reproduces the run bit for bit.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub task: String,
    /// Seed of the task itself (split partition, cipher key, word draws);
    /// stable across commands so pretraining, guide training, and evaluation
    /// agree on what is held out.
    pub task_seed: u64,
    pub seed: u64,
    pub out: String,
    pub eval_size: usize,
    /// Guide weight at evaluation time.
    pub alpha: f64,
    pub alpha_grid: Vec<f64>,
    /// Oracle tilt temperature (evaluation-only; training never sees it).
    pub beta: f64,
    pub transcripts: bool,
    /// Save a guide checkpoint every N steps (0 = final only).
    pub checkpoint_every: usize,
    pub backbone_s: ModelShape,
    pub backbone_l: ModelShape,
    pub guide: ModelShape,
    pub pretrain: PretrainConfig,
    pub grpo: GrpoConfig,
    /// Restrict the scalar reward to one channel of a combined task
    /// ("answer" or "decode"); used to train specialist guides.
    pub reward_channel: Option<String>,
    pub backbone_ckpt: Option<String>,
    pub backbone_l_ckpt: Option<String>,
    pub guide_ckpt: Option<String>,
    pub guide_b_ckpt: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            task: "add".into(),
            task_seed: 0,
            seed: 0,
            out: "runs/run".into(),
            eval_size: 512,
            alpha: 1.0,
            alpha_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            beta: 0.2,
            transcripts: false,
            checkpoint_every: 0,
            backbone_s: ModelShape { n_layers: 2, d_model: 64, n_heads: 4 },
            backbone_l: ModelShape { n_layers: 4, d_model: 128, n_heads: 4 },
            // two layers are load-bearing: a depth-1 guide cannot express the
            // carry logic the steering signal needs and plateaus at +0.07
            guide: ModelShape { n_layers: 2, d_model: 32, n_heads: 2 },
            pretrain: PretrainConfig::default(),
            grpo: GrpoConfig::default(),
            reward_channel: None,
            backbone_ckpt: None,
            backbone_l_ckpt: None,
            guide_ckpt: None,
            guide_b_ckpt: None,
        }
    }
}

impl RunConfig {
    /// Loads a TOML file (or starts from defaults), applies `--set key=value`
    /// overrides with dotted paths, and deserializes.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value: toml::Value = match path {
            Some(p) => toml::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::Serde(format!("{}: {e}", p.display())))?,
            None => toml::Value::Table(toml::map::Map::new()),
        };
        for raw in overrides {
            apply_override(&mut value, raw)?;
        }
        value.try_into().map_err(|e| Error::Serde(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(format!("config: {e}")))
    }

    fn task(&self) -> Result<TaskSpec> {
        let task = tasks::task_by_name(&self.task, self.task_seed)?;
        match self.reward_channel.as_deref() {
            None => Ok(task),
            Some("answer") => Ok(task.channel_variant(RewardChannel::Answer)),
            Some("decode") => Ok(task.channel_variant(RewardChannel::Decode)),
            Some(other) => {
                Err(Error::Config(format!("unknown reward_channel {other:?} (answer|decode)")))
            }
        }
    }

    fn shape(&self, name: &str) -> Result<ModelShape> {
        match name {
            "backbone-s" => Ok(self.backbone_s),
            "backbone-l" => Ok(self.backbone_l),
            "guide" => Ok(self.guide),
            other => Err(Error::Config(format!(
                "unknown model shape {other:?}; expected backbone-s, backbone-l, or guide"
            ))),
        }
    }
}

/// `--set a.b.c=value`: the value is parsed as a TOML literal (numbers,
/// booleans, arrays, quoted strings); anything that does not parse is taken
/// as a bare string.
fn apply_override(value: &mut toml::Value, raw: &str) -> Result<()> {
    let (path, rhs) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {rhs}")) {
        Ok(mut t) => t.remove("v").expect("parsed table has v"),
        Err(_) => toml::Value::String(rhs.to_string()),
    };
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override path {path:?} has an empty segment")));
    }
    let mut cursor = value;
    for seg in &segments[..segments.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a non-table")))?;
        cursor = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a non-table")))?;
    table.insert(segments[segments.len() - 1].to_string(), parsed);
    Ok(())
}

/// A run directory, exclusively owned: creating one over an existing
/// snapshot is refused.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(config: &RunConfig) -> Result<RunDir> {
        let root = PathBuf::from(&config.out);
        let snapshot = root.join("config.toml");
        if snapshot.exists() {
            return Err(Error::Config(format!(
                "run directory {} already holds a config snapshot",
                root.display()
            )));
        }
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("reports"))?;
        fs::create_dir_all(root.join("transcripts"))?;
        fs::write(&snapshot, config.to_toml()?)?;
        Ok(RunDir { root })
    }

    pub fn append_metric(&self, record: &Value) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.join("metrics.jsonl"))?;
        writeln!(f, "{record}")?;
        Ok(())
    }

    pub fn write_report(&self, name: &str, report: &Value) -> Result<PathBuf> {
        let path = self.root.join("reports").join(format!("{name}.json"));
        fs::write(&path, format!("{report:#}\n"))?;
        Ok(path)
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn write_transcripts(&self, name: &str, rows: &[Transcript]) -> Result<()> {
        let mut out = String::new();
        for r in rows {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?);
            out.push('\n');
        }
        fs::write(self.root.join("transcripts").join(format!("{name}.jsonl")), out)?;
        Ok(())
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Transcript {
    pub prompt: String,
    pub completion: String,
    pub answer: String,
    pub reward: f64,
}

/// Greedy pass@1 and mean reward over a held-out prompt set; recomputable
/// from the transcripts.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub policy: String,
    pub n_prompts: usize,
    pub pass_at_1: f64,
    pub mean_reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transcripts: Option<Vec<Transcript>>,
}

/// Greedy decoding over the task's held-out prompts, parallel per prompt
/// with aggregation in prompt order.
pub fn evaluate(
    policy: &ComposedPolicy,
    task: &TaskSpec,
    n_prompts: usize,
    label: &str,
    keep_transcripts: bool,
) -> Result<EvalReport> {
    let prompts = task.eval_prompts(n_prompts);
    if prompts.is_empty() {
        return Err(Error::Config(format!("task {} has no held-out prompts", task.name)));
    }
    let vocab = task.vocab();
    let rows: Vec<Result<Transcript>> = crate::par::map_slice(&prompts, |p| {
        let traj = decode_greedy(policy, &p.tokens)?;
        let completion = vocab.completion_text(&traj.completion);
        let reward = task.reward(p, &completion);
        Ok(Transcript { prompt: p.text.clone(), completion, answer: p.answer.clone(), reward })
    });
    let rows: Vec<Transcript> = rows.into_iter().collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let pass_at_1 = rows.iter().filter(|r| r.completion == r.answer).count() as f64 / n;
    let mean_reward = rows.iter().map(|r| r.reward).sum::<f64>() / n;
    Ok(EvalReport {
        task: task.name.to_string(),
        policy: label.to_string(),
        n_prompts: rows.len(),
        pass_at_1,
        mean_reward,
        transcripts: keep_transcripts.then_some(rows),
    })
}

/// Mean per-channel rewards under greedy decoding; the composition sweep's
/// two columns.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct ChannelRates {
    pub answer: f64,
    pub decode: f64,
    pub pass_at_1: f64,
}

pub fn evaluate_channels(
    policy: &ComposedPolicy,
    task: &TaskSpec,
    n_prompts: usize,
) -> Result<ChannelRates> {
    let prompts = task.eval_prompts(n_prompts);
    if prompts.is_empty() {
        return Err(Error::Config(format!("task {} has no held-out prompts", task.name)));
    }
    let vocab = task.vocab();
    let rows: Vec<Result<(f64, f64, bool)>> = crate::par::map_slice(&prompts, |p| {
        let traj = decode_greedy(policy, &p.tokens)?;
        let completion = vocab.completion_text(&traj.completion);
        let ch = task.reward_channels(p, &completion);
        Ok((ch.answer, ch.decode, completion == p.answer))
    });
    let rows: Vec<(f64, f64, bool)> = rows.into_iter().collect::<Result<_>>()?;
    let n = rows.len() as f64;
    Ok(ChannelRates {
        answer: rows.iter().map(|r| r.0).sum::<f64>() / n,
        decode: rows.iter().map(|r| r.1).sum::<f64>() / n,
        pass_at_1: rows.iter().filter(|r| r.2).count() as f64 / n,
    })
}

fn load_frozen(path: &str) -> Result<LmParams> {
    let (mut params, _) = lm::load_model(Path::new(path))?;
    params.set_trainable(false);
    Ok(params)
}

/// Next-token cross-entropy of one corpus example, averaged over its
/// predicted positions.
fn example_ce_loss(
    tape: &mut Tape<f32>,
    cfg: &LmConfig,
    vars: &BTreeMap<String, crate::numkit::Var>,
    seq: &[usize],
) -> Result<crate::numkit::Var> {
    if seq.len() < 2 {
        return Err(Error::Shape { op: "harness.ce_loss", detail: "example shorter than 2".into() });
    }
    let feed = &seq[..seq.len() - 1];
    let targets = &seq[1..];
    let logits = lm::forward_on(tape, cfg, vars, feed)?;
    let lp = tape.log_softmax(logits, 1)?;
    let picked = tape.gather_cols(lp, targets)?;
    let mean = tape.mean(picked)?;
    tape.neg(mean)
}

/// Mean next-token cross-entropy over a corpus, forward-only.
fn corpus_ce(params: &LmParams, examples: &[Vec<usize>]) -> Result<f64> {
    let losses: Vec<Result<f64>> = crate::par::map_slice(examples, |seq| {
        let (total, per) = lm::sequence_logprob(params, &seq[..1], &seq[1..])?;
        Ok(-total / per.len().max(1) as f64)
    });
    let losses: Vec<f64> = losses.into_iter().collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Supervised pretraining: data-parallel per-example tapes, gradients folded
/// in input order, one AdamW step per batch.
pub fn pretrain_model(
    mut params: LmParams,
    corpus: &[Vec<usize>],
    steps: usize,
    batch_size: usize,
    learning_rate: f64,
    mut on_step: impl FnMut(usize, f64) -> Result<()>,
) -> Result<LmParams> {
    if corpus.is_empty() || batch_size == 0 {
        return Err(Error::Config("pretraining needs a corpus and a positive batch size".into()));
    }
    let cfg = params.config;
    let mut opt = AdamW::new(AdamWConfig::default(), params.tensors());
    for step in 0..steps {
        let batch: Vec<&Vec<usize>> = (0..batch_size)
            .map(|k| &corpus[(step * batch_size + k) % corpus.len()])
            .collect();
        let results: Vec<Result<(f64, GradMap<f32>)>> =
            crate::par::map_slice(&batch, |seq| {
                let mut tape = Tape::<f32>::new();
                let vars = lm::bind(&mut tape, params.tensors(), "model", true);
                let loss = example_ce_loss(&mut tape, &cfg, &vars, seq)?;
                let value = tape.value(loss).data()[0] as f64;
                let grads = tape.backward(loss)?;
                Ok((value, grads))
            });
        let mut mean_loss = 0.0;
        let mut folded: GradMap<f32> = GradMap::new();
        for r in results {
            let (value, grads) = r?;
            mean_loss += value;
            for (k, g) in grads {
                let bare = k.strip_prefix("model.").expect("pretrain binds the model role");
                match folded.get_mut(bare) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        folded.insert(bare.to_string(), g);
                    }
                }
            }
        }
        mean_loss /= batch.len() as f64;
        let scale = 1.0 / batch.len() as f32;
        for g in folded.values_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
        opt.step(params.tensors_mut()?, &folded, learning_rate)?;
        on_step(step, mean_loss)?;
    }
    Ok(params)
}

fn policy_label(backbone: &LmParams, guides: &[(&LmParams, f64)]) -> String {
    let short = |p: &LmParams| p.checksum()[..8].to_string();
    let mut s = format!("backbone={}", short(backbone));
    for (g, a) in guides {
        s.push_str(&format!(" guide={}@{a}", short(g)));
    }
    s
}

fn grpo_seed_for(config: &RunConfig) -> GrpoConfig {
    let mut g = config.grpo;
    if g.seed == 0 {
        g.seed = crate::rng::derive_seed(config.seed, "grpo", &[]);
    }
    g
}

// ---- commands ----

pub fn cmd_pretrain(config: &RunConfig) -> Result<Value> {
    let task = config.task()?;
    let vocab = task.vocab();
    let dir = RunDir::create(config)?;
    let p = &config.pretrain;
    let corpus = tasks::make_pretrain_corpus(
        &task,
        p.correctness_rate,
        p.corpus_size,
        crate::rng::derive_seed(config.seed, "corpus", &[0]),
    )?;
    let heldout = tasks::make_pretrain_corpus(
        &task,
        p.correctness_rate,
        p.heldout_size,
        crate::rng::derive_seed(config.seed, "corpus", &[1]),
    )?;
    let shape = config.shape(&p.model)?;
    let lm_cfg = shape.lm_config(vocab.size(), crate::rng::derive_seed(config.seed, "init", &[]));
    let params = lm::init_params(&lm_cfg)?;

    let heldout_before = corpus_ce(&params, &heldout.examples)?;
    dir.append_metric(&json!({"phase": "heldout", "step": 0, "loss": heldout_before}))?;
    let mut final_loss = f64::NAN;
    let trained = pretrain_model(
        params,
        &corpus.examples,
        p.steps,
        p.batch_size,
        p.learning_rate,
        |step, loss| {
            final_loss = loss;
            dir.append_metric(&json!({"phase": "pretrain", "step": step, "loss": loss}))
        },
    )?;
    let heldout_after = corpus_ce(&trained, &heldout.examples)?;
    dir.append_metric(&json!({"phase": "heldout", "step": p.steps, "loss": heldout_after}))?;

    let ckpt = dir.checkpoint_path(&p.model);
    lm::save_model(&ckpt, &trained, &vocab)?;
    let summary = json!({
        "command": "pretrain",
        "checkpoint": ckpt.to_string_lossy(),
        "steps": p.steps,
        "final_batch_loss": final_loss,
        "heldout_before": heldout_before,
        "heldout_after": heldout_after,
    });
    dir.write_report("pretrain", &summary)?;
    Ok(summary)
}

fn required<'c>(field: &'c Option<String>, name: &str) -> Result<&'c str> {
    field.as_deref().ok_or_else(|| Error::Config(format!("{name} is required for this command")))
}

pub fn cmd_train_guide(config: &RunConfig) -> Result<Value> {
    let task = config.task()?;
    let vocab = task.vocab();
    let grpo_cfg = grpo_seed_for(config);
    let mut resolved = config.clone();
    resolved.grpo = grpo_cfg;
    let dir = RunDir::create(&resolved)?;

    let backbone = load_frozen(required(&config.backbone_ckpt, "backbone_ckpt")?)?;
    let guide_init = match &config.guide_ckpt {
        Some(p) => {
            let (params, _) = lm::load_model(Path::new(p))?;
            params
        }
        None => lm::init_params(
            &config
                .guide
                .lm_config(vocab.size(), crate::rng::derive_seed(config.seed, "guide-init", &[])),
        )?,
    };
    if !guide_init.trainable() {
        return Err(Error::Frozen("guide checkpoint is not trainable".into()));
    }

    let mut trainer = GrpoTrainer::new(&backbone, guide_init.clone(), &task, grpo_cfg)?;
    trainer.alpha = config.alpha;
    while trainer.state.step < grpo_cfg.max_steps {
        let m = trainer.step()?;
        let mut record = serde_json::to_value(m).map_err(|e| Error::Serde(e.to_string()))?;
        record["phase"] = Value::from("grpo");
        dir.append_metric(&record)?;
        if config.checkpoint_every > 0 && trainer.state.step % config.checkpoint_every == 0 {
            lm::save_model(
                &dir.checkpoint_path(&format!("guide-step{}", trainer.state.step)),
                &trainer.state.guide,
                &vocab,
            )?;
        }
    }
    let guide = trainer.state.guide.clone();
    let metrics_len = trainer.state.metrics.len();
    lm::save_model(&dir.checkpoint_path("guide"), &guide, &vocab)?;

    // four-row comparison: backbone alone, naive composition with the
    // untrained guide, the trained composition, and the guide by itself
    let max_len = task.max_completion_len();
    let n = config.eval_size;
    let keep = config.transcripts;
    let rows = {
        let alone = ComposedPolicy::new(&backbone, vec![], 1.0, max_len)?;
        let naive = ComposedPolicy::new(&backbone, vec![(&guide_init, config.alpha)], 1.0, max_len)?;
        let steered = ComposedPolicy::new(&backbone, vec![(&guide, config.alpha)], 1.0, max_len)?;
        let mut solo_guide = guide.clone();
        solo_guide.set_trainable(false);
        let solo = ComposedPolicy::new(&solo_guide, vec![], 1.0, max_len)?;
        vec![
            ("backbone", evaluate(&alone, &task, n, &policy_label(&backbone, &[]), keep)?),
            (
                "backbone+guide-untrained",
                evaluate(&naive, &task, n, &policy_label(&backbone, &[(&guide_init, config.alpha)]), keep)?,
            ),
            (
                "backbone+guide",
                evaluate(&steered, &task, n, &policy_label(&backbone, &[(&guide, config.alpha)]), keep)?,
            ),
            ("guide-alone", evaluate(&solo, &task, n, &policy_label(&solo_guide, &[]), keep)?),
        ]
    };
    let mut report_rows = serde_json::Map::new();
    for (name, r) in &rows {
        if let Some(t) = &r.transcripts {
            dir.write_transcripts(&format!("train_guide-{name}"), t)?;
        }
        let mut v = serde_json::to_value(r).map_err(|e| Error::Serde(e.to_string()))?;
        v.as_object_mut().expect("report object").remove("transcripts");
        report_rows.insert(name.to_string(), v);
    }
    let report = json!({
        "command": "train-guide",
        "task": task.name,
        "steps": metrics_len,
        "rows": Value::Object(report_rows),
    });
    dir.write_report("train_guide", &report)?;
    Ok(report)
}

pub fn cmd_eval(config: &RunConfig) -> Result<Value> {
    let task = config.task()?;
    let dir = RunDir::create(config)?;
    let backbone = load_frozen(required(&config.backbone_ckpt, "backbone_ckpt")?)?;
    let guide = match &config.guide_ckpt {
        Some(p) => Some(lm::load_model(Path::new(p))?.0),
        None => None,
    };
    let guides: Vec<(&LmParams, f64)> =
        guide.iter().map(|g| (g, config.alpha)).collect();
    let policy = ComposedPolicy::new(&backbone, guides.clone(), 1.0, task.max_completion_len())?;
    let report = evaluate(
        &policy,
        &task,
        config.eval_size,
        &policy_label(&backbone, &guides),
        config.transcripts,
    )?;
    if let Some(t) = &report.transcripts {
        dir.write_transcripts("eval", t)?;
    }
    let mut v = serde_json::to_value(&report).map_err(|e| Error::Serde(e.to_string()))?;
    v.as_object_mut().expect("report object").remove("transcripts");
    let summary = json!({"command": "eval", "report": v});
    dir.write_report("eval", &summary)?;
    Ok(summary)
}

pub fn cmd_transfer(config: &RunConfig) -> Result<Value> {
    let task = config.task()?;
    let dir = RunDir::create(config)?;
    let backbone_l = load_frozen(required(&config.backbone_l_ckpt, "backbone_l_ckpt")?)?;
    let (guide, _) = lm::load_model(Path::new(required(&config.guide_ckpt, "guide_ckpt")?))?;
    let max_len = task.max_completion_len();
    let n = config.eval_size;

    let alone = ComposedPolicy::new(&backbone_l, vec![], 1.0, max_len)?;
    let unguided = evaluate(&alone, &task, n, &policy_label(&backbone_l, &[]), config.transcripts)?;
    let steered = ComposedPolicy::new(&backbone_l, vec![(&guide, config.alpha)], 1.0, max_len)?;
    let guided = evaluate(
        &steered,
        &task,
        n,
        &policy_label(&backbone_l, &[(&guide, config.alpha)]),
        config.transcripts,
    )?;
    if let Some(t) = &unguided.transcripts {
        dir.write_transcripts("transfer-unguided", t)?;
    }
    if let Some(t) = &guided.transcripts {
        dir.write_transcripts("transfer-guided", t)?;
    }
    let strip = |r: &EvalReport| -> Result<Value> {
        let mut v = serde_json::to_value(r).map_err(|e| Error::Serde(e.to_string()))?;
        v.as_object_mut().expect("report object").remove("transcripts");
        Ok(v)
    };
    let report = json!({
        "command": "transfer",
        "task": task.name,
        "unguided": strip(&unguided)?,
        "guided": strip(&guided)?,
        "improvement": guided.pass_at_1 - unguided.pass_at_1,
    });
    dir.write_report("transfer", &report)?;
    Ok(report)
}

pub fn cmd_compose_sweep(config: &RunConfig) -> Result<Value> {
    let task = config.task()?;
    let dir = RunDir::create(config)?;
    let backbone = load_frozen(required(&config.backbone_ckpt, "backbone_ckpt")?)?;
    let (guide_a, _) = lm::load_model(Path::new(required(&config.guide_ckpt, "guide_ckpt")?))?;
    let (guide_b, _) = lm::load_model(Path::new(required(&config.guide_b_ckpt, "guide_b_ckpt")?))?;
    let max_len = task.max_completion_len();
    let n = config.eval_size;

    let mut rows = Vec::new();
    for &alpha in &config.alpha_grid {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("sweep weight {alpha} outside [0,1]")));
        }
        let policy = ComposedPolicy::new(
            &backbone,
            vec![(&guide_a, alpha), (&guide_b, 1.0 - alpha)],
            1.0,
            max_len,
        )?;
        let rates = evaluate_channels(&policy, &task, n)?;
        rows.push(json!({
            "alpha": alpha,
            "answer": rates.answer,
            "decode": rates.decode,
            "pass_at_1": rates.pass_at_1,
        }));
    }

    // endpoint reductions: the zero-weight guide drops out exactly, so the
    // grid ends must reproduce single-guide evaluations bit for bit
    let single_a = ComposedPolicy::new(&backbone, vec![(&guide_a, 1.0)], 1.0, max_len)?;
    let single_b = ComposedPolicy::new(&backbone, vec![(&guide_b, 1.0)], 1.0, max_len)?;
    let endpoint_a = evaluate_channels(&single_a, &task, n)?;
    let endpoint_b = evaluate_channels(&single_b, &task, n)?;

    let report = json!({
        "command": "compose-sweep",
        "task": task.name,
        "rows": rows,
        "single_guide_a": serde_json::to_value(endpoint_a).map_err(|e| Error::Serde(e.to_string()))?,
        "single_guide_b": serde_json::to_value(endpoint_b).map_err(|e| Error::Serde(e.to_string()))?,
    });
    dir.write_report("compose_sweep", &report)?;
    Ok(report)
}

pub fn cmd_oracle_check(config: &RunConfig) -> Result<Value> {
    // the oracle experiment is defined on the enumerable micro task
    let task = tasks::task_micro(config.task_seed);
    let vocab = task.vocab();
    let grpo_cfg = grpo_seed_for(config);
    let mut resolved = config.clone();
    resolved.grpo = grpo_cfg;
    let dir = RunDir::create(&resolved)?;

    // guide-scale models keep every universe enumerable in seconds
    let mut backbone = lm::init_params(
        &config.guide.lm_config(vocab.size(), crate::rng::derive_seed(config.seed, "init", &[])),
    )?;
    backbone.set_trainable(false);
    let guide_init = lm::init_params(
        &config
            .guide
            .lm_config(vocab.size(), crate::rng::derive_seed(config.seed, "guide-init", &[])),
    )?;

    let mut trainer = GrpoTrainer::new(&backbone, guide_init.clone(), &task, grpo_cfg)?;
    while trainer.state.step < grpo_cfg.max_steps {
        let m = trainer.step()?;
        let mut record = serde_json::to_value(m).map_err(|e| Error::Serde(e.to_string()))?;
        record["phase"] = Value::from("grpo");
        dir.append_metric(&record)?;
    }
    let guide = trainer.state.guide.clone();
    lm::save_model(&dir.checkpoint_path("guide"), &guide, &vocab)?;

    let max_len = task.max_completion_len();
    let beta = config.beta;
    let prompts = task.eval_prompts(config.eval_size);
    let mut rows = Vec::new();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mut er_init = Vec::new();
    let mut er_final = Vec::new();
    let mut er_max = Vec::new();
    let mut kl_init = Vec::new();
    let mut kl_final = Vec::new();
    let mut res_init = Vec::new();
    let mut res_final = Vec::new();
    for p in &prompts {
        let reward = |y: &[usize]| task.reward(p, &vocab.completion_text(y));
        let optimum = oracle::enumerate_optimal_policy(&backbone, &p.tokens, &reward, beta, max_len)?;
        let max_reward =
            optimum.rewards.values().fold(f64::NEG_INFINITY, |a, &b| a.max(b));

        let init_policy = ComposedPolicy::new(&backbone, vec![(&guide_init, 1.0)], 1.0, max_len)?;
        let final_policy = ComposedPolicy::new(&backbone, vec![(&guide, 1.0)], 1.0, max_len)?;
        let d_init = oracle::policy_to_seqdist(&init_policy, &p.tokens)?;
        let d_final = oracle::policy_to_seqdist(&final_policy, &p.tokens)?;

        let row = json!({
            "prompt": p.text,
            "max_reward": max_reward,
            "expected_reward_init": oracle::expected_reward(&d_init, &reward),
            "expected_reward_final": oracle::expected_reward(&d_final, &reward),
            "kl_to_optimal_init": oracle::exact_kl(&d_init, &optimum.dist)?,
            "kl_to_optimal_final": oracle::exact_kl(&d_final, &optimum.dist)?,
            "residual_init": oracle::theorem_residual(&d_init, &optimum, beta)?,
            "residual_final": oracle::theorem_residual(&d_final, &optimum, beta)?,
            "log_z": optimum.log_z,
        });
        er_init.push(row["expected_reward_init"].as_f64().expect("f64"));
        er_final.push(row["expected_reward_final"].as_f64().expect("f64"));
        er_max.push(max_reward);
        kl_init.push(row["kl_to_optimal_init"].as_f64().expect("f64"));
        kl_final.push(row["kl_to_optimal_final"].as_f64().expect("f64"));
        res_init.push(row["residual_init"].as_f64().expect("f64"));
        res_final.push(row["residual_final"].as_f64().expect("f64"));
        rows.push(row);
    }

    // zero-reward collapse: with r = 0 the optimum is the backbone itself,
    // so the two KLs must coincide
    let zero_task = task.zero_reward_variant();
    let p0 = &prompts[0];
    let zero_reward = |y: &[usize]| zero_task.reward(p0, &vocab.completion_text(y));
    let zero_opt =
        oracle::enumerate_optimal_policy(&backbone, &p0.tokens, &zero_reward, beta, max_len)?;
    let backbone_alone = ComposedPolicy::new(&backbone, vec![], 1.0, max_len)?;
    let d_backbone = oracle::policy_to_seqdist(&backbone_alone, &p0.tokens)?;
    let init_policy = ComposedPolicy::new(&backbone, vec![(&guide_init, 1.0)], 1.0, max_len)?;
    let d_init = oracle::policy_to_seqdist(&init_policy, &p0.tokens)?;
    let kl_to_zero_opt = oracle::exact_kl(&d_init, &zero_opt.dist)?;
    let kl_to_backbone = oracle::exact_kl(&d_init, &d_backbone)?;

    let report = json!({
        "command": "oracle-check",
        "task": task.name,
        "beta": beta,
        "steps": grpo_cfg.max_steps,
        "rows": rows,
        "mean_max_reward": mean(&er_max),
        "mean_expected_reward_init": mean(&er_init),
        "mean_expected_reward_final": mean(&er_final),
        "mean_kl_to_optimal_init": mean(&kl_init),
        "mean_kl_to_optimal_final": mean(&kl_final),
        "mean_residual_init": mean(&res_init),
        "mean_residual_final": mean(&res_final),
        "zero_reward_kl_to_optimal": kl_to_zero_opt,
        "zero_reward_kl_to_backbone": kl_to_backbone,
        "zero_reward_gap": (kl_to_zero_opt - kl_to_backbone).abs(),
    });
    dir.write_report("oracle_check", &report)?;
    Ok(report)
}

pub fn cmd_memcheck(config: &RunConfig) -> Result<Value> {
    let task = tasks::task_micro(config.task_seed);
    let vocab = task.vocab();
    let dir = RunDir::create(config)?;
    let grpo_cfg = grpo_seed_for(config);

    let structural = |backbone_shape: ModelShape, tag: u64| -> Result<(Value, usize, usize)> {
        let mut backbone = lm::init_params(
            &backbone_shape
                .lm_config(vocab.size(), crate::rng::derive_seed(config.seed, "init", &[tag])),
        )?;
        backbone.set_trainable(false);
        let guide = lm::init_params(&config.guide.lm_config(
            vocab.size(),
            crate::rng::derive_seed(config.seed, "guide-init", &[tag]),
        ))?;
        let mut trainer = GrpoTrainer::new(&backbone, guide, &task, grpo_cfg)?;
        trainer.step()?;
        let p = trainer.state.guide.param_count();
        let moments = trainer.state.optimizer.moment_entries();
        if moments != 2 * p {
            return Err(Error::Config(format!(
                "optimizer holds {moments} moment entries for {p} guide parameters"
            )));
        }
        let grad_keys = trainer.state.last_grad_keys.clone();
        if grad_keys.iter().any(|k| !k.starts_with("guide.")) {
            return Err(Error::Frozen("gradient table reaches beyond the guide".into()));
        }
        let v = json!({
            "backbone_params": backbone.param_count(),
            "guide_params": p,
            "moment_entries": moments,
            "gradient_keys": grad_keys.len(),
            "gradient_keys_all_guide": true,
        });
        Ok((v, p, moments))
    };

    let (base, _, base_moments) = structural(config.backbone_s, 0)?;
    let doubled_shape = ModelShape {
        n_layers: config.backbone_s.n_layers,
        d_model: config.backbone_s.d_model * 2,
        n_heads: config.backbone_s.n_heads,
    };
    let (doubled, _, doubled_moments) = structural(doubled_shape, 1)?;
    if base_moments != doubled_moments {
        return Err(Error::Config(
            "optimizer state varied with backbone size; it must depend on the guide alone".into(),
        ));
    }
    let report = json!({
        "command": "memcheck",
        "base": base,
        "doubled_backbone": doubled,
        "optimizer_state_invariant_to_backbone": true,
    });
    dir.write_report("memcheck", &report)?;
    Ok(report)
}

/// Dispatch on `config.command`.
pub fn run(config: &RunConfig) -> Result<Value> {
    match config.command.as_str() {
        "pretrain" => cmd_pretrain(config),
        "train-guide" => cmd_train_guide(config),
        "eval" => cmd_eval(config),
        "transfer" => cmd_transfer(config),
        "compose-sweep" => cmd_compose_sweep(config),
        "oracle-check" => cmd_oracle_check(config),
        "memcheck" => cmd_memcheck(config),
        other => Err(Error::Config(format!("unknown command {other:?}"))),
    }
}
