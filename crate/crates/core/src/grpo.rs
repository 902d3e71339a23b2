//! Group-relative policy optimization of the guide, backbone frozen.
//!
//! Each step samples G completions per prompt from the composed policy,
//! standardizes rewards within each group into advantages, and descends the
//! clipped surrogate -min(rho*A, clip(rho, 1-eps, 1+eps)*A), where rho is the
//! exact composed-policy probability ratio per token (including the per-step
//! normalizer; the guide-only ratio is logged as a diagnostic, not used).
//! Aggregation is token-mean per completion, then mean over all completions.
//!
//! The backbone enters the loss only through constant rows captured at
//! sampling time, so gradients exist for guide parameters alone — that is
//! the memory story: optimizer state scales with the guide, never the
//! backbone.

use std::collections::BTreeMap;

use crate::lm::{self, LmParams};
use crate::numkit::{AdamW, AdamWConfig, Elem, Tape, Tensor, Var};
use crate::policy::{sample_completion, ComposedPolicy, Trajectory};
use crate::tasks::{PromptInstance, TaskSpec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_coeff: f64,
    pub learning_rate: f64,
    pub warmup_frac: f64,
    pub cosine_floor: f64,
    pub max_steps: usize,
    pub prompts_per_step: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_coeff: 0.0,
            learning_rate: 1e-3,
            warmup_frac: 0.1,
            cosine_floor: 0.1,
            max_steps: 200,
            prompts_per_step: 8,
            temperature: 0.7,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group_size {} < 2: group std is undefined",
                self.group_size
            )));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::Config("clip_epsilon must be positive".into()));
        }
        if self.kl_coeff < 0.0 || !self.kl_coeff.is_finite() {
            return Err(Error::Config("kl_coeff must be finite and >= 0".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.cosine_floor) {
            return Err(Error::Config("warmup_frac in [0,1), cosine_floor in [0,1]".into()));
        }
        if self.prompts_per_step == 0 {
            return Err(Error::Config("prompts_per_step must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup to the peak rate, then cosine decay to the floor. The last
/// step lands on the floor exactly.
pub fn lr_at(cfg: &GrpoConfig, step: usize) -> f64 {
    let total = cfg.max_steps.max(1);
    let warmup = ((cfg.warmup_frac * total as f64).round() as usize).clamp(1, total);
    if step < warmup {
        return cfg.learning_rate * (step + 1) as f64 / warmup as f64;
    }
    let floor = cfg.learning_rate * cfg.cosine_floor;
    let span = (total - warmup).max(1) as f64;
    let progress = ((step + 1 - warmup) as f64 / span).min(1.0);
    floor + (cfg.learning_rate - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// A_i = (r_i - mean) / population std; a group with std below 1e-8 is
/// degenerate and gets all-zero advantages.
pub fn normalize_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!("group of {} rewards; need >= 2", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite { op: "grpo.normalize_advantages" });
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Everything the loss needs to re-score one completion under the current
/// guide: the frozen backbone rows captured at sampling time, the sampling
/// snapshot's composed log-probs (phi_old), and optionally the initial
/// policy's (phi_0) for the KL term.
#[derive(Clone, Debug)]
pub struct CompletionData<'a> {
    pub prompt: &'a [usize],
    pub completion: &'a [usize],
    pub backbone_rows: &'a [Vec<f64>],
    pub advantage: f64,
    pub old_logprobs: &'a [f64],
    pub old_guide_logprobs: &'a [f64],
    pub initial_logprobs: Option<&'a [f64]>,
}

/// Scalar diagnostics extracted while the loss graph is built.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossDiagnostics {
    /// Fraction of tokens whose ratio left the clip interval.
    pub frac_clipped: f64,
    /// Mean |(log ratio composed) - (log ratio guide-only)|; the per-step
    /// normalizer gap that the guide-only approximation ignores.
    pub ratio_gap: f64,
    /// Mean per-token KL estimate against phi_0 (0 when disabled).
    pub mean_kl: f64,
}

/// Builds the GRPO objective onto `tape` and returns the scalar loss.
/// `guide_vars` must come from binding the guide's tensors on this tape;
/// gradient flow reaches only those leaves because every backbone quantity
/// enters as a constant.
pub fn grpo_loss<E: Elem>(
    tape: &mut Tape<E>,
    guide_cfg: &lm::LmConfig,
    guide_vars: &BTreeMap<String, Var>,
    alpha: f64,
    data: &[CompletionData],
    config: &GrpoConfig,
) -> Result<(Var, LossDiagnostics)> {
    if data.is_empty() {
        return Err(Error::Config("grpo_loss needs at least one completion".into()));
    }
    let v = guide_cfg.vocab_size;
    let eps = config.clip_epsilon;
    let mut per_completion = Vec::with_capacity(data.len());
    let mut clipped = 0usize;
    let mut tokens_total = 0usize;
    let mut gap_sum = 0.0f64;
    let mut kl_sum = 0.0f64;

    for c in data {
        let t_len = c.completion.len();
        if t_len == 0 {
            return Err(Error::Shape { op: "grpo.loss", detail: "empty completion".into() });
        }
        if c.old_logprobs.len() != t_len
            || c.backbone_rows.len() != t_len
            || c.old_guide_logprobs.len() != t_len
        {
            return Err(Error::Shape {
                op: "grpo.loss",
                detail: format!(
                    "completion of {t_len} tokens with {} old log-probs / {} backbone rows",
                    c.old_logprobs.len(),
                    c.backbone_rows.len()
                ),
            });
        }

        // current guide rows over the completion span, teacher-forced
        let mut feed = c.prompt.to_vec();
        feed.extend_from_slice(&c.completion[..t_len - 1]);
        let logits = lm::forward_on(tape, guide_cfg, guide_vars, &feed)?;
        let rows = tape.slice_rows(logits, c.prompt.len() - 1, t_len)?;
        let guide_lp = tape.log_softmax(rows, 1)?;

        // fuse with the frozen backbone rows: log_softmax(b + alpha*g)
        let mut b_flat = Vec::with_capacity(t_len * v);
        for row in c.backbone_rows {
            if row.len() != v {
                return Err(Error::Shape { op: "grpo.loss", detail: "backbone row width".into() });
            }
            b_flat.extend(row.iter().map(|&x| E::from_f64(x)));
        }
        let b_rows = tape.constant(Tensor::new(vec![t_len, v], b_flat)?);
        let scaled_guide = tape.scale(guide_lp, alpha)?;
        let fused = tape.add(b_rows, scaled_guide)?;
        let composed_rows = tape.log_softmax(fused, 1)?;
        let cur_lp = tape.gather_cols(composed_rows, c.completion)?;

        // exact composed ratio rho_t = exp(cur - old)
        let old = tape.constant(Tensor::new(
            vec![t_len],
            c.old_logprobs.iter().map(|&x| E::from_f64(x)).collect(),
        )?);
        let delta = tape.sub(cur_lp, old)?;
        let rho = tape.exp(delta)?;
        let unclipped = tape.scale(rho, c.advantage)?;
        let rho_clip = tape.clamp(rho, 1.0 - eps, 1.0 + eps)?;
        let clipped_term = tape.scale(rho_clip, c.advantage)?;
        let surrogate = tape.minimum(unclipped, clipped_term)?;
        let token_mean = tape.mean(surrogate)?;
        let mut loss_i = tape.neg(token_mean)?;

        if config.kl_coeff > 0.0 {
            let init = c.initial_logprobs.ok_or_else(|| Error::Shape {
                op: "grpo.loss",
                detail: "kl_coeff > 0 but no initial-policy log-probs".into(),
            })?;
            if init.len() != t_len {
                return Err(Error::Shape { op: "grpo.loss", detail: "initial log-prob length".into() });
            }
            let init = tape.constant(Tensor::new(
                vec![t_len],
                init.iter().map(|&x| E::from_f64(x)).collect(),
            )?);
            // per-token exp(d) - d - 1 with d = log pi_0 - log pi_phi
            let d = tape.sub(init, cur_lp)?;
            let e = tape.exp(d)?;
            let lin = tape.sub(e, d)?;
            let est = tape.add_scalar(lin, -1.0)?;
            let kl_mean = tape.mean(est)?;
            kl_sum += Elem::to_f64(tape.value(kl_mean).data()[0]);
            let weighted = tape.scale(kl_mean, config.kl_coeff)?;
            loss_i = tape.add(loss_i, weighted)?;
        }

        // diagnostics from the forward values
        let cur_vals = tape.value(cur_lp).data().to_vec();
        let guide_vals_rows = tape.value(guide_lp).data().to_vec();
        for (t, (&cur, &old)) in cur_vals.iter().zip(c.old_logprobs).enumerate() {
            let ratio = (Elem::to_f64(cur) - old).exp();
            if ratio < 1.0 - eps || ratio > 1.0 + eps {
                clipped += 1;
            }
            let g_cur = Elem::to_f64(guide_vals_rows[t * v + c.completion[t]]);
            let composed_log_ratio = Elem::to_f64(cur) - old;
            let guide_log_ratio = alpha * (g_cur - c.old_guide_logprobs[t]);
            gap_sum += (composed_log_ratio - guide_log_ratio).abs();
        }
        tokens_total += t_len;
        per_completion.push(loss_i);
    }

    let total = tape.add_n(&per_completion)?;
    let loss = tape.scale(total, 1.0 / data.len() as f64)?;
    let diag = LossDiagnostics {
        frac_clipped: clipped as f64 / tokens_total as f64,
        ratio_gap: gap_sum / tokens_total as f64,
        mean_kl: kl_sum / data.len() as f64,
    };
    Ok((loss, diag))
}

/// Per-token KL estimator exp(d) - d - 1 against a reference scoring of the
/// same completion, averaged over tokens. Non-negative by convexity.
pub fn kl_to_initial(
    traj: &Trajectory,
    current: &ComposedPolicy,
    initial: &ComposedPolicy,
) -> Result<f64> {
    let cur = crate::policy::score_completion(current, &traj.prompt, &traj.completion)?;
    let init = crate::policy::score_completion(initial, &traj.prompt, &traj.completion)?;
    if cur.composed.len() != init.composed.len() {
        return Err(Error::Shape { op: "grpo.kl_to_initial", detail: "score lengths differ".into() });
    }
    Ok(kl_estimate(&cur.composed, &init.composed))
}

/// exp(d) - d - 1 averaged; d = initial - current, both log-probs of the
/// taken token.
pub fn kl_estimate(current_lp: &[f64], initial_lp: &[f64]) -> f64 {
    if current_lp.is_empty() {
        return 0.0;
    }
    let sum: f64 = current_lp
        .iter()
        .zip(initial_lp)
        .map(|(&c, &i)| {
            let d = i - c;
            d.exp() - d - 1.0
        })
        .sum();
    sum / current_lp.len() as f64
}

/// One prompt's sampled group with rewards and advantages.
#[derive(Clone, Debug)]
pub struct CompletionGroup {
    pub prompt: PromptInstance,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub loss: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub frac_clipped: f64,
    pub ratio_gap: f64,
}

/// Mutable training state. phi_old never exists as a separate parameter set:
/// with a refresh every step, the sampling-time log-probs recorded in each
/// trajectory are the snapshot.
#[derive(Debug)]
pub struct TrainState {
    pub guide: LmParams,
    pub initial_guide: LmParams,
    pub optimizer: AdamW,
    pub step: usize,
    pub backbone_checksum: String,
    pub metrics: Vec<StepMetrics>,
    /// Raw gradient-table keys from the most recent step (tape leaf names,
    /// `guide.` prefixed); the structural no-backbone-gradients assertion
    /// inspects these.
    pub last_grad_keys: Vec<String>,
}

#[derive(Debug)]
pub struct GrpoTrainer<'a> {
    pub backbone: &'a LmParams,
    pub task: &'a TaskSpec,
    pub config: GrpoConfig,
    pub alpha: f64,
    pub state: TrainState,
}

const GUIDE_ROLE: &str = "guide";

impl<'a> GrpoTrainer<'a> {
    pub fn new(
        backbone: &'a LmParams,
        guide: LmParams,
        task: &'a TaskSpec,
        config: GrpoConfig,
    ) -> Result<Self> {
        config.validate()?;
        if backbone.trainable() {
            return Err(Error::Frozen("trainer requires a non-trainable backbone".into()));
        }
        if !guide.trainable() {
            return Err(Error::Frozen("trainer requires a trainable guide".into()));
        }
        let vocab = task.vocab();
        if backbone.config.vocab_size != vocab.size() || guide.config.vocab_size != vocab.size() {
            return Err(Error::Vocab(format!(
                "task vocab {} vs backbone {} / guide {}",
                vocab.size(),
                backbone.config.vocab_size,
                guide.config.vocab_size
            )));
        }
        let optimizer = AdamW::new(AdamWConfig::default(), guide.tensors());
        let state = TrainState {
            initial_guide: guide.clone(),
            optimizer,
            step: 0,
            backbone_checksum: backbone.checksum(),
            metrics: Vec::new(),
            last_grad_keys: Vec::new(),
            guide,
        };
        Ok(GrpoTrainer { backbone, task, config, alpha: 1.0, state })
    }

    /// Samples `prompts_per_step` groups under the current guide (which IS
    /// phi_old at this moment), then takes one optimizer step on the guide.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.state.step;
        let cfg = &self.config;
        let vocab = self.task.vocab();
        let policy = ComposedPolicy::new(
            self.backbone,
            vec![(&self.state.guide, self.alpha)],
            cfg.temperature,
            self.task.max_completion_len(),
        )?;

        // sample all groups; one derived rng stream per completion keeps the
        // result independent of scheduling
        let prompts: Vec<PromptInstance> = (0..cfg.prompts_per_step)
            .map(|j| self.task.train_prompt((step * cfg.prompts_per_step + j) as u64))
            .collect();
        let jobs: Vec<(usize, usize)> = (0..prompts.len())
            .flat_map(|j| (0..cfg.group_size).map(move |i| (j, i)))
            .collect();
        let sampled: Vec<Result<Trajectory>> = crate::par::map_slice(&jobs, |&(j, i)| {
            let mut rng = crate::rng::derive_rng(
                cfg.seed,
                "grpo-completion",
                &[step as u64, j as u64, i as u64],
            );
            sample_completion(&policy, &prompts[j].tokens, &mut rng)
        });

        let mut groups = Vec::with_capacity(prompts.len());
        let mut sampled = sampled.into_iter();
        for prompt in prompts {
            let mut trajectories = Vec::with_capacity(cfg.group_size);
            for _ in 0..cfg.group_size {
                trajectories.push(sampled.next().expect("one trajectory per job")?);
            }
            let rewards: Vec<f64> = trajectories
                .iter()
                .map(|t| {
                    let text = vocab.completion_text(&t.completion);
                    self.task.reward(&prompt, &text)
                })
                .collect();
            let advantages = normalize_advantages(&rewards)?;
            groups.push(CompletionGroup { prompt, trajectories, rewards, advantages });
        }

        // initial-policy scores only if the KL term is active
        let init_lps: Option<Vec<Vec<Vec<f64>>>> = if cfg.kl_coeff > 0.0 {
            let initial = ComposedPolicy::new(
                self.backbone,
                vec![(&self.state.initial_guide, self.alpha)],
                cfg.temperature,
                self.task.max_completion_len(),
            )?;
            let mut per_group = Vec::with_capacity(groups.len());
            for g in &groups {
                let mut per_traj = Vec::with_capacity(g.trajectories.len());
                for t in &g.trajectories {
                    let s = crate::policy::score_completion(&initial, &t.prompt, &t.completion)?;
                    per_traj.push(s.composed);
                }
                per_group.push(per_traj);
            }
            Some(per_group)
        } else {
            None
        };

        // loss tape over the guide only
        let mut tape = Tape::<f32>::new();
        let guide_vars = lm::bind(&mut tape, self.state.guide.tensors(), GUIDE_ROLE, true);
        let mut data = Vec::new();
        for (gi, g) in groups.iter().enumerate() {
            for (ti, t) in g.trajectories.iter().enumerate() {
                data.push(CompletionData {
                    prompt: &t.prompt,
                    completion: &t.completion,
                    backbone_rows: &t.backbone_rows,
                    advantage: g.advantages[ti],
                    old_logprobs: &t.composed_logprobs,
                    old_guide_logprobs: &t.guide_logprobs[0],
                    initial_logprobs: init_lps.as_ref().map(|v| v[gi][ti].as_slice()),
                });
            }
        }
        let (loss, diag) =
            grpo_loss(&mut tape, &self.state.guide.config, &guide_vars, self.alpha, &data, cfg)?;
        let loss_val = tape.value(loss).data()[0] as f64;
        if !loss_val.is_finite() {
            return Err(Error::NonFinite { op: "grpo.step" });
        }
        let grads = tape.backward(loss)?;

        // structural contract: gradient keys are exactly the guide's tensors
        let prefix = format!("{GUIDE_ROLE}.");
        let mut grad_norm_sq = 0.0f64;
        let mut stripped: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        self.state.last_grad_keys = grads.keys().cloned().collect();
        for (k, g) in grads {
            let bare = k
                .strip_prefix(&prefix)
                .ok_or_else(|| Error::Frozen(format!("gradient for non-guide tensor {k}")))?;
            grad_norm_sq += g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            stripped.insert(bare.to_string(), g);
        }
        if stripped.len() != self.state.guide.tensors().len() {
            return Err(Error::Frozen(format!(
                "gradient table has {} entries, guide has {} tensors",
                stripped.len(),
                self.state.guide.tensors().len()
            )));
        }

        let lr = lr_at(cfg, step);
        self.state.optimizer.step(self.state.guide.tensors_mut()?, &stripped, lr)?;

        if self.backbone.checksum() != self.state.backbone_checksum {
            return Err(Error::Frozen("backbone parameters changed during training".into()));
        }

        let rewards_flat: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
        let n = rewards_flat.len() as f64;
        let mean_reward = rewards_flat.iter().sum::<f64>() / n;
        let reward_std =
            (rewards_flat.iter().map(|r| (r - mean_reward).powi(2)).sum::<f64>() / n).sqrt();
        let metrics = StepMetrics {
            step,
            lr,
            mean_reward,
            reward_std,
            loss: loss_val,
            kl: diag.mean_kl,
            grad_norm: grad_norm_sq.sqrt(),
            frac_clipped: diag.frac_clipped,
            ratio_gap: diag.ratio_gap,
        };
        self.state.metrics.push(metrics);
        self.state.step += 1;
        Ok(metrics)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.state.step < self.config.max_steps {
            self.step()?;
        }
        Ok(())
    }
}

/// Convenience wrapper: train and hand back the final guide plus the full
/// metrics series.
pub fn train_guide(
    backbone: &LmParams,
    guide: LmParams,
    task: &TaskSpec,
    config: GrpoConfig,
) -> Result<(LmParams, Vec<StepMetrics>)> {
    let mut trainer = GrpoTrainer::new(backbone, guide, task, config)?;
    trainer.run()?;
    let GrpoTrainer { state, .. } = trainer;
    Ok((state.guide, state.metrics))
}
