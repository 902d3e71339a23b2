//! Composed guided decoding.
//!
//! The composed policy adds each guide's per-token log-probabilities, scaled
//! by its weight, to the frozen backbone's and renormalizes:
//! log pi(v) = log_softmax(log pi_b(v) + sum_i alpha_i * log pi_r_i(v)).
//! Sampling applies a temperature to that fused row; every log-prob that is
//! recorded, scored, or differentiated is untempered.
//!
//! All next-token rows are computed in f64 from the models' f32 logits, so
//! a row depends only on the prefix fed in — teacher-forced scoring of a
//! sampled trajectory reproduces the sampling-time rows bit for bit.

use rand::Rng;

use crate::lm::{forward_logits, LmParams, EOS};
use crate::numkit::{log_softmax_1d, logsumexp};
use crate::{Error, Result};

/// Frozen backbone plus weighted guides. Guides may be trainable (GRPO
/// samples through the current guide); the backbone never is.
#[derive(Debug)]
pub struct ComposedPolicy<'a> {
    pub backbone: &'a LmParams,
    pub guides: Vec<(&'a LmParams, f64)>,
    pub temperature: f64,
    pub max_completion_len: usize,
}

impl<'a> ComposedPolicy<'a> {
    pub fn new(
        backbone: &'a LmParams,
        guides: Vec<(&'a LmParams, f64)>,
        temperature: f64,
        max_completion_len: usize,
    ) -> Result<Self> {
        if backbone.trainable() {
            return Err(Error::Frozen("composed policy requires a non-trainable backbone".into()));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Config(format!("temperature {temperature} must be positive")));
        }
        if max_completion_len == 0 {
            return Err(Error::Config("max_completion_len must be positive".into()));
        }
        let v = backbone.config.vocab_size;
        for (g, alpha) in &guides {
            if g.config.vocab_size != v {
                return Err(Error::Vocab(format!(
                    "guide vocab {} differs from backbone vocab {v}; composition requires a shared tokenizer",
                    g.config.vocab_size
                )));
            }
            if !(*alpha >= 0.0) {
                return Err(Error::Config(format!("guide weight {alpha} must be >= 0")));
            }
        }
        Ok(ComposedPolicy { backbone, guides, temperature, max_completion_len })
    }

    /// Longest prefix any participating model can consume.
    pub fn max_feed_len(&self) -> usize {
        self.guides
            .iter()
            .map(|(g, _)| g.config.context_length)
            .fold(self.backbone.config.context_length, usize::min)
    }

    fn vocab_size(&self) -> usize {
        self.backbone.config.vocab_size
    }
}

/// One decoded completion with everything the trainer needs to score it
/// again: per-token log-probs under the composed policy and under each guide
/// alone, plus the full backbone rows (the frozen half of every later
/// re-scoring, kept so training never re-runs the backbone).
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub prompt: Vec<usize>,
    pub completion: Vec<usize>,
    pub composed_logprobs: Vec<f64>,
    pub guide_logprobs: Vec<Vec<f64>>,
    pub ended_with_eos: bool,
    pub backbone_rows: Vec<Vec<f64>>,
}

/// Teacher-forced scores for a given (prompt, completion) pair. `log_norm`
/// is the per-step composed normalizer log Z'; the guide-only ratio
/// diagnostic needs it alongside the per-guide terms.
#[derive(Clone, Debug)]
pub struct Scored {
    pub composed: Vec<f64>,
    pub per_guide: Vec<Vec<f64>>,
    pub backbone: Vec<f64>,
    pub log_norm: Vec<f64>,
}

/// Fuses one next-token row: log_softmax(backbone + sum alpha * guide).
/// Rows may be normalized log-probs or raw logits; per-row constants cancel.
/// With no contributing guide (none given, or all alpha = 0) the backbone
/// row is returned unchanged, making the reduction to the backbone exact.
pub fn compose_step(backbone_row: &[f64], guide_rows: &[(&[f64], f64)]) -> Result<Vec<f64>> {
    let mut fused = backbone_row.to_vec();
    let mut touched = false;
    for (row, alpha) in guide_rows {
        if row.len() != backbone_row.len() {
            return Err(Error::Shape {
                op: "policy.compose_step",
                detail: format!("guide row len {} vs backbone {}", row.len(), backbone_row.len()),
            });
        }
        if !(*alpha >= 0.0) {
            return Err(Error::Config(format!("guide weight {alpha} must be >= 0")));
        }
        if *alpha == 0.0 {
            continue;
        }
        touched = true;
        for (f, r) in fused.iter_mut().zip(*row) {
            *f += alpha * r;
        }
    }
    if !touched {
        return Ok(fused);
    }
    Ok(log_softmax_1d(&fused))
}

/// Normalized next-token log-probs of one model after `feed`, in f64.
pub fn last_row_logprobs(params: &LmParams, feed: &[usize]) -> Result<Vec<f64>> {
    let logits = forward_logits(params, feed)?;
    let v = params.config.vocab_size;
    let row: Vec<f64> =
        logits.data()[(feed.len() - 1) * v..feed.len() * v].iter().map(|&x| x as f64).collect();
    Ok(log_softmax_1d(&row))
}

/// Multinomial draw by CDF walk; `u` in [0,1). Accumulated rounding can
/// leave the total slightly under 1, in which case the last symbol wins.
fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn decode_with(
    policy: &ComposedPolicy,
    prompt: &[usize],
    mut choose: impl FnMut(&[f64]) -> usize,
) -> Result<Trajectory> {
    if prompt.is_empty() {
        return Err(Error::Shape { op: "policy.decode", detail: "empty prompt".into() });
    }
    let max_feed = policy.max_feed_len();
    if prompt.len() > max_feed {
        return Err(Error::Bound(format!(
            "prompt length {} leaves no room to decode within context {max_feed}",
            prompt.len()
        )));
    }
    let mut feed = prompt.to_vec();
    let mut traj = Trajectory {
        prompt: prompt.to_vec(),
        completion: Vec::new(),
        composed_logprobs: Vec::new(),
        guide_logprobs: vec![Vec::new(); policy.guides.len()],
        ended_with_eos: false,
        backbone_rows: Vec::new(),
    };
    while traj.completion.len() < policy.max_completion_len && feed.len() <= max_feed {
        let brow = last_row_logprobs(policy.backbone, &feed)?;
        let grows: Vec<Vec<f64>> = policy
            .guides
            .iter()
            .map(|(g, _)| last_row_logprobs(g, &feed))
            .collect::<Result<_>>()?;
        let pairs: Vec<(&[f64], f64)> = grows
            .iter()
            .zip(&policy.guides)
            .map(|(r, (_, a))| (r.as_slice(), *a))
            .collect();
        let fused = compose_step(&brow, &pairs)?;
        let tok = choose(&fused);
        traj.composed_logprobs.push(fused[tok]);
        for (i, g) in grows.iter().enumerate() {
            traj.guide_logprobs[i].push(g[tok]);
        }
        traj.backbone_rows.push(brow);
        traj.completion.push(tok);
        feed.push(tok);
        if tok == EOS {
            traj.ended_with_eos = true;
            break;
        }
    }
    Ok(traj)
}

/// Samples until EOS, the completion cap, or context exhaustion. The drawn
/// distribution is softmax(fused row / temperature); recorded log-probs are
/// untempered. Deterministic given the rng stream.
pub fn sample_completion(
    policy: &ComposedPolicy,
    prompt: &[usize],
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let tau = policy.temperature;
    decode_with(policy, prompt, |fused| {
        let tempered: Vec<f64> = fused.iter().map(|&lp| lp / tau).collect();
        let tempered = log_softmax_1d(&tempered);
        let probs: Vec<f64> = tempered.iter().map(|&lp| lp.exp()).collect();
        draw(&probs, rng.random::<f64>())
    })
}

/// Argmax decoding; ties broken toward the lowest token id.
pub fn decode_greedy(policy: &ComposedPolicy, prompt: &[usize]) -> Result<Trajectory> {
    decode_with(policy, prompt, argmax_lowest)
}

/// Full normalized next-token rows of one model over every completion
/// position, teacher-forced in a single forward pass.
pub fn row_logprobs(
    params: &LmParams,
    prompt: &[usize],
    completion: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if prompt.is_empty() || completion.is_empty() {
        return Err(Error::Shape { op: "policy.row_logprobs", detail: "empty sequence".into() });
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(completion);
    let feed = &seq[..seq.len() - 1];
    let logits = forward_logits(params, feed)?;
    let v = params.config.vocab_size;
    let mut rows = Vec::with_capacity(completion.len());
    for t in 0..completion.len() {
        let at = prompt.len() + t - 1;
        let row: Vec<f64> = logits.data()[at * v..(at + 1) * v].iter().map(|&x| x as f64).collect();
        rows.push(log_softmax_1d(&row));
    }
    Ok(rows)
}

/// Teacher-forced scoring of a completion under the composed policy and
/// each participant. Summing `composed` gives log pi(y|x) exactly by the
/// autoregressive factorization.
pub fn score_completion(
    policy: &ComposedPolicy,
    prompt: &[usize],
    completion: &[usize],
) -> Result<Scored> {
    if completion.is_empty() {
        return Ok(Scored {
            composed: Vec::new(),
            per_guide: vec![Vec::new(); policy.guides.len()],
            backbone: Vec::new(),
            log_norm: Vec::new(),
        });
    }
    if prompt.len() + completion.len() > policy.max_feed_len() + 1 {
        return Err(Error::Bound(format!(
            "sequence length {} exceeds scoring window {}",
            prompt.len() + completion.len(),
            policy.max_feed_len() + 1
        )));
    }
    let brows = row_logprobs(policy.backbone, prompt, completion)?;
    let grows: Vec<Vec<Vec<f64>>> = policy
        .guides
        .iter()
        .map(|(g, _)| row_logprobs(g, prompt, completion))
        .collect::<Result<_>>()?;

    let v = policy.vocab_size();
    let mut out = Scored {
        composed: Vec::with_capacity(completion.len()),
        per_guide: vec![Vec::with_capacity(completion.len()); policy.guides.len()],
        backbone: Vec::with_capacity(completion.len()),
        log_norm: Vec::with_capacity(completion.len()),
    };
    for (t, &tok) in completion.iter().enumerate() {
        if tok >= v {
            return Err(Error::Vocab(format!("completion token {tok} out of range")));
        }
        let mut fused: Vec<f64> = brows[t].clone();
        for (gi, (_, alpha)) in policy.guides.iter().enumerate() {
            if *alpha != 0.0 {
                for (f, r) in fused.iter_mut().zip(&grows[gi][t]) {
                    *f += alpha * r;
                }
            }
        }
        let log_z = if policy.guides.iter().all(|(_, a)| *a == 0.0) {
            0.0
        } else {
            logsumexp(&fused)
        };
        out.composed.push(fused[tok] - log_z);
        out.backbone.push(brows[t][tok]);
        for (gi, g_rows) in grows.iter().enumerate() {
            out.per_guide[gi].push(g_rows[t][tok]);
        }
        out.log_norm.push(log_z);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{init_params, sequence_logprob, LmConfig, Vocab, BOS};
    use crate::rng::derive_rng;

    fn micro_model(seed: u64, layers: usize, d: usize) -> LmParams {
        let mut p = init_params(&LmConfig {
            vocab_size: Vocab::micro().size(),
            context_length: 16,
            n_layers: layers,
            d_model: d,
            n_heads: 2,
            d_ff: 4 * d,
            seed,
        })
        .unwrap();
        p.set_trainable(false);
        p
    }

    #[test]
    fn compose_step_examples() {
        // [TRIVIAL] no guides: exact pass-through
        let b = vec![-1.2, -0.4, -3.0];
        assert_eq!(compose_step(&b, &[]).unwrap(), b);
        // [TRIVIAL] all-zero weights: exact pass-through
        let g = vec![-0.1, -2.0, -2.5];
        assert_eq!(compose_step(&b, &[(&g, 0.0)]).unwrap(), b);

        // [TRIVIAL] uniform guide is a constant shift: no-op within 1e-6
        let u = vec![-(3.0f64).ln(); 3];
        let before = log_softmax_1d(&b);
        let after = compose_step(&before, &[(&u, 1.7)]).unwrap();
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-6);
        }

        // [DERIVED] vocab 2, uniform backbone, guide ln[0.9, 0.1], alpha 1
        let b2 = vec![(0.5f64).ln(), (0.5f64).ln()];
        let g2 = vec![(0.9f64).ln(), (0.1f64).ln()];
        let out = compose_step(&b2, &[(&g2, 1.0)]).unwrap();
        assert!((out[0] - (0.9f64).ln()).abs() < 1e-12);
        assert!((out[1] - (0.1f64).ln()).abs() < 1e-12);

        assert_eq!(compose_step(&b, &[(&b2, 1.0)]).unwrap_err().code(), "shape");
        assert_eq!(compose_step(&b, &[(&g, -0.5)]).unwrap_err().code(), "config");
    }

    /// Raw-logit fusion equals log-softmax fusion: per-row constants cancel.
    #[test]
    fn raw_logit_equivalence() {
        let raw_b = vec![0.3, -1.1, 2.0, 0.7];
        let raw_g = vec![-0.2, 0.9, 0.1, -1.5];
        let a = compose_step(&raw_b, &[(&raw_g, 0.7)]).unwrap();
        let (nb, ng) = (log_softmax_1d(&raw_b), log_softmax_1d(&raw_g));
        let b = compose_step(&nb, &[(ng.as_slice(), 0.7)]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    /// Monotone steering: the composed probability of the guide-preferred
    /// symbol is non-decreasing in alpha on a 2-symbol vocabulary.
    #[test]
    fn monotone_in_alpha() {
        let b = vec![(0.7f64).ln(), (0.3f64).ln()];
        let g = vec![(0.2f64).ln(), (0.8f64).ln()];
        let mut last = -1.0;
        for alpha in [0.0, 0.25, 0.5, 1.0, 2.0, 4.0] {
            let out = compose_step(&b, &[(&g, alpha)]).unwrap();
            let p1 = out[1].exp();
            assert!(p1 >= last, "alpha {alpha}: {p1} < {last}");
            last = p1;
        }
    }

    #[test]
    fn policy_construction_contracts() {
        let backbone = micro_model(1, 1, 16);
        let mut trainable = micro_model(2, 1, 16);
        trainable.set_trainable(true);
        // trainable backbone refused
        assert_eq!(
            ComposedPolicy::new(&trainable, vec![], 1.0, 4).unwrap_err().code(),
            "frozen"
        );
        // trainable guide is fine (GRPO samples through the live guide)
        assert!(ComposedPolicy::new(&backbone, vec![(&trainable, 1.0)], 1.0, 4).is_ok());
        assert_eq!(
            ComposedPolicy::new(&backbone, vec![(&trainable, -1.0)], 1.0, 4).unwrap_err().code(),
            "config"
        );
        assert_eq!(
            ComposedPolicy::new(&backbone, vec![], 0.0, 4).unwrap_err().code(),
            "config"
        );
        let lab = init_params(&LmConfig {
            vocab_size: 43,
            context_length: 16,
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 64,
            seed: 3,
        })
        .unwrap();
        assert_eq!(
            ComposedPolicy::new(&backbone, vec![(&lab, 1.0)], 1.0, 4).unwrap_err().code(),
            "vocab"
        );
    }

    /// [TRIVIAL] guides empty: greedy decode and scoring reduce to the
    /// backbone exactly.
    #[test]
    fn empty_guides_reduce_to_backbone() {
        let backbone = micro_model(5, 2, 16);
        let policy = ComposedPolicy::new(&backbone, vec![], 1.0, 4).unwrap();
        let prompt = [BOS, 4, 5, 6];
        let traj = decode_greedy(&policy, &prompt).unwrap();
        let scored = score_completion(&policy, &prompt, &traj.completion).unwrap();
        let (total, per) = sequence_logprob(&backbone, &prompt, &traj.completion).unwrap();
        assert_eq!(scored.composed, per, "composed equals backbone per-token exactly");
        assert_eq!(scored.composed.iter().sum::<f64>(), total);
        assert!(scored.log_norm.iter().all(|&z| z == 0.0));
        assert_eq!(traj.composed_logprobs, per);
    }

    /// Scoring a sampled trajectory reproduces its recorded log-probs; the
    /// causal transformer makes this exact, not merely within 1e-5.
    #[test]
    fn scoring_matches_sampling_records() {
        let backbone = micro_model(7, 2, 16);
        let guide = micro_model(8, 1, 16);
        let policy = ComposedPolicy::new(&backbone, vec![(&guide, 0.8)], 0.7, 4).unwrap();
        let prompt = [BOS, 3, 4];
        let mut rng = derive_rng(42, "traj", &[]);
        let traj = sample_completion(&policy, &prompt, &mut rng).unwrap();
        assert!(!traj.completion.is_empty());
        assert!(traj.composed_logprobs.iter().all(|&lp| lp <= 0.0));
        assert_eq!(traj.composed_logprobs.len(), traj.completion.len());

        let scored = score_completion(&policy, &prompt, &traj.completion).unwrap();
        for (a, b) in traj.composed_logprobs.iter().zip(&scored.composed) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for (gi, g) in traj.guide_logprobs.iter().enumerate() {
            for (a, b) in g.iter().zip(&scored.per_guide[gi]) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        // determinism: same stream, same trajectory
        let mut rng2 = derive_rng(42, "traj", &[]);
        let traj2 = sample_completion(&policy, &prompt, &mut rng2).unwrap();
        assert_eq!(traj.completion, traj2.completion);
        assert_eq!(traj.composed_logprobs, traj2.composed_logprobs);
    }

    /// [DERIVED] enumeration oracle: composed sequence probabilities over
    /// all complete sequences sum to 1.
    #[test]
    fn composed_sequence_distribution_sums_to_one() {
        let backbone = micro_model(9, 1, 16);
        let guide = micro_model(10, 1, 16);
        let policy = ComposedPolicy::new(&backbone, vec![(&guide, 1.3)], 1.0, 3).unwrap();
        let prompt = [BOS, 5, 3];
        let v = backbone.config.vocab_size;
        let mut total = 0.0f64;
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(seq) = stack.pop() {
            if seq.last() == Some(&EOS) || seq.len() == policy.max_completion_len {
                let scored = score_completion(&policy, &prompt, &seq).unwrap();
                total += scored.composed.iter().sum::<f64>().exp();
                continue;
            }
            for tok in 0..v {
                let mut next = seq.clone();
                next.push(tok);
                stack.push(next);
            }
        }
        assert!((total - 1.0).abs() < 1e-4, "sequence probabilities sum to {total}");
    }

    /// [DERIVED] Monte-Carlo frequency oracle: first-token frequencies over
    /// 1e5 draws match the composed distribution within 3 sigma.
    #[test]
    fn sampled_frequencies_match_composed_distribution() {
        let backbone = micro_model(11, 1, 16);
        let guide = micro_model(12, 1, 16);
        let policy = ComposedPolicy::new(&backbone, vec![(&guide, 0.7)], 1.0, 1).unwrap();
        let prompt = [BOS, 3, 5, 4];
        let scored_probs: Vec<f64> = {
            let brow = last_row_logprobs(&backbone, &prompt).unwrap();
            let grow = last_row_logprobs(&guide, &prompt).unwrap();
            compose_step(&brow, &[(grow.as_slice(), 0.7)])
                .unwrap()
                .iter()
                .map(|&lp| lp.exp())
                .collect()
        };
        const N: usize = 100_000;
        let mut counts = vec![0usize; scored_probs.len()];
        let mut rng = derive_rng(7, "mc-freq", &[]);
        for _ in 0..N {
            let t = sample_completion(&policy, &prompt, &mut rng).unwrap();
            counts[t.completion[0]] += 1;
        }
        for (tok, (&c, &p)) in counts.iter().zip(&scored_probs).enumerate() {
            let sigma = (p * (1.0 - p) / N as f64).sqrt();
            let diff = (c as f64 / N as f64 - p).abs();
            assert!(diff <= 3.0 * sigma + 1e-9, "token {tok}: |{diff}| > 3*{sigma}");
        }
    }

    /// Near-zero temperature reproduces greedy decoding.
    #[test]
    fn tiny_temperature_matches_greedy() {
        let backbone = micro_model(13, 2, 16);
        let guide = micro_model(14, 1, 16);
        let policy = ComposedPolicy::new(&backbone, vec![(&guide, 1.0)], 1e-4, 4).unwrap();
        let prompt = [BOS, 6, 3];
        let greedy = decode_greedy(&policy, &prompt).unwrap();
        let mut rng = derive_rng(21, "tau0", &[]);
        let sampled = sample_completion(&policy, &prompt, &mut rng).unwrap();
        assert_eq!(greedy.completion, sampled.completion);
    }

    #[test]
    fn context_overflow_is_an_error() {
        let backbone = micro_model(15, 1, 16);
        let policy = ComposedPolicy::new(&backbone, vec![], 1.0, 4).unwrap();
        let long = vec![3usize; 17];
        assert_eq!(decode_greedy(&policy, &long).unwrap_err().code(), "bound");
        // max length reached without EOS is not an error
        let prompt = vec![3usize; 14];
        let t = decode_greedy(&policy, &prompt).unwrap();
        assert!(t.completion.len() <= 3);
    }

    #[test]
    fn greedy_tie_breaks_to_lowest_id() {
        assert_eq!(argmax_lowest(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax_lowest(&[0.1, 0.7, 0.7]), 1);
    }
}
