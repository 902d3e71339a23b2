//! Minimal numeric engine: dense f32/f64 tensors, a reverse-mode tape,
//! AdamW, and a finite-difference gradient checker.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{GradMap, Tape, Var};
pub use tensor::{Elem, Tensor};

/// Numerically stable log(sum(exp(xs))) in f64.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    let s: f64 = xs.iter().map(|x| (x - mx).exp()).sum();
    mx + s.ln()
}

/// Log-softmax of one row in f64. Used by the inference-side paths (sampling,
/// oracles) that never touch the tape.
pub fn log_softmax_1d(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    /// Finite-difference validation of every differentiable op on small random
    /// tensors. This is the oracle that the transformer stack leans on.
    #[test]
    fn all_ops_pass_finite_difference_check() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(7, "numkit-op-fd", &[]);
        let mut rand_t = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            Tensor::new(shape, data).unwrap()
        };

        let mut params = BTreeMap::new();
        params.insert("a".to_string(), rand_t(vec![3, 4]));
        params.insert("b".to_string(), rand_t(vec![4, 3]));
        params.insert("v".to_string(), rand_t(vec![4]));
        params.insert("g".to_string(), rand_t(vec![4]));
        params.insert("s".to_string(), rand_t(vec![3, 3]));

        let report = grad_check(
            |tape, vars| {
                let (a, b, v, g, s) = (vars["a"], vars["b"], vars["v"], vars["g"], vars["s"]);
                // matmul + transpose + add_row + layer_norm
                let bt = tape.transpose(b)?; // [3,4]
                let prod = tape.matmul(a, b)?; // [3,3]
                let mixed = tape.add(prod, s)?;
                let att = tape.causal_softmax(mixed)?;
                let ctx = tape.matmul(att, bt)?; // [3,4]
                let biased = tape.add_row(ctx, v)?;
                let normed = tape.layer_norm(biased, g, v, 1e-5)?;
                let act = tape.gelu(normed)?;
                let ls = tape.log_softmax(act, 1)?;
                let picked = tape.gather_cols(ls, &[0, 2, 1])?;
                // element-wise tail: exp, clamp, minimum, arithmetic
                let e = tape.exp(picked)?;
                let c = tape.clamp(e, 0.25, 1.75)?;
                let m = tape.minimum(e, c)?;
                let scaled = tape.scale(m, 0.7)?;
                let shifted = tape.add_scalar(scaled, -0.1)?;
                let neg = tape.neg(shifted)?;
                let diff = tape.sub(neg, picked)?;
                let sq = tape.mul(diff, diff)?;
                // slicing path
                let part = tape.slice_cols(ls, 1, 2)?;
                let part2 = tape.slice_rows(ls, 0, 2)?;
                let joined = tape.concat_cols(&[part, part])?;
                let js = tape.sum(joined)?;
                let p2 = tape.sum(part2)?;
                let sm = tape.mean(sq)?;
                let tot = tape.add_n(&[js, p2, sm])?;
                // embedding path
                let emb = tape.embedding(b, &[0, 3, 3])?;
                let es = tape.sum(emb)?;
                tape.add(tot, es)
            },
            &params,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(
            report.pass,
            "op finite-difference check failed: max rel err {} in {:?}",
            report.max_rel_err,
            report.entries
        );
    }

    #[test]
    fn logsumexp_handles_large_magnitudes() {
        let v = logsumexp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + (2.0f64).ln())).abs() < 1e-9);
        let row = log_softmax_1d(&[-1e9, 0.0]);
        assert!((row[1] - 0.0).abs() < 1e-12);
    }
}
