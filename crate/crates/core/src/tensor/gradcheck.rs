//! Finite-difference gradient checking.
//!
//! [`gradient_check`] compares the tape's analytic gradients against central
//! differences `(f(x+h) - f(x-h)) / 2h` on a seeded random subsample of each
//! parameter's entries. It runs in `f64` (the engine is generic over the
//! scalar type precisely so this check is meaningful: in `f32` the
//! differencing noise would swamp the comparison).

use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::param::ParamSet;
use super::tape::{NodeId, Tape};
use crate::{DetRng, Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Per-parameter result of a gradient check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    /// Parameter name.
    pub name: String,
    /// Largest relative error among checked entries.
    pub max_rel_err: f64,
    /// Number of entries checked.
    pub checked: usize,
}

/// Result of [`gradient_check`] across all trainable parameters.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// One entry per trainable parameter.
    pub per_param: Vec<ParamCheck>,
    /// Largest relative error overall.
    pub max_rel_err: f64,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.per_param {
            writeln!(f, "  {:<40} max_rel_err={:.3e} ({} entries)", p.name, p.max_rel_err, p.checked)?;
        }
        write!(f, "  overall max_rel_err={:.3e}", self.max_rel_err)
    }
}

/// Compare analytic and central-difference gradients of a scalar loss.
///
/// `f` builds the loss on a fresh tape from the current parameter values; it
/// must be deterministic (same parameters, same loss). Up to
/// `samples_per_param` entries of each trainable parameter are perturbed by
/// `±h`; the relative error of entry `i` is
/// `|a_i - fd_i| / max(|a_i|, |fd_i|, 1e-5)`, where the floor keeps
/// near-zero gradients from amplifying differencing noise.
pub fn gradient_check<F>(
    params: &mut ParamSet<f64>,
    mut f: F,
    samples_per_param: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamSet<f64>) -> Result<NodeId>,
{
    if samples_per_param == 0 {
        return Err(Error::Usage("gradient_check: samples_per_param must be positive".into()));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Usage(format!("gradient_check: invalid step {h}")));
    }
    let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect();
    if ids.is_empty() {
        return Err(Error::Usage("gradient_check: no trainable parameters".into()));
    }

    // Analytic pass.
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Usage("gradient_check: loss must be scalar".into()));
    }
    if !tape.value(loss).is_finite() {
        return Err(Error::Degenerate("gradient_check: loss is not finite".into()));
    }
    tape.backward(loss)?;
    tape.apply_grads(params)?;
    let analytic: Vec<_> = ids.iter().map(|&id| params.grad(id).clone()).collect();

    let eval = |params: &ParamSet<f64>, f: &mut F| -> Result<f64> {
        let mut tape = Tape::inference();
        let loss = f(&mut tape, params)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut rng = DetRng::seed_from_u64(seed);
    let mut per_param = Vec::with_capacity(ids.len());
    let mut overall: f64 = 0.0;
    for (slot, &id) in ids.iter().enumerate() {
        let n = params.value(id).numel();
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        indices.truncate(samples_per_param.min(n));

        let mut max_rel: f64 = 0.0;
        for &i in &indices {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + h;
            let f_plus = eval(params, &mut f)?;
            params.value_mut(id).data_mut()[i] = orig - h;
            let f_minus = eval(params, &mut f)?;
            params.value_mut(id).data_mut()[i] = orig;

            let fd = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[slot].data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
            max_rel = max_rel.max(rel);
        }
        overall = overall.max(max_rel);
        per_param.push(ParamCheck {
            name: params.get(id).name().to_string(),
            max_rel_err: max_rel,
            checked: indices.len(),
        });
    }
    params.zero_grads();
    Ok(GradCheckReport { per_param, max_rel_err: overall })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::nn::{
        additive_attention_pool, gru_forward, multi_head_self_attention, AddAttParams, GruParams,
        MhsaParams,
    };
    use crate::tensor::param::ParamBuilder;
    use crate::tensor::Tensor;

    fn rand_input(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = DetRng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_tanh_listwise_chain_passes() {
        let mut params = ParamSet::new();
        let mut rng = DetRng::seed_from_u64(1);
        let mut pb = ParamBuilder::init(&mut params, &mut rng);
        let w = pb.param("w", &[4, 5], 4).unwrap();
        let b = pb.param("b", &[1, 5], 5).unwrap();
        let x = rand_input(1, 4, 2);

        let report = gradient_check(
            &mut params,
            |tape, set| {
                let xn = tape.input(x.clone());
                let wn = tape.param(set, w);
                let bn = tape.param(set, b);
                let h = tape.matmul(xn, wn)?;
                let h = tape.add_row(h, bn)?;
                let scores = tape.tanh(h)?;
                tape.listwise_ce(scores, 2)
            },
            50,
            DEFAULT_STEP,
            7,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "report:\n{report}");
    }

    #[test]
    fn relu_conv_chain_passes() {
        let mut params = ParamSet::new();
        let mut rng = DetRng::seed_from_u64(3);
        let mut pb = ParamBuilder::init(&mut params, &mut rng);
        let k = pb.param("k", &[3, 4, 5], 12).unwrap();
        let b = pb.param("b", &[1, 5], 5).unwrap();
        let x = rand_input(6, 4, 4);

        let report = gradient_check(
            &mut params,
            |tape, set| {
                let xn = tape.input(x.clone());
                let kn = tape.param(set, k);
                let bn = tape.param(set, b);
                let y = tape.conv1d_same(xn, kn, bn)?;
                let y = tape.relu(y)?;
                tape.sum(y)
            },
            80,
            DEFAULT_STEP,
            8,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "report:\n{report}");
    }

    #[test]
    fn additive_attention_passes() {
        let mut params = ParamSet::new();
        let mut rng = DetRng::seed_from_u64(5);
        let mut pb = ParamBuilder::init(&mut params, &mut rng);
        let att = AddAttParams::build(&mut pb, "att", 4, 3).unwrap();
        let x = rand_input(5, 4, 6);
        let mask = [true, true, false, true, true];

        let report = gradient_check(
            &mut params,
            |tape, set| {
                let xn = tape.input(x.clone());
                let (pooled, _) = additive_attention_pool(tape, set, xn, &mask, &att, None)?;
                let sq = tape.mul(pooled, pooled)?;
                tape.sum(sq)
            },
            100,
            DEFAULT_STEP,
            9,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "report:\n{report}");
    }

    #[test]
    fn self_attention_passes() {
        let mut params = ParamSet::new();
        let mut rng = DetRng::seed_from_u64(11);
        let mut pb = ParamBuilder::init(&mut params, &mut rng);
        let sa = MhsaParams::build(&mut pb, "sa", 4, 6, 2).unwrap();
        let x = rand_input(5, 4, 12);
        let mask = [true, false, true, true, true];

        let report = gradient_check(
            &mut params,
            |tape, set| {
                let xn = tape.input(x.clone());
                let y = multi_head_self_attention(tape, set, xn, &mask, &sa)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            100,
            DEFAULT_STEP,
            13,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "report:\n{report}");
    }

    #[test]
    fn gru_passes() {
        let mut params = ParamSet::new();
        let mut rng = DetRng::seed_from_u64(15);
        let mut pb = ParamBuilder::init(&mut params, &mut rng);
        let gru = GruParams::build(&mut pb, "gru", 3, 4).unwrap();
        let x = rand_input(5, 3, 16);
        let h0 = rand_input(1, 4, 17);
        let mask = [true, true, false, true, true];

        let report = gradient_check(
            &mut params,
            |tape, set| {
                let xn = tape.input(x.clone());
                let h0n = tape.input(h0.clone());
                let (_, last) = gru_forward(tape, set, xn, &mask, h0n, &gru)?;
                let sq = tape.mul(last, last)?;
                tape.sum(sq)
            },
            100,
            DEFAULT_STEP,
            19,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "report:\n{report}");
    }

    #[test]
    fn embedding_with_padding_passes() {
        let mut params = ParamSet::new();
        let mut rng = DetRng::seed_from_u64(21);
        let mut pb = ParamBuilder::init(&mut params, &mut rng);
        let table = pb.param("emb", &[7, 3], 3).unwrap();
        let w = pb.param("w", &[3, 4], 3).unwrap();
        // Sequence with padding (index 0) in the middle and at the end.
        let seq = [2usize, 5, 0, 6, 0];

        let report = gradient_check(
            &mut params,
            |tape, set| {
                let tn = tape.param(set, table);
                let wn = tape.param(set, w);
                let e = tape.embed(tn, &seq, Some(0))?;
                let y = tape.matmul(e, wn)?;
                let y = tape.tanh(y)?;
                tape.sum(y)
            },
            100,
            DEFAULT_STEP,
            23,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "report:\n{report}");
    }

    #[test]
    fn rejects_zero_samples() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::scalar(1.0), true).unwrap();
        let err =
            gradient_check(&mut params, |tape, _| Ok(tape.input(Tensor::scalar(0.0))), 0, 1e-5, 1)
                .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
