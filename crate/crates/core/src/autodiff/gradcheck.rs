use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, Var};

/// Relative errors divide by `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;
/// One-sided slopes disagreeing by more than this (relative, floored at 1)
/// mark a non-smooth point.
const KINK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Elements skipped because a kink lies within epsilon.
    pub excluded: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares tape gradients of `f` against central differences over every
/// element of every input. Non-scalar outputs are reduced by a fixed
/// random projection.
pub fn grad_check<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, epsilon, usize::MAX, 0)
}

/// Like [`grad_check`] but checks at most `per_input` randomly chosen
/// elements of each input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    epsilon: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut projection: Option<Vec<f64>> = None;
    let mut eval = |inputs: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let mut out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            let n = tape.value(out).len();
            let w = projection.get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
            });
            out = tape.weighted_sum(out, w)?;
        }
        let value = tape.value(out).item();
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(out)?;
        let grads = vars
            .iter()
            .map(|&v| g.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
            .collect();
        Ok((value, grads))
    };

    let (f0, analytic) = eval(inputs, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: 0,
    };
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let elems: Vec<usize> = if per_input >= t.len() {
            (0..t.len()).collect()
        } else {
            let mut e = sample(&mut rng, t.len(), per_input).into_vec();
            e.sort_unstable();
            e
        };
        for j in elems {
            let x = t.data()[j];
            work[ti].data_mut()[j] = x + epsilon;
            let fp = eval(&work, false)?.0;
            work[ti].data_mut()[j] = x - epsilon;
            let fm = eval(&work, false)?.0;
            work[ti].data_mut()[j] = x;

            let central = (fp - fm) / (2.0 * epsilon);
            let forward = (fp - f0) / epsilon;
            let backward = (f0 - fm) / epsilon;
            if (forward - backward).abs() > KINK_TOLERANCE * central.abs().max(1.0) {
                report.excluded += 1;
                continue;
            }
            let a = analytic[ti].data()[j];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((ti, j));
            }
        }
    }
    Ok(report)
}
