//! Finite-difference gradient checking and random graph generation.
//!
//! Used by the test suites to compare tape gradients against central
//! differences, both on randomly composed graphs and on the attack objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Below this magnitude a gradient entry is compared absolutely.
pub const SMALL: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

/// Central differences of a scalar function, one coordinate at a time.
pub fn central_difference(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.dims().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Entries violating the tolerance: relative error above [`REL_TOL`], or an
/// absolute error above [`ABS_TOL`] when both values are below [`SMALL`].
pub fn mismatches(analytic: &Tensor, numeric: &Tensor) -> Vec<Mismatch> {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .enumerate()
        .filter(|(_, (&a, &n))| {
            let scale = a.abs().max(n.abs());
            let err = (a - n).abs();
            if scale < SMALL {
                err > ABS_TOL
            } else {
                err / scale > REL_TOL
            }
        })
        .map(|(index, (&analytic, &numeric))| Mismatch {
            index,
            analytic,
            numeric,
        })
        .collect()
}

#[derive(Clone, Debug)]
enum Step {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize, f64),
    Tanh(usize),
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Normalize(usize),
    MaxConst(usize, f64),
    /// Multiply by a constant `[n, n]` matrix.
    MatmulConst(usize, usize),
    /// Affine map with the trainable weight and bias inputs.
    AffineParam(usize),
    /// Replaces `a[0]` with `tanh(a[0] * sqrt(||a||^2 + 1))`, exercising
    /// gather, sqrt and concat.
    NormGate(usize),
}

/// A randomly composed differentiable graph over vectors of length `n`.
///
/// Inputs are two vectors `x`, `y` of length `n`, a weight `[n, n]` and a bias
/// `[n]`; the root is `sum(r * v)` over a few late nodes `v` with fixed random
/// coefficient vectors `r`.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub n: usize,
    steps: Vec<Step>,
    matrices: Vec<Tensor>,
    readout: Vec<(usize, Tensor)>,
    pub inputs: Vec<Tensor>,
}

impl RandomGraph {
    /// Draws a graph with at most `max_nodes` tape nodes, inputs in `[-2, 2]`.
    pub fn generate(seed: u64, max_nodes: usize) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=5);
        let vec = |rng: &mut ChaCha20Rng, len: usize| {
            Tensor::vector((0..len).map(|_| rng.random_range(-2.0..2.0)).collect())
        };
        let inputs = vec![
            vec(&mut rng, n),
            vec(&mut rng, n),
            Tensor::new(vec![n, n], (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            vec(&mut rng, n),
        ];
        // Each step costs at most a handful of nodes; keep well under the cap.
        let budget = max_nodes.saturating_sub(16) / 6;
        let count = rng.random_range(1..=budget.max(1));
        let mut steps = Vec::new();
        let mut matrices = Vec::new();
        // Pool indices: 0 = x, 1 = y, then one entry per step.
        for k in 0..count {
            let pool = k + 2;
            let a = rng.random_range(0..pool);
            let b = rng.random_range(0..pool);
            let step = match rng.random_range(0..14) {
                0 => Step::Add(a, b),
                1 => Step::Sub(a, b),
                2 => Step::Mul(a, b),
                3 => Step::Scale(a, rng.random_range(-1.5..1.5)),
                4 => Step::Shift(a, rng.random_range(-1.0..1.0)),
                5 => Step::Tanh(a),
                6 => Step::Relu(a),
                7 => Step::Softmax(a),
                8 => Step::LogSoftmax(a),
                9 => Step::Normalize(a),
                10 => Step::MaxConst(a, rng.random_range(-1.0..1.0)),
                11 => {
                    let m = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
                    matrices.push(Tensor::new(vec![n, n], m).unwrap());
                    Step::MatmulConst(a, matrices.len() - 1)
                }
                12 => Step::AffineParam(a),
                _ => Step::NormGate(a),
            };
            steps.push(step);
        }
        let last = steps.len() + 2;
        let readout = (0..rng.random_range(1..=3))
            .map(|_| (rng.random_range(last.saturating_sub(4)..last), vec(&mut rng, n)))
            .collect();
        Self {
            n,
            steps,
            matrices,
            readout,
            inputs,
        }
    }

    /// Builds the graph on a fresh tape; returns the tape, root and input vars.
    pub fn build(&self, inputs: &[Tensor]) -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let (w, bias) = (vars[2], vars[3]);
        let mut pool = vec![vars[0], vars[1]];
        for step in &self.steps {
            let v = match *step {
                Step::Add(a, b) => tape.add(pool[a], pool[b])?,
                Step::Sub(a, b) => tape.sub(pool[a], pool[b])?,
                Step::Mul(a, b) => {
                    // Squash first so long product chains stay bounded.
                    let ta = tape.tanh(pool[a])?;
                    tape.mul(ta, pool[b])?
                }
                Step::Scale(a, s) => tape.scale(pool[a], s)?,
                Step::Shift(a, s) => tape.shift(pool[a], s)?,
                Step::Tanh(a) => tape.tanh(pool[a])?,
                Step::Relu(a) => tape.relu(pool[a])?,
                Step::Softmax(a) => tape.softmax(pool[a])?,
                Step::LogSoftmax(a) => tape.log_softmax(pool[a])?,
                Step::Normalize(a) => {
                    let shifted = tape.shift(pool[a], 3.0)?;
                    tape.normalize(shifted)?
                }
                Step::MaxConst(a, c) => tape.max_const(pool[a], c)?,
                Step::MatmulConst(a, m) => {
                    let mv = tape.constant(self.matrices[m].clone());
                    let t = tape.tanh(pool[a])?;
                    tape.matmul(t, mv)?
                }
                Step::AffineParam(a) => {
                    let t = tape.tanh(pool[a])?;
                    tape.affine(t, w, bias)?
                }
                Step::NormGate(a) => {
                    let sq = tape.squared_norm(pool[a])?;
                    let one = tape.shift(sq, 1.0)?;
                    let r = tape.sqrt(one)?;
                    let head = tape.gather(pool[a], &[0])?;
                    let head = tape.reshape(head, &[1])?;
                    let gated = tape.mul(head, r)?;
                    let gated = tape.tanh(gated)?;
                    let rest: Vec<Var> = (1..self.n)
                        .map(|i| {
                            let g = tape.gather(pool[a], &[i])?;
                            tape.reshape(g, &[1])
                        })
                        .collect::<Result<_>>()?;
                    let mut parts = vec![gated];
                    parts.extend(rest);
                    tape.concat(&parts)?
                }
            };
            pool.push(v);
        }
        let mut terms = Vec::new();
        for (idx, coef) in &self.readout {
            let c = tape.constant(coef.clone());
            let m = tape.mul(pool[*idx], c)?;
            terms.push(tape.sum(m)?);
        }
        let mut root = terms[0];
        for &t in &terms[1..] {
            root = tape.add(root, t)?;
        }
        Ok((tape, root, vars))
    }

    pub fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        let (tape, root, _) = self.build(inputs)?;
        tape.value(root).item()
    }

    /// Analytic and central-difference gradients for every input.
    pub fn gradients(&self, h: f64) -> Result<Vec<(Tensor, Tensor)>> {
        let (tape, root, vars) = self.build(&self.inputs)?;
        let grads = tape.backward(root)?;
        let mut out = Vec::new();
        for (k, &v) in vars.iter().enumerate() {
            let analytic = grads.wrt(v).expect("inputs are variables").clone();
            let numeric = central_difference(
                |x| {
                    let mut inputs = self.inputs.clone();
                    inputs[k] = x.clone();
                    self.value(&inputs)
                },
                &self.inputs[k],
                h,
            )?;
            out.push((analytic, numeric));
        }
        Ok(out)
    }

    pub fn node_count(&self) -> Result<usize> {
        Ok(self.build(&self.inputs)?.0.len())
    }
}
