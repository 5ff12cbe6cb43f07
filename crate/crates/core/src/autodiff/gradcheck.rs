//! Finite-difference verification of the adjoint rules.

use super::graph::{GradTargets, Graph, Mode, NodeId, OpKind};
use super::tensor::Tensor;
use super::AdError;
use crate::rng::{purpose, Stream};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Entries probed per input tensor; larger tensors are subsampled.
const MAX_PROBES: usize = 400;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: &'static str,
    pub shapes: Vec<[usize; 5]>,
    /// `max |analytic - numeric| / max |numeric|` over probed entries,
    /// maximised across differentiable inputs.
    pub max_rel_error: f64,
    pub probes: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Max-norm relative error between two gradient samples.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `sum(cotangent * output)` with respect to the
/// chosen entries of one named input.
#[allow(clippy::too_many_arguments)]
pub fn numeric_input_gradient(
    graph: &mut Graph,
    inputs: &[(&str, &Tensor)],
    output: NodeId,
    cotangent: &Tensor,
    mode: Mode,
    key: u64,
    input: &str,
    entries: &[usize],
    step: f64,
) -> Result<Vec<f64>, AdError> {
    let pos = inputs
        .iter()
        .position(|(n, _)| *n == input)
        .ok_or_else(|| AdError::MissingInput(input.to_string()))?;
    let mut work: Vec<(&str, Tensor)> = inputs.iter().map(|(n, t)| (*n, (*t).clone())).collect();
    let eval = |work: &Vec<(&str, Tensor)>, graph: &mut Graph| -> Result<f64, AdError> {
        let refs: Vec<(&str, &Tensor)> = work.iter().map(|(n, t)| (*n, t)).collect();
        graph.forward(&refs, mode, key)?;
        let y = graph.value(output)?;
        Ok(y.data().iter().zip(cotangent.data()).map(|(a, b)| a * b).sum())
    };
    let mut out = Vec::with_capacity(entries.len());
    for &e in entries {
        let orig = work[pos].1.data()[e];
        work[pos].1.data_mut()[e] = orig + step;
        let plus = eval(&work, graph)?;
        work[pos].1.data_mut()[e] = orig - step;
        let minus = eval(&work, graph)?;
        work[pos].1.data_mut()[e] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Evenly spaced probe indices, capped at `max`.
pub fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max).collect()
    }
}

/// Three argument-shape sets per op, used by the test suite.
pub fn default_shapes(kind: OpKind) -> Vec<Vec<[usize; 5]>> {
    let spatial = [[1, 2, 4, 4, 4], [2, 3, 2, 4, 6], [1, 1, 6, 2, 4]];
    match kind {
        OpKind::Conv3d => vec![
            vec![[1, 2, 4, 4, 4], [3, 2, 3, 3, 3], [1, 3, 1, 1, 1]],
            vec![[2, 1, 3, 5, 4], [2, 1, 1, 1, 1], [1, 2, 1, 1, 1]],
            vec![[1, 3, 5, 3, 4], [2, 3, 5, 5, 5], [1, 2, 1, 1, 1]],
        ],
        OpKind::TransposedConv3d => vec![
            vec![[1, 2, 2, 2, 2], [2, 3, 2, 2, 2], [1, 3, 1, 1, 1]],
            vec![[2, 1, 1, 3, 2], [1, 2, 2, 2, 2], [1, 2, 1, 1, 1]],
            vec![[1, 4, 3, 2, 1], [4, 1, 2, 2, 2], [1, 1, 1, 1, 1]],
        ],
        OpKind::InstanceNorm => spatial
            .iter()
            .map(|&s| vec![s, [1, s[1], 1, 1, 1], [1, s[1], 1, 1, 1]])
            .collect(),
        OpKind::MaxPool3d => vec![vec![[1, 2, 4, 4, 4]], vec![[2, 1, 2, 4, 6]], vec![[1, 3, 6, 2, 4]]],
        OpKind::Concat => vec![
            vec![[1, 2, 2, 2, 2], [1, 1, 2, 2, 2]],
            vec![[2, 1, 3, 2, 1], [2, 2, 3, 2, 1], [2, 1, 3, 2, 1]],
            vec![[1, 3, 1, 4, 2]],
        ],
        OpKind::Add => spatial.iter().map(|&s| vec![s, s]).collect(),
        OpKind::ReduceSum => vec![
            vec![[1, 2, 4, 4, 4]],
            vec![[2, 3, 2, 4, 6], [2, 3, 2, 4, 6]],
            vec![[1, 4, 3, 2, 2], [1, 1, 3, 2, 2]],
        ],
        OpKind::DiceTerms => spatial
            .iter()
            .map(|&s| vec![s, s, [s[0], 1, s[2], s[3], s[4]]])
            .collect(),
        _ => spatial.iter().map(|&s| vec![s]).collect(),
    }
}

/// Arguments that receive gradients (targets and masks do not).
fn differentiable(kind: OpKind, arity: usize) -> Vec<bool> {
    match kind {
        OpKind::ReduceSum | OpKind::DiceTerms => (0..arity).map(|i| i == 0).collect(),
        _ => vec![true; arity],
    }
}

fn sample_args(kind: OpKind, shapes: &[[usize; 5]], rng: &mut Stream) -> Vec<Tensor> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, &s)| match (kind, i) {
            // Keep inputs off the kink by more than the FD step.
            (OpKind::LeakyRelu { .. }, 0) => {
                let mut t = Tensor::randn(s, 1.0, rng);
                for v in t.data_mut() {
                    while v.abs() < 1e-3 {
                        *v = rng.normal();
                    }
                }
                t
            }
            // Distinct values on a 0.01 lattice: no window has a near tie.
            (OpKind::MaxPool3d, 0) => {
                let n: usize = s.iter().product();
                let mut vals: Vec<f64> = (0..n).map(|k| 0.01 * k as f64 - 0.005 * n as f64).collect();
                rng.shuffle(&mut vals);
                Tensor::new(s, vals).expect("pool sample")
            }
            (OpKind::DiceTerms, 0) => Tensor::uniform(s, 0.05, 0.95, rng),
            (OpKind::DiceTerms, 1) => {
                let [n, c, ..] = s;
                let vox = s[2] * s[3] * s[4];
                let mut t = Tensor::zeros(s);
                for bn in 0..n {
                    for v in 0..vox {
                        let cls = rng.below(c);
                        t.slab_mut(bn, cls)[v] = 1.0;
                    }
                }
                t
            }
            (OpKind::DiceTerms, 2) | (OpKind::ReduceSum, 1) => {
                let n: usize = s.iter().product();
                let mut data: Vec<f64> = (0..n).map(|_| if rng.uniform() < 0.6 { 1.0 } else { 0.0 }).collect();
                data[0] = 1.0;
                Tensor::new(s, data).expect("mask sample")
            }
            (OpKind::Conv3d | OpKind::TransposedConv3d, 1) => Tensor::randn(s, 0.5, rng),
            _ => Tensor::randn(s, 1.0, rng),
        })
        .collect()
}

/// Builds a one-op graph over fresh random arguments and compares its
/// adjoints with central differences of a random projection of the output.
pub fn grad_check(kind: OpKind, shapes: &[[usize; 5]], tolerance: f64, seed: u64) -> Result<GradCheckReport, AdError> {
    let mut rng = Stream::new(seed, purpose::TEST_DATA, 17);
    let args = sample_args(kind, shapes, &mut rng);
    let names: Vec<String> = (0..args.len()).map(|i| format!("a{i}")).collect();
    let mut g = Graph::new();
    let ids: Vec<NodeId> = names.iter().map(|n| g.input(n)).collect();
    let out = g.op(kind, &ids);
    let inputs: Vec<(&str, &Tensor)> = names.iter().map(|n| n.as_str()).zip(args.iter()).collect();
    let (mode, key) = (Mode::Train, seed ^ 0x5eed);
    g.forward(&inputs, mode, key)?;
    let cot = Tensor::randn(g.value(out)?.shape(), 1.0, &mut rng);
    let grads = g.backward(out, &cot, GradTargets::Inputs)?;
    let mut worst = 0.0f64;
    let mut probes = 0;
    for (i, diff) in differentiable(kind, args.len()).into_iter().enumerate() {
        if !diff {
            continue;
        }
        let idx = probe_indices(args[i].len(), MAX_PROBES);
        let numeric = numeric_input_gradient(&mut g, &inputs, out, &cot, mode, key, &names[i], &idx, FD_STEP)?;
        let analytic: Vec<f64> = idx.iter().map(|&e| grads.inputs[&names[i]].data()[e]).collect();
        worst = worst.max(relative_error(&analytic, &numeric));
        probes += idx.len();
    }
    Ok(GradCheckReport {
        op: kind.name(),
        shapes: shapes.to_vec(),
        max_rel_error: worst,
        probes,
        tolerance,
    })
}

/// Compares the analytic gradient of a scalar `output` with respect to one
/// input against central differences at up to `max_probes` evenly spaced
/// entries. Returns the max-norm relative error.
pub fn spot_check_input(
    graph: &mut Graph,
    inputs: &[(&str, &Tensor)],
    output: NodeId,
    mode: Mode,
    key: u64,
    input: &str,
    max_probes: usize,
) -> Result<f64, AdError> {
    graph.forward(inputs, mode, key)?;
    let cot = Tensor::full(graph.value(output)?.shape(), 1.0);
    let grads = graph.backward(output, &cot, GradTargets::Inputs)?;
    let analytic = grads
        .inputs
        .get(input)
        .ok_or_else(|| AdError::MissingInput(input.to_string()))?;
    let idx = probe_indices(analytic.len(), max_probes);
    let picked: Vec<f64> = idx.iter().map(|&i| analytic.data()[i]).collect();
    let numeric = numeric_input_gradient(graph, inputs, output, &cot, mode, key, input, &idx, FD_STEP)?;
    Ok(relative_error(&picked, &numeric))
}

/// Every op kind with representative hyperparameters.
pub fn all_op_kinds() -> Vec<OpKind> {
    vec![
        OpKind::Conv3d,
        OpKind::TransposedConv3d,
        OpKind::InstanceNorm,
        OpKind::LeakyRelu { slope: 0.01 },
        OpKind::Dropout { p: 0.3 },
        OpKind::MaxPool3d,
        OpKind::Concat,
        OpKind::Softmax,
        OpKind::Add,
        OpKind::Scale(-1.7),
        OpKind::ReduceSum,
        OpKind::DiceTerms,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_three_shapes() {
        for kind in all_op_kinds() {
            let sets = default_shapes(kind);
            assert!(sets.len() >= 3);
            for (i, shapes) in sets.iter().enumerate() {
                let r = grad_check(kind, shapes, 1e-6, i as u64).unwrap();
                assert!(r.passed(), "{} {:?}: {}", r.op, shapes, r.max_rel_error);
                assert!(r.probes > 0);
            }
        }
    }

    #[test]
    fn softmax_jacobian_rows_sum_to_zero() {
        // Column j of the Jacobian is the adjoint of the one-hot cotangent at
        // output channel j; summing over j gives the adjoint of an all-ones
        // cotangent, which must vanish because outputs sum to 1.
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.softmax(x);
        let xs = Tensor::randn([1, 6, 2, 2, 2], 3.0, &mut Stream::new(5, purpose::TEST_DATA, 0));
        g.forward(&[("x", &xs)], Mode::Eval, 0).unwrap();
        let gr = g
            .backward(y, &Tensor::full(xs.shape(), 1.0), GradTargets::Inputs)
            .unwrap();
        assert!(gr.inputs["x"].max_abs() < 1e-12);
    }

    #[test]
    fn relative_error_is_max_norm_ratio() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.1, 4.0], &[1.0, 4.0]) - 0.025).abs() < 1e-12);
    }
}
