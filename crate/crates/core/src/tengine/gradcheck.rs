//! Central finite-difference verification of analytic gradients.

use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Result;

use super::graph::{Fault, Graph, NodeId, OpKind};
use super::ops::{ConvGeom, PoolMode};
use super::Tensor;

/// Per-layer tolerance on the maximum relative error.
pub const LAYER_TOLERANCE: f64 = 1e-6;
/// Tolerance for the composed network.
pub const NETWORK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Total coordinates to sample across all tensors (every coordinate is
    /// checked when there are fewer).
    pub samples: usize,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are compared on an absolute scale.
    pub denominator_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples: 256,
            tolerance: LAYER_TOLERANCE,
            denominator_floor: 1e-3,
            seed: 0,
        }
    }
}

/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn flagged(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| t.max_rel_error >= self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "  {:<28} checked={:<5} max_rel_error={:.3e}{}",
                t.name,
                t.checked,
                t.max_rel_error,
                if t.max_rel_error >= self.tolerance { "  FLAGGED" } else { "" }
            )?;
        }
        Ok(())
    }
}

/// Compares the analytic gradient returned by `eval` with central
/// differences on a sampled subset of coordinates.
///
/// `eval(params, want_grads)` returns the scalar loss and, when
/// `want_grads` is set, one gradient vector per parameter tensor.
pub fn gradient_check<F>(
    params: &mut [Tensor],
    names: &[String],
    mut eval: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor], bool) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (_, analytic) = eval(params, true)?;
    let total: usize = params.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = cfg.epsilon;

    let mut tensors = Vec::with_capacity(params.len());
    for ti in 0..params.len() {
        let numel = params[ti].numel();
        let share = (cfg.samples * numel).div_ceil(total.max(1));
        let want = share.max(cfg.samples.min(8)).min(numel);
        let mut coords: Vec<usize> = if want == numel {
            (0..numel).collect()
        } else {
            index::sample(&mut rng, numel, want).into_vec()
        };
        coords.sort_unstable();

        let mut check = TensorCheck {
            name: names.get(ti).cloned().unwrap_or_else(|| format!("param{ti}")),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for &c in &coords {
            let orig = params[ti].data()[c];
            params[ti].data_mut()[c] = orig + eps;
            let (plus, _) = eval(params, false)?;
            params[ti].data_mut()[c] = orig - eps;
            let (minus, _) = eval(params, false)?;
            params[ti].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][c];
            let err = relative_error(a, numeric, cfg.denominator_floor);
            check.checked += 1;
            if err > check.max_rel_error || check.checked == 1 {
                check.max_rel_error = err;
                check.worst_index = c;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: cfg.tolerance,
    })
}

fn random_weights<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Values bounded away from zero so no finite-difference step crosses the
/// leaky-ReLU kink.
fn off_kink<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

type Builder = Box<dyn Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId>>;

struct LayerCase {
    name: &'static str,
    params: Vec<(String, Tensor)>,
    build: Builder,
}

fn layer_cases(seed: u64) -> Vec<LayerCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let randn = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape, 1.0, rng);

    let geom = ConvGeom::new([2, 1, 2], [1, 1, 0]);
    let conv_params = vec![
        ("conv.input".to_string(), randn(&[2, 2, 5, 4, 5], &mut rng)),
        ("conv.weight".to_string(), randn(&[3, 2, 3, 3, 2], &mut rng)),
        ("conv.bias".to_string(), randn(&[3], &mut rng)),
    ];
    // output [2,3,3,4,2]
    let w = random_weights(2 * 3 * 3 * 4 * 2, &mut rng);
    cases.push(LayerCase {
        name: "conv3d",
        params: conv_params,
        build: Box::new(move |g, p| {
            let y = g.conv3d(p[0], p[1], p[2], geom)?;
            g.weighted_sum(y, w.clone())
        }),
    });

    let slope = 0.01;
    let w = random_weights(2 * 3 * 4, &mut rng);
    cases.push(LayerCase {
        name: "leaky_relu",
        params: vec![("leaky.input".into(), off_kink(&[2, 3, 4], &mut rng))],
        build: Box::new(move |g, p| {
            let y = g.leaky_relu(p[0], slope)?;
            g.weighted_sum(y, w.clone())
        }),
    });

    for (name, mode) in [("global_max_pool", PoolMode::Max), ("global_avg_pool", PoolMode::Avg)] {
        let w = random_weights(2 * 3, &mut rng);
        cases.push(LayerCase {
            name,
            params: vec![(format!("{name}.input"), randn(&[2, 3, 3, 2, 4], &mut rng))],
            build: Box::new(move |g, p| {
                let y = g.global_pool(p[0], mode)?;
                g.weighted_sum(y, w.clone())
            }),
        });
    }

    let w = random_weights(3 * 4, &mut rng);
    cases.push(LayerCase {
        name: "fully_connected",
        params: vec![
            ("fc.input".into(), randn(&[3, 7], &mut rng)),
            ("fc.weight".into(), randn(&[4, 7], &mut rng)),
            ("fc.bias".into(), randn(&[4], &mut rng)),
        ],
        build: Box::new(move |g, p| {
            let y = g.linear(p[0], p[1], p[2])?;
            g.weighted_sum(y, w.clone())
        }),
    });

    let w = random_weights(3 * 5, &mut rng);
    cases.push(LayerCase {
        name: "sigmoid",
        params: vec![("sigmoid.input".into(), randn(&[3, 5], &mut rng))],
        build: Box::new(move |g, p| {
            let y = g.sigmoid(p[0])?;
            g.weighted_sum(y, w.clone())
        }),
    });

    let w = random_weights(3 * 4, &mut rng);
    cases.push(LayerCase {
        name: "softmax",
        params: vec![("softmax.input".into(), randn(&[3, 4], &mut rng))],
        build: Box::new(move |g, p| {
            let y = g.softmax(p[0])?;
            g.weighted_sum(y, w.clone())
        }),
    });

    let w = random_weights(2 * 7, &mut rng);
    cases.push(LayerCase {
        name: "concat",
        params: vec![
            ("concat.a".into(), randn(&[2, 3], &mut rng)),
            ("concat.b".into(), randn(&[2, 4], &mut rng)),
        ],
        build: Box::new(move |g, p| {
            let y = g.concat(p[0], p[1])?;
            g.weighted_sum(y, w.clone())
        }),
    });

    let w = random_weights(2 * 3 * 2 * 2 * 3, &mut rng);
    cases.push(LayerCase {
        name: "multiply_broadcast",
        params: vec![
            ("multiply.gate".into(), randn(&[2, 3], &mut rng)),
            ("multiply.input".into(), randn(&[2, 3, 2, 2, 3], &mut rng)),
        ],
        build: Box::new(move |g, p| {
            let y = g.multiply_broadcast(p[0], p[1])?;
            g.weighted_sum(y, w.clone())
        }),
    });

    let w = random_weights(2 * 12, &mut rng);
    cases.push(LayerCase {
        name: "flatten",
        params: vec![("flatten.input".into(), randn(&[2, 3, 2, 2], &mut rng))],
        build: Box::new(move |g, p| {
            let y = g.flatten(p[0])?;
            g.weighted_sum(y, w.clone())
        }),
    });

    let mut targets = Tensor::zeros([4, 3]);
    for (i, c) in [0usize, 2, 1, 2].into_iter().enumerate() {
        targets.data_mut()[i * 3 + c] = 1.0;
    }
    cases.push(LayerCase {
        name: "softmax_cross_entropy",
        params: vec![("logits".into(), randn(&[4, 3], &mut rng))],
        build: Box::new(move |g, p| {
            let probs = g.softmax(p[0])?;
            let t = g.leaf(targets.clone())?;
            g.cross_entropy(probs, t)
        }),
    });

    cases
}

/// Runs the gradient check on every layer kind in isolation. With `fault`
/// set, the named op's backward is corrupted.
pub fn layer_suite(seed: u64, fault: Option<Fault>) -> Result<Vec<(String, GradCheckReport)>> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let mut out = Vec::new();
    for case in layer_cases(seed) {
        let (names, mut params): (Vec<String>, Vec<Tensor>) = case
            .params
            .into_iter()
            .map(|(n, t)| (n, t.with_requires_grad(true)))
            .unzip();
        let build = &case.build;
        let report = gradient_check(
            &mut params,
            &names,
            |ps, want| {
                let mut g = match fault {
                    Some(f) => Graph::with_fault(f),
                    None => Graph::new(),
                };
                let ids = ps.iter().map(|p| g.leaf_ref(p)).collect::<Result<Vec<_>>>()?;
                let loss = build(&mut g, &ids)?;
                let value = g.value(loss).data()[0];
                if !want {
                    return Ok((value, Vec::new()));
                }
                let grads = g.backward(loss)?;
                let gs = ids
                    .iter()
                    .zip(ps)
                    .map(|(&id, p)| grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
                    .collect();
                Ok((value, gs))
            },
            &cfg,
        )?;
        out.push((case.name.to_string(), report));
    }
    Ok(out)
}

/// Op kinds covered by [`layer_suite`].
pub const CHECKED_OPS: [OpKind; 11] = [
    OpKind::Conv3d,
    OpKind::LeakyRelu,
    OpKind::GlobalMaxPool,
    OpKind::GlobalAvgPool,
    OpKind::FullyConnected,
    OpKind::Sigmoid,
    OpKind::Softmax,
    OpKind::Concat,
    OpKind::Multiply,
    OpKind::Flatten,
    OpKind::CrossEntropy,
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes() {
        for (name, report) in layer_suite(7, None).unwrap() {
            assert!(report.checked() >= 1);
            assert!(
                report.passed(),
                "{name}: max rel error {:.3e}\n{report}",
                report.max_rel_error()
            );
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        for op in CHECKED_OPS {
            let fault = Fault { op, scale: 1.5 };
            let reports = layer_suite(7, Some(fault)).unwrap();
            assert!(
                reports.iter().any(|(_, r)| !r.passed()),
                "fault in {} went unnoticed",
                op.name()
            );
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-3), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-3) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-6, 1e-3) - 1e-3).abs() < 1e-15);
    }
}
