//! Central finite-difference verification of the analytic backward pass.

use rand::seq::index::sample;

use super::network::{Gradients, Mode, Network};
use super::params::TensorRole;
use super::spec::{LayerSpec, NetSpec};
use super::{Result, Tensor4};
use crate::seed::{derive_seed, derived_rng, rng_from};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that gradients at the
    /// rounding-noise level are compared absolutely.
    pub floor: f64,
    /// Check at most this many randomly chosen elements per tensor.
    pub max_per_tensor: Option<usize>,
    pub check_input: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_per_tensor: None,
            check_input: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Elements whose +/- eps probes crossed a leaky-ReLU or max-pool kink.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn skipped_kinks(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped_kinks).sum()
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Analytic gradients of `loss(output)` with respect to every trainable
/// tensor and the input.
pub fn analytic_gradients<L>(net: &Network<f64>, batch: &Tensor4<f64>, loss: &L) -> Result<Gradients<f64>>
where
    L: Fn(&Tensor4<f64>) -> (f64, Tensor4<f64>),
{
    let pass = net.forward_pure(batch, Mode::Train)?;
    let (_, upstream) = loss(&pass.output);
    net.backward(&pass, &upstream, true)
}

/// Compares `analytic` against central differences of `loss(output)`.
pub fn check_against<L>(
    net: &Network<f64>,
    batch: &Tensor4<f64>,
    loss: &L,
    analytic: &Gradients<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: Fn(&Tensor4<f64>) -> (f64, Tensor4<f64>),
{
    let base = net.forward_pure(batch, Mode::Train)?.kink_signature();
    let eval = |net: &Network<f64>, x: &Tensor4<f64>| -> Result<(f64, u64)> {
        let pass = net.forward_pure(x, Mode::Train)?;
        Ok((loss(&pass.output).0, pass.kink_signature()))
    };
    let mut rng = rng_from(opts.seed);
    let mut pick = |len: usize| -> Vec<usize> {
        match opts.max_per_tensor {
            Some(k) if k < len => {
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(opts.floor);

    let mut probe = net.clone();
    let mut tensors = Vec::new();
    for (ti, tensor) in net.params().tensors.iter().enumerate() {
        if tensor.role != TensorRole::Trainable {
            continue;
        }
        let mut check = TensorCheck {
            name: tensor.name.clone(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            worst_index: None,
        };
        for idx in pick(tensor.data.len()) {
            let orig = tensor.data[idx];
            probe.params_mut().tensors[ti].data[idx] = orig + opts.eps;
            let (lp, sp) = eval(&probe, batch)?;
            probe.params_mut().tensors[ti].data[idx] = orig - opts.eps;
            let (lm, sm) = eval(&probe, batch)?;
            probe.params_mut().tensors[ti].data[idx] = orig;
            if sp != base || sm != base {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.eps);
            let err = rel(analytic.params.grads[ti][idx], numeric);
            check.checked += 1;
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = Some(idx);
            }
        }
        tensors.push(check);
    }

    if opts.check_input {
        if let Some(input_grad) = &analytic.input {
            let mut check = TensorCheck {
                name: "input".into(),
                checked: 0,
                skipped_kinks: 0,
                max_rel_error: 0.0,
                worst_index: None,
            };
            let mut x = batch.clone();
            for idx in pick(batch.data().len()) {
                let orig = batch.data()[idx];
                x.data_mut()[idx] = orig + opts.eps;
                let (lp, sp) = eval(net, &x)?;
                x.data_mut()[idx] = orig - opts.eps;
                let (lm, sm) = eval(net, &x)?;
                x.data_mut()[idx] = orig;
                if sp != base || sm != base {
                    check.skipped_kinks += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * opts.eps);
                let err = rel(input_grad.data()[idx], numeric);
                check.checked += 1;
                if err > check.max_rel_error {
                    check.max_rel_error = err;
                    check.worst_index = Some(idx);
                }
            }
            tensors.push(check);
        }
    }

    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < opts.tolerance,
        tensors,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}

/// Analytic-versus-numeric check of the whole network under `loss`.
pub fn grad_check<L>(
    net: &Network<f64>,
    batch: &Tensor4<f64>,
    loss: &L,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: Fn(&Tensor4<f64>) -> (f64, Tensor4<f64>),
{
    let analytic = analytic_gradients(net, batch, loss)?;
    check_against(net, batch, loss, &analytic, opts)
}

/// Loss heads used by the standard gradient-check suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckLoss {
    CrossEntropy,
    Pair,
}

/// Small networks that isolate each layer type, named by what they probe.
/// The final dense layer has `out_units` outputs.
pub fn layer_cases(out_units: usize) -> Vec<(&'static str, NetSpec)> {
    let conv = |c: usize, s: usize| LayerSpec::Conv2d { out_channels: c, kernel: [3, 3], stride: [s, s] };
    let res = |c: usize, s: usize| LayerSpec::ResidualBlock {
        out_channels: c,
        kernel: [3, 3],
        stride: [s, s],
        negative_slope: 0.3,
    };
    let act = LayerSpec::LeakyRelu { negative_slope: 0.3 };
    let head = LayerSpec::Dense { units: out_units };
    let cases: Vec<(&'static str, Vec<LayerSpec>)> = vec![
        ("conv2d", vec![conv(3, 1), LayerSpec::AvgpoolGlobal, head.clone()]),
        ("conv2d_strided", vec![conv(3, 2), LayerSpec::AvgpoolGlobal, head.clone()]),
        ("batchnorm", vec![conv(3, 1), LayerSpec::Batchnorm, LayerSpec::AvgpoolGlobal, head.clone()]),
        ("leaky_relu", vec![conv(3, 1), act.clone(), LayerSpec::AvgpoolGlobal, head.clone()]),
        ("residual_identity", vec![conv(3, 1), res(3, 1), LayerSpec::AvgpoolGlobal, head.clone()]),
        ("residual_projection", vec![res(4, 2), LayerSpec::AvgpoolGlobal, head.clone()]),
        ("maxpool_global", vec![conv(3, 1), LayerSpec::MaxpoolGlobal, head.clone()]),
        (
            "parallel_pools",
            vec![conv(3, 1), LayerSpec::MaxpoolGlobal, LayerSpec::AvgpoolGlobal, head.clone()],
        ),
        (
            "dense_stack",
            vec![conv(2, 2), LayerSpec::AvgpoolGlobal, LayerSpec::Dense { units: 5 }, act.clone(), head.clone()],
        ),
        (
            "full_stack",
            vec![
                conv(3, 1),
                LayerSpec::Batchnorm,
                act,
                res(3, 1),
                res(4, 2),
                LayerSpec::MaxpoolGlobal,
                LayerSpec::AvgpoolGlobal,
                LayerSpec::Dense { units: 5 },
                LayerSpec::LeakyRelu { negative_slope: 0.3 },
                head,
            ],
        ),
    ];
    cases
        .into_iter()
        .map(|(name, layers)| {
            let embedding_layer = layers.len() - 1;
            (
                name,
                NetSpec {
                    input_bins: 7,
                    input_channels: 1,
                    nominal_frames: 6,
                    layers,
                    embedding_layer,
                },
            )
        })
        .collect()
}

/// Builds `spec` from `seed`, draws a seeded batch of four items and checks
/// the whole network under `loss`.
pub fn check_case(spec: &NetSpec, loss: CheckLoss, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    use crate::losses::{cross_entropy_batch, pair_loss_batch, Class, PairLabel};
    use rand::Rng;
    use rand_distr::StandardNormal;

    let net = Network::<f64>::build_unvalidated_head(spec, derive_seed(seed, "gradcheck/init"))?;
    let mut rng = derived_rng(seed, "gradcheck/data");
    let dims = [4, spec.nominal_frames, spec.input_bins, spec.input_channels];
    let data = (0..dims.iter().product::<usize>())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let batch = Tensor4::from_vec(dims, data);
    let opts = GradCheckOptions { seed: derive_seed(seed, "gradcheck/pick"), ..opts.clone() };
    match loss {
        CheckLoss::CrossEntropy => {
            let classes: Vec<Class> = (0..4)
                .map(|_| if rng.random::<bool>() { Class::Bonafide } else { Class::Spoof })
                .collect();
            let f = |out: &Tensor4<f64>| cross_entropy_batch(out, &classes).expect("two logits per item");
            grad_check(&net, &batch, &f, &opts)
        }
        CheckLoss::Pair => {
            let labels = [PairLabel::Same, PairLabel::Different];
            let f = |out: &Tensor4<f64>| pair_loss_batch(out, &labels).expect("nonzero embeddings");
            grad_check(&net, &batch, &f, &opts)
        }
    }
}
