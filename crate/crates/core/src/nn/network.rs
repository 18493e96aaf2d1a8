use std::ops::Range;

use rand_distr::{Distribution, StandardNormal};

use super::layers::{
    leaky_relu_backward, leaky_relu_forward, pool_backward, pool_forward, ActCache, BnCache, BnOp,
    BnUpdate, ConvCache, ConvOp, DenseCache, DenseOp, PoolCache, PoolKind, ResCache, ResOp,
    BN_MOMENTUM,
};
use super::params::{ParamGrads, ParamSet, TensorRole};
use super::spec::{LayerSpec, NetSpec, Shape};
use super::{NnError, Real, Result, Tensor4};
use crate::seed::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; caches kept for backward.
    Train,
    /// Running statistics; nothing cached.
    Infer,
}

#[derive(Debug, Clone)]
enum Op {
    Conv(ConvOp),
    Bn(BnOp),
    Act(f64),
    Res(ResOp),
    Pool(Vec<PoolKind>),
    Dense(DenseOp),
}

#[derive(Debug, Clone)]
enum OpCache<T> {
    Conv(ConvCache<T>),
    Bn(BnCache<T>),
    Act(ActCache<T>),
    Res(Box<ResCache<T>>),
    Pool(PoolCache),
    Dense(DenseCache<T>),
}

/// Result of a forward pass. In train mode it also carries what backward
/// needs.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub output: Tensor4<T>,
    pub embedding: Tensor4<T>,
    mode: Mode,
    caches: Vec<OpCache<T>>,
    updates: Vec<BnUpdate>,
}

impl<T: Real> ForwardPass<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Hash of every piecewise-linear branch taken (leaky-ReLU signs and
    /// max-pool winners). Two passes with equal signatures lie on the same
    /// smooth piece of the network function.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for cache in &self.caches {
            match cache {
                OpCache::Act(a) => a.hash_pattern(&mut h),
                OpCache::Res(r) => r.hash_pattern(&mut h),
                OpCache::Pool(p) => p.hash_pattern(&mut h),
                _ => {}
            }
        }
        h.finish()
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: ParamGrads<T>,
    /// Gradient with respect to the input batch, when requested.
    pub input: Option<Tensor4<T>>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetSpec,
    params: ParamSet<T>,
    ops: Vec<Op>,
    /// Spec layers covered by each op (a run of global pools is one op).
    op_layers: Vec<Range<usize>>,
    frozen_upto: Option<usize>,
}

struct Builder<'a, T> {
    params: ParamSet<T>,
    rng: &'a mut rand_chacha::ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn he(&mut self, name: String, dims: Vec<usize>, fan_in: usize, layer: usize) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let count = dims.iter().product();
        let data = (0..count)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::of(z * std)
            })
            .collect();
        self.params.push(name, dims, data, TensorRole::Trainable, layer)
    }

    fn filled(&mut self, name: String, len: usize, value: f64, role: TensorRole, layer: usize) -> usize {
        self.params.push(name, vec![len], vec![T::of(value); len], role, layer)
    }

    fn conv(&mut self, prefix: &str, kernel: [usize; 2], stride: [usize; 2], cin: usize, cout: usize, layer: usize) -> ConvOp {
        let weight = self.he(
            format!("{prefix}.weight"),
            vec![kernel[0], kernel[1], cin, cout],
            kernel[0] * kernel[1] * cin,
            layer,
        );
        ConvOp { weight, kernel, stride, cin, cout }
    }

    fn bn(&mut self, prefix: &str, channels: usize, layer: usize) -> BnOp {
        BnOp {
            gamma: self.filled(format!("{prefix}.gamma"), channels, 1.0, TensorRole::Trainable, layer),
            beta: self.filled(format!("{prefix}.beta"), channels, 0.0, TensorRole::Trainable, layer),
            running_mean: self.filled(format!("{prefix}.running_mean"), channels, 0.0, TensorRole::Buffer, layer),
            running_var: self.filled(format!("{prefix}.running_var"), channels, 1.0, TensorRole::Buffer, layer),
            channels,
        }
    }
}

impl<T: Real> Network<T> {
    /// Builds the network with He-normal weights drawn from `init_seed`.
    pub fn build(spec: &NetSpec, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        Self::build_unvalidated_head(spec, init_seed)
    }

    /// Builds any shape-consistent layer stack, without requiring the
    /// embedding/classifier layout. Used for per-layer checks.
    pub fn build_unvalidated_head(spec: &NetSpec, init_seed: u64) -> Result<Self> {
        let shapes = spec.shapes_for(spec.nominal_frames)?;
        let mut rng = rng_from(init_seed);
        let mut b = Builder { params: ParamSet::default(), rng: &mut rng };
        let mut ops = Vec::new();
        let mut op_layers = Vec::new();
        let mut input = Shape {
            frames: spec.nominal_frames,
            bins: spec.input_bins,
            channels: spec.input_channels,
        };
        let mut i = 0;
        while i < spec.layers.len() {
            let name = spec.layer_name(i);
            if spec.layers[i].is_global_pool() {
                let start = i;
                let mut kinds = Vec::new();
                while i < spec.layers.len() && spec.layers[i].is_global_pool() {
                    kinds.push(match spec.layers[i] {
                        LayerSpec::MaxpoolGlobal => PoolKind::Max,
                        _ => PoolKind::Avg,
                    });
                    i += 1;
                }
                ops.push(Op::Pool(kinds));
                op_layers.push(start..i);
                input = shapes[i - 1];
                continue;
            }
            let op = match spec.layers[i] {
                LayerSpec::Conv2d { out_channels, kernel, stride } => {
                    Op::Conv(b.conv(&name, kernel, stride, input.channels, out_channels, i))
                }
                LayerSpec::Batchnorm => Op::Bn(b.bn(&name, input.channels, i)),
                LayerSpec::LeakyRelu { negative_slope } => Op::Act(negative_slope),
                LayerSpec::ResidualBlock { out_channels, kernel, stride, negative_slope } => {
                    let cin = input.channels;
                    let bn_a = b.bn(&format!("{name}.bn_a"), cin, i);
                    let conv_a = b.conv(&format!("{name}.conv_a"), kernel, stride, cin, out_channels, i);
                    let bn_b = b.bn(&format!("{name}.bn_b"), out_channels, i);
                    let conv_b = b.conv(&format!("{name}.conv_b"), kernel, [1, 1], out_channels, out_channels, i);
                    let proj = (stride != [1, 1] || cin != out_channels)
                        .then(|| b.conv(&format!("{name}.proj"), [1, 1], stride, cin, out_channels, i));
                    Op::Res(ResOp { bn_a, conv_a, bn_b, conv_b, proj, slope: negative_slope })
                }
                LayerSpec::Dense { units } => {
                    let n_in = input.channels;
                    let weight = b.he(format!("{name}.weight"), vec![n_in, units], n_in, i);
                    let bias = b.filled(format!("{name}.bias"), units, 0.0, TensorRole::Trainable, i);
                    Op::Dense(DenseOp { weight, bias, n_in, n_out: units })
                }
                LayerSpec::MaxpoolGlobal | LayerSpec::AvgpoolGlobal => unreachable!(),
            };
            ops.push(op);
            op_layers.push(i..i + 1);
            input = shapes[i];
            i += 1;
        }
        Ok(Self {
            spec: spec.clone(),
            params: b.params,
            ops,
            op_layers,
            frozen_upto: None,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn frozen_upto(&self) -> Option<usize> {
        self.frozen_upto
    }

    /// Marks every layer with index `<= upto` as non-trainable. Frozen
    /// batch-norm layers normalise with their running statistics and stop
    /// updating them.
    pub fn set_frozen_upto(&mut self, upto: Option<usize>) {
        self.frozen_upto = upto;
        for t in &mut self.params.tensors {
            t.frozen = upto.is_some_and(|u| t.layer <= u);
        }
    }

    /// Same network with every tensor converted to another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
            ops: self.ops.clone(),
            op_layers: self.op_layers.clone(),
            frozen_upto: self.frozen_upto,
        }
    }

    fn check_input(&self, batch: &Tensor4<T>) -> Result<()> {
        let [n, t, f, c] = batch.dims();
        let mismatch = || NnError::InputMismatch {
            expected: format!("(N, T, {}, {})", self.spec.input_bins, self.spec.input_channels),
            found: batch.dims(),
        };
        if n == 0 || f != self.spec.input_bins || c != self.spec.input_channels {
            return Err(mismatch());
        }
        self.spec.shapes_for(t).map_err(|_| mismatch())?;
        if !batch.all_finite() {
            return Err(NnError::NonFinite { layer: "input".into() });
        }
        Ok(())
    }

    fn bn_is_frozen(&self, op: &BnOp) -> bool {
        self.params.tensors[op.gamma].frozen
    }

    fn op_name(&self, index: usize) -> String {
        self.spec.layer_name(self.op_layers[index].end - 1)
    }

    /// Forward pass without touching batch-norm running statistics.
    pub fn forward_pure(&self, batch: &Tensor4<T>, mode: Mode) -> Result<ForwardPass<T>> {
        self.check_input(batch)?;
        let train = mode == Mode::Train;
        let mut caches = Vec::new();
        let mut updates = Vec::new();
        let mut x = batch.clone();
        let mut embedding = None;
        for (i, op) in self.ops.iter().enumerate() {
            let (y, cache) = match op {
                Op::Conv(c) => {
                    let (y, cache) = c.forward(&self.params, &x);
                    (y, OpCache::Conv(cache))
                }
                Op::Bn(b) => {
                    let batch_stats = train && !self.bn_is_frozen(b);
                    let (y, cache, update) = b.forward(&self.params, &x, batch_stats);
                    updates.extend(update);
                    (y, OpCache::Bn(cache))
                }
                Op::Act(slope) => {
                    let (y, cache) = leaky_relu_forward(&x, *slope);
                    (y, OpCache::Act(cache))
                }
                Op::Res(r) => {
                    let batch_stats = train && !self.bn_is_frozen(&r.bn_a);
                    let (y, cache) = r.forward(&self.params, &x, batch_stats, &mut updates);
                    (y, OpCache::Res(Box::new(cache)))
                }
                Op::Pool(kinds) => {
                    let (y, cache) = pool_forward(&x, kinds);
                    (y, OpCache::Pool(cache))
                }
                Op::Dense(d) => {
                    let (y, cache) = d.forward(&self.params, &x);
                    (y, OpCache::Dense(cache))
                }
            };
            if !y.all_finite() {
                return Err(NnError::NonFinite { layer: self.op_name(i) });
            }
            if train {
                caches.push(cache);
            }
            if self.op_layers[i].contains(&self.spec.embedding_layer) {
                embedding = Some(y.clone());
            }
            x = y;
        }
        Ok(ForwardPass {
            embedding: embedding.unwrap_or_else(|| x.clone()),
            output: x,
            mode,
            caches,
            updates,
        })
    }

    /// Forward pass. In train mode the batch-norm running statistics are
    /// moved toward the batch statistics with momentum 0.1.
    pub fn forward(&mut self, batch: &Tensor4<T>, mode: Mode) -> Result<ForwardPass<T>> {
        let pass = self.forward_pure(batch, mode)?;
        self.apply_running_updates(&pass.updates);
        Ok(pass)
    }

    pub fn infer(&self, batch: &Tensor4<T>) -> Result<ForwardPass<T>> {
        self.forward_pure(batch, Mode::Infer)
    }

    fn apply_running_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (idx, stats) in [(u.running_mean, &u.mean), (u.running_var, &u.unbiased_var)] {
                for (r, s) in self.params.tensors[idx].data.iter_mut().zip(stats) {
                    *r = T::of((1.0 - BN_MOMENTUM) * r.f64() + BN_MOMENTUM * s);
                }
            }
        }
    }

    fn op_has_trainable(&self, op: usize) -> bool {
        let layers = &self.op_layers[op];
        self.params
            .tensors
            .iter()
            .any(|t| layers.contains(&t.layer) && t.is_trainable())
    }

    /// Backpropagates `grad_output` (gradient of the loss with respect to
    /// the network output). When the input gradient is not requested,
    /// backpropagation stops below the lowest op with trainable tensors.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        grad_output: &Tensor4<T>,
        want_input_grad: bool,
    ) -> Result<Gradients<T>> {
        if pass.mode != Mode::Train || pass.caches.len() != self.ops.len() {
            return Err(NnError::Contract(
                "backward needs the cache of a train-mode forward pass".into(),
            ));
        }
        if grad_output.dims() != pass.output.dims() {
            return Err(NnError::Contract(format!(
                "upstream gradient {:?} does not match output {:?}",
                grad_output.dims(),
                pass.output.dims()
            )));
        }
        let mut grads = ParamGrads::zeros_like(&self.params);
        let lowest = if want_input_grad {
            0
        } else {
            match (0..self.ops.len()).find(|&i| self.op_has_trainable(i)) {
                Some(i) => i,
                None => return Ok(Gradients { params: grads, input: None }),
            }
        };
        let mut dy = grad_output.clone();
        for i in (lowest..self.ops.len()).rev() {
            let need_dx = want_input_grad || i > lowest;
            let p = &self.params;
            let dx = match (&self.ops[i], &pass.caches[i]) {
                (Op::Conv(op), OpCache::Conv(c)) => op.backward(p, c, &dy, &mut grads, need_dx),
                (Op::Bn(op), OpCache::Bn(c)) => op.backward(p, c, &dy, &mut grads, need_dx),
                (Op::Act(slope), OpCache::Act(c)) => Some(leaky_relu_backward(c, &dy, *slope)),
                (Op::Res(op), OpCache::Res(c)) => op.backward(p, c, &dy, &mut grads, need_dx),
                (Op::Pool(kinds), OpCache::Pool(c)) => Some(pool_backward(c, &dy, kinds)),
                (Op::Dense(op), OpCache::Dense(c)) => op.backward(p, c, &dy, &mut grads, need_dx),
                _ => unreachable!("cache kinds follow op kinds"),
            };
            match dx {
                Some(dx) => dy = dx,
                None => break,
            }
        }
        Ok(Gradients {
            params: grads,
            input: want_input_grad.then_some(dy),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DeskNetConfig;

    fn small_cfg() -> DeskNetConfig {
        DeskNetConfig {
            input_bins: 17,
            nominal_frames: 12,
            conv1_channels: 3,
            block_channels: vec![4, 4],
            embedding_dim: 6,
            ..DeskNetConfig::default()
        }
    }

    fn batch(n: usize, t: usize, f: usize, seed: u64) -> Tensor4<f64> {
        let mut rng = rng_from(seed);
        let data = (0..n * t * f)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })
            .collect();
        Tensor4::from_vec([n, t, f, 1], data)
    }

    #[test]
    fn desk_scale_network_forward_shapes() {
        let cfg = DeskNetConfig::default();
        let net = Network::<f32>::build(&cfg.classifier_spec(), 1).unwrap();
        let x = Tensor4::<f32>::zeros([2, 120, 257, 1]);
        let out = net.infer(&x).unwrap();
        assert_eq!(out.output.dims(), [2, 1, 1, 2]);
        assert_eq!(out.embedding.dims(), [2, 1, 1, 64]);
    }

    #[test]
    fn same_seed_same_params() {
        let spec = small_cfg().classifier_spec();
        let a = Network::<f32>::build(&spec, 5).unwrap();
        let b = Network::<f32>::build(&spec, 5).unwrap();
        let c = Network::<f32>::build(&spec, 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        for t in &a.params().tensors {
            if t.name.ends_with("gamma") || t.name.ends_with("running_var") {
                assert!(t.data.iter().all(|&v| v == 1.0));
            }
            if t.name.ends_with("beta") || t.name.ends_with("running_mean") {
                assert!(t.data.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_accepts_variable_length() {
        let net = Network::<f64>::build(&small_cfg().classifier_spec(), 2).unwrap();
        let x = batch(3, 20, 17, 1);
        let a = net.infer(&x).unwrap();
        let b = net.infer(&x).unwrap();
        assert_eq!(a.output, b.output);
        assert!(net.infer(&batch(1, 5, 17, 2)).is_ok());
        assert!(matches!(net.infer(&batch(1, 5, 16, 2)), Err(NnError::InputMismatch { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut net = Network::<f64>::build(&small_cfg().classifier_spec(), 3).unwrap();
        let pass = net.forward(&batch(4, 12, 17, 3), Mode::Train).unwrap();
        let g = net.backward(&pass, &Tensor4::zeros(pass.output.dims()), true).unwrap();
        assert!(g.params.all_zero());
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_infer_cache() {
        let net = Network::<f64>::build(&small_cfg().classifier_spec(), 3).unwrap();
        let pass = net.infer(&batch(2, 12, 17, 3)).unwrap();
        let err = net.backward(&pass, &Tensor4::zeros(pass.output.dims()), false);
        assert!(matches!(err, Err(NnError::Contract(_))));
    }

    #[test]
    fn non_finite_activation_names_the_layer() {
        let mut net = Network::<f64>::build(&small_cfg().classifier_spec(), 3).unwrap();
        net.params_mut().get_mut("l00_conv2d.weight").unwrap().data[0] = f64::INFINITY;
        match net.infer(&batch(1, 12, 17, 1)) {
            Err(NnError::NonFinite { layer }) => assert_eq!(layer, "l00_conv2d"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn residual_block_with_zero_second_conv_equals_skip_path() {
        let spec = NetSpec {
            input_bins: 9,
            input_channels: 2,
            nominal_frames: 8,
            layers: vec![LayerSpec::ResidualBlock {
                out_channels: 3,
                kernel: [3, 3],
                stride: [2, 2],
                negative_slope: 0.3,
            }],
            embedding_layer: 0,
        };
        let mut net = Network::<f64>::build_unvalidated_head(&spec, 4).unwrap();
        net.params_mut().get_mut("l00_residual_block.conv_b.weight").unwrap().data.fill(0.0);
        let mut rng = rng_from(9);
        let x = Tensor4::from_vec(
            [2, 8, 9, 2],
            (0..2 * 8 * 9 * 2).map(|_| StandardNormal.sample(&mut rng)).collect(),
        );
        let y = net.infer(&x).unwrap().output;

        let proj_spec = NetSpec {
            layers: vec![LayerSpec::Conv2d { out_channels: 3, kernel: [1, 1], stride: [2, 2] }],
            ..spec.clone()
        };
        let mut proj = Network::<f64>::build_unvalidated_head(&proj_spec, 0).unwrap();
        proj.params_mut().tensors[0].data = net.params().get("l00_residual_block.proj.weight").unwrap().data.clone();
        assert_eq!(y, proj.infer(&x).unwrap().output);
    }

    #[test]
    fn running_stats_converge_to_population() {
        let spec = NetSpec {
            input_bins: 17,
            input_channels: 1,
            nominal_frames: 12,
            layers: vec![LayerSpec::Batchnorm, LayerSpec::AvgpoolGlobal, LayerSpec::Dense { units: 2 }],
            embedding_layer: 2,
        };
        let mut net = Network::<f64>::build_unvalidated_head(&spec, 11).unwrap();
        let mut rng = rng_from(77);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            let data = (0..16 * 12 * 17)
                .map(|i| {
                    let z: f64 = StandardNormal.sample(rng);
                    2.0 + 0.5 * z + (i % 17) as f64 * 0.1
                })
                .collect();
            Tensor4::from_vec([16, 12, 17, 1], data)
        };
        for _ in 0..200 {
            let b = draw(&mut rng);
            net.forward(&b, Mode::Train).unwrap();
        }
        // population: mean 2 + 0.8, variance 0.25 + 0.01 * (17^2 - 1) / 12
        let mean = net.params().get("l00_batchnorm.running_mean").unwrap().data[0];
        let var = net.params().get("l00_batchnorm.running_var").unwrap().data[0];
        assert!((mean - 2.8).abs() < 1e-2, "mean {mean}");
        assert!((var - 0.49).abs() / 0.49 < 2e-2, "var {var}");

        let probe = draw(&mut rng);
        let train = net.forward_pure(&probe, Mode::Train).unwrap().output;
        let infer = net.infer(&probe).unwrap().output;
        for (a, b) in train.data().iter().zip(infer.data()) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn frozen_prefix_gets_no_backward() {
        let cfg = small_cfg();
        let mut net = Network::<f64>::build(&cfg.classifier_spec(), 3).unwrap();
        net.set_frozen_upto(Some(cfg.last_block_layer()));
        let pass = net.forward(&batch(4, 12, 17, 3), Mode::Train).unwrap();
        let dy = Tensor4::from_vec(pass.output.dims(), vec![1.0; 8]);
        let g = net.backward(&pass, &dy, false).unwrap();
        for (t, grad) in net.params().tensors.iter().zip(&g.params.grads) {
            if t.frozen {
                assert!(grad.iter().all(|&v| v == 0.0), "{}", t.name);
            }
        }
        assert!(g.params.max_abs() > 0.0);
    }
}
