//! VoxAtnNet: a 3D convolutional network over occupancy grids with a
//! channel-attention gate on the third convolution's activation.
//!
//! ```text
//! input -> conv1 -> lrelu -> conv2 -> lrelu -> conv3 -> lrelu = A
//!   A -> global max pool -> fc -> relu -> fc --+
//!   A -> global avg pool -> fc -> relu -> fc --+-> concat -> sigmoid = g
//!   g * A -> tail conv -> lrelu -> flatten -> fc -> lrelu -> fc -> softmax
//! ```
//!
//! Without attention, `A` feeds the tail convolution directly.

use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloudio::{augment, AugmentSpec, BinaryClass, ClassLabel, PointCloud};
use crate::tengine::checkpoint::{read_vxm1, write_vxm1};
use crate::tengine::gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, NETWORK_TOLERANCE};
use crate::tengine::{ConvGeom, Fault, Graph, LayerSpec, NodeId, PoolMode, SgdmState, Tensor};
use crate::voxel::{voxelize, GridSpec, VoxelGrid};
use crate::{derive_seed, Error, Result};

pub const NUM_CLASSES: usize = 2;
/// The learnable-parameter total the default configuration is sized to match.
pub const TARGET_PARAMETERS: usize = 35_700_000;
const CONV1_FILTERS: usize = 64;
const CONV_FILTERS: usize = 32;
/// Width of each attention branch's output; two branches concatenate to
/// `CONV_FILTERS` gates.
const BRANCH_OUT: usize = CONV_FILTERS / 2;
/// Bias that saturates the attention sigmoid to exactly 1.0.
const GATE_OPEN_BIAS: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterVariant {
    /// 5x5x5 first convolution, 3x3x3 elsewhere.
    PaperDefault,
    All3x3,
    All5x5,
    All7x7,
}

impl FilterVariant {
    pub const ALL: [FilterVariant; 4] = [
        FilterVariant::All3x3,
        FilterVariant::All5x5,
        FilterVariant::All7x7,
        FilterVariant::PaperDefault,
    ];

    /// Kernel edge for conv1 and for the remaining convolutions.
    fn kernels(self) -> (usize, usize) {
        match self {
            FilterVariant::PaperDefault => (5, 3),
            FilterVariant::All3x3 => (3, 3),
            FilterVariant::All5x5 => (5, 5),
            FilterVariant::All7x7 => (7, 7),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FilterVariant::PaperDefault => "paper_default",
            FilterVariant::All3x3 => "all_3x3",
            FilterVariant::All5x5 => "all_5x5",
            FilterVariant::All7x7 => "all_7x7",
        }
    }
}

impl fmt::Display for FilterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub filter_variant: FilterVariant,
    pub attention_enabled: bool,
    /// Hidden width of each attention branch.
    pub attention_hidden: usize,
    pub fc_hidden: usize,
    pub leaky_slope: f64,
    /// Edge length of the cubic input grid.
    pub input_resolution: usize,
    /// Start the output layer at zero so every initial score is 0.5.
    pub zero_init_head: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            filter_variant: FilterVariant::PaperDefault,
            attention_enabled: true,
            attention_hidden: 16,
            // Sized so the 64^3 default lands within 5% of TARGET_PARAMETERS.
            fc_hidden: 34,
            leaky_slope: 0.01,
            input_resolution: 64,
            zero_init_head: false,
            init_seed: 0,
        }
    }
}

fn conv(name: &str, in_channels: usize, num_filters: usize, k: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv3d {
        name: name.into(),
        in_channels,
        num_filters,
        filter: [k; 3],
        stride: [stride; 3],
        padding: [k / 2; 3],
    }
}

fn fc(name: &str, in_dim: usize, out_dim: usize) -> LayerSpec {
    LayerSpec::FullyConnected {
        name: name.into(),
        in_dim,
        out_dim,
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_resolution < 2 {
            return Err(Error::InvalidConfig(format!(
                "input_resolution must be >= 2, got {}",
                self.input_resolution
            )));
        }
        if self.attention_hidden == 0 || self.fc_hidden == 0 {
            return Err(Error::InvalidConfig("attention_hidden and fc_hidden must be >= 1".into()));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::InvalidConfig("leaky_slope must be finite".into()));
        }
        Ok(())
    }

    /// Spatial edge after the strided first convolution.
    pub fn feature_resolution(&self) -> usize {
        let (k1, _) = self.filter_variant.kernels();
        let pad = k1 / 2;
        (self.input_resolution + 2 * pad - k1) / 2 + 1
    }

    pub fn flattened_dim(&self) -> usize {
        CONV_FILTERS * self.feature_resolution().pow(3)
    }

    /// Ordered layer manifest. Parameter tensors follow the same order.
    pub fn manifest(&self) -> Vec<LayerSpec> {
        let (k1, k) = self.filter_variant.kernels();
        let act = LayerSpec::LeakyRelu {
            slope: self.leaky_slope,
        };
        let mut m = vec![
            conv("conv1", 1, CONV1_FILTERS, k1, 2),
            act.clone(),
            conv("conv2", CONV1_FILTERS, CONV_FILTERS, k, 1),
            act.clone(),
            conv("conv3", CONV_FILTERS, CONV_FILTERS, k, 1),
            act.clone(),
        ];
        if self.attention_enabled {
            for (pool, branch) in [
                (LayerSpec::GlobalMaxPool, "attention_max"),
                (LayerSpec::GlobalAvgPool, "attention_avg"),
            ] {
                m.push(pool);
                m.push(fc(&format!("{branch}.fc1"), CONV_FILTERS, self.attention_hidden));
                m.push(LayerSpec::Relu);
                m.push(fc(&format!("{branch}.fc2"), self.attention_hidden, BRANCH_OUT));
            }
            m.extend([LayerSpec::Concat, LayerSpec::Sigmoid, LayerSpec::Multiply]);
        }
        m.extend([
            conv("tail_conv", CONV_FILTERS, CONV_FILTERS, k, 1),
            act.clone(),
            LayerSpec::Flatten,
            fc("fc1", self.flattened_dim(), self.fc_hidden),
            act,
            fc("fc2", self.fc_hidden, NUM_CLASSES),
            LayerSpec::Softmax,
        ]);
        m
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.manifest().iter().flat_map(LayerSpec::param_shapes).collect()
    }

    /// Learnable scalars of the model this configuration builds.
    pub fn parameter_count(&self) -> usize {
        self.manifest().iter().map(LayerSpec::parameter_count).sum()
    }
}

/// Stable 64-bit tag for a parameter name.
fn name_tag(name: &str) -> u64 {
    // FNV-1a.
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    manifest: Vec<LayerSpec>,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Builds a freshly initialized model: He-normal weights, zero biases.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let manifest = config.manifest();
    for layer in &manifest {
        layer.validate()?;
    }
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape) in manifest.iter().flat_map(LayerSpec::param_shapes) {
        let tensor = if name.ends_with(".bias") || (config.zero_init_head && name.starts_with("fc2.")) {
            Tensor::zeros(shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.init_seed, name_tag(&name)));
            Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
        };
        names.push(name);
        params.push(tensor.with_requires_grad(true));
    }
    Ok(Model {
        config: config.clone(),
        manifest,
        names,
        params,
    })
}

/// Parameter leaves consumed in manifest order.
struct ParamNodes {
    ids: Vec<NodeId>,
    next: usize,
}

impl ParamNodes {
    fn take(&mut self) -> (NodeId, NodeId) {
        let pair = (self.ids[self.next], self.ids[self.next + 1]);
        self.next += 2;
        pair
    }
}

fn conv_block(g: &mut Graph<'_>, p: &mut ParamNodes, x: NodeId, layer: &LayerSpec, slope: f64) -> Result<NodeId> {
    let LayerSpec::Conv3d { stride, padding, .. } = layer else {
        unreachable!("manifest order is fixed")
    };
    let (w, b) = p.take();
    let y = g.conv3d(x, w, b, ConvGeom::new(*stride, *padding))?;
    g.leaky_relu(y, slope)
}

fn attention_branch(g: &mut Graph<'_>, p: &mut ParamNodes, a: NodeId, mode: PoolMode) -> Result<NodeId> {
    let pooled = g.global_pool(a, mode)?;
    let (w1, b1) = p.take();
    let h = g.linear(pooled, w1, b1)?;
    let h = g.relu(h)?;
    let (w2, b2) = p.take();
    g.linear(h, w2, b2)
}

/// Appends the network to `g`; returns the softmax node and the parameter
/// leaves.
fn forward_graph<'a>(
    config: &ModelConfig,
    manifest: &[LayerSpec],
    params: &'a [Tensor],
    g: &mut Graph<'a>,
    input: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    let ids = params.iter().map(|p| g.leaf_ref(p)).collect::<Result<Vec<_>>>()?;
    let mut p = ParamNodes { ids: ids.clone(), next: 0 };
    let slope = config.leaky_slope;
    let x = conv_block(g, &mut p, input, &manifest[0], slope)?;
    let x = conv_block(g, &mut p, x, &manifest[2], slope)?;
    let a = conv_block(g, &mut p, x, &manifest[4], slope)?;
    let (gated, tail) = if config.attention_enabled {
        let m = attention_branch(g, &mut p, a, PoolMode::Max)?;
        let v = attention_branch(g, &mut p, a, PoolMode::Avg)?;
        let cat = g.concat(m, v)?;
        let gate = g.sigmoid(cat)?;
        (g.multiply_broadcast(gate, a)?, &manifest[17])
    } else {
        (a, &manifest[6])
    };
    let x = conv_block(g, &mut p, gated, tail, slope)?;
    let x = g.flatten(x)?;
    let (w, b) = p.take();
    let x = g.linear(x, w, b)?;
    let x = g.leaky_relu(x, slope)?;
    let (w, b) = p.take();
    let logits = g.linear(x, w, b)?;
    Ok((g.softmax(logits)?, ids))
}

/// Stacks grids into a `[N, 1, R, R, R]` batch.
pub fn batch_tensor(grids: &[&VoxelGrid]) -> Result<Tensor> {
    let Some(first) = grids.first() else {
        return Err(Error::Shape("empty batch".into()));
    };
    let r = first.resolution();
    let mut data = Vec::with_capacity(grids.len() * r * r * r);
    for grid in grids {
        if grid.resolution() != r {
            return Err(Error::Shape(format!(
                "batch mixes resolutions {r} and {}",
                grid.resolution()
            )));
        }
        data.extend(grid.occupancy().iter().map(|&b| f64::from(b)));
    }
    Tensor::from_vec([grids.len(), 1, r, r, r], data)
}

fn one_hot(labels: &[BinaryClass]) -> Tensor {
    let mut t = vec![0.0; labels.len() * NUM_CLASSES];
    for (i, l) in labels.iter().enumerate() {
        t[i * NUM_CLASSES + l.index()] = 1.0;
    }
    Tensor::from_vec([labels.len(), NUM_CLASSES], t).expect("non-empty label batch")
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn manifest(&self) -> &[LayerSpec] {
        &self.manifest
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let r = self.config.input_resolution;
        match x.shape() {
            [n, 1, d, h, w] if *n > 0 && [*d, *h, *w] == [r; 3] => Ok(()),
            s => Err(Error::Shape(format!("model expects [N,1,{r},{r},{r}] input, got {s:?}"))),
        }
    }

    /// Class probabilities `[N, 2]` (bona fide, attack).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let input = g.leaf_ref(x)?;
        let (probs, _) = forward_graph(&self.config, &self.manifest, &self.params, &mut g, input)?;
        Ok(g.value(probs).clone())
    }

    /// Attack-class probability for one grid.
    pub fn predict_score(&self, grid: &VoxelGrid) -> Result<f64> {
        Ok(self.predict_scores(&[grid])?[0])
    }

    pub fn predict_scores(&self, grids: &[&VoxelGrid]) -> Result<Vec<f64>> {
        let r = self.config.input_resolution;
        if let Some(bad) = grids.iter().find(|g| g.resolution() != r) {
            return Err(Error::Shape(format!(
                "grid resolution {} does not match model input {r}",
                bad.resolution()
            )));
        }
        let mut scores = Vec::with_capacity(grids.len());
        for chunk in grids.chunks(8) {
            let probs = self.forward(&batch_tensor(chunk)?)?;
            for i in 0..chunk.len() {
                scores.push(probs.row(i)[BinaryClass::Attack.index()]);
            }
        }
        Ok(scores)
    }

    /// Mean cross-entropy of a batch and its gradient for every parameter.
    pub fn loss_and_grads(&self, x: &Tensor, labels: &[BinaryClass]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_input(x)?;
        loss_and_grads(&self.config, &self.manifest, &self.params, x, &one_hot(labels), None)
    }

    /// Saturates the attention gate so it passes its input through unchanged.
    pub fn force_gate_open(&mut self) {
        for branch in ["attention_max", "attention_avg"] {
            if let Some(w) = self.param_mut(&format!("{branch}.fc2.weight")) {
                w.data_mut().fill(0.0);
            }
            if let Some(b) = self.param_mut(&format!("{branch}.fc2.bias")) {
                b.data_mut().fill(GATE_OPEN_BIAS);
            }
        }
    }

    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        write_vxm1(&self.manifest, &self.params)
    }

    /// Loads a checkpoint written for exactly this configuration.
    pub fn from_checkpoint(config: &ModelConfig, bytes: &[u8]) -> Result<Model> {
        let mut model = build_model(config)?;
        let params = read_vxm1(bytes, &model.manifest)?;
        model.params = params.into_iter().map(|t| t.with_requires_grad(true)).collect();
        Ok(model)
    }

    /// Layer manifest with output shapes and parameter counts.
    pub fn summary(&self) -> String {
        model_summary(&self.config)
    }
}

fn loss_and_grads(
    config: &ModelConfig,
    manifest: &[LayerSpec],
    params: &[Tensor],
    x: &Tensor,
    targets: &Tensor,
    fault: Option<Fault>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = fault.map_or_else(Graph::new, Graph::with_fault);
    let input = g.leaf_ref(x)?;
    let (probs, ids) = forward_graph(config, manifest, params, &mut g, input)?;
    let t = g.leaf_ref(targets)?;
    let loss = g.cross_entropy(probs, t)?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let out = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    Ok((value, out))
}

fn shape_str(dims: &[usize]) -> String {
    let d: Vec<String> = dims.iter().map(usize::to_string).collect();
    format!("[N,{}]", d.join(","))
}

/// Text summary of the model `config` builds, without allocating weights.
pub fn model_summary(config: &ModelConfig) -> String {
    let manifest = config.manifest();
    let r = config.input_resolution;
    let f = config.feature_resolution();
    let mut out = String::new();
    let _ = writeln!(out, "VoxAtnNet ({}, attention {})", config.filter_variant, if config.attention_enabled { "on" } else { "off" });
    let _ = writeln!(out, "input {}", shape_str(&[1, r, r, r]));
    let _ = writeln!(out, "{:>3}  {:<70} {:<20} {:>12}", "#", "layer", "output", "params");
    let mut shape = vec![1, r, r, r];
    let feature = vec![CONV_FILTERS, f, f, f];
    let mut after_pool = false;
    for (i, layer) in manifest.iter().enumerate() {
        shape = match layer {
            LayerSpec::Conv3d { num_filters, .. } => vec![*num_filters, f, f, f],
            LayerSpec::GlobalMaxPool | LayerSpec::GlobalAvgPool => {
                after_pool = true;
                vec![CONV_FILTERS]
            }
            LayerSpec::FullyConnected { out_dim, .. } => vec![*out_dim],
            LayerSpec::Concat => vec![CONV_FILTERS],
            LayerSpec::Multiply => {
                after_pool = false;
                feature.clone()
            }
            LayerSpec::Flatten => vec![config.flattened_dim()],
            _ => shape,
        };
        let note = if after_pool && matches!(layer, LayerSpec::GlobalMaxPool | LayerSpec::GlobalAvgPool) {
            " (of conv3 activation)"
        } else {
            ""
        };
        let _ = writeln!(
            out,
            "{:>3}  {:<70} {:<20} {:>12}",
            i + 1,
            format!("{layer}{note}"),
            shape_str(&shape),
            layer.parameter_count()
        );
    }
    let total = config.parameter_count();
    let reference = ModelConfig {
        input_resolution: 64,
        filter_variant: FilterVariant::PaperDefault,
        attention_enabled: true,
        ..config.clone()
    }
    .parameter_count();
    let _ = writeln!(out, "layers: {}", manifest.len());
    let _ = writeln!(out, "learnable parameters: {total} ({:.2}M)", total as f64 / 1e6);
    let _ = writeln!(
        out,
        "calibration: fc_hidden={} with padding floor(k/2) gives a flattened size of {}; \
         at 64^3 the paper_default total is {reference} ({:+.2}% of {TARGET_PARAMETERS})",
        config.fc_hidden,
        config.flattened_dim(),
        100.0 * (reference as f64 / TARGET_PARAMETERS as f64 - 1.0),
    );
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub augment: AugmentSpec,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 30,
            augment: AugmentSpec::default(),
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be >= 1".into()));
        }
        self.augment.validate()?;
        SgdmState::new(self.learning_rate, self.momentum).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub samples: usize,
}

fn check_two_classes(labels: impl Iterator<Item = BinaryClass>) -> Result<()> {
    let mut seen = [false; NUM_CLASSES];
    for l in labels {
        seen[l.index()] = true;
    }
    if seen.iter().all(|&s| s) {
        Ok(())
    } else {
        Err(Error::SingleClass)
    }
}

/// Trains on normalized clouds, augmenting and voxelizing them afresh each
/// epoch. Returns the mean batch loss of every epoch.
pub fn train(
    model: &mut Model,
    clouds: &[PointCloud],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<Vec<f64>> {
    check_two_classes(clouds.iter().map(|c| c.label.binary()))?;
    let spec = GridSpec::with_resolution(model.config.input_resolution);
    run_epochs(model, cfg, on_epoch, |epoch| {
        let mut samples = Vec::new();
        for (i, cloud) in clouds.iter().enumerate() {
            let aug = AugmentSpec {
                rng_seed: derive_seed(derive_seed(cfg.rng_seed, epoch as u64), i as u64),
                ..cfg.augment.clone()
            };
            for copy in augment(cloud, &aug)? {
                samples.push((voxelize(&copy, &spec)?, cloud.label.binary()));
            }
        }
        Ok(samples)
    })
}

/// Trains on fixed grids without augmentation.
pub fn train_grids(
    model: &mut Model,
    samples: &[(VoxelGrid, ClassLabel)],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<Vec<f64>> {
    check_two_classes(samples.iter().map(|(_, l)| l.binary()))?;
    let fixed: Vec<(VoxelGrid, BinaryClass)> = samples.iter().map(|(g, l)| (g.clone(), l.binary())).collect();
    run_epochs(model, cfg, on_epoch, |_| Ok(fixed.clone()))
}

fn run_epochs(
    model: &mut Model,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
    mut materialize: impl FnMut(usize) -> Result<Vec<(VoxelGrid, BinaryClass)>>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut opt = SgdmState::new(cfg.learning_rate, cfg.momentum)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let samples = materialize(epoch)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed ^ 0x5eed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let grids: Vec<&VoxelGrid> = chunk.iter().map(|&i| &samples[i].0).collect();
            let labels: Vec<BinaryClass> = chunk.iter().map(|&i| samples[i].1).collect();
            let x = batch_tensor(&grids)?;
            let (loss, grads) = model.loss_and_grads(&x, &labels).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged(format!(
                    "epoch {} batch {}: non-finite value in {what}",
                    epoch + 1,
                    batches + 1
                )),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {} batch {}: loss {loss}", epoch + 1, batches + 1)));
            }
            opt.step(&mut model.params, &grads)?;
            total += loss;
            batches += 1;
        }
        let mean_loss = total / batches as f64;
        history.push(mean_loss);
        on_epoch(&EpochStats {
            epoch: epoch + 1,
            mean_loss,
            batches,
            samples: samples.len(),
        });
    }
    Ok(history)
}

/// Finite-difference check of the whole network on random continuous input.
pub fn network_gradcheck(config: &ModelConfig, seed: u64, fault: Option<Fault>) -> Result<GradCheckReport> {
    let mut model = build_model(&ModelConfig {
        zero_init_head: false,
        init_seed: seed,
        ..config.clone()
    })?;
    // Non-zero biases keep pre-activations away from exact ties.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    for (name, p) in model.names.iter().zip(model.params.iter_mut()) {
        if name.ends_with(".bias") {
            let shape = p.shape().to_vec();
            *p = Tensor::uniform(shape, -0.1, 0.1, &mut rng).with_requires_grad(true);
        }
    }
    let r = config.input_resolution;
    let x = Tensor::uniform([2, 1, r, r, r], 0.0, 1.0, &mut rng);
    let targets = one_hot(&[BinaryClass::BonaFide, BinaryClass::Attack]);
    let (cfg, manifest) = (model.config.clone(), model.manifest.clone());
    let names = model.names.clone();
    gradient_check(
        &mut model.params,
        &names,
        |params, _| loss_and_grads(&cfg, &manifest, params, &x, &targets, fault),
        &GradCheckConfig {
            epsilon: 1e-6,
            tolerance: NETWORK_TOLERANCE,
            seed,
            ..GradCheckConfig::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(res: usize) -> ModelConfig {
        ModelConfig {
            input_resolution: res,
            fc_hidden: 8,
            ..ModelConfig::default()
        }
    }

    fn zero_head(cfg: ModelConfig) -> ModelConfig {
        ModelConfig { zero_init_head: true, ..cfg }
    }

    #[test]
    fn parameter_count_closed_forms() {
        let cfg = ModelConfig::default();
        let m = cfg.manifest();
        assert_eq!(m[0].parameter_count(), 8064);
        assert_eq!(fc("x", 10, 5).parameter_count(), 55);
        assert_eq!(cfg.flattened_dim(), 32 * 32 * 32 * 32);
        let total = cfg.parameter_count();
        let expected = 8064 + 55_328 + 27_680 + 2 * (528 + 272) + 27_680 + (1_048_576 + 1) * 34 + 70;
        assert_eq!(total, expected);
        let ratio = total as f64 / TARGET_PARAMETERS as f64;
        assert!((0.95..=1.05).contains(&ratio), "{total}");
    }

    #[test]
    fn manifest_layout() {
        let on = ModelConfig::default().manifest();
        let off = ModelConfig {
            attention_enabled: false,
            ..ModelConfig::default()
        }
        .manifest();
        assert_eq!(on.len(), 24);
        assert_eq!(off.len(), 13);
        assert!(matches!(&on[17], LayerSpec::Conv3d { name, .. } if name == "tail_conv"));
        assert!(matches!(&off[6], LayerSpec::Conv3d { name, .. } if name == "tail_conv"));
        let on_count = ModelConfig::default().parameter_count();
        let off_count = ModelConfig { attention_enabled: false, ..ModelConfig::default() }.parameter_count();
        assert_eq!(on_count - off_count, 1600);
        for v in FilterVariant::ALL {
            let c = ModelConfig { filter_variant: v, input_resolution: 16, ..ModelConfig::default() };
            assert_eq!(c.feature_resolution(), 8, "{v}");
        }
    }

    #[test]
    fn summary_reports_count_and_calibration() {
        let s = model_summary(&ModelConfig::default());
        assert!(s.contains("learnable parameters: 35772040 (35.77M)"), "{s}");
        assert!(s.contains("calibration: fc_hidden=34"));
        assert!(s.contains("[N,64,32,32,32]"));
        assert!(s.contains("[N,2]"));
    }

    #[test]
    fn forward_at_full_resolution() {
        let model = build_model(&zero_head(ModelConfig::default())).unwrap();
        assert_eq!(model.parameter_count(), ModelConfig::default().parameter_count());
        let probs = model.forward(&Tensor::zeros([2, 1, 64, 64, 64])).unwrap();
        assert_eq!(probs.shape(), &[2, 2]);
        for i in 0..2 {
            assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(probs.row(i), &[0.5, 0.5]);
        }
    }

    #[test]
    fn scores_and_shape_errors() {
        let model = build_model(&small(16)).unwrap();
        let mut grid = VoxelGrid::empty(GridSpec::with_resolution(16)).unwrap();
        grid.set(3, 4, 5);
        let s = model.predict_score(&grid).unwrap();
        let probs = model.forward(&batch_tensor(&[&grid]).unwrap()).unwrap();
        assert!((s + probs.row(0)[0] - 1.0).abs() < 1e-12);
        assert_eq!(s, probs.row(0)[1]);
        let wrong = VoxelGrid::empty(GridSpec::with_resolution(8)).unwrap();
        assert!(matches!(model.predict_score(&wrong), Err(Error::Shape(_))));
        assert!(model.forward(&Tensor::zeros([1, 1, 16, 16, 8])).is_err());
        let zero_head = build_model(&zero_head(small(16))).unwrap();
        assert_eq!(zero_head.predict_score(&grid).unwrap(), 0.5);
    }

    #[test]
    fn open_gate_matches_disabled_attention() {
        let on_cfg = small(16);
        let off_cfg = ModelConfig { attention_enabled: false, ..on_cfg.clone() };
        let mut on = build_model(&on_cfg).unwrap();
        let off = build_model(&off_cfg).unwrap();
        assert!(off.parameter_count() < on.parameter_count());
        on.force_gate_open();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform([2, 1, 16, 16, 16], 0.0, 1.0, &mut rng);
        let a = on.forward(&x).unwrap();
        let b = off.forward(&x).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-12, "{p} vs {q}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small(8);
        let mut model = build_model(&cfg).unwrap();
        model.force_gate_open();
        let bytes = model.to_checkpoint().unwrap();
        let back = Model::from_checkpoint(&cfg, &bytes).unwrap();
        assert_eq!(back.params(), model.params());
        let other = ModelConfig { input_resolution: 16, ..cfg.clone() };
        assert!(matches!(Model::from_checkpoint(&other, &bytes), Err(Error::Checkpoint(_))));
        let other = ModelConfig { attention_enabled: false, ..cfg };
        assert!(Model::from_checkpoint(&other, &bytes).is_err());
    }

    fn toy_set(res: usize) -> Vec<(VoxelGrid, ClassLabel)> {
        let empty = VoxelGrid::empty(GridSpec::with_resolution(res)).unwrap();
        let mut corner = empty.clone();
        for i in 0..res / 2 {
            for j in 0..res / 2 {
                for k in 0..res / 2 {
                    corner.set(i, j, k);
                }
            }
        }
        vec![(empty, ClassLabel::BonaFide), (corner, ClassLabel::SiliconeMask)]
    }

    #[test]
    fn learning_rate_zero_leaves_parameters() {
        let mut model = build_model(&small(8)).unwrap();
        let before = model.params().to_vec();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 1, ..TrainConfig::default() };
        train_grids(&mut model, &toy_set(8), &cfg, &mut |_| {}).unwrap();
        assert_eq!(model.params(), &before[..]);
    }

    #[test]
    fn single_class_is_rejected() {
        let mut model = build_model(&small(8)).unwrap();
        let mut set = toy_set(8);
        set.pop();
        let err = train_grids(&mut model, &set, &TrainConfig::default(), &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::SingleClass));
    }

    #[test]
    fn fits_separable_toy_set() {
        let set = toy_set(8);
        let cfg = TrainConfig { epochs: 50, ..TrainConfig::default() };
        let run = || {
            let mut model = build_model(&small(8)).unwrap();
            let mut seen = 0;
            let history = train_grids(&mut model, &set, &cfg, &mut |s| seen = s.epoch).unwrap();
            assert_eq!(seen, 50);
            (model, history)
        };
        let (model, history) = run();
        assert!(*history.last().unwrap() < 0.1, "{history:?}");
        for w in history[5..].windows(2) {
            assert!(w[1] <= w[0], "loss rose after epoch 5: {history:?}");
        }
        assert!(model.predict_score(&set[0].0).unwrap() < 0.1);
        assert!(model.predict_score(&set[1].0).unwrap() > 0.9);
        let (again, history2) = run();
        assert_eq!(history, history2);
        assert_eq!(again.params(), model.params());
    }

    #[test]
    fn trains_on_clouds() {
        use crate::cloudio::{normalize, Point3};
        let cloud = |label, offset: f64| {
            let pts = (0..200)
                .map(|i| {
                    let t = i as f64 / 200.0;
                    Point3::new(t, offset * t * t, (7.0 * t).sin())
                })
                .collect();
            normalize(&PointCloud::new(pts).with_label(label, "x")).unwrap()
        };
        let clouds = vec![cloud(ClassLabel::BonaFide, 0.1), cloud(ClassLabel::WrapPhoto, 2.0)];
        let mut model = build_model(&small(8)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            augment: AugmentSpec { rotation_copies: 3, ..AugmentSpec::default() },
            ..TrainConfig::default()
        };
        let mut stats = Vec::new();
        let h = train(&mut model, &clouds, &cfg, &mut |s| stats.push(*s)).unwrap();
        assert_eq!(h.len(), 2);
        assert_eq!((stats[0].samples, stats[0].batches), (6, 2));
        assert!(h.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn composed_network_gradient() {
        let report = network_gradcheck(&ModelConfig { input_resolution: 16, ..ModelConfig::default() }, 3, None).unwrap();
        assert!(report.passed(), "{report}");
    }
}
