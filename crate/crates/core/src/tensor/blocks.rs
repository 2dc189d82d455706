//! Parameterized building blocks: convolutions, batch norm, the separable and
//! dilated candidate blocks, factorized reduction and the classifier layer.
//!
//! Blocks whose convolutions are approximable run through the multiplier in
//! quantized mode. While gradients are tracked they are evaluated twice: a
//! real-valued shadow pass that carries the gradient, and a quantized pass
//! (without gradient tracking) that supplies the value.

use rand::Rng;

use super::conv::{ConvDims, ConvGeometry};
use super::graph::{BnMode, Graph, PoolGeometry, Var};
use super::params::{BufferId, ParamGroup, ParamId, ParamStore};
use super::{ExecMode, Tensor};
use crate::error::Result;

pub const BN_MOMENTUM: f64 = 0.1;

/// Arithmetic class of a counted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountKind {
    /// Convolution executed through the multiplier in quantized mode.
    ApproxConv,
    ExactConv,
    Linear,
    BatchNorm,
    Pool,
    Relu,
    Add,
}

/// Operation count contributed by one layer invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub layer: String,
    pub kind: CountKind,
    pub approx_macs: u64,
    pub exact_flops: u64,
}

/// State threaded through one forward pass.
pub struct Session<'a> {
    pub graph: Graph,
    pub store: &'a mut ParamStore,
    pub mode: ExecMode,
    pub training: bool,
    counts: Option<Vec<LayerCount>>,
}

impl<'a> Session<'a> {
    pub fn new(graph: Graph, store: &'a mut ParamStore, mode: ExecMode, training: bool) -> Self {
        Session {
            graph,
            store,
            mode,
            training,
            counts: None,
        }
    }

    /// Records per-layer operation counts during the following forward pass.
    pub fn with_counting(mut self) -> Self {
        self.counts = Some(Vec::new());
        self
    }

    pub fn take_counts(&mut self) -> Vec<LayerCount> {
        self.counts.take().unwrap_or_default()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn record(&mut self, layer: &str, kind: CountKind, ops: u64) {
        if let Some(counts) = self.counts.as_mut() {
            let (approx_macs, exact_flops) = match kind {
                CountKind::ApproxConv => (ops, 0),
                _ => (0, ops),
            };
            counts.push(LayerCount {
                layer: layer.to_string(),
                kind,
                approx_macs,
                exact_flops,
            });
        }
    }

    fn numel(&self, v: Var) -> u64 {
        self.graph.value(v).numel() as u64
    }

    pub fn relu(&mut self, layer: &str, x: Var) -> Result<Var> {
        let n = self.numel(x);
        self.record(layer, CountKind::Relu, n);
        self.graph.relu(x)
    }

    pub fn add(&mut self, layer: &str, xs: &[Var]) -> Result<Var> {
        if xs.len() > 1 {
            let n = self.numel(xs[0]) * (xs.len() as u64 - 1);
            self.record(layer, CountKind::Add, n);
        }
        self.graph.add(xs)
    }

    /// 3×3 max pooling with same padding.
    pub fn max_pool3(&mut self, layer: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.graph.max_pool(x, PoolGeometry::same3(stride))?;
        let n = self.numel(y) * 9;
        self.record(layer, CountKind::Pool, n);
        Ok(y)
    }

    /// 3×3 average pooling with same padding, excluding padded positions.
    pub fn avg_pool3(&mut self, layer: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.graph.avg_pool(x, PoolGeometry::same3(stride))?;
        let n = self.numel(y) * 9;
        self.record(layer, CountKind::Pool, n);
        Ok(y)
    }

    pub fn global_avg_pool(&mut self, layer: &str, x: Var) -> Result<Var> {
        let n = self.numel(x);
        self.record(layer, CountKind::Pool, n);
        self.graph.global_avg_pool(x)
    }

    /// Zeros with the shape a stride-`stride` same-padded 3×3 op would produce.
    pub fn zeros_strided(&mut self, x: Var, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.graph.value(x).dims4()?;
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        self.graph.constant(Tensor::zeros([n, c, oh, ow]))
    }

    /// Evaluates an approximable path with straight-through gradients.
    ///
    /// `path(session, x, mode, track_stats)` must build the same computation
    /// for any mode.
    fn straight_through(
        &mut self,
        x: Var,
        approximable: bool,
        path: impl Fn(&mut Session<'a>, Var, &ExecMode, bool) -> Result<Var>,
    ) -> Result<Var> {
        let mode = self.mode.clone();
        if !approximable {
            return path(self, x, &ExecMode::Fp32Exact, true);
        }
        if !mode.is_quant() || !self.graph.grad_enabled() {
            return path(self, x, &mode, true);
        }
        let counting = self.counts.take();
        let shadow = path(self, x, &ExecMode::Fp32Exact, false);
        self.counts = counting;
        let shadow = shadow?;
        let prev = self.graph.set_grad_enabled(false);
        let value = path(self, x, &mode, true);
        self.graph.set_grad_enabled(prev);
        self.graph.straight_through(shadow, value?)
    }
}

/// Convolution without bias.
#[derive(Debug, Clone)]
pub struct Conv {
    name: String,
    weight: ParamId,
    geom: ConvGeometry,
    approximable: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geom: ConvGeometry,
        approximable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let per_group = c_in / geom.groups.max(1);
        let weight = store.add_he_normal(
            format!("{name}.weight"),
            [c_out, per_group, kernel, kernel],
            per_group * kernel * kernel,
            rng,
        );
        Conv {
            name: name.to_string(),
            weight,
            geom,
            approximable,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn is_approximable(&self) -> bool {
        self.approximable
    }

    /// Runs the convolution under `mode` if approximable, exactly otherwise.
    pub fn forward(&self, s: &mut Session<'_>, x: Var, mode: &ExecMode) -> Result<Var> {
        let w = s.param(self.weight);
        let dims = ConvDims::new(s.graph.shape(x), s.graph.shape(w), self.geom)?;
        let (kind, mode) = if self.approximable {
            (CountKind::ApproxConv, mode)
        } else {
            (CountKind::ExactConv, &ExecMode::Fp32Exact)
        };
        s.record(&self.name, kind, dims.macs());
        s.graph.conv2d(x, w, None, self.geom, mode)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    name: String,
    affine: Option<(ParamId, ParamId)>,
    running_mean: BufferId,
    running_var: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, affine: bool) -> Self {
        let affine = affine.then(|| {
            (
                store.add(
                    format!("{name}.gamma"),
                    Tensor::full([channels], 1.0),
                    ParamGroup::Weight,
                ),
                store.add(
                    format!("{name}.beta"),
                    Tensor::zeros([channels]),
                    ParamGroup::Weight,
                ),
            )
        });
        BatchNorm {
            name: name.to_string(),
            affine,
            running_mean: store.add_buffer(format!("{name}.running_mean"), vec![0.0; channels]),
            running_var: store.add_buffer(format!("{name}.running_var"), vec![1.0; channels]),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        self.forward_with(s, x, true)
    }

    /// `track_stats = false` normalizes with batch statistics in training
    /// without touching the running estimates.
    pub fn forward_with(&self, s: &mut Session<'_>, x: Var, track_stats: bool) -> Result<Var> {
        let (gamma, beta) = match self.affine {
            Some((g, b)) => (Some(s.param(g)), Some(s.param(b))),
            None => (None, None),
        };
        let n = s.numel(x);
        s.record(&self.name, CountKind::BatchNorm, 2 * n);
        if s.training {
            let running = if track_stats {
                Some(s.store.buffer_pair_mut(self.running_mean, self.running_var))
            } else {
                None
            };
            s.graph.batchnorm(
                x,
                gamma,
                beta,
                BnMode::Train {
                    running,
                    momentum: BN_MOMENTUM,
                },
            )
        } else {
            let mean = s.store.buffer(self.running_mean);
            let var = s.store.buffer(self.running_var);
            s.graph
                .batchnorm(x, gamma, beta, BnMode::Eval { mean, var })
        }
    }
}

/// ReLU → convolution → batch norm.
#[derive(Debug, Clone)]
pub struct ReluConvBn {
    name: String,
    conv: Conv,
    bn: BatchNorm,
}

impl ReluConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geom: ConvGeometry,
        affine: bool,
        approximable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        ReluConvBn {
            name: name.to_string(),
            conv: Conv::new(
                store,
                &format!("{name}.conv"),
                c_in,
                c_out,
                kernel,
                geom,
                approximable,
                rng,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out, affine),
        }
    }

    fn path(&self, s: &mut Session<'_>, x: Var, mode: &ExecMode, track: bool) -> Result<Var> {
        let y = s.relu(&self.name, x)?;
        let y = self.conv.forward(s, y, mode)?;
        self.bn.forward_with(s, y, track)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        s.straight_through(x, self.conv.is_approximable(), |s, x, m, t| {
            self.path(s, x, m, t)
        })
    }
}

/// ReLU → depthwise k×k → pointwise 1×1 → batch norm.
#[derive(Debug, Clone)]
struct DwPwBn {
    name: String,
    depthwise: Conv,
    pointwise: Conv,
    bn: BatchNorm,
}

impl DwPwBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        affine: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let padding = dilation * (kernel - 1) / 2;
        let dw_geom = ConvGeometry::new(stride, padding, dilation, c_in);
        DwPwBn {
            name: name.to_string(),
            depthwise: Conv::new(
                store,
                &format!("{name}.dw"),
                c_in,
                c_in,
                kernel,
                dw_geom,
                true,
                rng,
            ),
            pointwise: Conv::new(
                store,
                &format!("{name}.pw"),
                c_in,
                c_out,
                1,
                ConvGeometry::default(),
                true,
                rng,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out, affine),
        }
    }

    fn path(&self, s: &mut Session<'_>, x: Var, mode: &ExecMode, track: bool) -> Result<Var> {
        let y = s.relu(&self.name, x)?;
        let y = self.depthwise.forward(s, y, mode)?;
        let y = self.pointwise.forward(s, y, mode)?;
        self.bn.forward_with(s, y, track)
    }
}

/// Two stacked ReLU–depthwise–pointwise–BN blocks; only the first is strided.
#[derive(Debug, Clone)]
pub struct SepConv {
    first: DwPwBn,
    second: DwPwBn,
}

impl SepConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        affine: bool,
        rng: &mut impl Rng,
    ) -> Self {
        SepConv {
            first: DwPwBn::new(
                store,
                &format!("{name}.0"),
                c_in,
                c_in,
                kernel,
                stride,
                1,
                affine,
                rng,
            ),
            second: DwPwBn::new(
                store,
                &format!("{name}.1"),
                c_in,
                c_out,
                kernel,
                1,
                1,
                affine,
                rng,
            ),
        }
    }

    fn path(&self, s: &mut Session<'_>, x: Var, mode: &ExecMode, track: bool) -> Result<Var> {
        let y = self.first.path(s, x, mode, track)?;
        self.second.path(s, y, mode, track)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        s.straight_through(x, true, |s, x, m, t| self.path(s, x, m, t))
    }
}

/// One ReLU–depthwise (dilation 2)–pointwise–BN block.
#[derive(Debug, Clone)]
pub struct DilConv {
    block: DwPwBn,
}

impl DilConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        affine: bool,
        rng: &mut impl Rng,
    ) -> Self {
        DilConv {
            block: DwPwBn::new(store, name, c_in, c_out, kernel, stride, 2, affine, rng),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        s.straight_through(x, true, |s, x, m, t| self.block.path(s, x, m, t))
    }
}

/// Halves the resolution with two 1×1 stride-2 convolutions, the second on
/// the input offset by one pixel, concatenated along channels.
#[derive(Debug, Clone)]
pub struct FactorizedReduce {
    name: String,
    conv_a: Conv,
    conv_b: Conv,
    bn: BatchNorm,
}

impl FactorizedReduce {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        affine: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let geom = ConvGeometry::new(2, 0, 1, 1);
        let half = c_out / 2;
        FactorizedReduce {
            name: name.to_string(),
            conv_a: Conv::new(
                store,
                &format!("{name}.conv_a"),
                c_in,
                half,
                1,
                geom,
                false,
                rng,
            ),
            conv_b: Conv::new(
                store,
                &format!("{name}.conv_b"),
                c_in,
                c_out - half,
                1,
                geom,
                false,
                rng,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out, affine),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = s.relu(&self.name, x)?;
        let a = self.conv_a.forward(s, y, &ExecMode::Fp32Exact)?;
        let shifted = s.graph.shift(y)?;
        let b = self.conv_b.forward(s, shifted, &ExecMode::Fp32Exact)?;
        let cat = s.graph.concat(&[a, b])?;
        self.bn.forward(s, cat)
    }
}

/// Fully connected layer with bias.
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fin: usize,
        fout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 1.0 / (fin.max(1) as f64).sqrt();
        Linear {
            name: name.to_string(),
            weight: store.add_normal(
                format!("{name}.weight"),
                [fout, fin],
                std,
                ParamGroup::Weight,
                rng,
            ),
            bias: store.add(
                format!("{name}.bias"),
                Tensor::zeros([fout]),
                ParamGroup::Weight,
            ),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let [fout, fin] = s.graph.value(w).dims2()?;
        let n = s.graph.shape(x)[0] as u64;
        s.record(&self.name, CountKind::Linear, n * (fin * fout) as u64);
        s.graph.linear(x, w, Some(b))
    }
}

/// Convolution followed by batch norm without a leading ReLU (stem).
#[derive(Debug, Clone)]
pub struct ConvBn {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geom: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Self {
        ConvBn {
            conv: Conv::new(
                store,
                &format!("{name}.conv"),
                c_in,
                c_out,
                kernel,
                geom,
                false,
                rng,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out, true),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x, &ExecMode::Fp32Exact)?;
        self.bn.forward(s, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mult::{build_builtin_multiplier, BuiltinKind};
    use crate::tensor::{lut_lookups, reset_lut_lookups};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sep_conv_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let op = SepConv::new(&mut store, "op", 4, 6, 5, 2, false, &mut rng);
        let mut s = Session::new(Graph::new(), &mut store, ExecMode::Fp32Exact, true);
        let x = s.graph.input(input([2, 4, 7, 8], 1));
        let y = op.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[2, 6, 4, 4]);
    }

    #[test]
    fn dil_conv_keeps_resolution_at_stride_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let op = DilConv::new(&mut store, "op", 3, 3, 5, 1, false, &mut rng);
        let mut s = Session::new(Graph::new(), &mut store, ExecMode::Fp32Exact, true);
        let x = s.graph.input(input([1, 3, 9, 9], 2));
        let y = op.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[1, 3, 9, 9]);
    }

    #[test]
    fn identity_block_is_bn_of_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let op = DilConv::new(&mut store, "op", 2, 2, 3, 1, false, &mut rng);
        let dw = store.find("op.dw.weight").unwrap();
        let pw = store.find("op.pw.weight").unwrap();
        *store.value_mut(dw) =
            Tensor::from_fn([2, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        *store.value_mut(pw) = Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = input([2, 2, 5, 5], 3);

        let mut s = Session::new(Graph::new(), &mut store, ExecMode::Fp32Exact, true);
        let xv = s.graph.input(x.clone());
        let y = op.forward(&mut s, xv).unwrap();
        let got = s.graph.value(y).clone();

        let mut g = Graph::new();
        let xv = g.input(x);
        let r = g.relu(xv).unwrap();
        let want = g
            .batchnorm(
                r,
                None,
                None,
                BnMode::Train {
                    running: None,
                    momentum: 0.1,
                },
            )
            .unwrap();
        assert_eq!(&got, g.value(want));
    }

    #[test]
    fn factorized_reduce_halves_odd_sizes_by_ceiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let op = FactorizedReduce::new(&mut store, "fr", 4, 5, false, &mut rng);
        let mut s = Session::new(Graph::new(), &mut store, ExecMode::Fp32Exact, true);
        let x = s.graph.input(input([1, 4, 7, 7], 4));
        let y = op.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[1, 5, 4, 4]);
    }

    #[test]
    fn running_stats_update_only_when_tracking() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, true);
        let x = input([4, 2, 3, 3], 5);
        {
            let mut s = Session::new(Graph::new(), &mut store, ExecMode::Fp32Exact, true);
            let xv = s.graph.input(x.clone());
            bn.forward_with(&mut s, xv, false).unwrap();
        }
        assert_eq!(store.buffers()[0].value, vec![0.0, 0.0]);
        let mut s = Session::new(Graph::new(), &mut store, ExecMode::Fp32Exact, true);
        let xv = s.graph.input(x);
        bn.forward(&mut s, xv).unwrap();
        assert_ne!(store.buffers()[0].value, vec![0.0, 0.0]);
    }

    #[test]
    fn quant_forward_counts_lookups_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let op = SepConv::new(&mut store, "op", 3, 3, 3, 1, false, &mut rng);
        let mode = ExecMode::quant8(build_builtin_multiplier(BuiltinKind::Exact));
        let mut s = Session::new(Graph::new(), &mut store, mode, true).with_counting();
        let x = s.graph.input(input([1, 3, 6, 6], 6));
        reset_lut_lookups();
        op.forward(&mut s, x).unwrap();
        let counted: u64 = s.take_counts().iter().map(|c| c.approx_macs).sum();
        // two blocks of depthwise (3·36·9) + pointwise (3·36·3)
        assert_eq!(counted, 2 * (972 + 324));
        assert_eq!(lut_lookups(), counted);
    }
}
