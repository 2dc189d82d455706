//! Central finite-difference harness: analytic gradients of a random linear
//! read-out against central differences at `H`, with kink detection.

use axnas::darts::{build_supernet, SupernetConfig};
use axnas::tensor::{
    conv_out_len, BnMode, ConvGeometry, DilConv, ExecMode, FactorizedReduce, Graph, ParamGroup,
    ParamId, ParamStore, PoolGeometry, ReluConvBn, SepConv, Session, Tensor, Var,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: usize = 20;

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.05 apart, so no pooling window holds a tie.
fn distinct(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Tensor::from_fn(shape.to_vec(), |i| order[i] as f64 * 0.05 - 0.5)
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-4)`. The floor keeps gradients that vanish
/// exactly (weights feeding a normalization on their own are scale
/// invariant) from comparing two round-off residues.
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale =
        a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(1e-4)
}

/// Central differences at `H` and `H / 10`. Returns `None` when the two
/// disagree, which means the probe straddles a kink (a ReLU input or pooling
/// maximum changing sides) and the finite difference is not a derivative.
fn central_difference(n: usize, mut eval: impl FnMut(usize, f64) -> f64) -> Option<Vec<f64>> {
    let mut coarse = vec![0.0; n];
    let mut fine = vec![0.0; n];
    for j in 0..n {
        coarse[j] = (eval(j, H) - eval(j, -H)) / (2.0 * H);
        fine[j] = (eval(j, H / 10.0) - eval(j, -H / 10.0)) / (0.2 * H);
    }
    (rel_err(&coarse, &fine) < TOL / 10.0).then_some(coarse)
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> axnas::Result<Var> + 'a;

fn loss_of(inputs: &[Tensor], coeffs: &[f64], build: &Build<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let loss = g.dot(out, coeffs.to_vec()).unwrap();
    g.value(loss).data()[0]
}

/// Largest relative error over all inputs of `build` under a random linear
/// read-out of its output, or `None` at a kink.
fn check_inputs(inputs: Vec<Tensor>, build: &Build<'_>, rng: &mut impl Rng) -> Option<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let coeffs: Vec<f64> = (0..g.value(out).numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let loss = g.dot(out, coeffs.clone()).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map_or_else(|| vec![0.0; inputs[i].numel()], |t| t.data().to_vec());
        let mut probe = inputs.clone();
        let numeric = central_difference(inputs[i].numel(), |j, h| {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let l = loss_of(&probe, &coeffs, build);
            probe[i].data_mut()[j] = x0;
            l
        })?;
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Some(worst)
}

/// Result of checking one op family.
#[derive(Debug, Clone)]
pub struct FdOutcome {
    pub name: &'static str,
    pub checked: usize,
    pub redrawn: usize,
    pub worst: f64,
    pub failure: Option<String>,
}

impl FdOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Checks `INSTANCES` random instances of one op. Instances sitting on a
/// kink are redrawn, at most `INSTANCES` times in total.
fn run(name: &'static str, mut case: impl FnMut(&mut ChaCha8Rng) -> Option<f64>) -> FdOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    let mut out = FdOutcome {
        name,
        checked: 0,
        redrawn: 0,
        worst: 0.0,
        failure: None,
    };
    while out.checked < INSTANCES {
        match case(&mut rng) {
            Some(e) => {
                out.worst = out.worst.max(e);
                out.checked += 1;
                if e.is_nan() || e >= TOL {
                    out.failure = Some(format!("relative error {e:e}"));
                    return out;
                }
            }
            None => {
                out.redrawn += 1;
                if out.redrawn > INSTANCES {
                    out.failure = Some("too many instances on a kink".into());
                    return out;
                }
            }
        }
    }
    out
}

fn small_nchw(rng: &mut impl Rng) -> [usize; 4] {
    [
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(3..=6),
        rng.random_range(3..=6),
    ]
}

pub fn conv2d() -> FdOutcome {
    run("conv2d", |rng| loop {
        let groups = rng.random_range(1..=2);
        let c = groups * rng.random_range(1..=2);
        let oc = groups * rng.random_range(1..=2);
        let k = rng.random_range(1..=3);
        let geom = ConvGeometry::new(
            rng.random_range(1..=2),
            rng.random_range(0..=k),
            rng.random_range(1..=2),
            groups,
        );
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        if conv_out_len(h, k, geom.stride, geom.padding, geom.dilation).is_err()
            || conv_out_len(w, k, geom.stride, geom.padding, geom.dilation).is_err()
        {
            continue;
        }
        let n = rng.random_range(1..=2);
        let with_bias = rng.random_bool(0.5);
        let mut inputs = vec![
            rand_tensor(&[n, c, h, w], rng),
            rand_tensor(&[oc, c / groups, k, k], rng),
        ];
        if with_bias {
            inputs.push(rand_tensor(&[oc], rng));
        }
        let build = move |g: &mut Graph, v: &[Var]| {
            g.conv2d(v[0], v[1], v.get(2).copied(), geom, &ExecMode::Fp32Exact)
        };
        return check_inputs(inputs, &build, rng);
    })
}

pub fn relu() -> FdOutcome {
    run("relu", |rng| {
        let x = away_from_zero(&small_nchw(rng), rng);
        check_inputs(vec![x], &|g, v| g.relu(v[0]), rng)
    })
}

pub fn batchnorm_train() -> FdOutcome {
    run("batchnorm_train", |rng| {
        let shape = small_nchw(rng);
        let c = shape[1];
        let inputs = vec![
            rand_tensor(&shape, rng),
            rand_tensor(&[c], rng),
            rand_tensor(&[c], rng),
        ];
        let build = |g: &mut Graph, v: &[Var]| {
            g.batchnorm(
                v[0],
                Some(v[1]),
                Some(v[2]),
                BnMode::Train {
                    running: None,
                    momentum: 0.1,
                },
            )
        };
        check_inputs(inputs, &build, rng)
    })
}

pub fn batchnorm_train_without_affine() -> FdOutcome {
    run("batchnorm_plain", |rng| {
        let shape = small_nchw(rng);
        let build = |g: &mut Graph, v: &[Var]| {
            g.batchnorm(
                v[0],
                None,
                None,
                BnMode::Train {
                    running: None,
                    momentum: 0.1,
                },
            )
        };
        check_inputs(vec![rand_tensor(&shape, rng)], &build, rng)
    })
}

pub fn batchnorm_eval() -> FdOutcome {
    run("batchnorm_eval", |rng| {
        let shape = small_nchw(rng);
        let c = shape[1];
        let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
        let inputs = vec![
            rand_tensor(&shape, rng),
            rand_tensor(&[c], rng),
            rand_tensor(&[c], rng),
        ];
        let build = |g: &mut Graph, v: &[Var]| {
            g.batchnorm(
                v[0],
                Some(v[1]),
                Some(v[2]),
                BnMode::Eval {
                    mean: &mean,
                    var: &var,
                },
            )
        };
        check_inputs(inputs, &build, rng)
    })
}

fn pool_geom(rng: &mut impl Rng) -> PoolGeometry {
    let kernel = rng.random_range(2..=3);
    PoolGeometry {
        kernel,
        stride: rng.random_range(1..=2),
        padding: rng.random_range(0..=kernel / 2),
    }
}

pub fn max_pool() -> FdOutcome {
    run("max_pool", |rng| {
        let geom = pool_geom(rng);
        let x = distinct(&small_nchw(rng), rng);
        check_inputs(vec![x], &move |g, v| g.max_pool(v[0], geom), rng)
    })
}

pub fn avg_pool() -> FdOutcome {
    run("avg_pool", |rng| {
        let geom = pool_geom(rng);
        let x = rand_tensor(&small_nchw(rng), rng);
        check_inputs(vec![x], &move |g, v| g.avg_pool(v[0], geom), rng)
    })
}

pub fn add_and_scale() -> FdOutcome {
    run("add_scale", |rng| {
        let shape = small_nchw(rng);
        let k = rng.random_range(-2.0..2.0);
        let inputs = (0..3).map(|_| rand_tensor(&shape, rng)).collect();
        let build = move |g: &mut Graph, v: &[Var]| {
            let s = g.add(&[v[0], v[1], v[2]])?;
            g.scale(s, k)
        };
        check_inputs(inputs, &build, rng)
    })
}

pub fn weighted_sum() -> FdOutcome {
    run("weighted_sum", |rng| {
        let shape = small_nchw(rng);
        let k = rng.random_range(2..=4);
        let offset = rng.random_range(0..=2);
        let skip = rng.random_range(0..k);
        let mut inputs: Vec<Tensor> = (0..k).map(|_| rand_tensor(&shape, rng)).collect();
        inputs.push(rand_tensor(&[2, 4], rng));
        let build = move |g: &mut Graph, v: &[Var]| {
            let xs: Vec<Option<Var>> = (0..k).map(|i| (i != skip).then_some(v[i])).collect();
            g.weighted_sum(&xs, v[k], offset)
        };
        check_inputs(inputs, &build, rng)
    })
}

pub fn softmax_rows() -> FdOutcome {
    run("softmax_rows", |rng| {
        let x = rand_tensor(&[rng.random_range(1..=3), rng.random_range(2..=8)], rng);
        check_inputs(vec![x], &|g, v| g.softmax_rows(v[0]), rng)
    })
}

pub fn concat() -> FdOutcome {
    run("concat", |rng| {
        let [n, _, h, w] = small_nchw(rng);
        let parts: Vec<Tensor> = (0..rng.random_range(2..=3))
            .map(|_| rand_tensor(&[n, rng.random_range(1..=3), h, w], rng))
            .collect();
        check_inputs(parts, &|g, v| g.concat(v), rng)
    })
}

pub fn shift() -> FdOutcome {
    run("shift", |rng| {
        let x = rand_tensor(&small_nchw(rng), rng);
        check_inputs(vec![x], &|g, v| g.shift(v[0]), rng)
    })
}

pub fn global_avg_pool_and_reshape() -> FdOutcome {
    run("global_avg_pool", |rng| {
        let shape = small_nchw(rng);
        let x = rand_tensor(&shape, rng);
        let build = move |g: &mut Graph, v: &[Var]| {
            let p = g.global_avg_pool(v[0])?;
            g.reshape(p, &[shape[0] * shape[1]])
        };
        check_inputs(vec![x], &build, rng)
    })
}

pub fn linear() -> FdOutcome {
    run("linear", |rng| {
        let (n, fin, fout) = (
            rng.random_range(1..=3),
            rng.random_range(1..=5),
            rng.random_range(1..=4),
        );
        let inputs = vec![
            rand_tensor(&[n, fin], rng),
            rand_tensor(&[fout, fin], rng),
            rand_tensor(&[fout], rng),
        ];
        check_inputs(inputs, &|g, v| g.linear(v[0], v[1], Some(v[2])), rng)
    })
}

pub fn softmax_cross_entropy() -> FdOutcome {
    run("softmax_cross_entropy", |rng| {
        let (n, k) = (rng.random_range(1..=4), rng.random_range(2..=5));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let x = rand_tensor(&[n, k], rng);
        check_inputs(
            vec![x],
            &move |g, v| g.softmax_cross_entropy(v[0], &labels),
            rng,
        )
    })
}

pub fn sample_mask() -> FdOutcome {
    run("sample_mask", |rng| {
        let shape = small_nchw(rng);
        let mask: Vec<f64> = (0..shape[0])
            .map(|_| if rng.random_bool(0.5) { 0.0 } else { 1.25 })
            .collect();
        let x = rand_tensor(&shape, rng);
        check_inputs(vec![x], &move |g, v| g.sample_mask(v[0], mask.clone()), rng)
    })
}

/// Checks the gradients of a block's input and of all its parameters.
fn check_block(
    store: &mut ParamStore,
    x: Tensor,
    forward: &dyn Fn(&mut Session<'_>, Var) -> axnas::Result<Var>,
    rng: &mut impl Rng,
) -> Option<f64> {
    let eval = |store: &mut ParamStore, x: &Tensor, coeffs: &[f64]| {
        let mut s = Session::new(
            Graph::trainable(&[ParamGroup::Weight]),
            store,
            ExecMode::Fp32Exact,
            true,
        );
        let v = s.graph.leaf(x.clone());
        let out = forward(&mut s, v).unwrap();
        let loss = s.graph.dot(out, coeffs.to_vec()).unwrap();
        s.graph.value(loss).data()[0]
    };
    let (coeffs, analytic_x, analytic_p) = {
        let mut s = Session::new(
            Graph::trainable(&[ParamGroup::Weight]),
            store,
            ExecMode::Fp32Exact,
            true,
        );
        let v = s.graph.leaf(x.clone());
        let out = forward(&mut s, v).unwrap();
        let coeffs: Vec<f64> = (0..s.graph.value(out).numel())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let loss = s.graph.dot(out, coeffs.clone()).unwrap();
        let grads = s.graph.backward(loss).unwrap();
        let ids: Vec<ParamId> = s.store.ids_in(ParamGroup::Weight).collect();
        let per_param: Vec<(ParamId, Vec<f64>)> = ids
            .into_iter()
            .map(|id| {
                let g = grads.param(id).map_or_else(
                    || vec![0.0; s.store.value(id).numel()],
                    |t| t.data().to_vec(),
                );
                (id, g)
            })
            .collect();
        (coeffs, grads.wrt(v).unwrap().data().to_vec(), per_param)
    };
    let mut probe = x.clone();
    let numeric = central_difference(x.numel(), |j, h| {
        let x0 = x.data()[j];
        probe.data_mut()[j] = x0 + h;
        let l = eval(store, &probe, &coeffs);
        probe.data_mut()[j] = x0;
        l
    })?;
    let mut worst = rel_err(&analytic_x, &numeric);
    for (id, analytic) in analytic_p {
        let numeric = central_difference(analytic.len(), |j, h| {
            let p0 = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = p0 + h;
            let l = eval(store, &x, &coeffs);
            store.value_mut(id).data_mut()[j] = p0;
            l
        })?;
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Some(worst)
}

fn block_input(rng: &mut impl Rng, c: usize) -> Tensor {
    away_from_zero(
        &[2, c, rng.random_range(4..=6), rng.random_range(4..=6)],
        rng,
    )
}

pub fn sep_conv_block() -> FdOutcome {
    run("sep_conv", |rng| {
        let mut store = ParamStore::new();
        let (c, k, stride) = (
            rng.random_range(1..=2),
            [3, 5][rng.random_range(0..2)],
            rng.random_range(1..=2),
        );
        let op = SepConv::new(&mut store, "op", c, c, k, stride, true, rng);
        let x = block_input(rng, c);
        check_block(&mut store, x, &|s, x| op.forward(s, x), rng)
    })
}

pub fn dil_conv_block() -> FdOutcome {
    run("dil_conv", |rng| {
        let mut store = ParamStore::new();
        let (c, k, stride) = (
            rng.random_range(1..=2),
            [3, 5][rng.random_range(0..2)],
            rng.random_range(1..=2),
        );
        let op = DilConv::new(&mut store, "op", c, c, k, stride, true, rng);
        let x = block_input(rng, c);
        check_block(&mut store, x, &|s, x| op.forward(s, x), rng)
    })
}

pub fn factorized_reduce_block() -> FdOutcome {
    run("factorized_reduce", |rng| {
        let mut store = ParamStore::new();
        let c = rng.random_range(1..=3);
        let op = FactorizedReduce::new(&mut store, "op", c, 2 * c, true, rng);
        let x = block_input(rng, c);
        check_block(&mut store, x, &|s, x| op.forward(s, x), rng)
    })
}

pub fn relu_conv_bn_block() -> FdOutcome {
    run("relu_conv_bn", |rng| {
        let mut store = ParamStore::new();
        let (c, oc) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let op = ReluConvBn::new(
            &mut store,
            "op",
            c,
            oc,
            1,
            ConvGeometry::default(),
            true,
            false,
            rng,
        );
        let x = block_input(rng, c);
        check_block(&mut store, x, &|s, x| op.forward(s, x), rng)
    })
}

pub fn supernet_architecture_logits() -> FdOutcome {
    run("supernet_alphas", |rng| {
        let cfg = SupernetConfig {
            cells: 3,
            intermediate_nodes: 1,
            init_channels: 2,
            num_classes: 2,
            in_channels: 1,
            approximate_preprocessing: false,
        };
        let mut net = build_supernet(&cfg, rng).unwrap();
        let mut alphas = net.arch_params();
        for t in [&mut alphas.normal, &mut alphas.reduce] {
            t.data_mut()
                .iter_mut()
                .for_each(|a| *a = rng.random_range(-1.0..1.0));
        }
        net.set_arch_params(&alphas).unwrap();
        let images = rand_tensor(&[2, 1, 4, 4], rng);
        let labels = vec![0, 1];
        let loss_at = |net: &mut axnas::darts::Supernet| {
            let (mut s, layers) = net.session(
                Graph::trainable(&[ParamGroup::Arch]),
                ExecMode::Fp32Exact,
                true,
            );
            let x = s.graph.input(images.clone());
            let logits = layers.forward(&mut s, x).unwrap();
            let loss = s.graph.softmax_cross_entropy(logits, &labels).unwrap();
            let value = s.graph.value(loss).data()[0];
            (value, s.graph.backward(loss).unwrap())
        };
        let (_, grads) = loss_at(&mut net);
        let mut worst: f64 = 0.0;
        for id in net.alpha_ids() {
            let analytic = grads.param(id).unwrap().data().to_vec();
            let numeric = central_difference(analytic.len(), |j, h| {
                let a0 = net.store.value(id).data()[j];
                net.store.value_mut(id).data_mut()[j] = a0 + h;
                let l = loss_at(&mut net).0;
                net.store.value_mut(id).data_mut()[j] = a0;
                l
            })?;
            worst = worst.max(rel_err(&analytic, &numeric));
        }
        Some(worst)
    })
}

/// Every op family, in a fixed order.
pub const ALL: [fn() -> FdOutcome; 21] = [
    conv2d,
    relu,
    batchnorm_train,
    batchnorm_train_without_affine,
    batchnorm_eval,
    max_pool,
    avg_pool,
    add_and_scale,
    weighted_sum,
    softmax_rows,
    concat,
    shift,
    global_avg_pool_and_reshape,
    linear,
    softmax_cross_entropy,
    sample_mask,
    sep_conv_block,
    dil_conv_block,
    factorized_reduce_block,
    relu_conv_bn_block,
    supernet_architecture_logits,
];
