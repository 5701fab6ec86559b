//! Derivative conformance suite.
//!
//! Every operator's backward function is compared with central finite
//! differences of a random linear functional of its output; its
//! forward-second function is checked for linearity, for being the adjoint
//! of the backward input map, for reading exactly the indices the backward
//! map writes, and (conv/dense) for its weight gradient against finite
//! differences of the backward map with the upstream gradient held fixed.
//! Whole random networks get the same frozen-top treatment.
//!
//! All checks run in 64-bit. Components whose finite-difference evaluation
//! flips a branch decision (rectifier side, pooling winner, L1 sign) are
//! skipped and counted.

use std::fmt::Write as _;

use crate::error::{arg_err, Result};
use crate::net::{
    l0_loss_and_seed, mse_loss, HeatmapMode, LayerSpec, Network, NetworkSpec, ParamStore, Precision, Trace,
};
use crate::ops::{
    BiasMode, Conv, ConvParams, Dense, DiffOp, Dropout, LeakyRelu, Maxout, OpCache, Phase, Pool, PoolKind,
};
use crate::rng::Rng;
use crate::tensor::{Dims, Tensor4};

/// Operator groups accepted by the `ops` filter.
pub const OPERATORS: &[&str] = &["conv", "dense", "leaky", "maxpool", "meanpool", "rmspool", "dropout", "maxout", "network"];

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Restrict to these operator groups (see [`OPERATORS`]).
    pub ops: Option<Vec<String>>,
    /// Number of random networks for the frozen-top check.
    pub random_nets: usize,
    pub step: f64,
    /// Tolerance of backward checks.
    pub tol: f64,
    /// Tolerance of frozen-top forward-second checks.
    pub second_tol: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { seed: 1, ops: None, random_nets: 20, step: 1e-6, tol: 1e-5, second_tol: 1e-4 }
    }
}

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct Check {
    pub op: String,
    pub name: String,
    /// Worst relative error (or mismatch count for structural checks).
    pub worst: f64,
    pub tol: f64,
    pub compared: usize,
    pub skipped: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst < self.tol && self.compared > 0
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(Check::passed)
    }

    /// `(op, worst relative error over its numeric checks, all passed)` in suite order.
    pub fn by_operator(&self) -> Vec<(String, f64, bool)> {
        let mut out: Vec<(String, f64, bool)> = Vec::new();
        for c in &self.checks {
            let i = match out.iter().position(|(op, _, _)| *op == c.op) {
                Some(i) => i,
                None => {
                    out.push((c.op.clone(), 0.0, true));
                    out.len() - 1
                }
            };
            if c.tol < 1.0 {
                out[i].1 = out[i].1.max(c.worst);
            }
            out[i].2 &= c.passed();
        }
        out
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<5} {:<9} {:<44} worst {:.3e} (tol {:.0e}, {} compared, {} skipped)",
                if c.passed() { "PASS" } else { "FAIL" },
                c.op,
                c.name,
                c.worst,
                c.tol,
                c.compared,
                c.skipped
            );
        }
        s.push_str("worst relative error per operator:\n");
        for (op, worst, ok) in self.by_operator() {
            let _ = writeln!(s, "  {:<5} {op:<9} {worst:.3e}", if ok { "PASS" } else { "FAIL" });
        }
        s
    }
}

/// Running comparison of analytic values against finite differences.
#[derive(Clone, Debug, Default)]
struct Cmp {
    worst: f64,
    compared: usize,
    skipped: usize,
}

/// Magnitude below which two values are compared absolutely.
const FLOOR: f64 = 1e-8;

impl Cmp {
    fn add(&mut self, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(FLOOR);
        let rel = (analytic - numeric).abs() / scale;
        self.worst = if rel.is_nan() { f64::INFINITY } else { self.worst.max(rel) };
        self.compared += 1;
    }

    fn finish(self, op: &str, name: impl Into<String>, tol: f64) -> Check {
        Check { op: op.into(), name: name.into(), worst: self.worst, tol, compared: self.compared, skipped: self.skipped }
    }
}

fn random(d: Dims, rng: &mut Rng, lo: f64, hi: f64) -> Tensor4<f64> {
    Tensor4::from_fn(d, |_, _, _, _| rng.uniform(lo, hi))
}

/// Uniform in `±[gap, 1]`.
fn random_away_from_zero(d: Dims, rng: &mut Rng, gap: f64) -> Tensor4<f64> {
    Tensor4::from_fn(d, |_, _, _, _| {
        let m = rng.uniform(gap, 1.0);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

/// An operator instance under test.
pub struct OpCase<'a> {
    pub op: &'a dyn DiffOp<f64>,
    pub input: Tensor4<f64>,
    pub params: Option<ConvParams<f64>>,
    /// Forward in training mode with an RNG seeded by this value (dropout).
    pub train_seed: Option<u64>,
}

impl OpCase<'_> {
    fn forward(&self, x: &Tensor4<f64>, p: Option<&ConvParams<f64>>) -> Result<(Tensor4<f64>, OpCache<f64>)> {
        match self.train_seed {
            Some(s) => self.op.forward(x, p, &mut Phase::Train(&mut Rng::new(s))),
            None => self.op.forward(x, p, &mut Phase::Inference),
        }
    }
}

/// Perturb entry `i` of a tensor in place by `±h` and evaluate `f` at both points.
fn central_pair<R, F>(t: &mut Tensor4<f64>, i: usize, h: f64, mut f: F) -> Result<Option<(R, R)>>
where
    F: FnMut(&Tensor4<f64>) -> Result<Option<R>>,
{
    let x0 = t.data()[i];
    t.data_mut()[i] = x0 + h;
    let plus = f(t)?;
    t.data_mut()[i] = x0 - h;
    let minus = f(t)?;
    t.data_mut()[i] = x0;
    Ok(plus.zip(minus))
}

/// `<w, (y⁺ − y⁻)> / 2h`, differencing each output before contracting so
/// the sum does not cancel large equal terms.
fn contracted_difference(w: &Tensor4<f64>, plus: &Tensor4<f64>, minus: &Tensor4<f64>, h: f64) -> f64 {
    w.data().iter().zip(plus.data().iter().zip(minus.data())).map(|(&w, (&p, &m))| w * (p - m)).sum::<f64>() / (2.0 * h)
}

/// All checks for one operator instance.
pub fn check_operator(label: &str, case: &OpCase<'_>, seed: u64, cfg: &SuiteConfig) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let h = cfg.step;
    let params = case.params.as_ref();
    let (y, cache) = case.forward(&case.input, params)?;
    let w = random(y.dims(), &mut rng, -1.0, 1.0);
    let back = case.op.backward(&w, &cache, params)?;
    let mut checks = Vec::new();

    // loss(x, p) = <w, op(x; p)>, skipped when branch decisions move
    let output = |x: &Tensor4<f64>, p: Option<&ConvParams<f64>>| -> Result<Option<Tensor4<f64>>> {
        let (y, c) = case.forward(x, p)?;
        Ok(c.same_branches(&cache).then_some(y))
    };
    let fd = |pair: Option<(Tensor4<f64>, Tensor4<f64>)>| pair.map(|(p, m)| contracted_difference(&w, &p, &m, h));

    let mut cmp = Cmp::default();
    let mut x = case.input.clone();
    for i in 0..x.data().len() {
        match fd(central_pair(&mut x, i, h, |x| output(x, params))?) {
            Some(fd) => cmp.add(back.input.data()[i], fd),
            None => cmp.skipped += 1,
        }
    }
    checks.push(cmp.finish(label, format!("{} backward input", case.op.name()), cfg.tol));

    if let (Some(p), Some(g)) = (params, back.params.as_ref()) {
        let mut cmp = Cmp::default();
        let mut pw = p.clone();
        for i in 0..pw.weights.data().len() {
            let d = fd(central_pair(&mut pw.weights, i, h, |wt| {
                output(&case.input, Some(&ConvParams { weights: wt.clone(), bias: p.bias.clone() }))
            })?);
            match d {
                Some(fd) => cmp.add(g.weights.data()[i], fd),
                None => cmp.skipped += 1,
            }
        }
        for i in 0..pw.bias.data().len() {
            let d = fd(central_pair(&mut pw.bias, i, h, |b| {
                output(&case.input, Some(&ConvParams { weights: p.weights.clone(), bias: b.clone() }))
            })?);
            match d {
                Some(fd) => cmp.add(g.bias.data()[i], fd),
                None => cmp.skipped += 1,
            }
        }
        checks.push(cmp.finish(label, format!("{} backward params", case.op.name()), cfg.tol));
    }

    // forward-second: linear, adjoint of the backward input map, same support
    let s1 = random(case.input.dims(), &mut rng, -1.0, 1.0);
    let s2 = random(case.input.dims(), &mut rng, -1.0, 1.0);
    let fs = |s: &Tensor4<f64>| case.op.forward_second(s, &cache, &w, params);
    let f1 = fs(&s1)?;
    let (a, b) = (0.7, -1.9);
    let mixed = fs(&s1.scale(a).add(&s2.scale(b))?)?.signal;
    let combo = f1.signal.scale(a).add(&fs(&s2)?.signal.scale(b))?;
    let mut cmp = Cmp::default();
    for (&m, &c) in mixed.data().iter().zip(combo.data()) {
        cmp.add(m, c);
    }
    checks.push(cmp.finish(label, format!("{} forward-second linearity", case.op.name()), 1e-12));

    let u = random(y.dims(), &mut rng, -1.0, 1.0);
    let bu = case.op.backward(&u, &cache, params)?.input;
    let mut cmp = Cmp::default();
    cmp.add(bu.dot(&s1)?, u.dot(&f1.signal)?);
    checks.push(cmp.finish(label, format!("{} forward-second adjoint", case.op.name()), 1e-12));

    checks.push(branch_consistency(label, case, &cache, &w, params)?);

    if let (Some(p), Some(g0)) = (params, f1.params.as_ref()) {
        // frozen-top: d/dΩ <s1, backward_input(w; Ω)>
        let mut cmp = Cmp::default();
        let mut pw = p.clone();
        for i in 0..pw.weights.data().len() {
            let pair = central_pair(&mut pw.weights, i, h, |wt| {
                let q = ConvParams { weights: wt.clone(), bias: p.bias.clone() };
                Ok(Some(case.op.backward(&w, &cache, Some(&q))?.input))
            })?;
            let (plus, minus) = pair.expect("always evaluated");
            cmp.add(g0.weights.data()[i], contracted_difference(&s1, &plus, &minus, h));
        }
        for &v in g0.bias.data() {
            cmp.add(v, 0.0);
        }
        checks.push(cmp.finish(label, format!("{} forward-second weights", case.op.name()), cfg.tol));
    }
    Ok(checks)
}

/// For every output cell `j`, the inputs written by `backward(e_j)` must be
/// exactly the inputs `i` whose one-hot signal reaches `j` in forward-second.
fn branch_consistency(
    label: &str,
    case: &OpCase<'_>,
    cache: &OpCache<f64>,
    upstream: &Tensor4<f64>,
    params: Option<&ConvParams<f64>>,
) -> Result<Check> {
    let in_dims = case.input.dims();
    let out_dims = upstream.dims();
    let mut read = vec![Vec::new(); out_dims.len()];
    let mut e = Tensor4::zeros(in_dims);
    for i in 0..in_dims.len() {
        e.data_mut()[i] = 1.0;
        let f = case.op.forward_second(&e, cache, upstream, params)?.signal;
        for (j, &v) in f.data().iter().enumerate() {
            if v != 0.0 {
                read[j].push(i);
            }
        }
        e.data_mut()[i] = 0.0;
    }
    let mut mismatches = 0usize;
    let mut e = Tensor4::zeros(out_dims);
    for (j, read_j) in read.iter().enumerate() {
        e.data_mut()[j] = 1.0;
        let b = case.op.backward(&e, cache, params)?.input;
        let touched: Vec<usize> = b.data().iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        if &touched != read_j {
            mismatches += 1;
        }
        e.data_mut()[j] = 0.0;
    }
    Ok(Check {
        op: label.into(),
        name: format!("{} branch consistency (mismatched cells)", case.op.name()),
        worst: mismatches as f64,
        tol: 0.5,
        compared: out_dims.len(),
        skipped: 0,
    })
}

/// `MeanPool` forward-second is `MeanPool` forward, bitwise.
pub fn meanpool_identity(seed: u64) -> Result<Check> {
    let mut rng = Rng::new(seed);
    let d = Dims::new(2, 7, 6, 3);
    let pool = Pool::new(PoolKind::Mean, d, (3, 2), 2, Some((4, 3)))?;
    let x = random(d, &mut rng, -1.0, 1.0);
    let (y, cache) = DiffOp::<f64>::forward(&pool, &x, None, &mut Phase::Inference)?;
    let mut mismatches = 0usize;
    let mut compared = 0usize;
    for _ in 0..5 {
        let s = random(d, &mut rng, -5.0, 5.0);
        let f = pool.forward_second(&s, &cache, &y, None)?.signal;
        let g = DiffOp::<f64>::forward(&pool, &s, None, &mut Phase::Inference)?.0;
        mismatches += f.data().iter().zip(g.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        compared += f.data().len();
    }
    Ok(Check {
        op: "meanpool".into(),
        name: "forward-second equals forward bitwise (mismatches)".into(),
        worst: mismatches as f64,
        tol: 0.5,
        compared,
        skipped: 0,
    })
}

/// Scalar functions of the network parameters used by the network checks.
struct NetProbe<'a> {
    net: &'a Network,
    batch: &'a Tensor4<f64>,
    labels: &'a [f64],
    dropout_seed: u64,
}

impl NetProbe<'_> {
    fn forward(&self, store: &ParamStore<f64>) -> Result<(Vec<f64>, Trace<f64>)> {
        self.net.forward_pass(store, self.batch, &mut Phase::Train(&mut Rng::new(self.dropout_seed)))
    }

    fn same_branches(a: &Trace<f64>, b: &Trace<f64>) -> bool {
        a.caches().iter().zip(b.caches()).all(|(x, y)| x.same_branches(y))
    }
}

/// Network-level checks: `∂L_L/∂ρ` against finite differences of the MSE
/// loss, and `∂L₀/∂ρ` from the forward-second pass against the frozen-top
/// oracle (perturb ρ, rerun forward and backward with the top gradient held
/// at its unperturbed value, recompute `ν‖r‖₁`).
#[allow(clippy::too_many_arguments)]
pub fn check_network(
    label: &str,
    net: &Network,
    store: &ParamStore<f64>,
    batch: &Tensor4<f64>,
    labels: &[f64],
    nu: f64,
    dropout_seed: u64,
    cfg: &SuiteConfig,
) -> Result<Vec<Check>> {
    let all: Vec<usize> = (0..store.count()).collect();
    check_network_subset(label, net, store, batch, labels, nu, dropout_seed, &all, cfg)
}

/// [`check_network`] restricted to the flat parameter indices in `indices`.
#[allow(clippy::too_many_arguments)]
pub fn check_network_subset(
    label: &str,
    net: &Network,
    store: &ParamStore<f64>,
    batch: &Tensor4<f64>,
    labels: &[f64],
    nu: f64,
    dropout_seed: u64,
    indices: &[usize],
    cfg: &SuiteConfig,
) -> Result<Vec<Check>> {
    let probe = NetProbe { net, batch, labels, dropout_seed };
    let (pred, mut trace) = probe.forward(store)?;
    let (_, top) = mse_loss(&pred, labels)?;
    let back = net.backward_pass(store, &top, &mut trace)?;
    let heat = back.input.heat().clone();
    let (_, seed) = l0_loss_and_seed(&heat, nu)?;
    let g0 = net.forward_second_pass(store, &seed, &trace)?.flatten();
    let gl = back.params.flatten();
    let signs: Vec<f64> = seed.data().to_vec();

    let mut work = store.clone();
    let base = store.flatten();
    let h = cfg.step;
    let mut cmp_l = Cmp::default();
    let mut cmp_0 = Cmp::default();
    for &i in indices {
        // (predictions, heat) at ρᵢ ± h; heat is None when an L1 sign flips
        let mut eval = |v: f64| -> Result<Option<(Vec<f64>, Option<Tensor4<f64>>)>> {
            work.set_flat(i, v);
            let (p, mut t) = probe.forward(&work)?;
            if !NetProbe::same_branches(&t, &trace) {
                return Ok(None);
            }
            let r = net.backward_pass(&work, &top, &mut t)?.input;
            let r = r.heat();
            let sign_stable = r.data().iter().zip(&signs).all(|(&a, &s)| (a > 0.0) == (s > 0.0) && (a < 0.0) == (s < 0.0));
            Ok(Some((p, sign_stable.then(|| r.clone()))))
        };
        let plus = eval(base[i] + h)?;
        let minus = eval(base[i] - h)?;
        work.set_flat(i, base[i]);
        match (plus, minus) {
            (Some((pp, rp)), Some((pm, rm))) => {
                // L⁺ − L⁻ = (1/N) Σ (p⁺ − p⁻)(p⁺ + p⁻ − 2y), summed without cancellation
                let n = pp.len() as f64;
                let dl: f64 = pp
                    .iter()
                    .zip(&pm)
                    .zip(probe.labels)
                    .map(|((&a, &b), &y)| (a - b) * (a + b - 2.0 * y))
                    .sum::<f64>()
                    / n;
                cmp_l.add(gl[i], dl / (2.0 * h));
                match (rp, rm) {
                    // with stable signs, ν‖r⁺‖₁ − ν‖r⁻‖₁ = Σ seed·(r⁺ − r⁻)
                    (Some(rp), Some(rm)) => cmp_0.add(g0[i], contracted_difference(&seed, &rp, &rm, h)),
                    _ => cmp_0.skipped += 1,
                }
            }
            _ => {
                cmp_l.skipped += 1;
                cmp_0.skipped += 1;
            }
        }
    }
    Ok(vec![
        cmp_l.finish("network", format!("{label} backward params"), cfg.tol),
        cmp_0.finish("network", format!("{label} forward-second frozen-top"), cfg.second_tol),
    ])
}

/// A random net of 2–4 layers ending in a single-unit dense layer, built
/// from piecewise-linear operators.
pub fn random_network(rng: &mut Rng) -> Network {
    loop {
        let (w, h, c) = (rng.int_in(5, 8), rng.int_in(5, 8), rng.int_in(1, 3));
        let heatmap = if c > 1 && rng.bernoulli(0.5) { HeatmapMode::Hue } else { HeatmapMode::Plain };
        let hidden = rng.int_in(1, 3);
        let mut layers = Vec::new();
        for k in 0..hidden {
            let pick = if k == 0 { rng.int_in(0, 1) } else { rng.int_in(0, 6) };
            let alpha = [0.0, 0.01, 0.33][rng.int_in(0, 2)];
            let win = rng.int_in(2, 3);
            layers.push(match pick {
                0 | 1 => LayerSpec::Conv {
                    filters: 2 * rng.int_in(1, 2),
                    window: (win, win),
                    stride: rng.int_in(1, 2),
                    out: None,
                    bias: if pick == 0 { BiasMode::Tied } else { BiasMode::Untied },
                },
                2 => LayerSpec::LeakyRelu { alpha },
                3 => LayerSpec::MaxPool { window: (win, win), stride: 1, out: None },
                4 => LayerSpec::MeanPool { window: (win, win), stride: rng.int_in(1, 2), out: None },
                5 => LayerSpec::Maxout { p: 2 },
                _ => LayerSpec::Dropout { p: 3 },
            });
        }
        layers.push(LayerSpec::Dense { units: 1 });
        let spec = NetworkSpec { input: (w, h, c), precision: Precision::F64, heatmap, layers };
        if let Ok(net) = Network::build(&spec) {
            return net;
        }
    }
}

/// Uniform `±[0.1, 1]` parameters, so biases do not vanish and rectifier
/// inputs spread over both branches.
fn random_store(net: &Network, rng: &mut Rng) -> ParamStore<f64> {
    let mut store = ParamStore::<f64>::zeros(net);
    for i in 0..store.count() {
        let m = rng.uniform(0.1, 1.0);
        store.set_flat(i, if rng.bernoulli(0.5) { m } else { -m });
    }
    store
}

fn wanted(cfg: &SuiteConfig, op: &str) -> bool {
    cfg.ops.as_ref().is_none_or(|ops| ops.iter().any(|o| o == op))
}

/// Run the full suite (or the groups selected in `cfg.ops`).
pub fn run_suite(cfg: &SuiteConfig) -> Result<Report> {
    if let Some(ops) = &cfg.ops {
        if let Some(bad) = ops.iter().find(|o| !OPERATORS.contains(&o.as_str())) {
            return Err(arg_err!("unknown operator {bad:?}; known: {}", OPERATORS.join(", ")));
        }
    }
    let mut rng = Rng::new(cfg.seed);
    let mut report = Report::default();
    let mut next = || rng.next_u64();

    if wanted(cfg, "conv") {
        for (bias, stride, declared) in [
            (BiasMode::Tied, 1, None),
            (BiasMode::Tied, 2, None),
            (BiasMode::Untied, 1, None),
            (BiasMode::Untied, 2, None),
            (BiasMode::Untied, 1, Some((6, 5))),
            (BiasMode::Tied, 2, Some((3, 3))),
        ] {
            let d = Dims::new(2, 6, 5, 2);
            let op = Conv::new(d, 3, (3, 2), stride, declared, bias)?;
            let mut r = Rng::new(next());
            let params = ConvParams {
                weights: random(op.weight_dims(), &mut r, -1.0, 1.0),
                bias: random(op.bias_dims(), &mut r, -1.0, 1.0),
            };
            let case = OpCase { op: &op, input: random(d, &mut r, -1.0, 1.0), params: Some(params), train_seed: None };
            report.checks.extend(check_operator("conv", &case, next(), cfg)?);
        }
    }
    if wanted(cfg, "dense") {
        let d = Dims::new(3, 3, 2, 2);
        let op = Dense::new(d, 4)?;
        let mut r = Rng::new(next());
        let params = ConvParams {
            weights: random(op.conv.weight_dims(), &mut r, -1.0, 1.0),
            bias: random(op.conv.bias_dims(), &mut r, -1.0, 1.0),
        };
        let case = OpCase { op: &op, input: random(d, &mut r, -1.0, 1.0), params: Some(params), train_seed: None };
        report.checks.extend(check_operator("dense", &case, next(), cfg)?);
    }
    if wanted(cfg, "leaky") {
        for alpha in [0.0, 0.01, 0.33] {
            let op = LeakyRelu::new(alpha)?;
            let mut r = Rng::new(next());
            let case = OpCase { op: &op, input: random_away_from_zero(Dims::new(2, 4, 3, 3), &mut r, 1e-3), params: None, train_seed: None };
            report.checks.extend(check_operator("leaky", &case, next(), cfg)?);
        }
    }
    for (name, kind, lo) in [("maxpool", PoolKind::Max, -1.0), ("meanpool", PoolKind::Mean, -1.0), ("rmspool", PoolKind::Rms, 0.1)] {
        if !wanted(cfg, name) {
            continue;
        }
        for (window, stride, declared) in [((3, 3), 2, None), ((2, 2), 1, None), ((3, 2), 2, Some((4, 4)))] {
            let d = Dims::new(2, 7, 7, 2);
            let op = Pool::new(kind, d, window, stride, declared)?;
            let mut r = Rng::new(next());
            let case = OpCase { op: &op, input: random(d, &mut r, lo, 1.0), params: None, train_seed: None };
            report.checks.extend(check_operator(name, &case, next(), cfg)?);
        }
        if kind == PoolKind::Mean {
            report.checks.push(meanpool_identity(next())?);
        }
    }
    if wanted(cfg, "dropout") {
        for p in [2, 3] {
            let op = Dropout::new(p)?;
            let mut r = Rng::new(next());
            let case = OpCase { op: &op, input: random(Dims::new(3, 3, 3, 4), &mut r, -1.0, 1.0), params: None, train_seed: Some(next()) };
            report.checks.extend(check_operator("dropout", &case, next(), cfg)?);
        }
        // a dropout-thinned net: conv → leaky → dropout → dense
        let spec = NetworkSpec {
            input: (6, 6, 2),
            precision: Precision::F64,
            heatmap: HeatmapMode::Plain,
            layers: vec![
                LayerSpec::Conv { filters: 6, window: (3, 3), stride: 1, out: None, bias: BiasMode::Untied },
                LayerSpec::LeakyRelu { alpha: 0.33 },
                LayerSpec::Dropout { p: 2 },
                LayerSpec::Dense { units: 1 },
            ],
        };
        let net = Network::build(&spec)?;
        let mut r = Rng::new(next());
        let store = random_store(&net, &mut r);
        let batch = random(net.input_dims(3), &mut r, -1.0, 1.0);
        let labels = [1.0, 0.0, 1.0];
        for c in check_network("dropout-thinned net", &net, &store, &batch, &labels, 1e-3, next(), cfg)? {
            report.checks.push(Check { op: "dropout".into(), ..c });
        }
    }
    if wanted(cfg, "maxout") {
        for p in [2, 3] {
            let op = Maxout::new(p)?;
            let mut r = Rng::new(next());
            let case = OpCase { op: &op, input: random(Dims::new(2, 3, 3, 6), &mut r, -1.0, 1.0), params: None, train_seed: None };
            report.checks.extend(check_operator("maxout", &case, next(), cfg)?);
        }
    }
    if wanted(cfg, "network") {
        for k in 0..cfg.random_nets {
            let mut r = Rng::new(next());
            let net = random_network(&mut r);
            let store = random_store(&net, &mut r);
            let n = r.int_in(1, 3);
            let batch = random(net.input_dims(n), &mut r, -1.0, 1.0);
            let labels: Vec<f64> = (0..n).map(|_| r.uniform(-1.0, 1.0)).collect();
            let nu = [1e-4, 1e-3, 1e-2][k % 3];
            let label = format!("random net {k} ({} layers)", net.layers().len());
            report.checks.extend(check_network(&label, &net, &store, &batch, &labels, nu, next(), cfg)?);
        }
    }
    Ok(report)
}

/// Deliberately broken operators used to show that the suite catches errors.
pub mod mutants {
    use super::*;
    use crate::ops::{Backward, ForwardSecond};

    /// Leaky rectifier whose backward multiplies negatives by `1/α` instead of `α`.
    pub struct InvertedSlopeLeaky(pub LeakyRelu);

    impl DiffOp<f64> for InvertedSlopeLeaky {
        fn name(&self) -> String {
            format!("inverted-slope {}", DiffOp::<f64>::name(&self.0))
        }

        fn out_dims(&self, input: Dims) -> Result<Dims> {
            DiffOp::<f64>::out_dims(&self.0, input)
        }

        fn forward(
            &self,
            input: &Tensor4<f64>,
            params: Option<&ConvParams<f64>>,
            phase: &mut Phase<'_>,
        ) -> Result<(Tensor4<f64>, OpCache<f64>)> {
            self.0.forward(input, params, phase)
        }

        fn backward(
            &self,
            upstream: &Tensor4<f64>,
            cache: &OpCache<f64>,
            _params: Option<&ConvParams<f64>>,
        ) -> Result<Backward<f64>> {
            let OpCache::Negative(neg) = cache else { return Err(crate::ops::wrong_cache("mutant backward")) };
            let k = 1.0 / self.0.alpha();
            let data = upstream.data().iter().zip(neg).map(|(&g, &n)| if n { g * k } else { g }).collect();
            Ok(Backward { input: Tensor4::from_vec(upstream.dims(), data)?, params: None })
        }

        fn forward_second(
            &self,
            signal: &Tensor4<f64>,
            cache: &OpCache<f64>,
            upstream: &Tensor4<f64>,
            params: Option<&ConvParams<f64>>,
        ) -> Result<ForwardSecond<f64>> {
            self.0.forward_second(signal, cache, upstream, params)
        }
    }

    /// Run the leaky-rectifier checks against [`InvertedSlopeLeaky`].
    pub fn inverted_slope_report(cfg: &SuiteConfig) -> Result<Report> {
        let mut report = Report::default();
        let mut rng = Rng::new(cfg.seed);
        for alpha in [0.01, 0.33] {
            let op = InvertedSlopeLeaky(LeakyRelu::new(alpha)?);
            let input = random_away_from_zero(Dims::new(2, 4, 3, 3), &mut rng, 1e-3);
            let case = OpCase { op: &op, input, params: None, train_seed: None };
            report.checks.extend(check_operator("leaky", &case, rng.next_u64(), cfg)?);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operator_suite_passes() {
        let cfg = SuiteConfig { random_nets: 0, ..SuiteConfig::default() };
        let report = run_suite(&cfg).unwrap();
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn random_networks_pass() {
        let cfg = SuiteConfig { ops: Some(vec!["network".into(), "dropout".into()]), ..SuiteConfig::default() };
        let report = run_suite(&cfg).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert!(report.checks.iter().filter(|c| c.name.contains("frozen-top")).count() >= 21);
    }

    #[test]
    fn inverted_slope_mutant_fails() {
        let report = mutants::inverted_slope_report(&SuiteConfig::default()).unwrap();
        assert!(!report.passed());
        let failing: Vec<_> = report.checks.iter().filter(|c| !c.passed()).map(|c| c.name.clone()).collect();
        assert!(failing.iter().any(|n| n.contains("backward input")), "{failing:?}");
    }

    #[test]
    fn filter_restricts_report() {
        let cfg = SuiteConfig { ops: Some(vec!["meanpool".into()]), ..SuiteConfig::default() };
        let report = run_suite(&cfg).unwrap();
        assert!(report.checks.iter().all(|c| c.op == "meanpool"));
        assert!(report.passed());
        let bad = SuiteConfig { ops: Some(vec!["softmax".into()]), ..SuiteConfig::default() };
        assert!(run_suite(&bad).is_err());
    }

    #[test]
    fn stricter_elementwise_tolerances() {
        // piecewise-linear operators are exact under finite differences away
        // from branch changes, so a wider step only removes round-off
        for (ops, tol, step) in [
            (["leaky", "maxpool"], 1e-8, 1e-4),
            (["meanpool", "maxout"], 1e-8, 1e-4),
            (["rmspool", "conv"], 1e-6, 1e-6),
        ] {
            let ops = Some(ops.iter().map(|s| s.to_string()).collect());
            let cfg = SuiteConfig { ops, tol, step, ..SuiteConfig::default() };
            let report = run_suite(&cfg).unwrap();
            assert!(report.passed(), "{}", report.render());
        }
    }
}
