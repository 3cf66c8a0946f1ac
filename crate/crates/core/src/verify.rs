//! Self-checks shared by the CLI, the examples and the test suites: dense
//! oracle equivalence of the mixers, finite-difference gradient checks of
//! every block, metric identities and causality probes. All in 64-bit.

use std::fmt;

use crate::blocks::{BlockKind, BlockParams, Gsc, StageBlock, TriOrientedMix};
use crate::error::{invalid, Result};
use crate::metrics::{dsc, miou, nsd, LabelVolume};
use crate::nn::{Builder, ParamStore};
use crate::rng::Rng;
use crate::segnet::{build_model, fue, DecoderBlock, SegConfig};
use crate::seqmix::{
    apply_per_channel, dense_apply, materialize_semiseparable, quasiseparable_materialize,
    quasiseparable_matmul, quasiseparable_mix, ssm_scan, QuasiParams, SeqMixer, SsmParams, Triple,
};
use crate::tensor::{grad_check, grad_check_at, GradCheckReport, Graph, Tensor, Var};
use crate::trainer::loss;

/// One named check: the worst error over `cases` trials against `tol`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl CheckResult {
    fn new(name: &str, cases: usize, max_err: f64, tol: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            cases,
            max_err,
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_err.is_finite() && self.max_err < self.tol
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<18} cases={:<4} max_err={:.3e} tol={:.0e} {}",
            self.name,
            self.cases,
            self.max_err,
            self.tol,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, rng.uniform_vec(n, -1.0, 1.0)).expect("shape matches data")
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `(L, N, d)` drawn with `L ≤ 32`, `N ≤ 4`, `d ≤ 4`.
fn draw_sizes(rng: &mut Rng) -> (usize, usize, usize) {
    (rng.int(1, 32), rng.int(1, 4), rng.int(1, 4))
}

/// Selective scan against the materialized per-channel semiseparable matrix.
pub fn check_scan_oracle(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (l, n, d) = draw_sizes(&mut rng);
        let p = SsmParams::<f64>::random(&mut rng, l, d, n)?;
        let x = random(&mut rng, &[l, d]);
        let y = ssm_scan(&x, &p)?;
        let dense = apply_per_channel(&materialize_semiseparable(&p, l)?, &x)?;
        worst = worst.max(max_abs(y.data(), dense.data()));
    }
    Ok(CheckResult::new("ssm_scan", cases, worst, 1e-10))
}

/// Quasiseparable kernel against its dense materialization, alternating
/// diagonal and full transitions.
pub fn check_quasi_oracle(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for i in 0..cases {
        let (l, n, d) = draw_sizes(&mut rng);
        let q = QuasiParams::<f64>::random(&mut rng, l, n, i % 2 == 0)?;
        let x = random(&mut rng, &[l, d]);
        let y = quasiseparable_matmul(&x, &q)?;
        let m = quasiseparable_materialize(&q)?;
        worst = worst.max(max_abs(y.data(), &dense_apply(l, d, m.data(), x.data())));
    }
    Ok(CheckResult::new("qs_matmul", cases, worst, 1e-10))
}

fn diagonal_of(tr: &Triple<f64>) -> Result<Tensor<f64>> {
    let (l, n) = (tr.b.shape()[0], tr.b.shape()[1]);
    let data = (0..l * n).map(|i| tr.a.data()[i * n + i % n]).collect();
    Tensor::new(&[l, n], data)
}

/// The literal shift/flip/scan composition, built from graph ops, against
/// the dense quasiseparable matrix.
pub fn check_quasi_composition(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (l, n, d) = draw_sizes(&mut rng);
        let q = QuasiParams::<f64>::random(&mut rng, l, n, true)?;
        let x = random(&mut rng, &[l, d]);
        let g = Graph::new();
        let c = |t: Tensor<f64>| g.constant(t);
        let y = quasiseparable_mix(
            c(x.clone()),
            [c(diagonal_of(&q.forward)?), c(q.forward.b.clone()), c(q.forward.c.clone())],
            [c(diagonal_of(&q.backward)?), c(q.backward.b.clone()), c(q.backward.c.clone())],
            c(q.delta.clone().reshaped(&[l, 1])?),
        )?
        .value();
        let m = quasiseparable_materialize(&q)?;
        worst = worst.max(max_abs(y.data(), &dense_apply(l, d, m.data(), x.data())));
    }
    Ok(CheckResult::new("qs_composition", cases, worst, 1e-10))
}

fn random_masks(rng: &mut Rng, dims: [usize; 3]) -> Result<(LabelVolume, LabelVolume)> {
    let n = dims.iter().product();
    let p = rng.uniform(0.05, 0.6);
    let draw = |rng: &mut Rng| -> Vec<u8> { (0..n).map(|_| u8::from(rng.uniform(0.0, 1.0) < p)).collect() };
    let a = draw(rng);
    let b = draw(rng);
    Ok((LabelVolume::unit(dims, a)?, LabelVolume::unit(dims, b)?))
}

/// `DSC = 2·IoU / (1 + IoU)` on random mask pairs.
pub fn check_dice_iou_identity(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let dims = [rng.int(2, 8), rng.int(2, 8), rng.int(2, 8)];
        let (p, g) = random_masks(&mut rng, dims)?;
        let iou = miou(&p, &g, 1)?;
        worst = worst.max((dsc(&p, &g, 1)? - 2.0 * iou / (1.0 + iou)).abs());
    }
    Ok(CheckResult::new("dice_iou", cases, worst, 1e-12))
}

/// NSD never decreases as the tolerance grows; the error is the largest
/// observed decrease.
pub fn check_nsd_monotone(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let dims = [rng.int(3, 8), rng.int(3, 8), rng.int(3, 8)];
        let (p, g) = random_masks(&mut rng, dims)?;
        let mut prev = 0.0;
        for tau in [0.5, 1.0, 1.5, 2.0, 3.0, 5.0] {
            let v = nsd(&p, &g, 1, tau)?;
            worst = worst.max(prev - v);
            prev = v;
        }
    }
    Ok(CheckResult::new("nsd_monotone", cases, worst, 1e-12))
}

/// Every mixer and metric oracle, `cases` trials each.
pub fn oracle_suite(cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_scan_oracle(cases, seed)?,
        check_quasi_oracle(cases, seed.wrapping_add(1))?,
        check_quasi_composition(cases, seed.wrapping_add(2))?,
        check_dice_iou_identity(cases, seed.wrapping_add(3))?,
        check_nsd_monotone(cases.min(100), seed.wrapping_add(4))?,
    ])
}

/// Outcome of the perturbation probes: does changing token `t` alter any
/// output before `t`?
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Causality {
    /// Largest change of a scan output strictly before the perturbed token.
    pub scan_past_change: f64,
    /// Smallest, over cases, of the largest change of a quasiseparable
    /// output before the perturbed token.
    pub quasi_past_change: f64,
    pub cases: usize,
}

impl Causality {
    pub fn scan_is_causal(&self) -> bool {
        self.scan_past_change == 0.0
    }

    pub fn quasi_is_non_causal(&self) -> bool {
        self.quasi_past_change > 1e-6
    }
}

/// Perturbs one token of random sequences and measures the effect on
/// earlier outputs of both mixers.
pub fn causality_probe(cases: usize, seed: u64) -> Result<Causality> {
    let mut rng = Rng::new(seed);
    let mut out = Causality {
        scan_past_change: 0.0,
        quasi_past_change: f64::INFINITY,
        cases,
    };
    for _ in 0..cases {
        let (l, n, d) = (rng.int(4, 32), rng.int(1, 4), rng.int(1, 4));
        let t = rng.int(1, l - 1);
        let x = random(&mut rng, &[l, d]);
        let mut bumped = x.clone();
        for ch in 0..d {
            bumped.data_mut()[t * d + ch] += 1.0;
        }
        let past = |a: &Tensor<f64>, b: &Tensor<f64>| max_abs(&a.data()[..t * d], &b.data()[..t * d]);

        let p = SsmParams::<f64>::random(&mut rng, l, d, n)?;
        out.scan_past_change = out.scan_past_change.max(past(&ssm_scan(&x, &p)?, &ssm_scan(&bumped, &p)?));

        let q = QuasiParams::<f64>::random(&mut rng, l, n, true)?;
        let change = past(&quasiseparable_matmul(&x, &q)?, &quasiseparable_matmul(&bumped, &q)?);
        out.quasi_past_change = out.quasi_past_change.min(change);
    }
    if cases == 0 {
        out.quasi_past_change = 0.0;
    }
    Ok(out)
}

/// Names accepted by [`gradcheck_module`], in report order.
pub const GRAD_MODULES: [&str; 9] = [
    "gsc",
    "tom",
    "tsmamba",
    "tshydra",
    "mamba_swin",
    "mambaout",
    "fue",
    "decoder",
    "loss_model",
];

/// `sum(f(x) ⊙ probe)`, a scalar whose gradient exercises every output.
fn probed<'g>(g: &'g Graph<f64>, y: Var<'g, f64>, probe: &Tensor<f64>) -> Result<Var<'g, f64>> {
    y.mul(g.constant(probe.clone()))?.sum()
}

fn store_and_rng(seed: u64) -> (ParamStore<f64>, Rng) {
    (ParamStore::new(), Rng::new(seed))
}

fn as_result(name: &str, r: GradCheckReport, tol: f64) -> CheckResult {
    CheckResult::new(name, r.checked, r.max_rel_err, tol)
}

/// Finite-difference check of one named module with respect to its input.
pub fn gradcheck_module(name: &str, seed: u64) -> Result<CheckResult> {
    const EPS: f64 = 1e-6;
    const TOL: f64 = 1e-4;
    let mut rng = Rng::new(seed);
    match name {
        "gsc" => {
            let (mut store, mut init) = store_and_rng(seed);
            let gsc = Gsc::new(&mut Builder::new(&mut store, &mut init), 3)?;
            let x = random(&mut rng, &[3, 4, 4, 4]);
            let probe = random(&mut rng, &[3, 4, 4, 4]);
            let r = grad_check(|g, v| probed(g, gsc.forward(&store.bind(g, false), v)?, &probe), &x, EPS)?;
            Ok(as_result(name, r, TOL))
        }
        "tom" => {
            let (mut store, mut init) = store_and_rng(seed);
            let tom = TriOrientedMix::new(&mut Builder::new(&mut store, &mut init), |b| SeqMixer::ssm(b, 2, 3))?;
            let x = random(&mut rng, &[2, 3, 2, 4]);
            let probe = random(&mut rng, &[2, 3, 2, 4]);
            let r = grad_check(|g, v| probed(g, tom.forward(&store.bind(g, false), v)?, &probe), &x, EPS)?;
            Ok(as_result(name, r, TOL))
        }
        "tsmamba" | "tshydra" | "mamba_swin" | "mambaout" => {
            let kind: BlockKind = name.parse()?;
            let (mut store, mut init) = store_and_rng(seed);
            let params = BlockParams {
                state_dim: 2,
                window: 2,
                heads: 2,
                shifted: true,
            };
            let block = StageBlock::new(&mut Builder::new(&mut store, &mut init), kind, 2, params)?;
            let x = random(&mut rng, &[2, 4, 2, 2]);
            let probe = random(&mut rng, &[2, 4, 2, 2]);
            let r = grad_check(|g, v| probed(g, block.forward(&store.bind(g, false), v)?, &probe), &x, EPS)?;
            Ok(as_result(name, r, TOL))
        }
        "fue" => {
            let x = Tensor::new(&[2, 3, 3, 3], rng.uniform_vec(54, -3.0, 3.0))?;
            let probe = random(&mut rng, &[2, 3, 3, 3]);
            let r = grad_check(|g, v| probed(g, fue(v)?, &probe), &x, EPS)?;
            Ok(as_result(name, r, TOL))
        }
        "decoder" => {
            let (mut store, mut init) = store_and_rng(seed);
            let dec = DecoderBlock::new(&mut Builder::new(&mut store, &mut init), 4, 2)?;
            let prev = random(&mut rng, &[4, 2, 2, 2]);
            let skip = random(&mut rng, &[2, 4, 4, 4]);
            let probe = random(&mut rng, &[2, 4, 4, 4]);
            let through_prev = grad_check(
                |g, v| probed(g, dec.forward(&store.bind(g, false), v, g.constant(skip.clone()))?, &probe),
                &prev,
                EPS,
            )?;
            let through_skip = grad_check(
                |g, v| probed(g, dec.forward(&store.bind(g, false), g.constant(prev.clone()), v)?, &probe),
                &skip,
                EPS,
            )?;
            Ok(CheckResult::new(
                name,
                through_prev.checked + through_skip.checked,
                through_prev.max_rel_err.max(through_skip.max_rel_err),
                TOL,
            ))
        }
        "loss_model" => {
            // Every variant, end to end through the loss, on sampled voxels.
            let mut worst = 0.0f64;
            let mut checked = 0;
            for kind in BlockKind::ALL {
                let cfg = SegConfig {
                    state_dim: 2,
                    window: 2,
                    heads: 2,
                    ..SegConfig::new(kind).with_width(4)
                };
                let model = build_model::<f64>(&cfg, seed)?;
                let x = random(&mut rng, &[1, 16, 16, 16]);
                let labels: Vec<u8> = (0..x.numel()).map(|_| u8::from(rng.uniform(0.0, 1.0) < 0.3)).collect();
                let coords: Vec<usize> = (0..8).map(|_| rng.int(0, x.numel() - 1)).collect();
                let r = grad_check_at(
                    |g, v| loss(model.net.forward(&model.params.bind(g, false), v)?, &labels, 1.0, 1.0),
                    &x,
                    EPS,
                    &coords,
                )?;
                worst = worst.max(r.max_rel_err);
                checked += r.checked;
            }
            Ok(CheckResult::new(name, checked, worst, 1e-3))
        }
        other => Err(invalid!(
            "unknown module {other:?} (expected all or one of {})",
            GRAD_MODULES.join(", ")
        )),
    }
}

/// Runs `which` ("all" or a module name).
pub fn gradcheck_suite(which: &str, seed: u64) -> Result<Vec<CheckResult>> {
    if which == "all" {
        GRAD_MODULES.iter().map(|m| gradcheck_module(m, seed)).collect()
    } else {
        Ok(vec![gradcheck_module(which, seed)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracles_pass_on_a_few_cases() {
        for r in oracle_suite(10, 3).unwrap() {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn causality_contrast() {
        let c = causality_probe(10, 1).unwrap();
        assert!(c.scan_is_causal(), "{c:?}");
        assert!(c.quasi_is_non_causal(), "{c:?}");
    }

    #[test]
    fn cheap_gradchecks_pass() {
        for m in ["gsc", "fue", "mambaout"] {
            let r = gradcheck_module(m, 0).unwrap();
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn unknown_module_is_an_error() {
        assert!(gradcheck_module("unet", 0).is_err());
    }
}
