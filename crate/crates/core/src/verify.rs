//! Self-checks run by `cpcomp verify`: the decomposed conv pipeline against
//! direct convolution with the reconstructed kernel, and model-file round
//! trips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv_forward, conv_forward_decomposed, ConvSpec};
use crate::cp::{reconstruct, CpFactors};
use crate::error::Result;
use crate::network::{decompose_layer, format, random_network, LayerKind, LayerPlan, NetworkSpec};
use crate::tensor::DenseTensor;

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    /// Worst observed error (0 for exact checks).
    pub worst: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.3e}\t{:.0e}",
            self.name,
            if self.passed() { "ok" } else { "FAIL" },
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Max-abs difference relative to the reference output's max-abs.
fn relative_inf(a: &DenseTensor, reference: &DenseTensor) -> f64 {
    let diff = a.data().iter().zip(reference.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    diff / reference.max_abs().max(f64::MIN_POSITIVE)
}

const PIPELINE_TOLERANCE: f64 = 1e-9;

fn pipeline_case(x: &DenseTensor, f: &CpFactors, spec: &ConvSpec) -> Result<f64> {
    let direct = conv_forward(x, &reconstruct(f)?, spec)?;
    Ok(relative_inf(&conv_forward_decomposed(x, f, spec)?, &direct))
}

/// Random geometries over `D ∈ {1,3,5}`, stride `{1,2}`, padding `{0,1,2}`.
pub fn pipeline_equivalence(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut res = CheckResult {
        name: "pipeline-equivalence".into(),
        cases,
        worst: 0.0,
        tolerance: PIPELINE_TOLERANCE,
        failures: Vec::new(),
    };
    for case in 0..cases {
        let d: usize = [1, 3, 5][case % 3];
        let stride = 1 + (case / 3) % 2;
        let pad = (case / 6) % 3;
        let (s, t, r) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=6));
        // Smallest extent ≥ D is D itself; step by the stride to keep the
        // output extent integral.
        let extent = |rng: &mut ChaCha8Rng| d.saturating_sub(2 * pad).max(1) + stride * rng.random_range(0..=4);
        let (mut w, mut h) = (extent(&mut rng), extent(&mut rng));
        while (w + 2 * pad) < d || (w + 2 * pad - d) % stride != 0 {
            w += 1;
        }
        while (h + 2 * pad) < d || (h + 2 * pad - d) % stride != 0 {
            h += 1;
        }
        let spec = ConvSpec::new(t, s, d, stride, pad);
        let f = CpFactors::new(uniform(&mut rng, &[r, s]), uniform(&mut rng, &[r, d, d]), uniform(&mut rng, &[t, r]))?;
        let x = uniform(&mut rng, &[s, w, h]);
        let err = pipeline_case(&x, &f, &spec)?;
        res.worst = res.worst.max(err);
        if !(err <= PIPELINE_TOLERANCE) {
            res.failures.push(format!("case {case}: {spec:?} on {w}×{h}, R={r}: error {err:e}"));
        }
    }
    Ok(res)
}

/// Runs every decomposed conv layer of `net` both ways on a random input
/// of the shape it sees in the network.
pub fn model_equivalence(net: &NetworkSpec, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = net.activation_shapes()?;
    let mut res = CheckResult {
        name: "model-layer-equivalence".into(),
        cases: 0,
        worst: 0.0,
        tolerance: PIPELINE_TOLERANCE,
        failures: Vec::new(),
    };
    for (layer, shape) in net.layers().iter().zip(&shapes) {
        if let LayerKind::DecomposedConv { spec, factors, .. } = &layer.kind {
            let x = uniform(&mut rng, shape);
            let err = pipeline_case(&x, factors, spec)?;
            res.cases += 1;
            res.worst = res.worst.max(err);
            if !(err <= PIPELINE_TOLERANCE) {
                res.failures.push(format!("{}: error {err:e}", layer.name));
            }
        }
    }
    Ok(res)
}

/// Serializes and re-reads `net`; the copy must be equal and re-serialize
/// to the same bytes.
pub fn round_trip(net: &NetworkSpec) -> Result<Option<String>> {
    let bytes = format::to_bytes(net);
    let back = match format::from_bytes(&bytes) {
        Ok(b) => b,
        Err(e) => return Ok(Some(format!("re-read failed: {e}"))),
    };
    if &back != net {
        return Ok(Some("re-read network differs".into()));
    }
    if format::to_bytes(&back) != bytes {
        return Ok(Some("re-serialized bytes differ".into()));
    }
    Ok(None)
}

/// A random small network, some of whose layers are decomposed.
pub fn random_model(seed: u64) -> Result<NetworkSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = rng.random_range(1..=3);
    let extent = rng.random_range(6..=10);
    let mut plan = Vec::new();
    for _ in 0..rng.random_range(1..=2) {
        let d = [1, 3, 5][rng.random_range(0..3)];
        plan.push(LayerPlan::Conv {
            out_channels: rng.random_range(1..=4),
            kernel_size: d,
            stride: 1,
            padding: d / 2,
        });
        plan.push(LayerPlan::Relu);
    }
    plan.push(LayerPlan::MaxPool { window: 2, stride: 2 });
    plan.push(LayerPlan::Flatten);
    for _ in 0..rng.random_range(1..=2) {
        plan.push(LayerPlan::Fc { outputs: rng.random_range(1..=6) });
    }
    let mut net = random_network(&[channels, extent, extent], &plan, rng.random())?;
    let limits = crate::rank::full_ranks(&net);
    for name in net.decomposable_layers() {
        if rng.random_bool(0.5) {
            let rank = rng.random_range(1..=limits[&name].min(4));
            net = decompose_layer(&net, &name, rank, rng.random())?;
        }
    }
    Ok(net)
}

pub fn serialization_round_trips(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut res = CheckResult {
        name: "serialization-round-trip".into(),
        cases,
        worst: 0.0,
        tolerance: 0.0,
        failures: Vec::new(),
    };
    for case in 0..cases {
        let net = random_model(seed.wrapping_add(case as u64))?;
        if let Some(problem) = round_trip(&net)? {
            res.failures.push(format!("case {case}: {problem}"));
        }
    }
    Ok(res)
}

/// Everything `cpcomp verify` checks for one model.
pub fn verify_model(net: &NetworkSpec, cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut own = CheckResult {
        name: "model-round-trip".into(),
        cases: 1,
        worst: 0.0,
        tolerance: 0.0,
        failures: Vec::new(),
    };
    if let Some(problem) = round_trip(net)? {
        own.failures.push(problem);
    }
    Ok(vec![
        pipeline_equivalence(cases, seed)?,
        model_equivalence(net, seed)?,
        own,
        serialization_round_trips(cases.min(50), seed)?,
    ])
}
