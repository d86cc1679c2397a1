//! Desk-scale decomposition networks, their losses and the training loop.
//!
//! One configurable network covers both published variants and the ablations:
//!
//! * per-point encoder: MLP `6→64→64` on `[position, color]`, then
//!   [`AGGREGATION_BLOCKS`] k-NN blocks (gather neighbors, elementwise max,
//!   concat with self, linear + relu back to 64);
//! * with hierarchical refinement (`use_hfr`): pre-albedo and pre-shade heads
//!   `64→32→3`, then refinement heads reading `[Â′, Ŝ′, L]` (`N×9`) or
//!   `[Â′, Ŝ′]` (`N×6`) without the PLD feature;
//! * without it: albedo and shade heads read encoder features directly;
//! * PLD encoder: per-cell MLP `5→8→8` on `(r, g, b, coverage, sinθ)`,
//!   solid-angle-weighted mean pool, linear to `L ∈ ℝ³`.
//!
//! Every output goes through a sigmoid.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamConfig, AdamState, Gradients, Tape, Tensor, Var};
use crate::cloud::{normalize_cloud, IntrinsicTriplet, PointCloud};
use crate::error::{Error, Result};
use crate::knn::knn_indices;
use crate::math::{sin, rad, sqrt, Rgb, Vec3};
use crate::projection::PldMap;

pub const ENCODER_WIDTH: usize = 64;
pub const HEAD_WIDTH: usize = 32;
pub const PLD_WIDTH: usize = 8;
pub const AGGREGATION_BLOCKS: usize = 2;
const PLD_INPUTS: usize = 5;

/// Structural switches of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    /// Feed the PLD feature `L` into the refinement heads.
    pub use_pld: bool,
    /// Two-stage prediction: pre-heads, then refinement heads.
    pub use_hfr: bool,
    /// One encoder for both branches instead of one per branch.
    pub shared_encoder: bool,
}

impl Architecture {
    pub const FULL: Self = Self { use_pld: true, use_hfr: true, shared_encoder: true };
    pub const BASE: Self = Self { use_pld: false, use_hfr: false, shared_encoder: false };
    pub const WITHOUT_PLD: Self = Self { use_pld: false, use_hfr: true, shared_encoder: true };
    pub const WITHOUT_HFR_PLD: Self = Self { use_pld: false, use_hfr: false, shared_encoder: true };
    pub const WITHOUT_SHARED_ENCODER: Self = Self { use_pld: true, use_hfr: true, shared_encoder: false };

    pub fn validate(&self) -> Result<()> {
        if self.use_pld && !self.use_hfr {
            return Err(Error::Config("the PLD feature enters at the refinement stage; use_pld needs use_hfr".into()));
        }
        Ok(())
    }

    fn encoder_prefixes(&self) -> &'static [&'static str] {
        if self.shared_encoder {
            &["encoder"]
        } else {
            &["encoder_albedo", "encoder_shade"]
        }
    }

    fn encoder_for(&self, branch: Branch) -> &'static str {
        match (self.shared_encoder, branch) {
            (true, _) => "encoder",
            (false, Branch::Albedo) => "encoder_albedo",
            (false, Branch::Shade) => "encoder_shade",
        }
    }

    fn refine_inputs(&self) -> usize {
        if self.use_pld {
            9
        } else {
            6
        }
    }

    /// `(layer name, inputs, outputs)` in parameter order.
    fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for p in self.encoder_prefixes() {
            out.push((format!("{p}.point0"), 6, ENCODER_WIDTH));
            out.push((format!("{p}.point1"), ENCODER_WIDTH, ENCODER_WIDTH));
            for b in 0..AGGREGATION_BLOCKS {
                out.push((format!("{p}.agg{b}"), 2 * ENCODER_WIDTH, ENCODER_WIDTH));
            }
        }
        let head = |out: &mut Vec<(String, usize, usize)>, name: &str, inputs: usize| {
            out.push((format!("{name}.0"), inputs, HEAD_WIDTH));
            out.push((format!("{name}.1"), HEAD_WIDTH, 3));
        };
        if self.use_hfr {
            head(&mut out, "pre_albedo", ENCODER_WIDTH);
            head(&mut out, "pre_shade", ENCODER_WIDTH);
            head(&mut out, "refine_albedo", self.refine_inputs());
            head(&mut out, "refine_shade", self.refine_inputs());
        } else {
            head(&mut out, "albedo", ENCODER_WIDTH);
            head(&mut out, "shade", ENCODER_WIDTH);
        }
        if self.use_pld {
            out.push(("pld.0".into(), PLD_INPUTS, PLD_WIDTH));
            out.push(("pld.1".into(), PLD_WIDTH, PLD_WIDTH));
            out.push(("pld.out".into(), PLD_WIDTH, 3));
        }
        out
    }

    /// Names and shapes of every parameter tensor.
    pub fn manifest(&self) -> Vec<(String, [usize; 2])> {
        self.layers()
            .into_iter()
            .flat_map(|(name, i, o)| [(format!("{name}.weight"), [i, o]), (format!("{name}.bias"), [1, o])])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Branch {
    Albedo,
    Shade,
}

/// Published model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Two independent estimators trained step by step.
    Base,
    /// Shared encoder, PLD and hierarchical refinement, trained simultaneously.
    Full,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!("unknown variant {other:?}; expected base or full"))),
        }
    }

    pub fn architecture(self) -> Architecture {
        match self {
            Variant::Base => Architecture::BASE,
            Variant::Full => Architecture::FULL,
        }
    }

    pub fn default_mode(self) -> TrainMode {
        match self {
            Variant::Base => TrainMode::StepByStep,
            Variant::Full => TrainMode::Simultaneous,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Simultaneous,
    /// Shade stack for the first `⌈T/2⌉` iterations, then the albedo stack
    /// with the shade stack frozen.
    StepByStep,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Simultaneous => "simultaneous",
            TrainMode::StepByStep => "step-by-step",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "simultaneous" => Ok(TrainMode::Simultaneous),
            "step-by-step" | "step_by_step" => Ok(TrainMode::StepByStep),
            other => Err(Error::Config(format!("unknown training mode {other:?}; expected simultaneous or step-by-step"))),
        }
    }
}

/// All learnable tensors, addressed by section name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// He-uniform hidden layers, Glorot-uniform output layers, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, i, o) in arch.layers() {
            let output_layer = o == 3;
            let a = if output_layer { sqrt(6.0 / (i + o) as f64) } else { sqrt(6.0 / i as f64) };
            let w = (0..i * o).map(|_| rng.gen_range(-a..a)).collect();
            names.push(format!("{name}.weight"));
            tensors.push(Tensor::new(i, o, w)?);
            names.push(format!("{name}.bias"));
            tensors.push(Tensor::zeros(1, o));
        }
        Ok(Self { arch, names, tensors })
    }

    /// Rebuilds parameters from named sections, which must match the
    /// architecture's manifest exactly (names, order and shapes).
    pub fn from_sections(arch: Architecture, sections: Vec<(String, Tensor)>) -> Result<Self> {
        arch.validate()?;
        let manifest = arch.manifest();
        if manifest.len() != sections.len() {
            return Err(Error::Config(format!(
                "parameter file has {} sections, architecture expects {}",
                sections.len(),
                manifest.len()
            )));
        }
        for ((want, shape), (got, t)) in manifest.iter().zip(&sections) {
            if want != got {
                return Err(Error::Config(format!("expected section {want}, found {got}")));
            }
            if *shape != t.shape() {
                return Err(Error::Config(format!("section {want}: expected shape {shape:?}, found {:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Numerical(format!("section {want} holds non-finite values")));
            }
        }
        let (names, tensors) = sections.into_iter().unzip();
        Ok(Self { arch, names, tensors })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn sections(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slot(name).map(|s| &self.tensors[s])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slot(name).map(|s| &mut self.tensors[s])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalars.
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::shape("set_flat", format!("{} values for {} parameters", flat.len(), self.parameter_count())));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Sets every weight and bias to zero.
    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(0.0);
        }
    }

    /// Sections that belong to the shade estimator of a two-stack network.
    fn in_shade_stack(name: &str) -> bool {
        name.starts_with("encoder_shade.") || name.starts_with("shade.")
    }

    /// Sections that belong to the albedo estimator of a two-stack network.
    fn in_albedo_stack(name: &str) -> bool {
        name.starts_with("encoder_albedo.") || name.starts_with("albedo.")
    }

    /// Slots of the shade stack.
    pub fn shade_stack_slots(&self) -> Vec<usize> {
        (0..self.names.len()).filter(|&s| Self::in_shade_stack(&self.names[s])).collect()
    }
}

/// Per-point estimates. Pre-fields are present only for networks with
/// hierarchical refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub albedo: Vec<Rgb>,
    pub shade: Vec<Rgb>,
    pub pre_albedo: Option<Vec<Rgb>>,
    pub pre_shade: Option<Vec<Rgb>>,
}

impl Prediction {
    pub fn new(albedo: Vec<Rgb>, shade: Vec<Rgb>) -> Result<Self> {
        if albedo.len() != shade.len() {
            return Err(Error::shape("Prediction", format!("{} albedo vs {} shade rows", albedo.len(), shade.len())));
        }
        Ok(Self { albedo, shade, pre_albedo: None, pre_shade: None })
    }

    pub fn len(&self) -> usize {
        self.albedo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.albedo.is_empty()
    }

    /// Rows reordered so that row `i` of the result is row `order[i]` here.
    fn gather(&self, order: &[usize]) -> Self {
        let pick = |v: &Vec<Rgb>| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            albedo: pick(&self.albedo),
            shade: pick(&self.shade),
            pre_albedo: self.pre_albedo.as_ref().map(pick),
            pre_shade: self.pre_shade.as_ref().map(pick),
        }
    }
}

/// Loss weights and term toggles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the pre-prediction group.
    pub lambda: f64,
    pub albedo: bool,
    pub shade: bool,
    pub physical: bool,
    /// Include the λ-weighted pre terms when the network has them.
    pub pre: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.1, albedo: true, shade: true, physical: true, pre: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    fn shade_only() -> Self {
        Self { lambda: 0.0, albedo: false, shade: true, physical: false, pre: false }
    }
}

/// Value of every loss term. Absent pre terms are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub albedo: f64,
    pub shade: f64,
    pub physical: f64,
    pub pre_albedo: f64,
    pub pre_shade: f64,
    pub pre_physical: f64,
    pub total: f64,
}

/// Network input for one batch. `knn` is the row-major `N×k` table built on
/// `cloud` (empty when `k = 0`).
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub cloud: &'a PointCloud,
    pub knn: &'a [usize],
    pub k: usize,
    pub pld: Option<&'a PldMap>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub albedo: Var,
    pub shade: Var,
    pub pre_albedo: Option<Var>,
    pub pre_shade: Option<Var>,
}

/// Puts every parameter on the tape: trainable slots as parameters, the rest
/// as constants.
pub fn bind_params(tape: &mut Tape, params: &ModelParams, trainable: &dyn Fn(usize) -> bool) -> Vec<Var> {
    params
        .tensors
        .iter()
        .enumerate()
        .map(|(s, t)| if trainable(s) { tape.param(s, t.clone()) } else { tape.constant(t.clone()) })
        .collect()
}

struct Net<'a> {
    params: &'a ModelParams,
    vars: &'a [Var],
}

impl Net<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        self.params
            .slot(name)
            .map(|s| self.vars[s])
            .ok_or_else(|| Error::Config(format!("parameters lack section {name}")))
    }

    fn linear(&self, tape: &mut Tape, layer: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{layer}.weight"))?;
        let b = self.var(&format!("{layer}.bias"))?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    fn head(&self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, &format!("{name}.0"), x)?;
        let h = tape.relu(h);
        let y = self.linear(tape, &format!("{name}.1"), h)?;
        Ok(tape.sigmoid(y))
    }

    fn encode(&self, tape: &mut Tape, prefix: &str, input: Var, knn: &[usize], k: usize) -> Result<Var> {
        let h = self.linear(tape, &format!("{prefix}.point0"), input)?;
        let h = tape.relu(h);
        let h = self.linear(tape, &format!("{prefix}.point1"), h)?;
        let mut h = tape.relu(h);
        for b in 0..AGGREGATION_BLOCKS {
            let pooled = if k == 0 {
                h
            } else {
                let g = tape.gather_rows(h, knn)?;
                tape.group_max(g, k)?
            };
            let c = tape.concat(&[h, pooled])?;
            let y = self.linear(tape, &format!("{prefix}.agg{b}"), c)?;
            h = tape.relu(y);
        }
        Ok(h)
    }

    fn pld_encode(&self, tape: &mut Tape, map: &PldMap) -> Result<Var> {
        let (cells, weights) = pld_cell_inputs(map);
        let x = tape.constant(cells);
        let w = tape.constant(weights);
        let h = self.linear(tape, "pld.0", x)?;
        let h = tape.relu(h);
        let h = self.linear(tape, "pld.1", h)?;
        let h = tape.relu(h);
        let pooled = tape.matmul(w, h)?;
        self.linear(tape, "pld.out", pooled)
    }
}

/// Per-cell `(r, g, b, coverage, sinθ)` rows and the `1×K` pooling weights
/// (cell solid angles normalized to sum 1).
fn pld_cell_inputs(map: &PldMap) -> (Tensor, Tensor) {
    let (nt, np) = (map.grid.thetas.len(), map.grid.phis.len());
    let mut rows = Vec::with_capacity(nt * np * PLD_INPUTS);
    let mut weights = Vec::with_capacity(nt * np);
    for ti in 0..nt {
        let s = sin(rad(map.grid.thetas[ti]));
        let w = map.grid.cell_solid_angle(ti);
        for pi in 0..np {
            let i = map.index(ti, pi);
            let c = map.values[i];
            rows.extend_from_slice(&[c[0], c[1], c[2], map.coverage[i], s]);
            weights.push(w);
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let k = weights.len();
    (
        Tensor::new(k, PLD_INPUTS, rows).expect("row count matches"),
        Tensor::new(1, k, weights).expect("weight count matches"),
    )
}

fn point_inputs(cloud: &PointCloud) -> Tensor {
    let data = cloud
        .positions()
        .iter()
        .zip(cloud.colors())
        .flat_map(|(p, c)| [p.x, p.y, p.z, c[0], c[1], c[2]])
        .collect();
    Tensor::new(cloud.len(), 6, data).expect("six columns per point")
}

fn check_batch(batch: &Batch<'_>) -> Result<()> {
    let n = batch.cloud.len();
    if batch.knn.len() != n * batch.k {
        return Err(Error::shape("forward", format!("knn table has {} entries for N = {n}, k = {}", batch.knn.len(), batch.k)));
    }
    Ok(())
}

/// Records the forward pass of `batch` on `tape`.
pub fn forward_on_tape(tape: &mut Tape, vars: &[Var], params: &ModelParams, batch: &Batch<'_>) -> Result<ForwardVars> {
    check_batch(batch)?;
    let arch = params.arch;
    let net = Net { params, vars };
    let input = tape.constant(point_inputs(batch.cloud));
    let f_albedo = net.encode(tape, arch.encoder_for(Branch::Albedo), input, batch.knn, batch.k)?;
    let f_shade = if arch.shared_encoder {
        f_albedo
    } else {
        net.encode(tape, arch.encoder_for(Branch::Shade), input, batch.knn, batch.k)?
    };
    if !arch.use_hfr {
        let albedo = net.head(tape, "albedo", f_albedo)?;
        let shade = net.head(tape, "shade", f_shade)?;
        return Ok(ForwardVars { albedo, shade, pre_albedo: None, pre_shade: None });
    }
    let pre_albedo = net.head(tape, "pre_albedo", f_albedo)?;
    let pre_shade = net.head(tape, "pre_shade", f_shade)?;
    let mut parts = vec![pre_albedo, pre_shade];
    if arch.use_pld {
        let map = batch.pld.ok_or_else(|| Error::Contract("this network needs a PLD map; run compute_pld first".into()))?;
        let l = net.pld_encode(tape, map)?;
        let zeros = vec![0usize; batch.cloud.len()];
        parts.push(tape.gather_rows(l, &zeros)?);
    }
    let joint = tape.concat(&parts)?;
    let albedo = net.head(tape, "refine_albedo", joint)?;
    let shade = net.head(tape, "refine_shade", joint)?;
    Ok(ForwardVars { albedo, shade, pre_albedo: Some(pre_albedo), pre_shade: Some(pre_shade) })
}

/// Loss terms recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    albedo: Var,
    shade: Var,
    physical: Var,
    pre: Option<[Var; 3]>,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).data()[0];
        let pre = self.pre.map(|[a, s, p]| [v(a), v(s), v(p)]).unwrap_or([0.0; 3]);
        LossBreakdown {
            albedo: v(self.albedo),
            shade: v(self.shade),
            physical: v(self.physical),
            pre_albedo: pre[0],
            pre_shade: pre[1],
            pre_physical: pre[2],
            total: v(self.total),
        }
    }
}

fn rgb_tensor(rows: &[Rgb]) -> Tensor {
    Tensor::from_rows(rows)
}

/// `‖A−Â‖ + ‖S−Ŝ‖ + ‖I−Â⊙Ŝ‖ + λ(‖A−Â′‖ + ‖S−Ŝ′‖ + ‖I−Â′⊙Ŝ′‖)` over the
/// enabled terms. Every term is recorded; only enabled ones enter `total`.
pub fn loss_on_tape(tape: &mut Tape, out: &ForwardVars, truth: &IntrinsicTriplet, cfg: &LossConfig) -> Result<LossVars> {
    let a = tape.constant(rgb_tensor(&truth.albedo));
    let s = tape.constant(rgb_tensor(&truth.shade));
    let i = tape.constant(rgb_tensor(truth.cloud.colors()));
    let terms = |tape: &mut Tape, pa: Var, ps: Var| -> Result<[Var; 3]> {
        let ra = tape.sub(a, pa)?;
        let rs = tape.sub(s, ps)?;
        let prod = tape.mul(pa, ps)?;
        let rp = tape.sub(i, prod)?;
        Ok([tape.frobenius_norm(ra), tape.frobenius_norm(rs), tape.frobenius_norm(rp)])
    };
    let [la, ls, lp] = terms(tape, out.albedo, out.shade)?;
    let pre = match (out.pre_albedo, out.pre_shade) {
        (Some(pa), Some(ps)) => Some(terms(tape, pa, ps)?),
        _ => None,
    };
    let mut picked = Vec::new();
    for (on, v) in [(cfg.albedo, la), (cfg.shade, ls), (cfg.physical, lp)] {
        if on {
            picked.push(v);
        }
    }
    if let (true, Some([pa, ps, pp])) = (cfg.pre, pre) {
        for (on, v) in [(cfg.albedo, pa), (cfg.shade, ps), (cfg.physical, pp)] {
            if on {
                let w = tape.scale(v, cfg.lambda)?;
                picked.push(w);
            }
        }
    }
    let total = if picked.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let c = tape.concat(&picked)?;
        tape.sum(c)
    };
    Ok(LossVars { total, albedo: la, shade: ls, physical: lp, pre })
}

/// Loss of an already computed prediction against ground truth.
pub fn loss_total(pred: &Prediction, truth: &IntrinsicTriplet, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let n = truth.len();
    if pred.len() != n {
        return Err(Error::shape("loss_total", format!("prediction has {} rows, truth {n}", pred.len())));
    }
    let mut tape = Tape::new();
    let albedo = tape.constant(rgb_tensor(&pred.albedo));
    let shade = tape.constant(rgb_tensor(&pred.shade));
    let (pre_albedo, pre_shade) = match (&pred.pre_albedo, &pred.pre_shade) {
        (Some(a), Some(s)) => (Some(tape.constant(rgb_tensor(a))), Some(tape.constant(rgb_tensor(s)))),
        _ => (None, None),
    };
    let out = ForwardVars { albedo, shade, pre_albedo, pre_shade };
    Ok(loss_on_tape(&mut tape, &out, truth, cfg)?.breakdown(&tape))
}

fn read_prediction(tape: &Tape, out: &ForwardVars) -> Prediction {
    Prediction {
        albedo: tape.value(out.albedo).to_rgb(),
        shade: tape.value(out.shade).to_rgb(),
        pre_albedo: out.pre_albedo.map(|v| tape.value(v).to_rgb()),
        pre_shade: out.pre_shade.map(|v| tape.value(v).to_rgb()),
    }
}

/// Forward pass on a prepared batch; `batch.cloud` should be normalized.
pub fn forward(params: &ModelParams, batch: &Batch<'_>) -> Result<Prediction> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params, &|_| false);
    let out = forward_on_tape(&mut tape, &vars, params, batch)?;
    Ok(read_prediction(&tape, &out))
}

/// Forward pass of a network with hierarchical refinement and PLD input.
pub fn forward_full(cloud: &PointCloud, knn: &[usize], k: usize, pld: &PldMap, params: &ModelParams) -> Result<Prediction> {
    if !params.arch.use_pld {
        return Err(Error::Config("forward_full needs parameters of a PLD-enabled network".into()));
    }
    forward(params, &Batch { cloud, knn, k, pld: Some(pld) })
}

/// Forward pass of the two-estimator base network.
pub fn forward_base(cloud: &PointCloud, knn: &[usize], k: usize, params: &ModelParams) -> Result<Prediction> {
    if params.arch != Architecture::BASE {
        return Err(Error::Config("forward_base needs base-variant parameters".into()));
    }
    forward(params, &Batch { cloud, knn, k, pld: None })
}

/// Encoder features (`N×64`) of one branch: the shared encoder, or the
/// albedo/shade encoder of a two-encoder network.
pub fn encode(cloud: &PointCloud, knn: &[usize], k: usize, params: &ModelParams, shade_branch: bool) -> Result<Tensor> {
    check_batch(&Batch { cloud, knn, k, pld: None })?;
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params, &|_| false);
    let net = Net { params, vars: &vars };
    let input = tape.constant(point_inputs(cloud));
    let branch = if shade_branch { Branch::Shade } else { Branch::Albedo };
    let h = net.encode(&mut tape, params.arch.encoder_for(branch), input, knn, k)?;
    Ok(tape.value(h).clone())
}

/// The PLD feature `L`.
pub fn pld_encode(map: &PldMap, params: &ModelParams) -> Result<[f64; 3]> {
    if !params.arch.use_pld {
        return Err(Error::Config("parameters have no PLD encoder".into()));
    }
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params, &|_| false);
    let net = Net { params, vars: &vars };
    let l = net.pld_encode(&mut tape, map)?;
    let d = tape.value(l).data();
    Ok([d[0], d[1], d[2]])
}

/// Loss, gradients and active-piece signature for one batch with every
/// parameter trainable.
pub fn loss_and_gradients(
    params: &ModelParams,
    batch: &Batch<'_>,
    truth: &IntrinsicTriplet,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients, u64)> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params, &|_| true);
    let out = forward_on_tape(&mut tape, &vars, params, batch)?;
    let loss = loss_on_tape(&mut tape, &out, truth, cfg)?;
    let grads = tape.backward(loss.total)?;
    Ok((loss.breakdown(&tape), grads, tape.piece_signature()))
}

/// k-NN table for a batch, with `k` capped at `N − 1`.
pub fn batch_knn(cloud: &PointCloud, k: usize) -> Result<(Vec<usize>, usize)> {
    let k = k.min(cloud.len() - 1);
    if k == 0 {
        return Ok((Vec::new(), 0));
    }
    Ok((knn_indices(cloud.positions(), k)?, k))
}

/// One training example: a ground-truth triplet and, for PLD networks, the
/// PLD map of its normalized cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub triplet: IntrinsicTriplet,
    pub pld: Option<PldMap>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Points sampled per iteration.
    pub points: usize,
    pub k: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub arch: Architecture,
    pub mode: TrainMode,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Full)
    }
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            iterations: 2000,
            points: 2048,
            k: 16,
            adam: AdamConfig::default(),
            seed: 0,
            arch: variant.architecture(),
            mode: variant.default_mode(),
            loss: LossConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate()?;
        if self.iterations == 0 || self.points == 0 {
            return Err(Error::Config("iterations and points must be positive".into()));
        }
        if self.mode == TrainMode::StepByStep && (self.arch.shared_encoder || self.arch.use_hfr) {
            return Err(Error::Config(
                "step-by-step training needs two independent estimators (no shared encoder, no refinement)".into(),
            ));
        }
        let a = self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: ModelParams,
    /// Loss terms of every iteration on its training batch.
    pub history: Vec<LossBreakdown>,
}

/// Runs `cfg.iterations` Adam steps on random batches drawn from `samples`.
/// Triplets are normalized as whole clouds before batches are drawn.
pub fn train(samples: &[TrainSample], cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(samples, cfg, |_, _| {})
}

/// [`train`] with a callback after every iteration.
pub fn train_with<F>(samples: &[TrainSample], cfg: &TrainConfig, mut on_step: F) -> Result<TrainOutput>
where
    F: FnMut(usize, &LossBreakdown),
{
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.arch.use_pld {
        if let Some(i) = samples.iter().position(|s| s.pld.is_none()) {
            return Err(Error::Contract(format!("training sample {i} has no PLD map; run compute_pld first")));
        }
    }
    let normalized: Vec<IntrinsicTriplet> = samples
        .iter()
        .map(|s| {
            let (_, t) = normalize_cloud(&s.triplet.cloud);
            s.triplet.normalized_with(&t)
        })
        .collect();
    let mut params = ModelParams::init(cfg.arch, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam, &params.tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let shade_stack: Vec<bool> = params.names.iter().map(|n| ModelParams::in_shade_stack(n)).collect();
    let albedo_stack: Vec<bool> = params.names.iter().map(|n| ModelParams::in_albedo_stack(n)).collect();
    let half = cfg.iterations.div_ceil(2);
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let si = rng.gen_range(0..normalized.len());
        let full = &normalized[si];
        let m = cfg.points.min(full.len());
        let idx = sample_indices(&mut rng, full.len(), m).into_vec();
        let truth = full.select(&idx)?;
        let (knn, k) = batch_knn(&truth.cloud, cfg.k)?;
        let (mask, loss_cfg): (&[bool], LossConfig) = match cfg.mode {
            TrainMode::StepByStep if it < half => (&shade_stack, LossConfig::shade_only()),
            TrainMode::StepByStep => (&albedo_stack, cfg.loss),
            TrainMode::Simultaneous => (&[], cfg.loss),
        };
        let trainable = |s: usize| mask.is_empty() || mask[s];
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, &params, &trainable);
        let batch = Batch { cloud: &truth.cloud, knn: &knn, k, pld: samples[si].pld.as_ref() };
        let out = forward_on_tape(&mut tape, &vars, &params, &batch)?;
        let loss = loss_on_tape(&mut tape, &out, &truth, &loss_cfg)?;
        let grads = tape.backward(loss.total)?;
        adam.step(&mut params.tensors, grads.slots())?;
        let b = loss.breakdown(&tape);
        on_step(it, &b);
        history.push(b);
    }
    Ok(TrainOutput { params, history })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferConfig {
    pub k: usize,
    /// Target points per forward pass. Larger clouds are split into
    /// interleaved subsets of about this size so that point density matches
    /// training batches.
    pub chunk_points: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { k: 16, chunk_points: 2048 }
    }
}

fn point_key(p: Vec3, c: Rgb) -> [u64; 6] {
    [p.x.to_bits(), p.y.to_bits(), p.z.to_bits(), c[0].to_bits(), c[1].to_bits(), c[2].to_bits()]
}

fn hash_key(key: &[u64; 6]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &v in key {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Splits point indices into `⌈N / chunk⌉` subsets by rank of a content
/// hash, so the split depends on the points and not on their order.
/// Content-hash order of the points, independent of the input order.
fn canonical_order(cloud: &PointCloud) -> Vec<usize> {
    let keys: Vec<[u64; 6]> = cloud.positions().iter().zip(cloud.colors()).map(|(&p, &c)| point_key(p, c)).collect();
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.sort_by_key(|&i| (hash_key(&keys[i]), keys[i]));
    order
}

/// Chunks of canonical ranks, dealt round-robin.
fn rank_chunks(n: usize, chunk: usize) -> Vec<Vec<usize>> {
    let count = n.div_ceil(chunk.max(1)).max(1);
    let mut chunks = vec![Vec::with_capacity(n / count + 1); count];
    for rank in 0..n {
        chunks[rank % count].push(rank);
    }
    chunks
}

/// Normalizes `cloud`, runs the network and returns the prediction in the
/// input point order. Networks without a PLD input ignore `pld`.
pub fn infer(cloud: &PointCloud, pld: Option<&PldMap>, params: &ModelParams, cfg: &InferConfig) -> Result<Prediction> {
    let arch = params.arch;
    if arch.use_pld && pld.is_none() {
        return Err(Error::Contract(
            "this model needs the PLD map of the input cloud; compute it first (`ipcd pld`)".into(),
        ));
    }
    let pld = if arch.use_pld { pld } else { None };
    let order = canonical_order(cloud);
    let (norm, _) = normalize_cloud(&cloud.select(&order)?);
    let n = norm.len();
    let mut out = Prediction {
        albedo: vec![[0.0; 3]; n],
        shade: vec![[0.0; 3]; n],
        pre_albedo: arch.use_hfr.then(|| vec![[0.0; 3]; n]),
        pre_shade: arch.use_hfr.then(|| vec![[0.0; 3]; n]),
    };
    for ranks in rank_chunks(n, cfg.chunk_points) {
        let sub = norm.select(&ranks)?;
        let idx: Vec<usize> = ranks.iter().map(|&r| order[r]).collect();
        let (knn, k) = batch_knn(&sub, cfg.k)?;
        let pred = forward(params, &Batch { cloud: &sub, knn: &knn, k, pld })?;
        for (r, &i) in idx.iter().enumerate() {
            out.albedo[i] = pred.albedo[r];
            out.shade[i] = pred.shade[r];
            if let (Some(dst), Some(src)) = (out.pre_albedo.as_mut(), pred.pre_albedo.as_ref()) {
                dst[i] = src[r];
            }
            if let (Some(dst), Some(src)) = (out.pre_shade.as_mut(), pred.pre_shade.as_ref()) {
                dst[i] = src[r];
            }
        }
    }
    Ok(out)
}

impl Prediction {
    /// Prediction of a permuted cloud mapped back: row `i` becomes row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        self.gather(perm)
    }
}
