use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{OperatorSet, ScaleParameters};
use crate::error::{FrostError, Result};
use crate::halting::HaltingHead;
use crate::numerics::{
    all_finite, axpy, dot, sigmoid, spectral_norm_estimate, Activation, AffineMap, FnOperator,
    MlpMap, MlpTrace, ParamSlot, Params, DEFAULT_POWER_ITERS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Stationary scaled update `h + λA(h) + λ^{1+H}B(x)`.
    Frost,
    /// Residual update with an independent operator set per step.
    Vanilla,
    /// Shared `A(h) + B(x)` without the residual skip.
    Recurrent,
    /// Shared residual `h + A(h) + B(x)` without scaling.
    BasicSsm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Frost => "frost",
            ModelKind::Vanilla => "vanilla",
            ModelKind::Recurrent => "recurrent",
            ModelKind::BasicSsm => "basic_ssm",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = FrostError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frost" => Ok(ModelKind::Frost),
            "vanilla" => Ok(ModelKind::Vanilla),
            "recurrent" => Ok(ModelKind::Recurrent),
            "basic_ssm" | "basicssm" => Ok(ModelKind::BasicSsm),
            other => Err(FrostError::Config(format!("unknown model kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_in: usize,
    pub d_hid: usize,
    pub d_out: usize,
}

/// Construction parameters for [`Model::init`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub t_max: usize,
    pub activation: Activation,
    /// Number of layers in the transition MLP.
    pub transition_depth: usize,
    /// `A(h) = g(h) − leak·h`. `None` picks 1 for the scaled update and 0 for baselines.
    pub leak: Option<f64>,
    pub gating: bool,
    pub lambda_init: f64,
    pub hurst: f64,
    /// Step Jacobian norm at `h_0` that the scaled update is rescaled to at init.
    pub contraction_target: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Frost,
            dims: ModelDims {
                d_in: 16,
                d_hid: 32,
                d_out: 4,
            },
            t_max: 16,
            activation: Activation::Tanh,
            transition_depth: 2,
            leak: None,
            gating: false,
            lambda_init: super::DEFAULT_LAMBDA,
            hurst: super::DEFAULT_HURST,
            contraction_target: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d.d_in == 0 || d.d_hid == 0 || d.d_out == 0 {
            return Err(FrostError::Config("all model dimensions must be positive".into()));
        }
        if self.t_max == 0 {
            return Err(FrostError::Config("t_max must be >= 1".into()));
        }
        if self.transition_depth == 0 {
            return Err(FrostError::Config("transition_depth must be >= 1".into()));
        }
        if !(self.lambda_init > 0.0) {
            return Err(FrostError::Config("lambda_init must be > 0".into()));
        }
        if !(self.hurst > 0.0 && self.hurst <= 1.0) {
            return Err(FrostError::Config("hurst must be in (0, 1]".into()));
        }
        if self.gating && self.kind != ModelKind::Frost {
            return Err(FrostError::Config("gating is only defined for the frost model".into()));
        }
        Ok(())
    }

    pub fn effective_leak(&self) -> f64 {
        self.leak.unwrap_or(match self.kind {
            ModelKind::Frost => 1.0,
            _ => 0.0,
        })
    }
}

/// A refinement model: one operator set (or one per step for `Vanilla`) and,
/// for the gated scaled update, the gate map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub t_max: usize,
    pub operators: Vec<OperatorSet>,
    #[serde(default)]
    pub gate: Option<AffineMap>,
}

/// Gate values of a gated step: `h' = h + γ ⊙ u`, `γ = σ(G h + c)`.
#[derive(Debug, Clone)]
pub struct GateTrace {
    pub gamma: Vec<f64>,
    pub update: Vec<f64>,
}

/// Everything one step needs for its backward and tangent passes.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub step: usize,
    pub h: Vec<f64>,
    pub a: MlpTrace,
    pub bx: Vec<f64>,
    pub gate: Option<GateTrace>,
    pub output: Vec<f64>,
}

/// States `h_0..h_T`, outputs `y_1..y_T` and halting scores `s_1..s_T` of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub input: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.outputs.len()
    }
}

impl Model {
    /// Randomly initialised model. For the scaled update the transition weights
    /// are shrunk until the step Jacobian norm at `h_0 = 0` is at most
    /// `cfg.contraction_target`.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dims;
        let copies = if cfg.kind == ModelKind::Vanilla { cfg.t_max } else { 1 };
        let scale = ScaleParameters::with_lambda(cfg.lambda_init, cfg.hurst)?;
        let leak = cfg.effective_leak();
        let operators = (0..copies)
            .map(|_| {
                OperatorSet::new(
                    MlpMap::init_square(d.d_hid, cfg.transition_depth, cfg.activation, -leak, rng),
                    AffineMap::init_uniform(d.d_in, d.d_hid, rng),
                    AffineMap::init_uniform(d.d_hid, d.d_out, rng),
                    AffineMap::init_uniform(d.d_in, d.d_out, rng),
                    scale,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let gate = if cfg.gating {
            let mut g = AffineMap::init_uniform(d.d_hid, d.d_hid, rng);
            g.weight.scale_in_place(0.1);
            Some(g)
        } else {
            None
        };
        let mut model = Model {
            kind: cfg.kind,
            dims: d,
            t_max: cfg.t_max,
            operators,
            gate,
        };
        if cfg.kind == ModelKind::Frost {
            model.shrink_to_contraction(cfg.contraction_target)?;
        }
        Ok(model)
    }

    /// Build a model from explicit operators.
    pub fn from_operators(kind: ModelKind, t_max: usize, operators: Vec<OperatorSet>) -> Result<Self> {
        let first = operators
            .first()
            .ok_or(FrostError::Empty("operator list"))?;
        let dims = ModelDims {
            d_in: first.d_in(),
            d_hid: first.d_hid(),
            d_out: first.d_out(),
        };
        let expected = if kind == ModelKind::Vanilla { t_max } else { 1 };
        if operators.len() != expected {
            return Err(FrostError::shape("Model operator copies", expected, operators.len()));
        }
        for op in &operators {
            if op.d_in() != dims.d_in || op.d_hid() != dims.d_hid || op.d_out() != dims.d_out {
                return Err(FrostError::Config("operator sets disagree on dimensions".into()));
            }
        }
        Ok(Model {
            kind,
            dims,
            t_max,
            operators,
            gate: None,
        })
    }

    fn shrink_to_contraction(&mut self, target: f64) -> Result<()> {
        let h0 = vec![0.0; self.dims.d_hid];
        let x0 = vec![0.0; self.dims.d_in];
        for _ in 0..400 {
            let l = self.step_jacobian_norm(&h0, &x0, 0)?;
            if l <= target {
                return Ok(());
            }
            self.operators[0].a.scale_weights(0.9);
        }
        warn!("could not shrink the transition below a step Jacobian norm of {target}");
        Ok(())
    }

    pub fn scale(&self) -> &ScaleParameters {
        &self.operators[0].scale
    }

    pub fn scale_mut(&mut self) -> &mut ScaleParameters {
        &mut self.operators[0].scale
    }

    pub fn lambda(&self) -> f64 {
        self.scale().lambda()
    }

    /// Zero-valued copy used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Model {
            kind: self.kind,
            dims: self.dims,
            t_max: self.t_max,
            operators: self.operators.iter().map(OperatorSet::zeros_like).collect(),
            gate: self
                .gate
                .as_ref()
                .map(|g| AffineMap::zeros(g.dim_in(), g.dim_out())),
        }
    }

    fn operator_index(&self, step: usize) -> Result<usize> {
        match self.kind {
            ModelKind::Vanilla => {
                if step >= self.operators.len() {
                    Err(FrostError::Index {
                        context: "vanilla step",
                        index: step,
                        len: self.operators.len(),
                    })
                } else {
                    Ok(step)
                }
            }
            _ => Ok(0),
        }
    }

    /// Forward step `h_step -> h_{step+1}` (`step` is 0-based) with a trace.
    pub fn step_traced(&self, h: &[f64], x: &[f64], step: usize) -> Result<StepTrace> {
        let ops = &self.operators[self.operator_index(step)?];
        let a = ops.a.forward(h)?;
        let bx = ops.b.apply(x)?;
        let (output, gate) = match self.kind {
            ModelKind::Frost => {
                let lambda = ops.scale.lambda();
                let gin = ops.scale.input_gain();
                let update: Vec<f64> = a
                    .output
                    .iter()
                    .zip(&bx)
                    .map(|(av, bv)| lambda * av + gin * bv)
                    .collect();
                match &self.gate {
                    None => {
                        let mut out = h.to_vec();
                        axpy(&mut out, 1.0, &update);
                        (out, None)
                    }
                    Some(g) => {
                        let gamma: Vec<f64> = g.apply(h)?.into_iter().map(sigmoid).collect();
                        let out = h
                            .iter()
                            .zip(&gamma)
                            .zip(&update)
                            .map(|((hv, gv), uv)| hv + gv * uv)
                            .collect();
                        (out, Some(GateTrace { gamma, update }))
                    }
                }
            }
            ModelKind::Vanilla | ModelKind::BasicSsm => {
                let mut out = h.to_vec();
                axpy(&mut out, 1.0, &a.output);
                axpy(&mut out, 1.0, &bx);
                (out, None)
            }
            ModelKind::Recurrent => {
                let mut out = a.output.clone();
                axpy(&mut out, 1.0, &bx);
                (out, None)
            }
        };
        if !all_finite(&output) {
            return Err(FrostError::Divergence { step: step + 1 });
        }
        Ok(StepTrace {
            step,
            h: h.to_vec(),
            a,
            bx,
            gate,
            output,
        })
    }

    /// One step of the model's update rule. Stationary kinds ignore `step`.
    pub fn step(&self, h: &[f64], x: &[f64], step: usize) -> Result<Vec<f64>> {
        Ok(self.step_traced(h, x, step)?.output)
    }

    /// Output for the state produced by `step` (0-based).
    pub fn readout(&self, h: &[f64], x: &[f64], step: usize) -> Result<Vec<f64>> {
        let ops = &self.operators[self.operator_index(step)?];
        match self.kind {
            ModelKind::Frost => ops.readout(h, x),
            _ => ops.plain_readout(h, x),
        }
    }

    fn readout_gain(&self, ops: &OperatorSet) -> f64 {
        match self.kind {
            ModelKind::Frost => ops.scale.output_gain(),
            _ => 1.0,
        }
    }

    /// Backward through a readout; accumulates parameter gradients and returns `∂L/∂h`.
    pub fn readout_vjp(
        &self,
        h: &[f64],
        x: &[f64],
        step: usize,
        upstream: &[f64],
        grads: &mut Model,
    ) -> Result<Vec<f64>> {
        let idx = self.operator_index(step)?;
        let ops = &self.operators[idx];
        let gain = self.readout_gain(ops);
        let g = &mut grads.operators[idx];
        if self.kind == ModelKind::Frost {
            let ch = ops.c.apply(h)?;
            g.scale.rho += -ops.scale.hurst * gain * dot(upstream, &ch);
        }
        let dh = ops.c.accumulate_vjp(h, upstream, &mut g.c, gain)?;
        ops.d.accumulate_vjp(x, upstream, &mut g.d, 1.0)?;
        Ok(dh.into_iter().map(|v| gain * v).collect())
    }

    /// Backward through one step: accumulates parameter gradients, returns `∂L/∂h`.
    pub fn step_vjp(&self, trace: &StepTrace, x: &[f64], upstream: &[f64], grads: &mut Model) -> Result<Vec<f64>> {
        let idx = self.operator_index(trace.step)?;
        let ops = &self.operators[idx];
        match self.kind {
            ModelKind::Frost => {
                let lambda = ops.scale.lambda();
                let gin = ops.scale.input_gain();
                let mut dh = upstream.to_vec();
                // Upstream seen by the update term u.
                let gu: Vec<f64> = match (&trace.gate, &self.gate) {
                    (Some(gt), Some(gmap)) => {
                        let dz: Vec<f64> = upstream
                            .iter()
                            .zip(&gt.update)
                            .zip(&gt.gamma)
                            .map(|((g, u), gm)| g * u * gm * (1.0 - gm))
                            .collect();
                        let gate_grad = grads
                            .gate
                            .as_mut()
                            .ok_or_else(|| FrostError::Config("gradient accumulator lacks a gate".into()))?;
                        let dgate = gmap.accumulate_vjp(&trace.h, &dz, gate_grad, 1.0)?;
                        axpy(&mut dh, 1.0, &dgate);
                        upstream.iter().zip(&gt.gamma).map(|(g, gm)| g * gm).collect()
                    }
                    _ => upstream.to_vec(),
                };
                let g = &mut grads.operators[idx];
                g.scale.rho += lambda * dot(&gu, &trace.a.output)
                    + (1.0 + ops.scale.hurst) * gin * dot(&gu, &trace.bx);
                let da = ops.a.accumulate_vjp(&trace.a, &gu, &mut g.a, lambda)?;
                axpy(&mut dh, lambda, &da);
                ops.b.accumulate_vjp(x, &gu, &mut g.b, gin)?;
                Ok(dh)
            }
            ModelKind::Vanilla | ModelKind::BasicSsm | ModelKind::Recurrent => {
                let g = &mut grads.operators[idx];
                let da = ops.a.accumulate_vjp(&trace.a, upstream, &mut g.a, 1.0)?;
                ops.b.accumulate_vjp(x, upstream, &mut g.b, 1.0)?;
                if self.kind == ModelKind::Recurrent {
                    Ok(da)
                } else {
                    let mut dh = upstream.to_vec();
                    axpy(&mut dh, 1.0, &da);
                    Ok(dh)
                }
            }
        }
    }

    /// `J · v` with `J = ∂h_{step+1}/∂h_step` at the traced point.
    pub fn step_jvp(&self, trace: &StepTrace, v: &[f64]) -> Vec<f64> {
        let ops = &self.operators[self.operator_index(trace.step).unwrap_or(0)];
        let ja = ops.a.jvp(&trace.a, v);
        match self.kind {
            ModelKind::Frost => {
                let lambda = ops.scale.lambda();
                match (&trace.gate, &self.gate) {
                    (Some(gt), Some(gmap)) => {
                        let dz = gmap.jvp(v);
                        (0..v.len())
                            .map(|i| {
                                let gm = gt.gamma[i];
                                v[i] + gm * lambda * ja[i] + gm * (1.0 - gm) * dz[i] * gt.update[i]
                            })
                            .collect()
                    }
                    _ => v.iter().zip(&ja).map(|(vi, ji)| vi + lambda * ji).collect(),
                }
            }
            ModelKind::Recurrent => ja,
            ModelKind::Vanilla | ModelKind::BasicSsm => {
                v.iter().zip(&ja).map(|(vi, ji)| vi + ji).collect()
            }
        }
    }

    /// `Jᵀ · u` at the traced point (no parameter gradients).
    pub fn step_vjp_input(&self, trace: &StepTrace, u: &[f64]) -> Vec<f64> {
        let ops = &self.operators[self.operator_index(trace.step).unwrap_or(0)];
        match self.kind {
            ModelKind::Frost => {
                let lambda = ops.scale.lambda();
                match (&trace.gate, &self.gate) {
                    (Some(gt), Some(gmap)) => {
                        let gu: Vec<f64> = u.iter().zip(&gt.gamma).map(|(a, b)| a * b).collect();
                        let dz: Vec<f64> = (0..u.len())
                            .map(|i| u[i] * gt.update[i] * gt.gamma[i] * (1.0 - gt.gamma[i]))
                            .collect();
                        let mut out = u.to_vec();
                        axpy(&mut out, lambda, &ops.a.vjp_input(&trace.a, &gu));
                        axpy(&mut out, 1.0, &gmap.vjp_input(&dz));
                        out
                    }
                    _ => {
                        let mut out = u.to_vec();
                        axpy(&mut out, lambda, &ops.a.vjp_input(&trace.a, u));
                        out
                    }
                }
            }
            ModelKind::Recurrent => ops.a.vjp_input(&trace.a, u),
            ModelKind::Vanilla | ModelKind::BasicSsm => {
                let mut out = u.to_vec();
                axpy(&mut out, 1.0, &ops.a.vjp_input(&trace.a, u));
                out
            }
        }
    }

    /// Power-iteration spectral norm of `∂step/∂h` at `(h, x)`.
    pub fn step_jacobian_norm(&self, h: &[f64], x: &[f64], step: usize) -> Result<f64> {
        let trace = self.step_traced(h, x, step)?;
        let n = self.dims.d_hid;
        let op = FnOperator {
            dim_in: n,
            dim_out: n,
            forward: |v: &[f64]| self.step_jvp(&trace, v),
            transpose: |u: &[f64]| self.step_vjp_input(&trace, u),
        };
        let l = spectral_norm_estimate(&op, DEFAULT_POWER_ITERS, 1e-12);
        if !l.is_finite() {
            return Err(FrostError::Numeric("power iteration diverged".into()));
        }
        Ok(l)
    }

    /// Runs `steps` refinement steps from `h_0 = 0`, re-injecting `x` each step.
    pub fn unroll(&self, head: &HaltingHead, x: &[f64], steps: usize) -> Result<Trajectory> {
        if steps == 0 {
            return Err(FrostError::Config("unroll needs at least one step".into()));
        }
        if self.kind == ModelKind::Vanilla && steps > self.operators.len() {
            return Err(FrostError::Index {
                context: "vanilla unroll",
                index: steps,
                len: self.operators.len(),
            });
        }
        let mut h = vec![0.0; self.dims.d_hid];
        let mut traj = Trajectory {
            input: x.to_vec(),
            states: vec![h.clone()],
            outputs: Vec::with_capacity(steps),
            scores: Vec::with_capacity(steps),
        };
        for t in 0..steps {
            h = self.step(&h, x, t)?;
            traj.outputs.push(self.readout(&h, x, t)?);
            traj.scores.push(head.score(&h)?);
            traj.states.push(h.clone());
        }
        Ok(traj)
    }
}

impl Params for Model {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamSlot<'a>>) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        for (k, ops) in self.operators.iter().enumerate() {
            let base = p(&format!("ops.{k}"));
            ops.a.collect_params(&format!("{base}.A"), out);
            ops.b.collect_params(&format!("{base}.B"), out);
            ops.c.collect_params(&format!("{base}.C"), out);
            ops.d.collect_params(&format!("{base}.D"), out);
            if self.kind == ModelKind::Frost {
                ops.scale.collect_params(&format!("{base}.scale"), out);
            }
        }
        if let Some(g) = &self.gate {
            g.collect_params(&p("gate"), out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        let frost = self.kind == ModelKind::Frost;
        for ops in &mut self.operators {
            ops.a.collect_params_mut(out);
            ops.b.collect_params_mut(out);
            ops.c.collect_params_mut(out);
            ops.d.collect_params_mut(out);
            if frost {
                ops.scale.collect_params_mut(out);
            }
        }
        if let Some(g) = &mut self.gate {
            g.collect_params_mut(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{assign_flat, finite_difference_gradient, flatten, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            dims: ModelDims {
                d_in: 3,
                d_hid: 4,
                d_out: 2,
            },
            t_max: 3,
            ..ModelConfig::default()
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn init_meets_contraction_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = ModelConfig::default();
        let m = Model::init(&cfg, &mut rng).unwrap();
        let l = m.step_jacobian_norm(&[0.0; 32], &[0.0; 16], 0).unwrap();
        assert!(l <= 0.9 + 1e-12, "L = {l}");
        assert_eq!(m.operators.len(), 1);
        assert!((m.lambda() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn vanilla_has_t_max_copies_and_distinct_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::init(&small_cfg(ModelKind::Vanilla), &mut rng).unwrap();
        assert_eq!(m.operators.len(), 3);
        let h = rand_vec(&mut rng, 4);
        let x = rand_vec(&mut rng, 3);
        assert_ne!(m.step(&h, &x, 0).unwrap(), m.step(&h, &x, 1).unwrap());
        assert!(matches!(m.step(&h, &x, 3), Err(FrostError::Index { .. })));
    }

    #[test]
    fn stationary_kinds_ignore_step_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [ModelKind::Frost, ModelKind::Recurrent, ModelKind::BasicSsm] {
            let m = Model::init(&small_cfg(kind), &mut rng).unwrap();
            let h = rand_vec(&mut rng, 4);
            let x = rand_vec(&mut rng, 3);
            let s0 = m.step(&h, &x, 0).unwrap();
            for t in 1..50 {
                assert_eq!(m.step(&h, &x, t).unwrap(), s0);
            }
        }
    }

    #[test]
    fn baseline_identities() {
        let zero_a = MlpMap::new(vec![AffineMap::zeros(2, 2)], Activation::Tanh, 0.0).unwrap();
        let id_a = MlpMap::new(
            vec![AffineMap::new(Matrix::identity(2), vec![0.0; 2]).unwrap()],
            Activation::Tanh,
            0.0,
        )
        .unwrap();
        let ops = |a: MlpMap| {
            OperatorSet::new(
                a,
                AffineMap::zeros(2, 2),
                AffineMap::zeros(2, 1),
                AffineMap::zeros(2, 1),
                ScaleParameters::default(),
            )
            .unwrap()
        };
        let h = vec![0.7, -1.3];
        let x = vec![2.0, 5.0];
        let ssm = Model::from_operators(ModelKind::BasicSsm, 4, vec![ops(zero_a)]).unwrap();
        assert_eq!(ssm.step(&h, &x, 0).unwrap(), h);
        let rec = Model::from_operators(ModelKind::Recurrent, 4, vec![ops(id_a)]).unwrap();
        assert_eq!(rec.step(&h, &x, 0).unwrap(), h);
    }

    #[test]
    fn unroll_shapes_and_zero_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Model::init(&small_cfg(ModelKind::Frost), &mut rng).unwrap();
        let head = HaltingHead::zeros(4);
        let x = rand_vec(&mut rng, 3);
        let tr = m.unroll(&head, &x, 1).unwrap();
        assert_eq!(tr.states.len(), 2);
        assert_eq!(tr.outputs.len(), 1);
        assert_eq!(tr.scores, vec![0.5]);

        *m.scale_mut() = ScaleParameters::with_lambda(0.0, 0.8).unwrap();
        let h0 = vec![0.0; 4];
        for t in 0..5 {
            assert_eq!(m.step(&h0, &x, t).unwrap(), h0);
        }
    }

    #[test]
    fn divergence_names_step() {
        let big = MlpMap::new(
            vec![AffineMap::new(Matrix::diag(&[1e200]), vec![0.0]).unwrap()],
            Activation::Relu,
            0.0,
        )
        .unwrap();
        let ops = OperatorSet::new(
            big,
            AffineMap::new(Matrix::identity(1), vec![1.0]).unwrap(),
            AffineMap::zeros(1, 1),
            AffineMap::zeros(1, 1),
            ScaleParameters::default(),
        )
        .unwrap();
        let m = Model::from_operators(ModelKind::BasicSsm, 8, vec![ops]).unwrap();
        let err = m.unroll(&HaltingHead::zeros(1), &[1.0], 8).unwrap_err();
        assert!(matches!(err, FrostError::Divergence { step } if step >= 2), "{err}");
    }

    /// Dense Jacobian via central differences of the step map.
    fn fd_jacobian(m: &Model, h: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let n = h.len();
        (0..n)
            .map(|row| {
                finite_difference_gradient(|hh| m.step(hh, x, 0).unwrap()[row], h, 1e-6).unwrap()
            })
            .collect()
    }

    #[test]
    fn jvp_and_vjp_match_fd_jacobian_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (kind, gating) in [
            (ModelKind::Frost, false),
            (ModelKind::Frost, true),
            (ModelKind::Vanilla, false),
            (ModelKind::Recurrent, false),
            (ModelKind::BasicSsm, false),
        ] {
            let cfg = ModelConfig {
                gating,
                ..small_cfg(kind)
            };
            let m = Model::init(&cfg, &mut rng).unwrap();
            let h = rand_vec(&mut rng, 4);
            let x = rand_vec(&mut rng, 3);
            let jac = fd_jacobian(&m, &h, &x);
            let tr = m.step_traced(&h, &x, 0).unwrap();
            for col in 0..4 {
                let mut e = vec![0.0; 4];
                e[col] = 1.0;
                let jcol = m.step_jvp(&tr, &e);
                let jrow = m.step_vjp_input(&tr, &e);
                for r in 0..4 {
                    assert!((jcol[r] - jac[r][col]).abs() < 1e-7, "{kind:?} jvp");
                    assert!((jrow[r] - jac[col][r]).abs() < 1e-7, "{kind:?} vjp");
                }
            }
        }
    }

    #[test]
    fn step_param_vjp_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (kind, gating) in [(ModelKind::Frost, false), (ModelKind::Frost, true), (ModelKind::Recurrent, false)] {
            let cfg = ModelConfig {
                gating,
                ..small_cfg(kind)
            };
            let m = Model::init(&cfg, &mut rng).unwrap();
            let h = rand_vec(&mut rng, 4);
            let x = rand_vec(&mut rng, 3);
            let u = rand_vec(&mut rng, 4);
            let tr = m.step_traced(&h, &x, 0).unwrap();
            let mut grads = m.zeros_like();
            m.step_vjp(&tr, &x, &u, &mut grads).unwrap();
            let theta = flatten(&m);
            let fd = finite_difference_gradient(
                |t| {
                    let mut mm = m.clone();
                    assign_flat(&mut mm, t).unwrap();
                    dot(&u, &mm.step(&h, &x, 0).unwrap())
                },
                &theta,
                1e-6,
            )
            .unwrap();
            for (a, b) in flatten(&grads).iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 + 1e-4 * b.abs(), "{kind:?}: {a} vs {b}");
            }
        }
    }
}
