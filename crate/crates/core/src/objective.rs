//! Loss-weight space, the anchor objective sets, and the one-parameter
//! objective trajectory that the generator is trained over.
//!
//! A weight vector has seven components: reconstruction, adversarial and five
//! perceptual levels ordered from shallow to deep (`V12 .. V54`). The
//! trajectory maps `t ∈ [0, 1]` to such a vector as `alpha ⊙ f(t) + beta`,
//! where each component of `f` is a piecewise-linear curve stored
//! declaratively so runs can be reproduced from their config alone.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of perceptual feature levels.
pub const NUM_LEVELS: usize = 5;

/// Feature level names, shallow to deep.
pub const LEVEL_NAMES: [&str; NUM_LEVELS] = ["V12", "V22", "V34", "V44", "V54"];

/// Reconstruction weight shared by the perceptual anchors.
pub const BASE_REC_WEIGHT: f64 = 1e-2;
/// Adversarial weight shared by the perceptual anchors.
pub const BASE_ADV_WEIGHT: f64 = 5e-3;

/// A seven-component loss weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub rec: f64,
    pub adv: f64,
    pub per: [f64; NUM_LEVELS],
}

impl ObjectiveWeights {
    pub const ZERO: ObjectiveWeights = ObjectiveWeights {
        rec: 0.0,
        adv: 0.0,
        per: [0.0; NUM_LEVELS],
    };

    pub fn new(rec: f64, adv: f64, per: [f64; NUM_LEVELS]) -> Self {
        Self { rec, adv, per }
    }

    /// Components in `[rec, adv, per...]` order.
    pub fn to_array(&self) -> [f64; 7] {
        let mut out = [0.0; 7];
        out[0] = self.rec;
        out[1] = self.adv;
        out[2..].copy_from_slice(&self.per);
        out
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        let mut per = [0.0; NUM_LEVELS];
        per.copy_from_slice(&v[2..]);
        Self {
            rec: v[0],
            adv: v[1],
            per,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_array(self.to_array().map(|c| c * factor))
    }

    pub fn per_sum(&self) -> f64 {
        self.per.iter().sum()
    }

    /// Largest absolute componentwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn component_name(idx: usize) -> String {
    match idx {
        0 => "rec".to_string(),
        1 => "adv".to_string(),
        k => format!("per[{}]", LEVEL_NAMES[k - 2]),
    }
}

/// A broken weight-vector invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightViolation {
    NonFinite { component: String, value: f64 },
    Negative { component: String, value: f64 },
}

impl fmt::Display for WeightViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightViolation::NonFinite { component, value } => {
                write!(f, "non-finite component {component} = {value}")
            }
            WeightViolation::Negative { component, value } => {
                write!(f, "negative component {component} = {value}")
            }
        }
    }
}

/// Lists every violated invariant of `w`; empty means valid.
pub fn validate_weights(w: &ObjectiveWeights) -> Vec<WeightViolation> {
    let mut out = Vec::new();
    for (idx, &value) in w.to_array().iter().enumerate() {
        if !value.is_finite() {
            out.push(WeightViolation::NonFinite {
                component: component_name(idx),
                value,
            });
        } else if value < 0.0 {
            out.push(WeightViolation::Negative {
                component: component_name(idx),
                value,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetLabel {
    A,
    B,
}

/// A labelled, ordered list of anchor objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveAnchorSet {
    pub label: SetLabel,
    pub anchors: Vec<(String, ObjectiveWeights)>,
}

/// The distortion-oriented anchor: reconstruction only.
pub fn lambda_zero() -> ObjectiveWeights {
    ObjectiveWeights::new(BASE_REC_WEIGHT, 0.0, [0.0; NUM_LEVELS])
}

/// Set-B anchor `level`: 0 is the reconstruction-only objective, `k ≥ 1`
/// spreads equal weight `1/k` over the first `k` perceptual levels.
pub fn set_b_anchor(level: usize) -> Result<ObjectiveWeights> {
    match level {
        0 => Ok(lambda_zero()),
        1..=4 => {
            let mut per = [0.0; NUM_LEVELS];
            for p in per.iter_mut().take(level) {
                *p = 1.0 / level as f64;
            }
            Ok(ObjectiveWeights::new(BASE_REC_WEIGHT, BASE_ADV_WEIGHT, per))
        }
        _ => Err(Error::domain(format!(
            "set-B anchor level must be in 0..=4, got {level}"
        ))),
    }
}

/// Set-A anchor `level`: 0 is the reconstruction-only objective, `k ≥ 1` puts
/// all perceptual weight on level `k`.
pub fn set_a_anchor(level: usize) -> Result<ObjectiveWeights> {
    match level {
        0 => Ok(lambda_zero()),
        1..=5 => {
            let mut per = [0.0; NUM_LEVELS];
            per[level - 1] = 1.0;
            Ok(ObjectiveWeights::new(BASE_REC_WEIGHT, BASE_ADV_WEIGHT, per))
        }
        _ => Err(Error::domain(format!(
            "set-A anchor level must be in 0..=5, got {level}"
        ))),
    }
}

impl ObjectiveAnchorSet {
    pub fn set_a() -> Self {
        let anchors = (0..=5)
            .map(|k| {
                let name = if k == 0 {
                    "λ0".into()
                } else {
                    format!("λ{k}")
                };
                (name, set_a_anchor(k).expect("level in range"))
            })
            .collect();
        Self {
            label: SetLabel::A,
            anchors,
        }
    }

    pub fn set_b() -> Self {
        let anchors = (0..=4)
            .map(|k| {
                let name = match k {
                    0 => "λ0".to_string(),
                    1 => "λ1".to_string(),
                    k => format!("λ1-{k}"),
                };
                (name, set_b_anchor(k).expect("level in range"))
            })
            .collect();
        Self {
            label: SetLabel::B,
            anchors,
        }
    }
}

/// A piecewise-linear curve on `[0, 1]` given by `(t, value)` knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PiecewiseLinear {
    pub knots: Vec<[f64; 2]>,
}

impl PiecewiseLinear {
    pub fn new(knots: Vec<[f64; 2]>) -> Result<Self> {
        let curve = Self { knots };
        curve.check()?;
        Ok(curve)
    }

    pub fn linear(start: f64, end: f64) -> Self {
        Self {
            knots: vec![[0.0, start], [1.0, end]],
        }
    }

    fn check(&self) -> Result<()> {
        let k = &self.knots;
        if k.len() < 2 {
            return Err(Error::config("a curve needs at least two knots"));
        }
        if k[0][0] != 0.0 || k[k.len() - 1][0] != 1.0 {
            return Err(Error::config(
                "curve knots must start at t=0 and end at t=1",
            ));
        }
        for w in k.windows(2) {
            if !(w[0][0] < w[1][0]) {
                return Err(Error::config(
                    "curve knots must be strictly increasing in t",
                ));
            }
        }
        if k.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::config("curve knots must be finite"));
        }
        Ok(())
    }

    /// Evaluates the curve; exact (no rounding) at knot positions.
    pub fn eval(&self, t: f64) -> f64 {
        let k = &self.knots;
        if let Some(p) = k.iter().find(|p| p[0] == t) {
            return p[1];
        }
        let seg = k
            .windows(2)
            .find(|w| t >= w[0][0] && t <= w[1][0])
            .unwrap_or_else(|| {
                if t < k[0][0] {
                    &k[..2]
                } else {
                    &k[k.len() - 2..]
                }
            });
        let (t0, v0) = (seg[0][0], seg[0][1]);
        let (t1, v1) = (seg[1][0], seg[1][1]);
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    /// Largest absolute slope over all segments.
    pub fn max_slope(&self) -> f64 {
        self.knots
            .windows(2)
            .map(|w| ((w[1][1] - w[0][1]) / (w[1][0] - w[0][0])).abs())
            .fold(0.0, f64::max)
    }

    fn min_value(&self) -> f64 {
        self.knots
            .iter()
            .map(|p| p[1])
            .fold(f64::INFINITY, f64::min)
    }
}

/// `λ(t) = alpha ⊙ f(t) + beta` with piecewise-linear component functions.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTrajectory {
    pub alpha: [f64; 7],
    pub beta: [f64; 7],
    pub f_rec: PiecewiseLinear,
    pub f_adv: PiecewiseLinear,
    pub f_per: [PiecewiseLinear; NUM_LEVELS],
    pub anchor_ts: Vec<f64>,
}

impl ObjectiveTrajectory {
    /// Evaluates the weight vector at `t ∈ [0, 1]`.
    pub fn eval(&self, t: f64) -> Result<ObjectiveWeights> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!(
                "trajectory parameter t={t} outside [0, 1]"
            )));
        }
        let mut f = [0.0; 7];
        f[0] = self.f_rec.eval(t);
        f[1] = self.f_adv.eval(t);
        for (l, curve) in self.f_per.iter().enumerate() {
            f[2 + l] = curve.eval(t);
        }
        let mut out = [0.0; 7];
        for i in 0..7 {
            out[i] = self.alpha[i] * f[i] + self.beta[i];
        }
        Ok(ObjectiveWeights::from_array(out))
    }

    /// A Lipschitz constant of `t ↦ λ(t)` in the max norm.
    pub fn lipschitz_bound(&self) -> f64 {
        let curves = std::iter::once(&self.f_rec)
            .chain(std::iter::once(&self.f_adv))
            .chain(self.f_per.iter());
        curves
            .zip(self.alpha.iter())
            .map(|(c, a)| a.abs() * c.max_slope())
            .fold(0.0, f64::max)
    }

    fn check_nonnegative(&self) -> Result<()> {
        if self
            .alpha
            .iter()
            .chain(self.beta.iter())
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::config(
                "trajectory alpha/beta must be finite and nonnegative",
            ));
        }
        let curves = std::iter::once(&self.f_rec)
            .chain(std::iter::once(&self.f_adv))
            .chain(self.f_per.iter());
        if curves.into_iter().any(|c| c.min_value() < 0.0) {
            return Err(Error::config("trajectory curve knots must be nonnegative"));
        }
        Ok(())
    }
}

/// Named trajectory families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryPreset {
    /// λ0 → λ1 → λ1-2 → λ1-3 → λ1-4.
    #[default]
    P1234,
    /// λ0 → a single V22 objective.
    P2,
    /// User-supplied anchors and ramps.
    Custom,
}

/// One anchor on the trajectory: the perceptual weights reached at `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub t: f64,
    pub per: [f64; NUM_LEVELS],
}

/// Declarative trajectory description, as stored in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    #[serde(default)]
    pub preset: TrajectoryPreset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<AnchorSpec>>,
    /// Knots of the adversarial weighting function.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv_ramp: Option<Vec<[f64; 2]>>,
    /// Knots of the reconstruction weighting function.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rec_ramp: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<[f64; 7]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<[f64; 7]>,
}

const DEFAULT_ALPHA: [f64; 7] = [1e-2, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
const DEFAULT_BETA: [f64; 7] = [1e-2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];

fn default_rec_ramp() -> Vec<[f64; 2]> {
    vec![[0.0, 1.0], [1.0, 0.0]]
}

fn default_adv_ramp() -> Vec<[f64; 2]> {
    vec![[0.0, 0.0], [1.0, BASE_ADV_WEIGHT]]
}

fn preset_anchors(preset: TrajectoryPreset) -> Option<Vec<AnchorSpec>> {
    match preset {
        TrajectoryPreset::P1234 => Some(
            (0..=4)
                .map(|k| AnchorSpec {
                    t: k as f64 / 4.0,
                    per: set_b_anchor(k).expect("level in range").per,
                })
                .collect(),
        ),
        TrajectoryPreset::P2 => Some(vec![
            AnchorSpec {
                t: 0.0,
                per: [0.0; NUM_LEVELS],
            },
            AnchorSpec {
                t: 1.0,
                per: [0.0, 1.0, 0.0, 0.0, 0.0],
            },
        ]),
        TrajectoryPreset::Custom => None,
    }
}

impl TrajectorySpec {
    pub fn preset(preset: TrajectoryPreset) -> Self {
        Self {
            preset,
            ..Default::default()
        }
    }

    /// Fills every absent key with the preset's value.
    pub fn materialized(&self) -> Result<Self> {
        let anchors = match (&self.anchors, preset_anchors(self.preset)) {
            (Some(a), _) => a.clone(),
            (None, Some(a)) => a,
            (None, None) => {
                return Err(Error::config(
                    "trajectory preset `custom` requires `anchors`",
                ))
            }
        };
        Ok(Self {
            preset: self.preset,
            anchors: Some(anchors),
            adv_ramp: Some(self.adv_ramp.clone().unwrap_or_else(default_adv_ramp)),
            rec_ramp: Some(self.rec_ramp.clone().unwrap_or_else(default_rec_ramp)),
            alpha: Some(self.alpha.unwrap_or(DEFAULT_ALPHA)),
            beta: Some(self.beta.unwrap_or(DEFAULT_BETA)),
        })
    }

    pub fn build(&self) -> Result<ObjectiveTrajectory> {
        let full = self.materialized()?;
        let anchors = full.anchors.expect("materialized");
        if anchors.len() < 2 {
            return Err(Error::config("a trajectory needs at least two anchors"));
        }
        let f_per: Vec<PiecewiseLinear> = (0..NUM_LEVELS)
            .map(|l| PiecewiseLinear::new(anchors.iter().map(|a| [a.t, a.per[l]]).collect()))
            .collect::<Result<_>>()?;
        let traj = ObjectiveTrajectory {
            alpha: full.alpha.expect("materialized"),
            beta: full.beta.expect("materialized"),
            f_rec: PiecewiseLinear::new(full.rec_ramp.expect("materialized"))?,
            f_adv: PiecewiseLinear::new(full.adv_ramp.expect("materialized"))?,
            f_per: f_per.try_into().expect("five levels"),
            anchor_ts: anchors.iter().map(|a| a.t).collect(),
        };
        traj.check_nonnegative()?;
        Ok(traj)
    }
}

/// Evaluates `traj` at `t`.
pub fn trajectory_eval(traj: &ObjectiveTrajectory, t: f64) -> Result<ObjectiveWeights> {
    traj.eval(t)
}

/// An LR-sized grid of trajectory parameters, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveMap(Array2<f32>);

impl ObjectiveMap {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("objective map must be non-empty"));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!(
                "objective map value {v} outside [0, 1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn into_values(self) -> Array2<f32> {
        self.0
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// `Some(t)` when every cell holds the same value.
    pub fn constant_value(&self) -> Option<f32> {
        let first = *self.0.iter().next()?;
        self.0.iter().all(|v| *v == first).then_some(first)
    }
}

/// A map holding `t` everywhere.
pub fn constant_map(t: f64, h: usize, w: usize) -> Result<ObjectiveMap> {
    if h == 0 || w == 0 {
        return Err(Error::domain(format!(
            "constant map dims must be positive, got {h}x{w}"
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("map value t={t} outside [0, 1]")));
    }
    ObjectiveMap::new(Array2::from_elem((h, w), t as f32))
}
