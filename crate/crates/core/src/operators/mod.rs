//! Bending operators: parameterized, shape-preserving transforms applied to
//! activation tensors or adapter weight matrices.
//!
//! Every operator carries a `mix` in `[0, 1]`; the applied result is
//! `(1 - mix) * x + mix * T(x)` where `T` is the operator's raw transform.
//! `mix = 0` returns the input untouched and `mix = 1` returns `T(x)`.

mod morphology;
mod noise;
mod spatial;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::graph::LayerPath;
use crate::tensor::ActivationTensor;

pub use morphology::MorphologyKind;
pub use noise::noise_stream;
pub use spatial::Interpolation;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OperatorError {
    #[error("unknown operator kind `{0}`")]
    UnknownKind(String),
    #[error("{kind}: missing parameter `{param}`")]
    MissingParam { kind: String, param: String },
    #[error("{kind}: unknown parameter `{param}`")]
    UnknownParam { kind: String, param: String },
    #[error("{kind}: invalid `{param}`: {reason}")]
    InvalidParam {
        kind: String,
        param: String,
        reason: String,
    },
    #[error("{kind} produced a non-finite value")]
    NonFiniteOutput { kind: String },
    #[error("compose step {index}: {source}")]
    InCompose {
        index: usize,
        #[source]
        source: Box<OperatorError>,
    },
}

impl OperatorError {
    /// Innermost error, looking through compose wrappers.
    pub fn root(&self) -> &OperatorError {
        match self {
            OperatorError::InCompose { source, .. } => source.root(),
            e => e,
        }
    }

    fn invalid(kind: &str, param: &str, reason: impl Into<String>) -> Self {
        OperatorError::InvalidParam {
            kind: kind.into(),
            param: param.into(),
            reason: reason.into(),
        }
    }
}

/// Where and when an operator is being invoked. Keys the noise stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InvocationContext {
    pub step_index: usize,
    pub base_seed: u64,
    pub target_path: LayerPath,
}

impl InvocationContext {
    pub fn new(step_index: usize, base_seed: u64, target_path: LayerPath) -> Self {
        Self {
            step_index,
            base_seed,
            target_path,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    AddScalar { c: f64 },
    MulScalar { c: f64 },
    AddNoise { sigma: f64 },
    Rotate { theta_deg: f64, interpolation: Interpolation },
    ScaleSpatial { factor: f64, interpolation: Interpolation },
    Erode { kernel: usize },
    Dilate { kernel: usize },
    /// Keep values `>= t`, zero the rest.
    Threshold { t: f64 },
    Compose { ops: Vec<BendingOperator> },
}

/// Parameter names accepted by each parameterized kind, in canonical order.
/// Names with a default may be omitted.
type ParamTable = &'static [(&'static str, Option<f64>)];

const KIND_PARAMS: &[(&str, ParamTable)] = &[
    ("add_scalar", &[("c", None)]),
    ("mul_scalar", &[("c", None)]),
    ("add_noise", &[("sigma", None)]),
    ("rotate", &[("theta_deg", None), ("interp", Some(1.0))]),
    ("scale_spatial", &[("factor", None), ("interp", Some(1.0))]),
    ("erode", &[("kernel", None)]),
    ("dilate", &[("kernel", None)]),
    ("threshold", &[("t", None)]),
];

/// Parameter names and defaults for a parameterized kind.
pub(crate) fn kind_params(kind: &str) -> Option<&'static [(&'static str, Option<f64>)]> {
    KIND_PARAMS.iter().find(|(k, _)| *k == kind).map(|(_, p)| *p)
}

/// All operator kind names, including `compose`.
pub const OPERATOR_KINDS: &[&str] = &[
    "add_scalar",
    "mul_scalar",
    "add_noise",
    "rotate",
    "scale_spatial",
    "erode",
    "dilate",
    "threshold",
    "compose",
];

impl OperatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::AddScalar { .. } => "add_scalar",
            OperatorKind::MulScalar { .. } => "mul_scalar",
            OperatorKind::AddNoise { .. } => "add_noise",
            OperatorKind::Rotate { .. } => "rotate",
            OperatorKind::ScaleSpatial { .. } => "scale_spatial",
            OperatorKind::Erode { .. } => "erode",
            OperatorKind::Dilate { .. } => "dilate",
            OperatorKind::Threshold { .. } => "threshold",
            OperatorKind::Compose { .. } => "compose",
        }
    }

    /// Whether the transform only looks at one element at a time.
    pub fn is_elementwise(&self) -> bool {
        match self {
            OperatorKind::AddScalar { .. }
            | OperatorKind::MulScalar { .. }
            | OperatorKind::AddNoise { .. }
            | OperatorKind::Threshold { .. } => true,
            OperatorKind::Compose { ops } => ops.iter().all(|o| o.kind.is_elementwise()),
            _ => false,
        }
    }

    /// Build a parameterized (non-compose) kind from a name and a parameter map.
    pub fn from_params(kind: &str, params: &BTreeMap<String, f64>) -> Result<Self, OperatorError> {
        let spec = KIND_PARAMS
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, p)| *p)
            .ok_or_else(|| OperatorError::UnknownKind(kind.to_owned()))?;
        if let Some(extra) = params.keys().find(|k| !spec.iter().any(|(n, _)| n == k)) {
            return Err(OperatorError::UnknownParam {
                kind: kind.into(),
                param: extra.clone(),
            });
        }
        let get = |name: &str| -> Result<f64, OperatorError> {
            let default = spec.iter().find(|(n, _)| *n == name).and_then(|(_, d)| *d);
            match params.get(name).copied().or(default) {
                Some(v) if v.is_finite() => Ok(v),
                Some(_) => Err(OperatorError::invalid(kind, name, "must be finite")),
                None => Err(OperatorError::MissingParam {
                    kind: kind.into(),
                    param: name.into(),
                }),
            }
        };
        let interp = |v: f64| {
            Interpolation::from_code(v)
                .ok_or_else(|| OperatorError::invalid(kind, "interp", "must be 0 (nearest) or 1 (bilinear)"))
        };
        let kernel = |v: f64| {
            if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
                Err(OperatorError::invalid(kind, "kernel", "must be a positive odd integer"))
            } else {
                Ok(v as usize)
            }
        };
        let op = match kind {
            "add_scalar" => OperatorKind::AddScalar { c: get("c")? },
            "mul_scalar" => OperatorKind::MulScalar { c: get("c")? },
            "add_noise" => OperatorKind::AddNoise { sigma: get("sigma")? },
            "rotate" => OperatorKind::Rotate {
                theta_deg: get("theta_deg")?,
                interpolation: interp(get("interp")?)?,
            },
            "scale_spatial" => OperatorKind::ScaleSpatial {
                factor: get("factor")?,
                interpolation: interp(get("interp")?)?,
            },
            "erode" => OperatorKind::Erode { kernel: kernel(get("kernel")?)? },
            "dilate" => OperatorKind::Dilate { kernel: kernel(get("kernel")?)? },
            "threshold" => OperatorKind::Threshold { t: get("t")? },
            _ => unreachable!("KIND_PARAMS covers every parameterized kind"),
        };
        op.validate()?;
        Ok(op)
    }

    /// Canonical parameter map (every parameter present). Empty for compose.
    pub fn params(&self) -> BTreeMap<String, f64> {
        let pairs: Vec<(&str, f64)> = match self {
            OperatorKind::AddScalar { c } | OperatorKind::MulScalar { c } => vec![("c", *c)],
            OperatorKind::AddNoise { sigma } => vec![("sigma", *sigma)],
            OperatorKind::Rotate {
                theta_deg,
                interpolation,
            } => vec![
                ("theta_deg", *theta_deg),
                ("interp", interpolation.code() as f64),
            ],
            OperatorKind::ScaleSpatial {
                factor,
                interpolation,
            } => vec![("factor", *factor), ("interp", interpolation.code() as f64)],
            OperatorKind::Erode { kernel } | OperatorKind::Dilate { kernel } => {
                vec![("kernel", *kernel as f64)]
            }
            OperatorKind::Threshold { t } => vec![("t", *t)],
            OperatorKind::Compose { .. } => vec![],
        };
        pairs.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
    }

    pub fn validate(&self) -> Result<(), OperatorError> {
        let kind = self.name();
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(OperatorError::invalid(kind, name, "must be finite"))
            }
        };
        match self {
            OperatorKind::AddScalar { c } | OperatorKind::MulScalar { c } => finite("c", *c),
            OperatorKind::AddNoise { sigma } => {
                finite("sigma", *sigma)?;
                if *sigma < 0.0 {
                    return Err(OperatorError::invalid(kind, "sigma", "must be >= 0"));
                }
                Ok(())
            }
            OperatorKind::Rotate { theta_deg, .. } => finite("theta_deg", *theta_deg),
            OperatorKind::ScaleSpatial { factor, .. } => {
                finite("factor", *factor)?;
                if *factor <= 0.0 {
                    return Err(OperatorError::invalid(kind, "factor", "must be > 0"));
                }
                Ok(())
            }
            OperatorKind::Erode { kernel } | OperatorKind::Dilate { kernel } => {
                if *kernel < 1 || kernel % 2 == 0 {
                    return Err(OperatorError::invalid(
                        kind,
                        "kernel",
                        format!("must be odd and >= 1, got {kernel}"),
                    ));
                }
                Ok(())
            }
            OperatorKind::Threshold { t } => finite("t", *t),
            OperatorKind::Compose { ops } => {
                if ops.is_empty() {
                    return Err(OperatorError::invalid(kind, "ops", "must not be empty"));
                }
                for (index, op) in ops.iter().enumerate() {
                    op.validate().map_err(|e| OperatorError::InCompose {
                        index,
                        source: Box::new(e),
                    })?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BendingOperator {
    pub kind: OperatorKind,
    pub mix: f64,
}

impl BendingOperator {
    pub fn new(kind: OperatorKind, mix: f64) -> Result<Self, OperatorError> {
        let op = Self { kind, mix };
        op.validate()?;
        Ok(op)
    }

    fn unchecked(kind: OperatorKind) -> Self {
        Self { kind, mix: 1.0 }
    }

    pub fn add_scalar(c: f64) -> Self {
        Self::unchecked(OperatorKind::AddScalar { c })
    }

    pub fn mul_scalar(c: f64) -> Self {
        Self::unchecked(OperatorKind::MulScalar { c })
    }

    pub fn add_noise(sigma: f64) -> Self {
        Self::unchecked(OperatorKind::AddNoise { sigma })
    }

    pub fn rotate(theta_deg: f64, interpolation: Interpolation) -> Self {
        Self::unchecked(OperatorKind::Rotate {
            theta_deg,
            interpolation,
        })
    }

    pub fn scale_spatial(factor: f64, interpolation: Interpolation) -> Self {
        Self::unchecked(OperatorKind::ScaleSpatial {
            factor,
            interpolation,
        })
    }

    pub fn erode(kernel: usize) -> Self {
        Self::unchecked(OperatorKind::Erode { kernel })
    }

    pub fn dilate(kernel: usize) -> Self {
        Self::unchecked(OperatorKind::Dilate { kernel })
    }

    pub fn threshold(t: f64) -> Self {
        Self::unchecked(OperatorKind::Threshold { t })
    }

    pub fn compose(ops: Vec<BendingOperator>) -> Self {
        Self::unchecked(OperatorKind::Compose { ops })
    }

    pub fn with_mix(mut self, mix: f64) -> Self {
        self.mix = mix;
        self
    }

    pub fn validate(&self) -> Result<(), OperatorError> {
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(OperatorError::invalid(
                self.kind.name(),
                "mix",
                format!("must lie in [0, 1], got {}", self.mix),
            ));
        }
        self.kind.validate()
    }

    pub fn apply(
        &self,
        x: &ActivationTensor,
        ctx: &InvocationContext,
    ) -> Result<ActivationTensor, OperatorError> {
        apply_operator(self, x, ctx)
    }
}

impl fmt::Display for BendingOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            OperatorKind::Compose { ops } => {
                f.write_str("compose[")?;
                for (i, op) in ops.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{op}")?;
                }
                f.write_str("]")?;
            }
            kind => {
                write!(f, "{}(", kind.name())?;
                for (i, (k, v)) in kind.params().iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{k}={v}")?;
                }
                f.write_str(")")?;
            }
        }
        if self.mix != 1.0 {
            write!(f, "~{}", self.mix)?;
        }
        Ok(())
    }
}

/// Apply `op` to `x`. The input is never modified.
pub fn apply_operator(
    op: &BendingOperator,
    x: &ActivationTensor,
    ctx: &InvocationContext,
) -> Result<ActivationTensor, OperatorError> {
    op.validate()?;
    apply_validated(op, x, ctx)
}

fn apply_validated(
    op: &BendingOperator,
    x: &ActivationTensor,
    ctx: &InvocationContext,
) -> Result<ActivationTensor, OperatorError> {
    if op.mix == 0.0 {
        return Ok(x.clone());
    }
    let raw = raw_transform(&op.kind, x, ctx)?;
    if !raw.is_finite() {
        return Err(OperatorError::NonFiniteOutput {
            kind: op.kind.name().into(),
        });
    }
    if op.mix == 1.0 {
        return Ok(raw);
    }
    Ok(blend(x, &raw, op.mix))
}

/// `(1 - mix) * x + mix * bent`, elementwise in f32.
pub fn blend(x: &ActivationTensor, bent: &ActivationTensor, mix: f64) -> ActivationTensor {
    let a = mix as f32;
    let b = 1.0 - a;
    let mut out = bent.clone();
    for (o, &v) in out.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *o = b * v + a * *o;
    }
    out
}

fn raw_transform(
    kind: &OperatorKind,
    x: &ActivationTensor,
    ctx: &InvocationContext,
) -> Result<ActivationTensor, OperatorError> {
    Ok(match kind {
        OperatorKind::AddScalar { c } => {
            let c = *c as f32;
            x.map(|v| v + c)
        }
        OperatorKind::MulScalar { c } => {
            let c = *c as f32;
            x.map(|v| v * c)
        }
        OperatorKind::AddNoise { sigma } => noise::add_noise_raw(x, *sigma, ctx),
        OperatorKind::Rotate {
            theta_deg,
            interpolation,
        } => x.map_planes(|s, d| spatial::rotate_plane(s, d, *theta_deg, *interpolation)),
        OperatorKind::ScaleSpatial {
            factor,
            interpolation,
        } => x.map_planes(|s, d| spatial::scale_plane(s, d, *factor, *interpolation)),
        OperatorKind::Erode { kernel } => {
            x.map_planes(|s, d| morphology::morph_plane(s, d, MorphologyKind::Erode, *kernel))
        }
        OperatorKind::Dilate { kernel } => {
            x.map_planes(|s, d| morphology::morph_plane(s, d, MorphologyKind::Dilate, *kernel))
        }
        OperatorKind::Threshold { t } => {
            let t = *t as f32;
            x.map(|v| if v >= t { v } else { 0.0 })
        }
        OperatorKind::Compose { ops } => compose_validated(ops, x, ctx)?,
    })
}

fn compose_validated(
    ops: &[BendingOperator],
    x: &ActivationTensor,
    ctx: &InvocationContext,
) -> Result<ActivationTensor, OperatorError> {
    let mut cur = x.clone();
    for (index, op) in ops.iter().enumerate() {
        cur = apply_validated(op, &cur, ctx).map_err(|e| OperatorError::InCompose {
            index,
            source: Box::new(e),
        })?;
    }
    Ok(cur)
}

/// Rotate every H×W plane counter-clockwise about its center; uncovered
/// pixels become zero.
pub fn rotate_spatial(
    x: &ActivationTensor,
    theta_deg: f64,
    interpolation: Interpolation,
) -> Result<ActivationTensor, OperatorError> {
    let op = BendingOperator::rotate(theta_deg, interpolation);
    op.validate()?;
    Ok(x.map_planes(|s, d| spatial::rotate_plane(s, d, theta_deg, interpolation)))
}

/// Zoom every plane about its center, cropping or zero-padding back to size.
pub fn scale_spatial(
    x: &ActivationTensor,
    factor: f64,
    interpolation: Interpolation,
) -> Result<ActivationTensor, OperatorError> {
    BendingOperator::scale_spatial(factor, interpolation).validate()?;
    Ok(x.map_planes(|s, d| spatial::scale_plane(s, d, factor, interpolation)))
}

pub fn morphology(
    x: &ActivationTensor,
    kind: MorphologyKind,
    kernel: usize,
) -> Result<ActivationTensor, OperatorError> {
    let op = match kind {
        MorphologyKind::Erode => BendingOperator::erode(kernel),
        MorphologyKind::Dilate => BendingOperator::dilate(kernel),
    };
    op.validate()?;
    Ok(x.map_planes(|s, d| morphology::morph_plane(s, d, kind, kernel)))
}

pub fn add_noise(
    x: &ActivationTensor,
    sigma: f64,
    ctx: &InvocationContext,
) -> Result<ActivationTensor, OperatorError> {
    BendingOperator::add_noise(sigma).validate()?;
    Ok(noise::add_noise_raw(x, sigma, ctx))
}

/// Apply `ops` left to right, each with its own mix.
pub fn compose(
    ops: &[BendingOperator],
    x: &ActivationTensor,
    ctx: &InvocationContext,
) -> Result<ActivationTensor, OperatorError> {
    OperatorKind::Compose { ops: ops.to_vec() }.validate()?;
    compose_validated(ops, x, ctx)
}

/// A low-rank adapter: the weight delta is `up · down`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// r × n
    pub down: Array2<f32>,
    /// m × r
    pub up: Array2<f32>,
}

impl LoraPair {
    pub fn new(down: Array2<f32>, up: Array2<f32>) -> Result<Self, OperatorError> {
        if up.ncols() != down.nrows() || down.is_empty() || up.is_empty() {
            return Err(OperatorError::invalid(
                "lora",
                "shape",
                format!(
                    "up is {:?} but down is {:?}; inner ranks must agree",
                    up.dim(),
                    down.dim()
                ),
            ));
        }
        Ok(Self { down, up })
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    pub fn delta(&self) -> Array2<f32> {
        self.up.dot(&self.down)
    }
}

/// Bend both factors of a LoRA adapter elementwise. Spatial operators have no
/// meaning on weight matrices and are rejected.
pub fn bend_lora(
    weights: &LoraPair,
    op: &BendingOperator,
    ctx: &InvocationContext,
) -> Result<LoraPair, OperatorError> {
    op.validate()?;
    if !op.kind.is_elementwise() {
        return Err(OperatorError::invalid(
            op.kind.name(),
            "kind",
            "only elementwise operators apply to adapter weights",
        ));
    }
    let bend = |m: &Array2<f32>| -> Result<Array2<f32>, OperatorError> {
        let t = ActivationTensor::from_matrix(m)
            .map_err(|e| OperatorError::invalid("lora", "shape", e.to_string()))?;
        Ok(apply_validated(op, &t, ctx)?.to_matrix())
    };
    Ok(LoraPair {
        down: bend(&weights.down)?,
        up: bend(&weights.up)?,
    })
}

// JSON form: {"kind": str, "params": {...}, "mix": float}
//        or  {"kind": "compose", "ops": [...], "mix": float}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOperator {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<BTreeMap<String, Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ops: Option<Vec<BendingOperator>>,
    #[serde(default = "default_mix")]
    mix: f64,
}

fn default_mix() -> f64 {
    1.0
}

const INTEGER_PARAMS: &[&str] = &["kernel", "interp"];

impl Serialize for BendingOperator {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let raw = match &self.kind {
            OperatorKind::Compose { ops } => RawOperator {
                kind: "compose".into(),
                params: None,
                ops: Some(ops.clone()),
                mix: self.mix,
            },
            kind => RawOperator {
                kind: kind.name().into(),
                params: Some(
                    kind.params()
                        .into_iter()
                        .map(|(k, v)| {
                            let value = if INTEGER_PARAMS.contains(&k.as_str()) {
                                Value::from(v as u64)
                            } else {
                                Value::from(v)
                            };
                            (k, value)
                        })
                        .collect(),
                ),
                ops: None,
                mix: self.mix,
            },
        };
        raw.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BendingOperator {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let raw = RawOperator::deserialize(deserializer)?;
        let kind = if raw.kind == "compose" {
            if raw.params.as_ref().is_some_and(|p| !p.is_empty()) {
                return Err(D::Error::custom("compose takes `ops`, not `params`"));
            }
            let ops = raw
                .ops
                .ok_or_else(|| D::Error::custom("compose requires an `ops` list"))?;
            OperatorKind::Compose { ops }
        } else {
            if !OPERATOR_KINDS.contains(&raw.kind.as_str()) {
                return Err(D::Error::custom(OperatorError::UnknownKind(raw.kind)));
            }
            if raw.ops.is_some() {
                return Err(D::Error::custom(format!("{} does not take `ops`", raw.kind)));
            }
            let mut params = BTreeMap::new();
            for (k, v) in raw.params.unwrap_or_default() {
                let n = v.as_f64().ok_or_else(|| {
                    D::Error::custom(format!("{}: parameter `{k}` must be a number", raw.kind))
                })?;
                params.insert(k, n);
            }
            OperatorKind::from_params(&raw.kind, &params).map_err(D::Error::custom)?
        };
        BendingOperator::new(kind, raw.mix).map_err(D::Error::custom)
    }
}
