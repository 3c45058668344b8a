//! One-line bend expressions:
//!
//! ```text
//! component:path:op(k=v,...)[@lo-hi|@all][~mix]
//! unet:diffusion_model.middle_block.0.in_layers:rotate(theta_deg=45)@0-9~0.8
//! ```
//!
//! The path may be a glob. The bend id is derived from the canonical text, so
//! parsing the same bend twice yields the same id.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{Component, PathPattern, PathSyntaxError};
use crate::hooks::{BendSpec, StepSchedule};
use crate::operators::{kind_params, BendingOperator, OperatorError, OperatorKind, OPERATOR_KINDS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DslError {
    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("unknown operator `{name}` at position {position}")]
    UnknownOperator { name: String, position: usize },
    #[error("bad value for `{param}` at position {position}: {reason}")]
    BadParamValue {
        param: String,
        position: usize,
        reason: String,
    },
    #[error("cannot express as a single bend expression: {0}")]
    Unformattable(String),
}

impl DslError {
    pub fn position(&self) -> Option<usize> {
        match self {
            DslError::Parse { position, .. }
            | DslError::UnknownOperator { position, .. }
            | DslError::BadParamValue { position, .. } => Some(*position),
            DslError::Unformattable(_) => None,
        }
    }
}

struct Scanner {
    chars: Vec<char>,
    pos: usize,
}

impl Scanner {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), DslError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(match self.peek() {
                Some(got) => format!("expected `{c}`, found `{got}`"),
                None => format!("expected `{c}`, found end of input"),
            }))
        }
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> String {
        let start = self.pos;
        while self.peek().is_some_and(&f) {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    fn error(&self, message: impl Into<String>) -> DslError {
        DslError::Parse {
            position: self.pos,
            message: message.into(),
        }
    }

    fn ident(&mut self, what: &str) -> Result<(usize, String), DslError> {
        let start = self.pos;
        if !self.peek().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') {
            return Err(self.error(format!("expected {what}")));
        }
        Ok((start, self.take_while(|c| c.is_ascii_alphanumeric() || c == '_')))
    }

    fn number(&mut self, what: &str) -> Result<(usize, f64), DslError> {
        let start = self.pos;
        let text = self.take_while(|c| c.is_ascii_digit() || matches!(c, '+' | '-' | '.' | 'e' | 'E'));
        if text.is_empty() {
            return Err(self.error(format!("expected a number for {what}")));
        }
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok((start, v)),
            _ => Err(DslError::Parse {
                position: start,
                message: format!("`{text}` is not a number"),
            }),
        }
    }

    fn integer(&mut self, what: &str) -> Result<usize, DslError> {
        let start = self.pos;
        let text = self.take_while(|c| c.is_ascii_digit());
        text.parse().map_err(|_| DslError::Parse {
            position: start,
            message: format!("expected an integer {what}"),
        })
    }
}

fn path_error(e: PathSyntaxError, offset: usize) -> DslError {
    let (position, message) = match &e {
        PathSyntaxError::Empty => (offset, e.to_string()),
        PathSyntaxError::EmptySegment { position } | PathSyntaxError::InvalidSegment { position, .. } => {
            (offset + position, e.to_string())
        }
    };
    DslError::Parse { position, message }
}

fn operator_error(e: OperatorError, name: &str, op_pos: usize, params: &BTreeMap<String, (usize, f64)>) -> DslError {
    match e {
        OperatorError::UnknownKind(name) => DslError::UnknownOperator { name, position: op_pos },
        OperatorError::MissingParam { param, .. } => DslError::BadParamValue {
            reason: format!("{name} requires `{param}`"),
            param,
            position: op_pos,
        },
        OperatorError::UnknownParam { param, .. } => DslError::BadParamValue {
            position: params.get(&param).map_or(op_pos, |p| p.0),
            reason: format!("{name} has no parameter `{param}`"),
            param,
        },
        OperatorError::InvalidParam { param, reason, .. } => DslError::BadParamValue {
            position: params.get(&param).map_or(op_pos, |p| p.0),
            param,
            reason,
        },
        other => DslError::BadParamValue {
            param: String::new(),
            position: op_pos,
            reason: other.to_string(),
        },
    }
}

/// Parse an expression into a spec with an auto-assigned id.
pub fn parse_bend_expression(text: &str) -> Result<BendSpec, DslError> {
    let mut s = Scanner {
        chars: text.chars().collect(),
        pos: 0,
    };

    let component_text = s.take_while(|c| c != ':');
    let component = Component::parse(&component_text).ok_or_else(|| DslError::Parse {
        position: 0,
        message: format!("unknown component `{component_text}` (expected unet, vae or text_encoder)"),
    })?;
    s.expect(':')?;

    let path_start = s.pos;
    let path_text = s.take_while(|c| c != ':');
    let target = PathPattern::parse(&path_text).map_err(|e| path_error(e, path_start))?;
    s.expect(':')?;

    let (op_pos, name) = s.ident("an operator name")?;
    if !OPERATOR_KINDS.contains(&name.as_str()) || name == "compose" {
        return Err(DslError::UnknownOperator { name, position: op_pos });
    }
    s.expect('(')?;
    let mut params: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    if !s.eat(')') {
        loop {
            let (key_pos, key) = s.ident("a parameter name")?;
            s.expect('=')?;
            let (_, value) = s.number(&format!("`{key}`"))?;
            if params.insert(key.clone(), (key_pos, value)).is_some() {
                return Err(DslError::BadParamValue {
                    param: key,
                    position: key_pos,
                    reason: "given more than once".into(),
                });
            }
            if s.eat(')') {
                break;
            }
            s.expect(',')?;
        }
    }
    let plain: BTreeMap<String, f64> = params.iter().map(|(k, (_, v))| (k.clone(), *v)).collect();
    let kind = OperatorKind::from_params(&name, &plain).map_err(|e| operator_error(e, &name, op_pos, &params))?;

    let mut schedule = StepSchedule::all();
    if s.eat('@') {
        if s.peek() == Some('a') {
            let (pos, word) = s.ident("`all`")?;
            if word != "all" {
                return Err(DslError::Parse {
                    position: pos,
                    message: format!("expected `all` or a step range, found `{word}`"),
                });
            }
        } else {
            let range_pos = s.pos;
            let lo = s.integer("step")?;
            s.expect('-')?;
            let hi = s.integer("step")?;
            schedule = StepSchedule::range(lo, hi).map_err(|message| DslError::Parse {
                position: range_pos,
                message,
            })?;
        }
    }

    let mut mix = 1.0;
    if s.eat('~') {
        let (pos, value) = s.number("mix")?;
        if !(0.0..=1.0).contains(&value) {
            return Err(DslError::BadParamValue {
                param: "mix".into(),
                position: pos,
                reason: format!("must lie in [0, 1], got {value}"),
            });
        }
        mix = value;
    }
    if let Some(c) = s.peek() {
        return Err(s.error(format!("unexpected `{c}`")));
    }

    let operator = BendingOperator::new(kind, mix).map_err(|e| operator_error(e, &name, op_pos, &params))?;
    let mut spec = BendSpec {
        id: String::new(),
        component,
        targets: vec![target],
        operator,
        schedule,
        enabled: true,
    };
    spec.id = expression_id(&format_body(&spec)?);
    Ok(spec)
}

/// `b` followed by 8 hex digits of the SHA-256 of the canonical expression.
pub fn expression_id(canonical: &str) -> String {
    let digest = hex::encode(Sha256::digest(canonical.as_bytes()));
    format!("b{}", &digest[..8])
}

fn format_body(spec: &BendSpec) -> Result<String, DslError> {
    let [target] = spec.targets.as_slice() else {
        return Err(DslError::Unformattable(format!("{} targets", spec.targets.len())));
    };
    if !spec.enabled {
        return Err(DslError::Unformattable("disabled bend".into()));
    }
    let op = &spec.operator;
    let defaults = kind_params(op.kind.name()).ok_or_else(|| DslError::Unformattable("compose operator".into()))?;
    let values = op.kind.params();
    let args: Vec<String> = defaults
        .iter()
        .filter(|(name, default)| *default != Some(values[*name]))
        .map(|(name, _)| format!("{name}={}", values[*name]))
        .collect();
    let mut out = format!("{}:{}:{}({})", spec.component, target, op.kind.name(), args.join(","));
    match spec.schedule.ranges() {
        [] => {}
        [(lo, hi)] => out.push_str(&format!("@{lo}-{hi}")),
        _ => return Err(DslError::Unformattable("multi-range schedule".into())),
    }
    if op.mix != 1.0 {
        out.push_str(&format!("~{}", op.mix));
    }
    Ok(out)
}

/// Canonical expression text for a spec. Rejects specs the grammar cannot
/// express: several targets, compose, multi-range schedules, disabled bends.
pub fn format_bend_expression(spec: &BendSpec) -> Result<String, DslError> {
    format_body(spec)
}
