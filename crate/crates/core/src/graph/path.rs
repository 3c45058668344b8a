//! Dotted layer addresses and glob patterns over them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::PathSyntaxError;

/// One segment of a [`LayerPath`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    /// `[A-Za-z_][A-Za-z0-9_]*`
    Name(String),
    /// Non-negative integer; addresses the child whose name is this decimal.
    Index(usize),
}

impl Segment {
    /// Segment for a child module with the given name.
    ///
    /// Purely numeric names become [`Segment::Index`], everything else must
    /// be a valid name token.
    pub fn from_child_name(name: &str) -> Result<Self, PathSyntaxError> {
        parse_segment(name, 0)
    }

    /// True when this segment addresses a child named `name`.
    pub fn matches_name(&self, name: &str) -> bool {
        match self {
            Segment::Name(n) => n == name,
            Segment::Index(i) => parse_index(name) == Some(*i),
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segment::Name(n) => f.write_str(n),
            Segment::Index(i) => write!(f, "{i}"),
        }
    }
}

fn is_name_token(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_index(s: &str) -> Option<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    // canonical decimal only: "0" but not "00" or "07"
    if s.len() > 1 && s.starts_with('0') {
        return None;
    }
    s.parse().ok()
}

fn parse_segment(s: &str, offset: usize) -> Result<Segment, PathSyntaxError> {
    if s.is_empty() {
        return Err(PathSyntaxError::EmptySegment { position: offset });
    }
    if let Some(i) = parse_index(s) {
        return Ok(Segment::Index(i));
    }
    if is_name_token(s) {
        return Ok(Segment::Name(s.to_owned()));
    }
    let bad = s
        .char_indices()
        .find(|&(i, c)| {
            !(c.is_ascii_alphanumeric() || c == '_') || (i == 0 && c.is_ascii_digit())
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    Err(PathSyntaxError::InvalidSegment {
        segment: s.to_owned(),
        position: offset + bad,
    })
}

/// Dotted address of a module inside a model tree, e.g.
/// `diffusion_model.middle_block.0.in_layers`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerPath {
    segments: Vec<Segment>,
}

impl LayerPath {
    pub fn new(segments: Vec<Segment>) -> Result<Self, PathSyntaxError> {
        if segments.is_empty() {
            return Err(PathSyntaxError::Empty);
        }
        for seg in &segments {
            if let Segment::Name(n) = seg {
                if !is_name_token(n) {
                    return Err(PathSyntaxError::InvalidSegment {
                        segment: n.clone(),
                        position: 0,
                    });
                }
            }
        }
        Ok(Self { segments })
    }

    pub fn parse(text: &str) -> Result<Self, PathSyntaxError> {
        if text.is_empty() {
            return Err(PathSyntaxError::Empty);
        }
        let mut segments = Vec::new();
        let mut offset = 0;
        for part in text.split('.') {
            segments.push(parse_segment(part, offset)?);
            offset += part.len() + 1;
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn child(&self, segment: Segment) -> Self {
        let mut segments = self.segments.clone();
        segments.push(segment);
        Self { segments }
    }

    pub fn last(&self) -> &Segment {
        self.segments.last().expect("LayerPath is never empty")
    }
}

impl fmt::Display for LayerPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, seg) in self.segments.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{seg}")?;
        }
        Ok(())
    }
}

impl FromStr for LayerPath {
    type Err = PathSyntaxError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for LayerPath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerPath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Self::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// One segment of a [`PathPattern`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PatternSegment {
    Exact(Segment),
    /// `*`: exactly one segment.
    AnyOne,
    /// `**`: any run of segments, possibly empty.
    AnyRun,
}

impl fmt::Display for PatternSegment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatternSegment::Exact(s) => write!(f, "{s}"),
            PatternSegment::AnyOne => f.write_str("*"),
            PatternSegment::AnyRun => f.write_str("**"),
        }
    }
}

/// Glob over layer paths. A pattern without wildcards is a plain path.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathPattern {
    segments: Vec<PatternSegment>,
}

impl PathPattern {
    pub fn parse(text: &str) -> Result<Self, PathSyntaxError> {
        if text.is_empty() {
            return Err(PathSyntaxError::Empty);
        }
        let mut segments = Vec::new();
        let mut offset = 0;
        for part in text.split('.') {
            let seg = match part {
                "*" => PatternSegment::AnyOne,
                "**" => PatternSegment::AnyRun,
                _ => PatternSegment::Exact(parse_segment(part, offset)?),
            };
            segments.push(seg);
            offset += part.len() + 1;
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[PatternSegment] {
        &self.segments
    }

    pub fn is_literal(&self) -> bool {
        self.segments
            .iter()
            .all(|s| matches!(s, PatternSegment::Exact(_)))
    }

    /// The pattern as a plain path, when it contains no wildcards.
    pub fn as_path(&self) -> Option<LayerPath> {
        let segments = self
            .segments
            .iter()
            .map(|s| match s {
                PatternSegment::Exact(seg) => Some(seg.clone()),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()?;
        LayerPath::new(segments).ok()
    }

    pub fn matches(&self, path: &LayerPath) -> bool {
        glob_match(&self.segments, path.segments())
    }
}

fn glob_match(pattern: &[PatternSegment], path: &[Segment]) -> bool {
    // reachable[j]: pattern prefix consumed so far can end at path position j
    let mut reachable = vec![false; path.len() + 1];
    reachable[0] = true;
    for seg in pattern {
        let mut next = vec![false; path.len() + 1];
        match seg {
            PatternSegment::AnyRun => {
                let mut open = false;
                for j in 0..=path.len() {
                    open |= reachable[j];
                    next[j] = open;
                }
            }
            PatternSegment::AnyOne => {
                next[1..=path.len()].copy_from_slice(&reachable[..path.len()]);
            }
            PatternSegment::Exact(s) => {
                for j in 0..path.len() {
                    next[j + 1] = reachable[j] && &path[j] == s;
                }
            }
        }
        reachable = next;
    }
    reachable[path.len()]
}

impl From<LayerPath> for PathPattern {
    fn from(path: LayerPath) -> Self {
        Self {
            segments: path.segments.into_iter().map(PatternSegment::Exact).collect(),
        }
    }
}

impl fmt::Display for PathPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, seg) in self.segments.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{seg}")?;
        }
        Ok(())
    }
}

impl FromStr for PathPattern {
    type Err = PathSyntaxError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for PathPattern {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PathPattern {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Self::parse(&text).map_err(serde::de::Error::custom)
    }
}
