use std::fmt;

use serde::{Deserialize, Serialize};

use super::path::{LayerPath, PathPattern, Segment};
use super::{GraphError, PathSyntaxError};
use crate::pipeline::AdapterError;

/// Which model of the pipeline a tree (or a bend) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Unet,
    Vae,
    TextEncoder,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Unet, Component::Vae, Component::TextEncoder];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Unet => "unet",
            Component::Vae => "vae",
            Component::TextEncoder => "text_encoder",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "unet" => Some(Component::Unet),
            "vae" => Some(Component::Vae),
            "text_encoder" => Some(Component::TextEncoder),
            _ => None,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Container,
    Conv,
    Nonlinearity,
    Normalization,
    Attention,
    Embedding,
    Other,
}

impl ModuleKind {
    pub fn is_bendable(self) -> bool {
        matches!(
            self,
            ModuleKind::Conv
                | ModuleKind::Attention
                | ModuleKind::Normalization
                | ModuleKind::Nonlinearity
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Container => "container",
            ModuleKind::Conv => "conv",
            ModuleKind::Nonlinearity => "nonlinearity",
            ModuleKind::Normalization => "normalization",
            ModuleKind::Attention => "attention",
            ModuleKind::Embedding => "embedding",
            ModuleKind::Other => "other",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        Some(match text {
            "container" => ModuleKind::Container,
            "conv" => ModuleKind::Conv,
            "nonlinearity" => ModuleKind::Nonlinearity,
            "normalization" => ModuleKind::Normalization,
            "attention" => ModuleKind::Attention,
            "embedding" => ModuleKind::Embedding,
            "other" => ModuleKind::Other,
            _ => return None,
        })
    }
}

/// One entry of a model's flat named-submodule listing, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmoduleInfo {
    pub path: LayerPath,
    pub kind: ModuleKind,
    pub param_shapes: Option<Vec<Vec<usize>>>,
}

impl SubmoduleInfo {
    pub fn new(path: LayerPath, kind: ModuleKind) -> Self {
        Self {
            path,
            kind,
            param_shapes: None,
        }
    }

    pub fn with_params(mut self, shapes: Vec<Vec<usize>>) -> Self {
        self.param_shapes = Some(shapes);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNode")]
pub struct ModuleNode {
    name: String,
    kind: ModuleKind,
    bendable: bool,
    param_shapes: Option<Vec<Vec<usize>>>,
    children: Vec<ModuleNode>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    name: String,
    kind: ModuleKind,
    bendable: bool,
    param_shapes: Option<Vec<Vec<usize>>>,
    children: Vec<ModuleNode>,
}

impl TryFrom<RawNode> for ModuleNode {
    type Error = String;

    fn try_from(raw: RawNode) -> Result<Self, Self::Error> {
        if raw.bendable != raw.kind.is_bendable() {
            return Err(format!("node `{}`: bendable flag disagrees with kind", raw.name));
        }
        if (raw.kind == ModuleKind::Container) == raw.children.is_empty() {
            return Err(format!(
                "node `{}`: containers must have children and leaves must not",
                raw.name
            ));
        }
        Segment::from_child_name(&raw.name).map_err(|e| e.to_string())?;
        for (i, a) in raw.children.iter().enumerate() {
            if raw.children[..i].iter().any(|b| b.name == a.name) {
                return Err(format!("node `{}`: duplicate child `{}`", raw.name, a.name));
            }
        }
        Ok(ModuleNode {
            name: raw.name,
            kind: raw.kind,
            bendable: raw.bendable,
            param_shapes: raw.param_shapes,
            children: raw.children,
        })
    }
}

impl ModuleNode {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ModuleKind {
        self.kind
    }

    pub fn bendable(&self) -> bool {
        self.bendable
    }

    pub fn param_shapes(&self) -> Option<&[Vec<usize>]> {
        self.param_shapes.as_deref()
    }

    pub fn children(&self) -> &[ModuleNode] {
        &self.children
    }

    pub fn child(&self, segment: &Segment) -> Option<&ModuleNode> {
        self.children.iter().find(|c| segment.matches_name(&c.name))
    }

    fn count(&self) -> usize {
        1 + self.children.iter().map(ModuleNode::count).sum::<usize>()
    }

    fn segment(&self) -> Segment {
        Segment::from_child_name(&self.name).expect("node names are validated on construction")
    }
}

/// Introspected architecture of one pipeline component. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTree")]
pub struct ModelTree {
    component_id: Component,
    node_count: usize,
    root: ModuleNode,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTree {
    component_id: Component,
    node_count: usize,
    root: ModuleNode,
}

impl TryFrom<RawTree> for ModelTree {
    type Error = String;

    fn try_from(raw: RawTree) -> Result<Self, Self::Error> {
        let counted = raw.root.count();
        if counted != raw.node_count {
            return Err(format!(
                "node_count is {} but the tree holds {counted} nodes",
                raw.node_count
            ));
        }
        Ok(ModelTree {
            component_id: raw.component_id,
            node_count: raw.node_count,
            root: raw.root,
        })
    }
}

struct Builder {
    name: String,
    kind: Option<ModuleKind>,
    param_shapes: Option<Vec<Vec<usize>>>,
    children: Vec<Builder>,
}

impl Builder {
    fn new(name: String) -> Self {
        Self {
            name,
            kind: None,
            param_shapes: None,
            children: Vec::new(),
        }
    }

    fn finish(self, path: &str) -> Result<ModuleNode, AdapterError> {
        let kind = if self.children.is_empty() {
            match self.kind {
                Some(ModuleKind::Container) | None => {
                    return Err(AdapterError::InvalidStructure(format!(
                        "`{path}` is declared as a container but has no submodules"
                    )))
                }
                Some(k) => k,
            }
        } else {
            ModuleKind::Container
        };
        let children = self
            .children
            .into_iter()
            .map(|c| {
                let child_path = format!("{path}.{}", c.name);
                c.finish(&child_path)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModuleNode {
            name: self.name,
            kind,
            bendable: kind.is_bendable(),
            param_shapes: self.param_shapes,
            children,
        })
    }
}

impl ModelTree {
    /// Nest a flat, declaration-ordered submodule listing into a tree.
    ///
    /// Intermediate modules that are not listed are created as containers.
    /// A module with submodules is always a container regardless of the
    /// declared kind.
    pub fn from_submodules(
        component: Component,
        entries: &[SubmoduleInfo],
    ) -> Result<Self, AdapterError> {
        let first = entries
            .first()
            .ok_or_else(|| AdapterError::InvalidStructure("model lists no submodules".into()))?;
        let root_name = first.path.segments()[0].to_string();
        let mut root = Builder::new(root_name.clone());
        let mut seen = std::collections::HashSet::new();
        for entry in entries {
            let text = entry.path.to_string();
            if !seen.insert(text.clone()) {
                return Err(AdapterError::InvalidStructure(format!(
                    "submodule `{text}` listed twice"
                )));
            }
            let segs = entry.path.segments();
            if segs[0].to_string() != root_name {
                return Err(AdapterError::InvalidStructure(format!(
                    "submodule `{text}` is outside root `{root_name}`"
                )));
            }
            let mut node = &mut root;
            for seg in &segs[1..] {
                let name = seg.to_string();
                let idx = match node.children.iter().position(|c| c.name == name) {
                    Some(i) => i,
                    None => {
                        node.children.push(Builder::new(name));
                        node.children.len() - 1
                    }
                };
                node = &mut node.children[idx];
            }
            node.kind = Some(entry.kind);
            node.param_shapes = entry.param_shapes.clone();
        }
        let root = root.finish(&root_name)?;
        let node_count = root.count();
        Ok(Self {
            component_id: component,
            node_count,
            root,
        })
    }

    pub fn component(&self) -> Component {
        self.component_id
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn root(&self) -> &ModuleNode {
        &self.root
    }

    pub fn root_path(&self) -> LayerPath {
        LayerPath::new(vec![self.root.segment()]).expect("single segment")
    }

    /// Descend segment by segment. The first segment names the root.
    pub fn resolve(&self, path: &LayerPath) -> Result<&ModuleNode, GraphError> {
        let segs = path.segments();
        let not_found = |i: usize| GraphError::PathNotFound {
            path: path.to_string(),
            segment: segs[i].to_string(),
        };
        if !segs[0].matches_name(&self.root.name) {
            return Err(not_found(0));
        }
        let mut node = &self.root;
        for (i, seg) in segs.iter().enumerate().skip(1) {
            node = node.child(seg).ok_or_else(|| not_found(i))?;
        }
        Ok(node)
    }

    /// Every node with its canonical path, pre-order (declaration order).
    pub fn walk(&self) -> Vec<(LayerPath, &ModuleNode)> {
        fn visit<'a>(
            node: &'a ModuleNode,
            path: LayerPath,
            out: &mut Vec<(LayerPath, &'a ModuleNode)>,
        ) {
            for child in &node.children {
                let p = path.child(child.segment());
                out.push((p.clone(), child));
                visit(child, p, out);
            }
        }
        let mut out = Vec::with_capacity(self.node_count);
        let root = self.root_path();
        out.push((root.clone(), &self.root));
        visit(&self.root, root, &mut out);
        out
    }

    pub fn match_paths(&self, pattern: &PathPattern) -> Vec<LayerPath> {
        self.walk()
            .into_iter()
            .filter(|(p, _)| pattern.matches(p))
            .map(|(p, _)| p)
            .collect()
    }

    /// Parse `pattern` as a glob, then [`ModelTree::match_paths`].
    pub fn match_glob(&self, pattern: &str) -> Result<Vec<LayerPath>, PathSyntaxError> {
        Ok(self.match_paths(&PathPattern::parse(pattern)?))
    }

    pub fn bendable_layers(&self, kind: Option<ModuleKind>) -> Vec<LayerPath> {
        self.walk()
            .into_iter()
            .filter(|(_, n)| n.bendable && kind.is_none_or(|k| n.kind == k))
            .map(|(p, _)| p)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Indented text rendering, truncated below `max_depth` when given.
    pub fn render(&self, max_depth: Option<usize>) -> String {
        fn visit(node: &ModuleNode, depth: usize, max: Option<usize>, out: &mut String) {
            out.push_str(&"  ".repeat(depth));
            out.push_str(&node.name);
            out.push_str(" [");
            out.push_str(node.kind.as_str());
            if node.bendable {
                out.push_str(", bendable");
            }
            out.push(']');
            if let Some(shapes) = &node.param_shapes {
                out.push_str(&format!(" {shapes:?}"));
            }
            out.push('\n');
            if max.is_some_and(|m| depth >= m) {
                if !node.children.is_empty() {
                    out.push_str(&"  ".repeat(depth + 1));
                    out.push_str(&format!("... ({} children)\n", node.children.len()));
                }
                return;
            }
            for c in &node.children {
                visit(c, depth + 1, max, out);
            }
        }
        let mut out = String::new();
        visit(&self.root, 0, max_depth, &mut out);
        out
    }
}
