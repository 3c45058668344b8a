//! Model introspection: layer paths, module trees and path matching.

mod path;
mod tree;

pub use path::{LayerPath, PathPattern, PatternSegment, Segment};
pub use tree::{Component, ModelTree, ModuleKind, ModuleNode, SubmoduleInfo};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathSyntaxError {
    #[error("empty path")]
    Empty,
    #[error("empty segment at position {position}")]
    EmptySegment { position: usize },
    #[error("invalid segment `{segment}` at position {position}")]
    InvalidSegment { segment: String, position: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("path `{path}` not found: no module `{segment}`")]
    PathNotFound { path: String, segment: String },
}

/// Resolve `path` in `tree`. See [`ModelTree::resolve`].
pub fn resolve_path<'t>(tree: &'t ModelTree, path: &LayerPath) -> Result<&'t ModuleNode, GraphError> {
    tree.resolve(path)
}

pub fn match_paths(tree: &ModelTree, pattern: &str) -> Result<Vec<LayerPath>, PathSyntaxError> {
    tree.match_glob(pattern)
}

pub fn list_bendable_layers(tree: &ModelTree, kind: Option<ModuleKind>) -> Vec<LayerPath> {
    tree.bendable_layers(kind)
}

pub fn tree_to_json(tree: &ModelTree) -> String {
    tree.to_json()
}
