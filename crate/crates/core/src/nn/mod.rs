//! Differentiation core shared by the feature, POI and backbone modules.

pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{AttnLayout, Gradients, Graph, NodeId};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
