//! Selection algebra, point-process selectors and the repair kernel.

pub mod heatmap;
pub mod policy;
pub mod project;
mod topology;
mod vector;

pub use heatmap::{exact_marginals, expected_marginals, inclusion_probs, marginal_selection_heatmap, ordered_draws};
pub use policy::{
    draw_common_randomness, sample_subset, DrawRecord, SelectionStreams, SelectorLogits, SelectorPolicy,
};
pub use project::{project, Projection};
pub use topology::{Topology, TopologySpec};
pub use vector::{ConstraintReport, SelectionSets, SelectionVector, Violation};
