//! Channel prototypes: peak-location descriptors, k-means, the three-level
//! prototype hierarchy, cluster concentration and the contrastive node/edge
//! losses that pull channel embeddings toward that hierarchy.

mod descriptors;
mod hierarchy;
mod kmeans;
mod losses;
mod projection;

pub use descriptors::{build_descriptor_table, peak_coordinates, ChannelDescriptorTable};
pub use hierarchy::{
    build_hierarchy, refresh_due, refresh_hierarchy, HierarchyLevel, HierarchyOptions, PrototypeHierarchy,
};
pub use kmeans::{inertia, kmeans, kmeans_from, kmeans_plus_plus, KMeansOptions, KMeansResult};
pub use losses::{
    cluster_features, concentration_phi, loss_edge, loss_node, membership_matrix, EdgeLevel, NodeLevel,
};
pub use projection::{project_embeddings, BoundProjection, ProjectionConfig, ProjectionParams};
