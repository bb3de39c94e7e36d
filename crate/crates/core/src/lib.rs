pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod point;
pub mod preprocess;
pub mod voxel_map;
pub mod odometry;
pub mod semantic_graph;
pub mod graph_map;
pub mod global_map;
pub mod loop_closing;
pub mod metrics;
pub mod pipeline;
pub mod pose_graph;
pub mod relocalization;
pub mod synthetic;
