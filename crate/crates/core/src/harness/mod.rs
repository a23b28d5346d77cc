pub mod channel;
pub mod checkpoint;
pub mod cloud;
pub mod config;
pub mod dataset;
pub mod edge;
pub mod pipeline;
pub mod train;
