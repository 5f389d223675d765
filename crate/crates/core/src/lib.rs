pub mod evaluation;
pub mod exec;
pub mod generation;
pub mod models;
pub mod numerics;
pub mod persistence;
pub mod bpe;
pub mod cost_model;
pub mod segmentation;
pub mod training;
pub mod transformer;
