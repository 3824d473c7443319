//! FishNet configuration, block builders, network assembly and accounting.

pub mod accounting;
pub mod blocks;
pub mod build;
pub mod config;

pub use accounting::{count_flops, count_params, layer_table, LayerRow};
pub use blocks::{BlockSpec, DrBlock, NetBuilder, UrBlock};
pub use build::{build, build_fishnet, Model, StageFeatures};
pub use config::{Arch, Downsample, FishNetConfig, Stem};
