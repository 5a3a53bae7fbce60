pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod finetune;
pub mod gradcheck;
pub mod metrics;
pub mod mfp;
pub mod model;
pub mod moe;
pub mod multitask;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod tensor;
