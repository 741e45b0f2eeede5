pub mod augment;
pub mod cli;
pub mod data;
pub mod losses;
pub mod model;
pub mod oracles;
pub mod rng;
pub mod sampler;
pub mod study;
pub mod tensor;
pub mod trainer;
pub mod verify;
