//! Desk-scale laboratory for corruption-prediction language-modeling
//! objectives: masked (MLM), autoregressive (AR), prefix (PrefixLM) and free
//! language modeling (FLM) with decoupled prediction and corruption rates.

pub mod checks;
pub mod data;
pub mod maskgen;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod trainer;
