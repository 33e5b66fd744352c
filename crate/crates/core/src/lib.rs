//! Erasure-based faithfulness evaluation of token attribution methods for
//! instruction-following navigation agents.

pub mod tensor;
pub mod navworld;
pub mod records;
pub mod agents;
pub mod trainer;
pub mod attribution;
pub mod faitheval;
pub mod report;
pub mod visualize;
pub mod pipeline;
