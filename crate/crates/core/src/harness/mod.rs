pub mod ablation;
pub mod conventions;
pub mod inventory;
pub mod pipeline;
pub mod synth;
pub mod tensor;
