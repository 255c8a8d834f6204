//! Neural-network substrate: tensors, a reverse-mode op tape, layers,
//! AdamW, and finite-difference gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod param;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport, FD_STEP, FD_TOL};
pub use graph::{Graph, NodeId};
pub use layers::{
    sinusoidal_positions, Affine, Embedding, LayerNorm, Mlp, MultiHeadSelfAttention,
    TransformerBlock,
};
pub use optim::AdamW;
pub use param::{GradStore, ParamId, ParamSet, Parameter};
pub use tensor::{matmul, matmul_nt, matmul_tn, transpose, Scalar, Tensor};
