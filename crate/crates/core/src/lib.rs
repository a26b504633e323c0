pub mod autodiff;
pub mod bbox;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod global_attention;
pub mod gradcheck;
pub mod head;
pub mod instrument;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod part_attention;
pub mod roi;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, Gradients, Graph, Var};
pub use bbox::BBox;
pub use error::{Error, Result};
pub use params::{GradBuffer, ParamId, ParamStore};
pub use tensor::Tensor;
