pub mod autodiff;
pub mod cl;
pub mod data;
pub mod dist;
pub mod gradcheck;
pub mod ibp;
pub mod net;
pub mod optim;
pub mod rng;
pub mod special;
pub mod tensor;

pub use tensor::Tensor;
