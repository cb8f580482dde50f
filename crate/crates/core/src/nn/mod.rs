//! Reverse-mode automatic differentiation over dense tensors, with the layer
//! set used by the spectrogram translators and embedding networks.
//!
//! Usage follows a bind / forward / backward / step cycle: parameters are
//! bound onto a fresh [`Tape`], a forward pass records ops, `backward`
//! produces [`Gradients`], and [`AdamState::step`] updates the store.

mod adam;
pub mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use layers::{adalin, add_conv, add_dense, add_filled, LayerSpec, Network};
pub use params::{
    kaiming_uniform, leaky_gain, read_nnp_entries, Binding, Param, ParamId, ParamKind, ParamStore, NNP_MAGIC,
};
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
