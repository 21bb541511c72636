//! A small convolutional classifier written from scratch: layers, reverse-mode
//! gradients, the Adam optimiser and a binary model format.

mod adam;
mod io;
mod layers;
mod network;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use io::{load_model, load_model_expecting, save_model, FORMAT_VERSION, MAGIC};
pub use layers::{softmax, Aux, Conv2d, Dense, Layer, Shape};
pub use network::{cross_entropy, Gradients, LayerSpec, Network, NetworkSpec, PROB_FLOOR};
pub use tensor::{Real, Tensor};
