//! Minimal dense neural-network substrate: tensors, dense layers, a
//! reverse-mode tape, plain SGD and the checkpoint container.

pub mod checkpoint;
pub mod layer;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use layer::{dense_forward, Activation, DenseLayer};
pub use optim::{sgd_step, SgdConfig};
pub use params::{Gradients, ParamGroup, ParamKey, Parameterized};
pub use tape::{Tape, Var};
pub use tensor::{argmax, softmax, top_k, Tensor};

use crate::error::Result;

/// `−log softmax(logits)[label]` for a single sample.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone().as_matrix());
    let loss = tape.cross_entropy(z, &[label])?;
    Ok(tape.value(loss).item())
}
