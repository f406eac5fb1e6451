//! Recurrent sequence labeling: vanilla RNN and peephole LSTM cells trained
//! with exact backpropagation through time, plus the segmentation metrics and
//! dataset plumbing needed to evaluate them with leave-one-user-out splits.
//!
//! ```
//! use seqlab::{predict, Architecture, CellKind, Direction, Matrix, Model, Rng};
//!
//! let arch = Architecture {
//!     cell: CellKind::Lstm,
//!     direction: Direction::Bidirectional,
//!     layers: 1,
//!     hidden: 8,
//!     n_inputs: 3,
//!     n_classes: 4,
//! };
//! let model = Model::init(arch, &mut Rng::seed(0), 0.1).unwrap();
//! let xs = Matrix::zeros(5, 3);
//! let pred = predict(&model, &xs).unwrap();
//! assert_eq!(pred.labels.len(), 5);
//! ```

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod training;

pub use error::{Error, Result};
pub use model::{
    count_params, forward_sequence, predict, Architecture, CellKind, Direction, Model, Prediction, RunMode,
};
pub use numeric::{Matrix, Rng, Vector};
pub use training::{train, Example, TrainingConfig};

// The guide's snippets run as doctests of these otherwise empty modules.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
