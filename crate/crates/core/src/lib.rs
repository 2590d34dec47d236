//! Capsule-routing semantic-ID tokenizer.
//!
//! Items are unit embeddings. At each depth a layer of capsules votes on the
//! current residual, routing by agreement picks a winner (the emitted token),
//! and the routing-weighted reconstruction is subtracted from the residual.
//! Tokenization stops early once the winner is confident enough or the
//! residual is small, so semantic IDs have variable length.
//!
//! ```
//! use capsid::{tokenize_item, CapsuleStack, ItemVector, RoutingConfig, StackShape};
//!
//! let stack = CapsuleStack::random(&StackShape::uniform(8, 8, 4, 3), 7).unwrap();
//! let cfg = RoutingConfig { max_depth: 3, ..RoutingConfig::default() };
//! let (sid, traces) = tokenize_item(&ItemVector::new(vec![1.0; 8]), &stack, &cfg).unwrap();
//! assert!((1..=3).contains(&sid.len()));
//! assert_eq!(traces.len(), sid.len());
//! ```

pub mod capsule;
pub mod config;
pub mod decoder;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod routing;
pub mod schedule;
pub mod sembpe;
pub mod synth;
pub mod theory;
pub mod training;

pub use capsule::{CapsuleLayer, CapsuleStack, StackShape};
pub use error::{Error, Result};
pub use routing::{
    calibrate_tau, compute_votes, residual_monotonicity_fraction, route_layer, route_layer_with,
    soft_residual_update, squash, stop_rule, tokenize_batch, tokenize_batch_traced, tokenize_item,
    ItemVector, LayerRoutingTrace, ResidualUpdate, RoutingConfig, RoutingMode, SemanticId,
    StopCause,
};
pub use schedule::AnnealSchedule;
