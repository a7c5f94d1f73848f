//! Self-rationalizing transformer classifier.
//!
//! A single encoder predicts class probabilities and, in the same forward
//! pass, one smooth token mask per class. Masks are trained by blending the
//! input toward a background embedding and scoring the blended inputs with
//! the classifier's own frozen parameters. The crate also carries the
//! rationale agreement and faithfulness metrics used to evaluate such models.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod synth;
pub mod trainer;

pub use corpus::{Sample, Segment, Span, TokenId};
pub use error::{Error, Result};
pub use evaluation::{EvalOptions, MetricsReport};
pub use mask::{BlendedPair, MaskHeadOutput, RationaleMask};
pub use metrics::{ScoredRationale, SpanSet};
pub use model::{LabelMode, Model, ModelConfig, ModelOutput};
pub use synth::SynthConfig;
pub use trainer::{SelectionMetric, TrainConfig, TrainState};
