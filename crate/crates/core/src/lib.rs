//! Contrastive-learning embedding dynamics: losses with analytic gradients,
//! class prototypes, full-batch descent simulations, spectral diagnostics and a
//! small supervised-contrastive toy trainer.

/// `FromStr` and `Display` for a fieldless enum using its snake_case names.
macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl std::str::FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(format!(
                        "unknown value `{other}` (expected one of: {})",
                        [$($name),+].join(", ")
                    )),
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)+ })
            }
        }
    };
}

pub mod diagnostics;
pub mod dynamics;
pub mod embedding;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod matrix;
pub mod prototypes;
pub mod rng;
pub mod toy;
pub mod verify;

pub use dynamics::{
    run_simulation, simulate_from, sweep, ClopParams, DescentMode, LossKind, PairMode,
    SimulationConfig, TrajectoryRecord,
};
pub use embedding::{normalize, PairMap, RawEmbeddingSet, UnitEmbeddingSet};
pub use error::{Error, Result};
pub use losses::{LabeledBatch, Reduction, SimilarityKind};
pub use matrix::Matrix;
pub use prototypes::{PrototypeMode, PrototypeSet};
pub use toy::{run_toy, train, TrainConfig, TrainReport};
