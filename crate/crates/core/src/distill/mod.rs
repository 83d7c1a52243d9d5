//! Instance- and relation-level distillation from a high-resolution teacher.

pub mod ild;
pub mod objective;
pub mod pairs;
pub mod relation;
pub mod rld;

pub use ild::{decouple, ild_loss, DecoupledProbs};
pub use objective::{total, total_loss, DEFAULT_ALPHA, DEFAULT_BETA};
pub use pairs::{mine_pairs, Pair, PairSet};
pub use relation::{
    critic_h, critic_rows, RelationHeads, RelationNet, DEFAULT_REL_DIM, DEFAULT_TAU,
};
pub use rld::{rld_loss, PairRows, Reduction, RldConfig, RldOutput, H_CLAMP};
