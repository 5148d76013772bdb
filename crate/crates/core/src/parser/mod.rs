//! Biaffine graph-based dependency parser: arc and label scoring, training
//! loss, greedy and maximum-spanning-tree decoding.

mod decode;
mod model;

#[cfg(test)]
mod tests;

pub use decode::{decode_greedy, decode_mst, ArcScores};
pub use model::{arc_loss, arc_scores_of, AuxTaskSpec, ParseTree, Parser, ParserInput, ParserSpec, MODEL_KIND};
