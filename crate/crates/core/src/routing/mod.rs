//! Prefix-likelihood routing: score matrices, hard routing, capacity-balanced
//! assignment and the alternating router training loop.

mod assign;
mod em;
mod score;

pub use assign::{
    balanced_assignments, balanced_capacities, balanced_order, naive_assignments, random_assignments, AssignmentTable,
};
pub use em::{
    normalized_mutual_information, routing_entropy, train_routers, RoundReport, RouterEnsemble, RouterTrainConfig,
};
pub use score::{route, score_matrix, ScoreMatrix};
