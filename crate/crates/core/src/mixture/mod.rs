//! Expert and dense-baseline training on router-selected shards, with a
//! simulated communication ledger.

mod ledger;
mod train;

pub use ledger::{ledger_report, score_exchange_bytes, CommEvent, CommKind, CommReport, KindTotals, SCORE_BYTES};
pub use train::{shard_dataset, train_dense, train_expert, train_on_indices, ExpertTrainConfig, Shard};
