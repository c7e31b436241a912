//! Criterion benchmarks for the loss, the augmentation pipeline and a toy training step.
//! Run with `cargo bench -p tribyol-bench`.
