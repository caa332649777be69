//! Criterion benchmarks of the training kernels live in `benches/`.
