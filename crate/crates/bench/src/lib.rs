//! Criterion benchmarks for ichnet kernels live under `benches/`.
