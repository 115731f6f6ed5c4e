//! Criterion benchmarks of the numeric kernels live in `benches/`.
