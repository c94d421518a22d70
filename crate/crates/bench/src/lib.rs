//! Criterion benchmarks for the tensor engine and the models; see `benches/`.
