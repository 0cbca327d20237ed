//! Criterion benchmarks for the perception pipeline live in `benches/`.
