//! Criterion benchmarks for the hGMM core; see `benches/`.
