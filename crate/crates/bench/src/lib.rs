//! Criterion benchmarks for refloop hot paths; see `benches/`.
