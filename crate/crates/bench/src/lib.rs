//! Criterion benchmarks for `distvl-core`; see `benches/`.
