//! Criterion benchmarks for the `ivsgen` engine live in `benches/`.
