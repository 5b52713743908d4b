//! Criterion benchmarks for the tensor engine, network, edge detector,
//! similarity metrics and scene generator live in `benches/`.
