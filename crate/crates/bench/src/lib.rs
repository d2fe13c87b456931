//! Criterion benchmarks for the roigate pipeline live in `benches/`.
