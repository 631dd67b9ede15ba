//! Micro-benchmarks live under `benches/`; run them with `cargo bench -p fogbus-bench`.
