//! Benchmark-only crate; see `benches/core_primitives.rs`.
