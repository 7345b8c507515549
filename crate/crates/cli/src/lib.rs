//! Library half of the benchmark harness: experiment configuration, method
//! pipelines, grid sweeps and result aggregation. The binary in `main.rs` is a
//! thin argument-parsing shell over these functions.
