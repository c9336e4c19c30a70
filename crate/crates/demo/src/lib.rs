//! Browser bindings for the guidance laboratory.
//!
//! Three interactive operations, each returning a complete SVG document as
//! a string:
//!
//! - [`trajectory_svg`]: phase plot of one guided DDIM run on the ring
//!   model, with landing diagnostics in the caption;
//! - [`roundtrip_svg`]: invert-then-sample reconstruction error against
//!   step count for a plain-guidance scale next to a guided-denoising
//!   scale;
//! - [`loss_trace_svg`]: per-step conditional-loss traces for the two
//!   styles from a shared seed.
//!
//! The chart builders live in [`charts`] as plain Rust and are tested
//! natively; this module only adds the `wasm-bindgen` surface so the static
//! page under `www/` can call them. Build the browser package with:
//!
//! ```text
//! wasm-pack build crates/demo --target web --out-dir ../../www/pkg
//! ```

pub mod charts;

use wasm_bindgen::prelude::wasm_bindgen;

/// Phase plot of one guided sampling run. `style` is one of `uncond`,
/// `cfg`, or `cfgpp`.
#[wasm_bindgen]
pub fn trajectory_svg(
    style: &str,
    scale: f64,
    nfe: u32,
    seed: u32,
    class_index: u32,
) -> Result<String, String> {
    charts::trajectory_svg(style, scale, nfe as usize, seed, class_index as usize)
}

/// Mean reconstruction error over {25, 50, 100, 200} steps for guided
/// denoising at `lambda` against plain guidance at `omega`.
#[wasm_bindgen]
pub fn roundtrip_svg(
    lambda: f64,
    omega: f64,
    samples: u32,
    class_index: u32,
) -> Result<String, String> {
    charts::roundtrip_svg(lambda, omega, samples, class_index as usize)
}

/// Conditional-loss traces for plain guidance at `omega` and guided
/// denoising at `lambda` from the same seed.
#[wasm_bindgen]
pub fn loss_trace_svg(
    omega: f64,
    lambda: f64,
    nfe: u32,
    seed: u32,
    class_index: u32,
) -> Result<String, String> {
    charts::loss_trace_svg(omega, lambda, nfe as usize, seed, class_index as usize)
}
