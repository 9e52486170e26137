//! Assemble one block per stability variant and list where layer norms sit,
//! which softmax it uses and how many parameters it carries.
//!
//! ```bash
//! cargo run --example variant_topology
//! ```

use stablelab::{ModelConfig, StabilityVariant, TransformerBlock};

pub fn run_example() -> stablelab::Result<()> {
    for variant in StabilityVariant::all() {
        let cfg = ModelConfig::tiny(variant);
        let (params, block) = TransformerBlock::standalone(&cfg)?;
        let sites: Vec<&str> = block.ln_sites().iter().map(|s| s.name()).collect();
        println!(
            "{:<14} {:>6} params  softmax {:<40} LN: {}",
            variant.kind.name(),
            params.numel(),
            format!("{:?}", variant.softmax_flavor()),
            sites.join(", ")
        );
        let extras: Vec<&str> = params
            .names()
            .filter(|n| n.contains("scale") || n.ends_with("gamma"))
            .collect();
        if !extras.is_empty() {
            println!("{:<14} extra: {}", "", extras.join(", "));
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> stablelab::Result<()> {
    run_example()
}
