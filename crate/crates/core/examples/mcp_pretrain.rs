//! Masked channel prediction on the deterministic-copy preset: the masked
//! channel is a fixed permutation of a visible one, so accuracy should
//! approach 1.

use supermoe::experiments::{mcp_overfit, McpOverfitConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let r = mcp_overfit(&McpOverfitConfig::default(), 7)?;
    for (step, acc) in &r.curve {
        println!("step {step:>5}  masked accuracy {acc:.4}");
    }
    println!("reached target: {}  after {} steps in {:.1}s", r.reached, r.steps, r.seconds);
    Ok(())
}
