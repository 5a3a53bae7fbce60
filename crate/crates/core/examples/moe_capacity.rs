//! Top-1 MoE feed-forward layer against a dense layer of equal per-token
//! cost on a cluster mixture with cluster-specific linear targets.

use supermoe::experiments::{moe_capacity, CapacityConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = CapacityConfig::default();
    for seed in 1..=3 {
        let r = moe_capacity(&cfg, seed)?;
        println!(
            "seed {seed}: moe {:.4}  dense {:.4}  reduction {:.1}%  tokens per expert {:?}",
            r.moe_loss,
            r.dense_loss,
            100.0 * r.reduction(),
            r.moe_counts
        );
    }
    Ok(())
}
