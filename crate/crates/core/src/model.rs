//! The full network: encoder, MCP heads and task towers in one parameter
//! store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::Schema;
use crate::error::Result;
use crate::finetune::Towers;
use crate::moe::{Encoder, ModelConfig};
use crate::params::ParamStore;
use crate::pretrain::McpHeads;

#[derive(Debug, Clone)]
pub struct SuperMoe {
    pub schema: Schema,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub mcp: McpHeads,
    pub towers: Towers,
}

impl SuperMoe {
    /// Builds and initialises every parameter from `seed`: encoder first,
    /// then one MCP head per MCP channel, then one tower per task.
    pub fn new(schema: &Schema, config: &ModelConfig, seed: u64) -> Result<SuperMoe> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(schema, config, &mut store, &mut rng)?;
        let mcp = McpHeads::new(schema, config.d_model, &mut store, &mut rng)?;
        let towers = Towers::new(schema, config.d_model, &mut store, &mut rng)?;
        Ok(SuperMoe {
            schema: schema.clone(),
            config: config.clone(),
            store,
            encoder,
            mcp,
            towers,
        })
    }

    /// Rebuilds the architecture recorded in `ckpt` and restores every
    /// parameter.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<SuperMoe> {
        let mut model = SuperMoe::new(&ckpt.schema, &ckpt.config.model, ckpt.config.seed)?;
        ckpt.restore_into(&mut model.store, |_| true)?;
        Ok(model)
    }

    /// Freezes (or unfreezes) the MFP and transformer blocks.
    pub fn set_encoder_trainable(&mut self, trainable: bool) {
        self.store.set_trainable_prefix("mfp.", trainable);
        self.store.set_trainable_prefix("enc.", trainable);
    }
}
