use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the three blocks of a mixer are wired.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    /// Channel split; each block's output is added to the next block's input.
    #[default]
    Progressive,
    /// Channel split; blocks run independently on their slices.
    Parallel,
    /// No split; the blocks run one after another on all channels.
    Serial,
}

/// Which of the three blocks are present. A disabled block passes its input through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSet {
    pub ljc: bool,
    pub ipc: bool,
    pub gbi: bool,
}

impl BlockSet {
    pub const ALL: BlockSet = BlockSet {
        ljc: true,
        ipc: true,
        gbi: true,
    };

    /// Attention-only baseline.
    pub const GBI_ONLY: BlockSet = BlockSet {
        ljc: false,
        ipc: false,
        gbi: true,
    };
}

impl Default for BlockSet {
    fn default() -> Self {
        BlockSet::ALL
    }
}

/// Hyperparameters that fix every parameter shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `C`; must be divisible by 24.
    pub channels: usize,
    pub mixers: usize,
    pub heads: usize,
    pub joint_count: usize,
    /// Hidden width multiplier of every channel MLP.
    pub mlp_ratio: usize,
    pub structure: Structure,
    pub blocks: BlockSet,
    /// Constant factor applied to the regression head; the network regresses
    /// `pose / output_scale` internally (100 turns millimetres into decimetres).
    pub output_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 240,
            mixers: 3,
            heads: 8,
            joint_count: 17,
            mlp_ratio: 6,
            structure: Structure::Progressive,
            blocks: BlockSet::ALL,
            output_scale: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    pub fn with_mixers(mut self, mixers: usize) -> Self {
        self.mixers = mixers;
        self
    }

    pub fn with_structure(mut self, structure: Structure) -> Self {
        self.structure = structure;
        self
    }

    pub fn with_blocks(mut self, blocks: BlockSet) -> Self {
        self.blocks = blocks;
        self
    }

    /// Channel width each block operates on: `C/3` when split, `C` when serial.
    pub fn block_width(&self) -> usize {
        match self.structure {
            Structure::Serial => self.channels,
            Structure::Progressive | Structure::Parallel => self.channels / 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channels == 0 || self.channels % 24 != 0 {
            return bad(format!("channels must be a positive multiple of 24, got {}", self.channels));
        }
        if self.heads == 0 || self.block_width() % self.heads != 0 {
            return bad(format!(
                "block width {} is not divisible by {} heads",
                self.block_width(),
                self.heads
            ));
        }
        if self.joint_count == 0 {
            return bad("joint_count must be positive".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return bad(format!("output_scale must be positive and finite, got {}", self.output_scale));
        }
        Ok(())
    }
}
