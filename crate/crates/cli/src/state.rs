use std::path::Path;

use anyhow::{bail, Context};
use costintel::plan::PlanDAG;
use costintel::whatif::{rewrite, TuningProposal};
use serde::{Deserialize, Serialize};

pub const STATE_VERSION: u32 = 1;

/// Tuning actions the user approved, in approval order.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct State {
    pub version: u32,
    pub applied: Vec<TuningProposal>,
}

impl State {
    pub fn load(path: Option<&Path>) -> anyhow::Result<State> {
        let Some(path) = path.filter(|p| p.exists()) else {
            return Ok(State {
                version: STATE_VERSION,
                applied: Vec::new(),
            });
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let state: State = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if state.version > STATE_VERSION {
            bail!("state file version {} is newer than {STATE_VERSION}", state.version);
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Applies every action that matches, in order.
    pub fn apply(&self, plan: &PlanDAG) -> PlanDAG {
        self.applied
            .iter()
            .fold(plan.clone(), |p, action| rewrite(&p, action).unwrap_or(p))
    }
}
