//! Architecture description and the schedules derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SpecIssue, SpecIssues};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Smore,
    /// Nonlinearity applied to the propagated child embedding only.
    SmoreStar,
    /// One expert bank shared by every layer.
    SmoreShared,
    Molre,
    Momor,
}

impl Variant {
    pub fn is_smore_family(self) -> bool {
        matches!(self, Variant::Smore | Variant::SmoreStar | Variant::SmoreShared)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    /// Two-level tanh perceptron; `hidden = None` uses the width of the
    /// vector it acts on.
    Mlp {
        #[serde(default)]
        hidden: Option<usize>,
    },
}

impl Activation {
    pub fn is_identity(self) -> bool {
        matches!(self, Activation::Identity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gate {
    Dense,
    NoisyTopk,
    Switch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingDirection {
    #[default]
    TopDown,
    BottomUp,
}

fn default_gamma() -> f64 {
    0.01
}

/// Full adapter hyperparameters. Per-layer vectors are indexed by pool
/// `0..depth`; pool `l` holds the experts of adapter layer `l + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub depth: usize,
    pub expert_counts: Vec<usize>,
    pub ranks: Vec<usize>,
    pub fanouts: Vec<usize>,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_out: Option<usize>,
    pub variant: Variant,
    pub activation: Activation,
    pub gate: Gate,
    pub d_down: usize,
    pub m: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub bias: bool,
    #[serde(default)]
    pub routing: RoutingDirection,
}

/// `d_0 .. d_L`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionSchedule(pub Vec<usize>);

impl DimensionSchedule {
    pub fn get(&self, level: usize) -> usize {
        self.0[level]
    }

    pub fn last(&self) -> usize {
        *self.0.last().expect("schedule has d_0")
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl ArchitectureSpec {
    /// Uniform spec: `depth` pools of `s` rank-`r` experts with fanout `f`.
    pub fn uniform(depth: usize, s: usize, r: usize, f: usize, d: usize) -> Self {
        ArchitectureSpec {
            depth,
            expert_counts: vec![s; depth],
            ranks: vec![r; depth],
            fanouts: vec![f; depth],
            d,
            d_out: None,
            variant: Variant::Smore,
            activation: Activation::Relu,
            gate: Gate::NoisyTopk,
            d_down: 8,
            m: 8,
            gamma: default_gamma(),
            bias: false,
            routing: RoutingDirection::TopDown,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ArchitectureSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn d_out(&self) -> usize {
        self.d_out.unwrap_or(self.d)
    }

    /// Every violated invariant, in field order.
    pub fn issues(&self) -> Vec<SpecIssue> {
        let mut out = Vec::new();
        let mut push = |field: &'static str, message: String| out.push(SpecIssue { field, message });
        if self.depth == 0 {
            push("depth", "depth must be at least 1".into());
        }
        for (field, v) in [
            ("expert_counts", &self.expert_counts),
            ("ranks", &self.ranks),
            ("fanouts", &self.fanouts),
        ] {
            if v.len() != self.depth {
                push(field, format!("expected {} entries, got {}", self.depth, v.len()));
            }
            if v.contains(&0) {
                push(field, "entries must be at least 1".into());
            }
        }
        for (l, (f, s)) in self.fanouts.iter().zip(&self.expert_counts).enumerate() {
            if f > s {
                push("fanouts", format!("fanout exceeds expert count at layer {l} ({f} > {s})"));
            }
        }
        if self.d == 0 {
            push("d", "base dimension must be at least 1".into());
        }
        if self.d_out == Some(0) {
            push("d_out", "output dimension must be at least 1".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            push("gamma", "balance coefficient must be finite and nonnegative".into());
        }
        if let Activation::Mlp { hidden: Some(0) } = self.activation {
            push("activation", "mlp hidden width must be at least 1".into());
        }
        match self.variant {
            Variant::SmoreShared => {
                if self.ranks.windows(2).any(|w| w[0] != w[1]) {
                    push("ranks", "shared variant requires uniform ranks".into());
                }
                if self.expert_counts.windows(2).any(|w| w[0] != w[1]) {
                    push("expert_counts", "shared variant requires uniform expert counts".into());
                }
            }
            Variant::Molre if self.depth != 1 => {
                push("depth", "molre variant requires depth 1".into());
            }
            _ => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(SpecIssues(issues)))
        }
    }

    /// Fanout used at routing time: the dense gate activates the whole pool.
    pub fn effective_fanout(&self, pool: usize) -> usize {
        match self.gate {
            Gate::Dense => self.expert_counts[pool],
            _ => self.fanouts[pool],
        }
    }

    pub fn effective_fanouts(&self) -> Vec<usize> {
        (0..self.depth).map(|l| self.effective_fanout(l)).collect()
    }

    pub fn dimension_schedule(&self) -> DimensionSchedule {
        let mut dims = vec![0usize];
        match self.variant {
            Variant::SmoreShared => {
                let width = self.expert_counts[0] * self.ranks[0];
                dims.extend(std::iter::repeat_n(width, self.depth));
            }
            _ => {
                for l in 0..self.depth {
                    let prev = dims[l];
                    dims.push(prev + self.expert_counts[l] * self.ranks[l]);
                }
            }
        }
        DimensionSchedule(dims)
    }

    /// `F_l = prod_{i >= l} f_i`, with `F_L = 1`.
    pub fn total_fanout(&self, level: usize) -> Result<usize> {
        if level > self.depth {
            return Err(Error::LayerOutOfRange {
                index: level,
                depth: self.depth,
            });
        }
        Ok((level..self.depth).map(|l| self.effective_fanout(l)).product())
    }

    pub fn total_fanouts(&self) -> Vec<usize> {
        (0..=self.depth)
            .map(|l| (l..self.depth).map(|i| self.effective_fanout(i)).product())
            .collect()
    }

    /// Width of the vector the layer-`pool` sigma perceptron acts on.
    pub fn sigma_width(&self, pool: usize) -> usize {
        let dims = self.dimension_schedule();
        match self.variant {
            Variant::SmoreStar => dims.get(pool),
            _ => dims.get(pool + 1),
        }
    }

    pub fn sigma_hidden(&self, pool: usize) -> Option<usize> {
        match self.activation {
            Activation::Mlp { hidden } => Some(hidden.unwrap_or_else(|| self.sigma_width(pool))),
            _ => None,
        }
    }

    /// Input width of the top-down query network for `pool`.
    pub fn query_input(&self, pool: usize) -> usize {
        self.d_down + (self.depth - pool - 1) * self.m
    }
}
