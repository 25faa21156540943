use serde::{Deserialize, Serialize};

use crate::energy::CostModel;
use crate::error::{Error, Result};
use crate::nn::{Activation, Head, LrSchedule, NetArch};
use crate::pathway::PathwayLayout;
use crate::router::RouterConfig;
use crate::tasks::StreamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    EwcMono,
    AgemLite,
    Papi,
    PapiOracleRouting,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Naive,
        Method::EwcMono,
        Method::AgemLite,
        Method::Papi,
        Method::PapiOracleRouting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::EwcMono => "ewc_mono",
            Method::AgemLite => "agem_lite",
            Method::Papi => "papi",
            Method::PapiOracleRouting => "papi_oracle_routing",
        }
    }

    pub fn is_pathway(self) -> bool {
        matches!(self, Method::Papi | Method::PapiOracleRouting)
    }

    pub fn learned_routing(self) -> bool {
        self == Method::Papi
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherKind {
    Diagonal,
    Full,
}

/// Network shape shared by all methods. Heads split `head_hidden_total`
/// hidden units evenly over the `K` pathways so every K has the same budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutConfig {
    /// Hidden widths of the shared encoder; `null` for disjoint pathways.
    #[serde(default)]
    pub encoder: Option<Vec<usize>>,
    /// Total hidden units across all heads, split evenly; 0 gives linear heads.
    pub head_hidden_total: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl LayoutConfig {
    pub fn build(&self, input_dim: usize, n_classes: usize, k: usize) -> Result<PathwayLayout> {
        if k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        let encoder = match &self.encoder {
            Some(widths) if widths.is_empty() => {
                return Err(Error::Config("encoder widths must be nonempty or null".into()))
            }
            Some(widths) => {
                let mut w = vec![input_dim];
                w.extend(widths);
                Some(NetArch::new(w, self.activation, Head::SoftmaxXent)?)
            }
            None => None,
        };
        let feature = encoder.as_ref().map_or(input_dim, NetArch::output_width);
        let head_widths = if self.head_hidden_total == 0 {
            vec![feature, n_classes]
        } else {
            let per = self.head_hidden_total / k;
            if per == 0 || per * k != self.head_hidden_total {
                return Err(Error::Config(format!(
                    "{} hidden units cannot be split evenly over {k} pathways",
                    self.head_hidden_total
                )));
            }
            vec![feature, per, n_classes]
        };
        let head = NetArch::new(head_widths, self.activation, Head::SoftmaxXent)?;
        PathwayLayout::new(encoder, vec![head])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub stream: StreamConfig,
    pub layout: LayoutConfig,
    #[serde(default = "one")]
    pub k: usize,
    #[serde(default = "default_epochs")]
    pub epochs_per_task: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_fisher_samples")]
    pub fisher_samples: usize,
    #[serde(default = "default_fisher_kind")]
    pub fisher_kind: FisherKind,
    /// Adds the Fisher penalty to the pathway methods' regularizer.
    #[serde(default)]
    pub use_ewc: bool,
    #[serde(default = "default_reg_weight")]
    pub pathway_reg_weight: f64,
    /// Replay samples kept per task by `agem_lite`.
    #[serde(default = "default_memory")]
    pub memory_per_task: usize,
    #[serde(default)]
    pub router: RouterConfig,
    #[serde(default = "default_router_schedule")]
    pub router_schedule: LrSchedule,
    #[serde(default = "default_router_epochs")]
    pub router_epochs: usize,
    /// Inputs per task used to train the router and measure usage.
    #[serde(default = "default_router_samples")]
    pub router_samples_per_task: usize,
    /// Initializations averaged into the random-baseline loss.
    #[serde(default = "default_baseline_inits")]
    pub baseline_inits: usize,
    #[serde(default)]
    pub cost_model: CostModel,
    #[serde(default)]
    pub energy_budget: Option<f64>,
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn default_epochs() -> usize {
    3
}
fn default_batch() -> usize {
    32
}
fn default_schedule() -> LrSchedule {
    LrSchedule::constant(0.5)
}
fn default_lambda() -> f64 {
    1000.0
}
fn default_fisher_samples() -> usize {
    500
}
fn default_fisher_kind() -> FisherKind {
    FisherKind::Diagonal
}
fn default_reg_weight() -> f64 {
    1.0
}
fn default_memory() -> usize {
    64
}
fn default_router_schedule() -> LrSchedule {
    LrSchedule::constant(0.1)
}
fn default_router_epochs() -> usize {
    5
}
fn default_router_samples() -> usize {
    128
}
fn default_baseline_inits() -> usize {
    8
}

impl RunConfig {
    /// Defaults for `method` on `stream`.
    pub fn new(method: Method, stream: StreamConfig, layout: LayoutConfig, k: usize, seed: u64) -> Self {
        RunConfig {
            method,
            stream,
            layout,
            k,
            epochs_per_task: default_epochs(),
            batch_size: default_batch(),
            schedule: default_schedule(),
            lambda: default_lambda(),
            fisher_samples: default_fisher_samples(),
            fisher_kind: default_fisher_kind(),
            use_ewc: false,
            pathway_reg_weight: default_reg_weight(),
            memory_per_task: default_memory(),
            router: RouterConfig::default(),
            router_schedule: default_router_schedule(),
            router_epochs: default_router_epochs(),
            router_samples_per_task: default_router_samples(),
            baseline_inits: default_baseline_inits(),
            cost_model: CostModel::default(),
            energy_budget: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if !self.method.is_pathway() && self.k != 1 {
            return Err(Error::Config(format!(
                "{} trains one monolithic network and needs K = 1, got {}",
                self.method.name(),
                self.k
            )));
        }
        if self.method == Method::AgemLite && self.memory_per_task == 0 {
            return Err(Error::Config("agem_lite needs memory_per_task >= 1".into()));
        }
        if self.epochs_per_task == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs_per_task and batch_size must be >= 1".into()));
        }
        if self.uses_fisher() && self.fisher_samples == 0 {
            return Err(Error::Config("fisher_samples must be >= 1".into()));
        }
        if self.baseline_inits == 0 {
            return Err(Error::Config("baseline_inits must be >= 1".into()));
        }
        if self.method.learned_routing() && (self.router_epochs == 0 || self.router_samples_per_task == 0) {
            return Err(Error::Config("papi needs router_epochs and router_samples_per_task >= 1".into()));
        }
        for (name, v) in [("lambda", self.lambda), ("pathway_reg_weight", self.pathway_reg_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if let Some(b) = self.energy_budget {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::Config(format!("energy budget must be > 0, got {b}")));
            }
        }
        self.schedule.validate()?;
        self.router_schedule.validate()?;
        self.cost_model.validate()?;
        self.build_layout()?;
        Ok(())
    }

    pub fn uses_fisher(&self) -> bool {
        self.method == Method::EwcMono || (self.method.is_pathway() && self.use_ewc)
    }

    pub fn build_layout(&self) -> Result<PathwayLayout> {
        self.layout.build(self.stream.input_dim, self.stream.n_classes, self.k)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// First 12 hex digits of the SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        super::short_hash(&serde_json::to_string(self).expect("config serializes"))
    }
}
