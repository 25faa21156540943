//! Pathway-partitioned parameter store.
//!
//! `theta` is laid out as `[shared encoder | head 0 | head 1 | ... | head K-1]`.
//! Pathway `k` is the shared block plus block `k`; forward and backward passes
//! through pathway `k` read and write nothing else.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::energy::{EnergyLedger, Phase};
use crate::error::{Error, Result};
use crate::nn::{self, Cache, NetArch, Target};
use crate::util;

/// Shared encoder plus per-pathway heads.
///
/// The encoder's last layer is activated and its `head` field is ignored.
/// Without an encoder the shared block is empty and heads read the raw input.
/// A single head arch is replicated across all pathways.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathwayLayout {
    pub encoder: Option<NetArch>,
    pub heads: Vec<NetArch>,
}

impl PathwayLayout {
    pub fn new(encoder: Option<NetArch>, heads: Vec<NetArch>) -> Result<Self> {
        let layout = PathwayLayout { encoder, heads };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Config("layout needs at least one head".into()));
        }
        if let Some(enc) = &self.encoder {
            enc.validate()?;
        }
        let d_h = self.feature_width();
        for (k, h) in self.heads.iter().enumerate() {
            h.validate()?;
            if h.input_width() != d_h {
                return Err(Error::Config(format!(
                    "head {k} reads width {}, encoder produces {d_h}",
                    h.input_width()
                )));
            }
            if let Some(enc) = &self.encoder {
                if enc.activation != h.activation {
                    return Err(Error::Config(format!(
                        "head {k} activation {:?} differs from encoder {:?}",
                        h.activation, enc.activation
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        match &self.encoder {
            Some(enc) => enc.input_width(),
            None => self.heads[0].input_width(),
        }
    }

    /// Width of `h_shared`, the features every head and the router read.
    pub fn feature_width(&self) -> usize {
        match &self.encoder {
            Some(enc) => enc.output_width(),
            None => self.heads[0].input_width(),
        }
    }

    pub fn head(&self, k: usize) -> &NetArch {
        if self.heads.len() == 1 {
            &self.heads[0]
        } else {
            &self.heads[k]
        }
    }

    pub fn encoder_params(&self) -> usize {
        self.encoder.as_ref().map_or(0, NetArch::n_params)
    }

    /// The dense stack equivalent to pathway `k` (encoder then head).
    pub fn pathway_arch(&self, k: usize) -> NetArch {
        let head = self.head(k);
        let mut widths = match &self.encoder {
            Some(enc) => enc.layer_widths.clone(),
            None => vec![head.input_width()],
        };
        widths.extend_from_slice(&head.layer_widths[1..]);
        NetArch {
            layer_widths: widths,
            activation: head.activation,
            head: head.head,
        }
    }

    fn check_k(&self, k_total: usize) -> Result<()> {
        if self.heads.len() != 1 && self.heads.len() != k_total {
            return Err(Error::Config(format!(
                "layout has {} heads but K = {k_total}",
                self.heads.len()
            )));
        }
        Ok(())
    }
}

/// A sorted union of disjoint index ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSet {
    ranges: Vec<Range<usize>>,
}

impl IndexSet {
    fn from_ranges(mut ranges: Vec<Range<usize>>) -> Self {
        ranges.retain(|r| !r.is_empty());
        ranges.sort_by_key(|r| r.start);
        IndexSet { ranges }
    }

    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.ranges.iter().any(|r| r.contains(&i))
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|r| r.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    theta: Vec<f64>,
    shared: Range<usize>,
    pathways: Vec<Range<usize>>,
}

impl ParamStore {
    /// Allocates and seeds the encoder and `k_total` heads.
    pub fn build(layout: &PathwayLayout, k_total: usize, seed: u64) -> Result<Self> {
        if k_total == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        layout.validate()?;
        layout.check_k(k_total)?;
        let mut theta = Vec::new();
        if let Some(enc) = &layout.encoder {
            theta.extend(enc.init_params(&mut util::rng(seed, 0)));
        }
        let shared = 0..theta.len();
        let mut pathways = Vec::with_capacity(k_total);
        for k in 0..k_total {
            let start = theta.len();
            theta.extend(layout.head(k).init_params(&mut util::rng(seed, 1 + k as u64)));
            pathways.push(start..theta.len());
        }
        Ok(ParamStore {
            theta,
            shared,
            pathways,
        })
    }

    /// Rebuilds a store from raw parts, checking the partition invariants.
    pub fn from_parts(theta: Vec<f64>, shared: Range<usize>, pathways: Vec<Range<usize>>) -> Result<Self> {
        let store = ParamStore {
            theta,
            shared,
            pathways,
        };
        store.check_partition()?;
        Ok(store)
    }

    pub fn check_partition(&self) -> Result<()> {
        if self.pathways.is_empty() {
            return Err(Error::Contract("store has no pathways".into()));
        }
        let mut blocks: Vec<&Range<usize>> = std::iter::once(&self.shared).chain(&self.pathways).collect();
        blocks.sort_by_key(|r| r.start);
        let mut next = 0;
        for r in blocks {
            if r.start != next || r.end < r.start {
                return Err(Error::Contract(format!(
                    "blocks overlap or leave a gap at index {next}"
                )));
            }
            next = r.end;
        }
        if next != self.theta.len() {
            return Err(Error::Contract(format!(
                "blocks cover {next} of {} parameters",
                self.theta.len()
            )));
        }
        Ok(())
    }

    pub fn n_pathways(&self) -> usize {
        self.pathways.len()
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn shared_range(&self) -> Range<usize> {
        self.shared.clone()
    }

    pub fn pathway_range(&self, k: usize) -> Result<Range<usize>> {
        self.pathways
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("pathway {k} out of range 0..{}", self.pathways.len())))
    }

    pub fn shared_idx(&self) -> IndexSet {
        IndexSet::from_ranges(vec![self.shared.clone()])
    }

    pub fn ps_idx(&self, k: usize) -> Result<IndexSet> {
        Ok(IndexSet::from_ranges(vec![self.pathway_range(k)?]))
    }

    /// Shared block plus pathway `k`'s block.
    pub fn active_params(&self, k: usize) -> Result<IndexSet> {
        Ok(IndexSet::from_ranges(vec![self.shared.clone(), self.pathway_range(k)?]))
    }

    pub fn active_len(&self, k: usize) -> Result<usize> {
        Ok(self.shared.len() + self.pathway_range(k)?.len())
    }

    /// Parameters of pathway `k` in the order of [`PathwayLayout::pathway_arch`].
    pub fn extract(&self, k: usize) -> Result<Vec<f64>> {
        let r = self.pathway_range(k)?;
        Ok(self.theta[self.shared.clone()]
            .iter()
            .chain(&self.theta[r])
            .copied()
            .collect())
    }

    fn fingerprint(&self, k: usize) -> u64 {
        util::fingerprint([&self.theta[self.shared.clone()], &self.theta[self.pathways[k].clone()]])
    }

    pub(crate) fn check_layout(&self, layout: &PathwayLayout, k: usize) -> Result<()> {
        let r = self.pathway_range(k)?;
        if self.shared.len() != layout.encoder_params() || r.len() != layout.head(k).n_params() {
            return Err(Error::Shape(format!(
                "store blocks ({}, {}) do not match layout ({}, {})",
                self.shared.len(),
                r.len(),
                layout.encoder_params(),
                layout.head(k).n_params()
            )));
        }
        Ok(())
    }
}

/// Activations of one pathway pass.
#[derive(Clone, Debug)]
pub struct PathwayCache {
    k: usize,
    encoder: Option<Cache>,
    head: Cache,
    fingerprint: u64,
}

impl PathwayCache {
    pub fn pathway(&self) -> usize {
        self.k
    }

    pub fn logits(&self) -> &[f64] {
        self.head.logits()
    }

    /// `h_shared` for the sample, or `None` without an encoder.
    pub fn features(&self) -> Option<&[f64]> {
        self.encoder.as_ref().map(|c| c.last())
    }
}

fn pathway_flops(layout: &PathwayLayout, k: usize) -> u64 {
    layout.encoder.as_ref().map_or(0, NetArch::forward_flops) + layout.head(k).forward_flops()
}

/// Encoder features for `x` (the input itself without an encoder). Books
/// the encoder pass onto `phase`.
pub fn encode(
    store: &ParamStore,
    layout: &PathwayLayout,
    x: &[f64],
    ledger: &mut EnergyLedger,
    phase: Phase,
) -> Result<Vec<f64>> {
    ledger.ensure_open()?;
    match &layout.encoder {
        Some(enc) => {
            let params = &store.theta[store.shared.clone()];
            let c = nn::propagate(enc, params, x, true, 0)?;
            ledger.record_work(phase, enc.forward_flops(), params.len() as u64)?;
            Ok(c.last().to_vec())
        }
        None => {
            if x.len() != layout.input_width() {
                return Err(Error::Shape(format!(
                    "input has length {}, layout expects {}",
                    x.len(),
                    layout.input_width()
                )));
            }
            Ok(x.to_vec())
        }
    }
}

/// Forward through pathway `k`, booking one pass onto `phase`.
pub fn pathway_forward(
    store: &ParamStore,
    layout: &PathwayLayout,
    k: usize,
    x: &[f64],
    ledger: &mut EnergyLedger,
    phase: Phase,
) -> Result<(Vec<f64>, PathwayCache)> {
    ledger.ensure_open()?;
    store.check_layout(layout, k)?;
    let fingerprint = store.fingerprint(k);
    let (encoder, h) = match &layout.encoder {
        Some(enc) => {
            let c = nn::propagate(enc, &store.theta[store.shared.clone()], x, true, fingerprint)?;
            let h = c.last().to_vec();
            (Some(c), h)
        }
        None => (None, x.to_vec()),
    };
    let head_arch = layout.head(k);
    let head = nn::propagate(head_arch, &store.theta[store.pathways[k].clone()], &h, false, fingerprint)?;
    let out = nn::head_output(head_arch.head, head.logits());
    ledger.record_pass(phase, pathway_flops(layout, k), store.active_len(k)? as u64)?;
    Ok((
        out,
        PathwayCache {
            k,
            encoder,
            head,
            fingerprint,
        },
    ))
}

/// Dense gradient that is exactly zero outside `active`.
#[derive(Clone, Debug)]
pub struct PathwayGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub active: IndexSet,
}

fn backward_into(
    store: &ParamStore,
    layout: &PathwayLayout,
    cache: &PathwayCache,
    target: &Target,
    grad: &mut [f64],
) -> Result<f64> {
    let k = cache.k;
    let head_arch = layout.head(k);
    let (loss, g_out) = nn::head_loss_grad(head_arch.head, cache.head.logits(), target)?;
    let r = store.pathways[k].clone();
    let g_h = nn::backprop(head_arch, &store.theta[r.clone()], &cache.head, &g_out, &mut grad[r]);
    if let (Some(enc), Some(ec)) = (&layout.encoder, &cache.encoder) {
        let s = store.shared.clone();
        nn::backprop(enc, &store.theta[s.clone()], ec, &g_h, &mut grad[s]);
    }
    Ok(loss)
}

/// Backward through pathway `k`; books twice the forward FLOPs onto `phase`.
pub fn pathway_backward(
    store: &ParamStore,
    layout: &PathwayLayout,
    k: usize,
    cache: &PathwayCache,
    target: &Target,
    ledger: &mut EnergyLedger,
    phase: Phase,
) -> Result<PathwayGradient> {
    ledger.ensure_open()?;
    store.check_layout(layout, k)?;
    if cache.k != k || cache.fingerprint != store.fingerprint(k) {
        return Err(Error::Contract(format!(
            "cache from pathway {} is stale for pathway {k}",
            cache.k
        )));
    }
    let mut grad = vec![0.0; store.len()];
    let loss = backward_into(store, layout, cache, target, &mut grad)?;
    ledger.record_work(phase, 2 * pathway_flops(layout, k), store.active_len(k)? as u64)?;
    Ok(PathwayGradient {
        loss,
        grad,
        active: store.active_params(k)?,
    })
}

/// Mean loss and gradient over a batch through pathway `k`.
pub fn pathway_batch_grad(
    store: &ParamStore,
    layout: &PathwayLayout,
    k: usize,
    xs: &[Vec<f64>],
    targets: &[Target],
    ledger: &mut EnergyLedger,
    phase: Phase,
) -> Result<PathwayGradient> {
    if xs.is_empty() || xs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "batch of {} inputs and {} targets",
            xs.len(),
            targets.len()
        )));
    }
    let mut grad = vec![0.0; store.len()];
    let mut loss = 0.0;
    let active = store.active_len(k)? as u64;
    for (x, t) in xs.iter().zip(targets) {
        let (_, cache) = pathway_forward(store, layout, k, x, ledger, phase)?;
        loss += backward_into(store, layout, &cache, t, &mut grad)?;
        ledger.record_work(phase, 2 * pathway_flops(layout, k), active)?;
    }
    let inv = 1.0 / xs.len() as f64;
    for r in [store.shared.clone(), store.pathways[k].clone()] {
        grad[r].iter_mut().for_each(|g| *g *= inv);
    }
    Ok(PathwayGradient {
        loss: loss * inv,
        grad,
        active: store.active_params(k)?,
    })
}
