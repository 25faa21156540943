//! Abstract energy accounting.
//!
//! Work is counted, never measured: FLOPs, parameter accesses and routing
//! messages per phase. A [`CostModel`] turns the counts into joules
//! (abstract units), split into compute, memory and communication terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pathway::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Inference,
    Routing,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Train, Phase::Inference, Phase::Routing];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Inference => "inference",
            Phase::Routing => "routing",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Counter {
    Flops,
    ParamAccesses,
    Messages,
}

impl Counter {
    pub const ALL: [Counter; 3] = [Counter::Flops, Counter::ParamAccesses, Counter::Messages];

    pub fn name(self) -> &'static str {
        match self {
            Counter::Flops => "flops",
            Counter::ParamAccesses => "param_accesses",
            Counter::Messages => "messages",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub joules_per_flop: f64,
    pub joules_per_param_access: f64,
    pub joules_per_routing_msg: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            joules_per_flop: 1.0,
            joules_per_param_access: 0.1,
            joules_per_routing_msg: 5.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("joules_per_flop", self.joules_per_flop),
            ("joules_per_param_access", self.joules_per_param_access),
            ("joules_per_routing_msg", self.joules_per_routing_msg),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    fn unit(&self, counter: Counter) -> f64 {
        match counter {
            Counter::Flops => self.joules_per_flop,
            Counter::ParamAccesses => self.joules_per_param_access,
            Counter::Messages => self.joules_per_routing_msg,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounters {
    pub flops: u64,
    pub param_accesses: u64,
    pub messages: u64,
    /// Forward passes booked to the phase; not priced.
    pub passes: u64,
}

impl PhaseCounters {
    pub fn get(&self, counter: Counter) -> u64 {
        match counter {
            Counter::Flops => self.flops,
            Counter::ParamAccesses => self.param_accesses,
            Counter::Messages => self.messages,
        }
    }

    fn add(&mut self, other: &PhaseCounters) {
        self.flops += other.flops;
        self.param_accesses += other.param_accesses;
        self.messages += other.messages;
        self.passes += other.passes;
    }
}

/// Cumulative, monotone work counters per phase.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyLedger {
    train: PhaseCounters,
    inference: PhaseCounters,
    routing: PhaseCounters,
    #[serde(default)]
    sealed: bool,
}

impl EnergyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn phase(&self, phase: Phase) -> &PhaseCounters {
        match phase {
            Phase::Train => &self.train,
            Phase::Inference => &self.inference,
            Phase::Routing => &self.routing,
        }
    }

    fn phase_mut(&mut self, phase: Phase) -> &mut PhaseCounters {
        match phase {
            Phase::Train => &mut self.train,
            Phase::Inference => &mut self.inference,
            Phase::Routing => &mut self.routing,
        }
    }

    pub fn is_open(&self) -> bool {
        !self.sealed
    }

    /// Closes the ledger; later bookings fail.
    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub(crate) fn ensure_open(&self) -> Result<()> {
        if self.sealed {
            Err(Error::Contract("ledger is sealed".into()))
        } else {
            Ok(())
        }
    }

    pub fn record(&mut self, phase: Phase, counter: Counter, amount: u64) -> Result<()> {
        self.ensure_open()?;
        let c = self.phase_mut(phase);
        match counter {
            Counter::Flops => c.flops += amount,
            Counter::ParamAccesses => c.param_accesses += amount,
            Counter::Messages => c.messages += amount,
        }
        Ok(())
    }

    /// Books one pass: `flops` multiply-adds over `accesses` parameters.
    pub fn record_pass(&mut self, phase: Phase, flops: u64, accesses: u64) -> Result<()> {
        self.ensure_open()?;
        let c = self.phase_mut(phase);
        c.flops += flops;
        c.param_accesses += accesses;
        c.passes += 1;
        Ok(())
    }

    /// Books work that is not a forward pass (backward sweeps, penalties).
    pub fn record_work(&mut self, phase: Phase, flops: u64, accesses: u64) -> Result<()> {
        self.ensure_open()?;
        let c = self.phase_mut(phase);
        c.flops += flops;
        c.param_accesses += accesses;
        Ok(())
    }

    /// Counter-wise sum, for combining ledgers of parallel runs.
    pub fn merge(&mut self, other: &EnergyLedger) -> Result<()> {
        self.ensure_open()?;
        for p in Phase::ALL {
            self.phase_mut(p).add(other.phase(p));
        }
        Ok(())
    }

    /// Ledger restricted to one phase.
    pub fn only(&self, phase: Phase) -> EnergyLedger {
        let mut out = EnergyLedger::new();
        *out.phase_mut(phase) = *self.phase(phase);
        out
    }

    pub fn breakdown(&self, cost: &CostModel, phases: &[Phase]) -> EnergyBreakdown {
        let mut b = EnergyBreakdown::default();
        for &p in dedup(phases).iter() {
            let c = self.phase(p);
            b.compute += c.flops as f64 * cost.joules_per_flop;
            b.memory += c.param_accesses as f64 * cost.joules_per_param_access;
            b.communication += c.messages as f64 * cost.joules_per_routing_msg;
        }
        b
    }

    /// `(phase, counter, value)` rows, header first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,counter,value\n");
        for p in Phase::ALL {
            let c = self.phase(p);
            for counter in Counter::ALL {
                out.push_str(&format!("{},{},{}\n", p.name(), counter.name(), c.get(counter)));
            }
            out.push_str(&format!("{},passes,{}\n", p.name(), c.passes));
        }
        out
    }

    pub fn totals(&self, cost: &CostModel) -> LedgerTotals {
        let phases = Phase::ALL
            .iter()
            .map(|&p| PhaseTotal {
                phase: p,
                counters: *self.phase(p),
                energy: total_energy(self, cost, &[p]),
            })
            .collect();
        let b = self.breakdown(cost, &Phase::ALL);
        LedgerTotals {
            phases,
            compute: b.compute,
            memory: b.memory,
            communication: b.communication,
            total: b.total(),
        }
    }
}

fn dedup(phases: &[Phase]) -> Vec<Phase> {
    let mut v = phases.to_vec();
    v.sort();
    v.dedup();
    v
}

/// The compute / memory / communication split of a total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub compute: f64,
    pub memory: f64,
    pub communication: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.compute + self.memory + self.communication
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTotal {
    pub phase: Phase,
    pub counters: PhaseCounters,
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub phases: Vec<PhaseTotal>,
    pub compute: f64,
    pub memory: f64,
    pub communication: f64,
    pub total: f64,
}

/// Energy of the selected phases; duplicates in `phases` count once.
pub fn total_energy(ledger: &EnergyLedger, cost: &CostModel, phases: &[Phase]) -> f64 {
    let mut e = 0.0;
    for p in dedup(phases) {
        let c = ledger.phase(p);
        for counter in Counter::ALL {
            e += c.get(counter) as f64 * cost.unit(counter);
        }
    }
    e
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub ok: bool,
    pub total: f64,
    pub budget: f64,
    /// `budget - total`; negative on violation.
    pub margin: f64,
}

/// Closed budget constraint `total <= budget` over all phases.
pub fn check_budget(ledger: &EnergyLedger, cost: &CostModel, budget: f64) -> Result<BudgetCheck> {
    if !(budget.is_finite() && budget > 0.0) {
        return Err(Error::Config(format!("energy budget must be > 0, got {budget}")));
    }
    let total = total_energy(ledger, cost, &Phase::ALL);
    Ok(BudgetCheck {
        ok: total <= budget,
        total,
        budget,
        margin: budget - total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBound {
    pub holds: bool,
    pub rhs: f64,
    /// `E_full / K + delta_e - E_pathway`.
    pub slack: f64,
}

/// Checks `e_pathway <= e_full / k + delta_e`.
pub fn verify_energy_bound(e_pathway: f64, e_full: f64, k: usize, delta_e: f64) -> Result<EnergyBound> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    for (name, v) in [("E_pathway", e_pathway), ("E_full", e_full), ("delta_E", delta_e)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Contract(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    let rhs = e_full / k as f64 + delta_e;
    Ok(EnergyBound {
        holds: e_pathway <= rhs,
        rhs,
        slack: rhs - e_pathway,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveRatio {
    pub energy_ratio: f64,
    pub param_ratio: f64,
}

impl ActiveRatio {
    pub fn relative_gap(&self) -> f64 {
        (self.energy_ratio - self.param_ratio).abs() / self.param_ratio
    }
}

/// Inference-phase energy of a pathway run relative to a monolithic run,
/// next to the mean active-parameter fraction of `store`.
pub fn active_ratio_check(
    pathway_ledger: &EnergyLedger,
    mono_ledger: &EnergyLedger,
    store: &ParamStore,
    cost: &CostModel,
) -> Result<ActiveRatio> {
    let a = pathway_ledger.phase(Phase::Inference);
    let b = mono_ledger.phase(Phase::Inference);
    if a.passes != b.passes {
        return Err(Error::Contract(format!(
            "ledgers cover {} and {} inference calls",
            a.passes, b.passes
        )));
    }
    let e_mono = total_energy(mono_ledger, cost, &[Phase::Inference]);
    if e_mono == 0.0 {
        return Err(Error::Empty("monolithic ledger has no inference work".into()));
    }
    let e_path = total_energy(pathway_ledger, cost, &[Phase::Inference]);
    let k = store.n_pathways();
    let mean_active =
        (0..k).map(|p| store.active_len(p).unwrap_or(0)).sum::<usize>() as f64 / k as f64;
    Ok(ActiveRatio {
        energy_ratio: e_path / e_mono,
        param_ratio: mean_active / store.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost(f: f64, a: f64, m: f64) -> CostModel {
        CostModel {
            joules_per_flop: f,
            joules_per_param_access: a,
            joules_per_routing_msg: m,
        }
    }

    #[test]
    fn empty_ledger_has_zero_energy() {
        assert_eq!(total_energy(&EnergyLedger::new(), &CostModel::default(), &Phase::ALL), 0.0);
    }

    #[test]
    fn flops_only() {
        let mut l = EnergyLedger::new();
        l.record(Phase::Train, Counter::Flops, 100).unwrap();
        assert_eq!(total_energy(&l, &cost(2.0, 1.0, 1.0), &Phase::ALL), 200.0);
    }

    #[test]
    fn phases_partition_the_total() {
        let mut l = EnergyLedger::new();
        l.record_pass(Phase::Train, 30, 7).unwrap();
        l.record_pass(Phase::Inference, 11, 3).unwrap();
        l.record(Phase::Routing, Counter::Messages, 4).unwrap();
        l.record(Phase::Routing, Counter::Flops, 9).unwrap();
        let c = CostModel::default();
        let parts: f64 = Phase::ALL.iter().map(|&p| total_energy(&l, &c, &[p])).sum();
        assert_eq!(parts, total_energy(&l, &c, &Phase::ALL));
        assert_eq!(l.breakdown(&c, &Phase::ALL).total(), parts);
    }

    #[test]
    fn budget_examples() {
        let mut l = EnergyLedger::new();
        l.record(Phase::Train, Counter::Flops, 200).unwrap();
        let c = cost(1.0, 1.0, 1.0);
        let ok = check_budget(&l, &c, 300.0).unwrap();
        assert!(ok.ok && ok.margin == 100.0);
        let bad = check_budget(&l, &c, 100.0).unwrap();
        assert!(!bad.ok && bad.margin == -100.0);
        assert!(check_budget(&l, &c, 200.0).unwrap().ok);
        assert!(check_budget(&l, &c, 0.0).is_err());
    }

    #[test]
    fn energy_bound_examples() {
        let b = verify_energy_bound(400.0, 400.0, 1, 0.0).unwrap();
        assert!(b.holds && b.slack == 0.0);
        let b = verify_energy_bound(105.0, 400.0, 4, 10.0).unwrap();
        assert!(b.holds && b.slack == 5.0);
        assert!(!verify_energy_bound(120.0, 400.0, 4, 10.0).unwrap().holds);
        assert!(verify_energy_bound(1.0, 1.0, 0, 0.0).is_err());
        assert!(verify_energy_bound(-1.0, 1.0, 1, 0.0).is_err());
    }

    #[test]
    fn sealed_ledger_rejects_bookings() {
        let mut l = EnergyLedger::new();
        l.seal();
        assert!(l.record(Phase::Train, Counter::Flops, 1).is_err());
        assert!(!l.is_open());
    }

    #[test]
    fn csv_layout() {
        let csv = EnergyLedger::new().to_csv();
        assert!(csv.starts_with("phase,counter,value\n"));
        assert_eq!(csv.lines().count(), 1 + 3 * 4);
    }

    #[test]
    fn cost_model_rejects_nonpositive() {
        assert!(cost(0.0, 1.0, 1.0).validate().is_err());
        assert!(CostModel::default().validate().is_ok());
    }
}
