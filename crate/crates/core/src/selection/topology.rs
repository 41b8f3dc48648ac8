use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transmitters, receivers, per-transmitter modality counts and link budgets.
///
/// Indices are 0-based throughout the library. The characteristic vector of a
/// selection has one bit per `(receiver, transmitter, modality)` slot, laid out
/// receiver-major: bit `t * total_modalities + offset(k) + m`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TopologySpec", into = "TopologySpec")]
pub struct Topology {
    modalities: Vec<usize>,
    receivers: usize,
    rx_budget: Vec<usize>,
    tx_budget: Vec<usize>,
    offsets: Vec<usize>,
}

/// Serialized form of a [`Topology`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopologySpec {
    pub modalities: Vec<usize>,
    pub receivers: usize,
    pub rx_budget: Vec<usize>,
    pub tx_budget: Vec<usize>,
}

impl TryFrom<TopologySpec> for Topology {
    type Error = Error;
    fn try_from(s: TopologySpec) -> Result<Self> {
        Topology::new(s.modalities, s.receivers, s.rx_budget, s.tx_budget)
    }
}

impl From<Topology> for TopologySpec {
    fn from(t: Topology) -> Self {
        TopologySpec {
            modalities: t.modalities,
            receivers: t.receivers,
            rx_budget: t.rx_budget,
            tx_budget: t.tx_budget,
        }
    }
}

impl Topology {
    pub fn new(
        modalities: Vec<usize>,
        receivers: usize,
        rx_budget: Vec<usize>,
        tx_budget: Vec<usize>,
    ) -> Result<Self> {
        let k = modalities.len();
        if k == 0 {
            return Err(Error::config("topology.modalities", "need at least one transmitter"));
        }
        if receivers == 0 {
            return Err(Error::config("topology.receivers", "need at least one receiver"));
        }
        if let Some(i) = modalities.iter().position(|m| *m == 0) {
            return Err(Error::config(
                "topology.modalities",
                format!("transmitter {i} has no modality"),
            ));
        }
        if rx_budget.len() != receivers {
            return Err(Error::config(
                "topology.rx_budget",
                format!("{} budgets for {receivers} receivers", rx_budget.len()),
            ));
        }
        if let Some((t, e)) = rx_budget.iter().enumerate().find(|(_, e)| **e < 1 || **e > k) {
            return Err(Error::config(
                "topology.rx_budget",
                format!("receiver {t} budget {e} outside 1..={k}"),
            ));
        }
        if tx_budget.len() != k {
            return Err(Error::config(
                "topology.tx_budget",
                format!("{} budgets for {k} transmitters", tx_budget.len()),
            ));
        }
        if let Some(i) = tx_budget.iter().position(|e| *e < 1) {
            return Err(Error::config(
                "topology.tx_budget",
                format!("transmitter {i} budget must be at least 1"),
            ));
        }
        let mut offsets = Vec::with_capacity(k + 1);
        offsets.push(0);
        for m in &modalities {
            offsets.push(offsets.last().unwrap() + m);
        }
        Ok(Topology {
            modalities,
            receivers,
            rx_budget,
            tx_budget,
            offsets,
        })
    }

    /// Same budget for every receiver and every transmitter.
    pub fn uniform(modalities: Vec<usize>, receivers: usize, rx: usize, tx: usize) -> Result<Self> {
        let k = modalities.len();
        Topology::new(modalities, receivers, vec![rx; receivers], vec![tx; k])
    }

    /// The same devices with budgets that can never bind.
    pub fn unlimited(&self) -> Self {
        let k = self.transmitters();
        let t = self.receivers;
        Topology::new(
            self.modalities.clone(),
            t,
            vec![k; t],
            self.modalities.iter().map(|m| m * t).collect(),
        )
        .expect("relaxing budgets keeps a valid topology")
    }

    pub fn transmitters(&self) -> usize {
        self.modalities.len()
    }

    pub fn receivers(&self) -> usize {
        self.receivers
    }

    pub fn modalities(&self, k: usize) -> usize {
        self.modalities[k]
    }

    pub fn modality_counts(&self) -> &[usize] {
        &self.modalities
    }

    pub fn max_modalities(&self) -> usize {
        self.modalities.iter().copied().max().unwrap_or(0)
    }

    pub fn rx_budget(&self, t: usize) -> usize {
        self.rx_budget[t]
    }

    pub fn rx_budgets(&self) -> &[usize] {
        &self.rx_budget
    }

    pub fn tx_budget(&self, k: usize) -> usize {
        self.tx_budget[k]
    }

    pub fn tx_budgets(&self) -> &[usize] {
        &self.tx_budget
    }

    /// Count-head size of transmitter `k`'s selector: a single task can never
    /// ask more of one transmitter than it has or than its budget allows.
    pub fn tx_local_budget(&self, k: usize) -> usize {
        self.tx_budget[k].min(self.modalities[k])
    }

    /// Offset of transmitter `k`'s modalities within one receiver's block.
    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    /// Total modality count across transmitters.
    pub fn slots_per_receiver(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Length of the characteristic vector.
    pub fn len(&self) -> usize {
        self.slots_per_receiver() * self.receivers
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bit(&self, t: usize, k: usize, m: usize) -> usize {
        debug_assert!(t < self.receivers && k < self.transmitters() && m < self.modalities[k]);
        t * self.slots_per_receiver() + self.offsets[k] + m
    }

    /// Inverse of [`Topology::bit`].
    pub fn slot(&self, bit: usize) -> (usize, usize, usize) {
        let per = self.slots_per_receiver();
        let t = bit / per;
        let within = bit % per;
        let k = self.offsets.partition_point(|o| *o <= within) - 1;
        (t, k, within - self.offsets[k])
    }

    /// Iterates `(k, m)` in characteristic-vector order.
    pub fn modality_slots(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.modalities
            .iter()
            .enumerate()
            .flat_map(|(k, &mk)| (0..mk).map(move |m| (k, m)))
    }

    pub fn total_rx_budget(&self) -> usize {
        self.rx_budget.iter().sum()
    }
}
