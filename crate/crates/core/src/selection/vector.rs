use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::selection::Topology;

/// Binary characteristic vector of a selection, one bit per
/// `(receiver, transmitter, modality)` slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionVector {
    topo: Arc<Topology>,
    bits: Vec<bool>,
}

/// Per-receiver list of `(transmitter, modalities)` choices.
pub type SelectionSets = Vec<Vec<(usize, Vec<usize>)>>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    ReceiverStarved { t: usize },
    ReceiverOverBudget { t: usize, links: usize, budget: usize },
    TransmitterOverBudget { k: usize, slots: usize, budget: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ReceiverStarved { t } => write!(f, "receiver {t} starved"),
            Violation::ReceiverOverBudget { t, links, budget } => {
                write!(f, "receiver {t} over budget ({links} links > {budget})")
            }
            Violation::TransmitterOverBudget { k, slots, budget } => {
                write!(f, "transmitter {k} over budget ({slots} slots > {budget})")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConstraintReport {
    pub violations: Vec<Violation>,
}

impl ConstraintReport {
    pub fn regular(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn transmitter_side_ok(&self) -> bool {
        !self
            .violations
            .iter()
            .any(|v| matches!(v, Violation::TransmitterOverBudget { .. }))
    }

    /// Receiver-side bounds hold except for starvation of the listed receivers.
    pub fn receiver_side_ok_except(&self, starved: &[usize]) -> bool {
        self.violations.iter().all(|v| match v {
            Violation::ReceiverStarved { t } => starved.contains(t),
            Violation::ReceiverOverBudget { .. } => false,
            Violation::TransmitterOverBudget { .. } => true,
        })
    }
}

impl SelectionVector {
    pub fn zeros(topo: Arc<Topology>) -> Self {
        let n = topo.len();
        SelectionVector {
            topo,
            bits: vec![false; n],
        }
    }

    pub fn ones(topo: Arc<Topology>) -> Self {
        let n = topo.len();
        SelectionVector {
            topo,
            bits: vec![true; n],
        }
    }

    pub fn from_bits(topo: Arc<Topology>, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != topo.len() {
            return Err(Error::shape("SelectionVector::from_bits", &[bits.len()], &[topo.len()]));
        }
        Ok(SelectionVector { topo, bits })
    }

    /// Builds the characteristic vector from per-receiver transmitter and
    /// modality choices.
    pub fn vectorize(topo: Arc<Topology>, sets: &[Vec<(usize, Vec<usize>)>]) -> Result<Self> {
        if sets.len() > topo.receivers() {
            return Err(Error::Index(format!(
                "{} receiver sets for {} receivers",
                sets.len(),
                topo.receivers()
            )));
        }
        let mut v = SelectionVector::zeros(topo);
        for (t, chosen) in sets.iter().enumerate() {
            for (k, mods) in chosen {
                if *k >= v.topo.transmitters() {
                    return Err(Error::Index(format!("transmitter {k} for receiver {t}")));
                }
                for &m in mods {
                    if m >= v.topo.modalities(*k) {
                        return Err(Error::Index(format!("modality {m} of transmitter {k}")));
                    }
                    let b = v.topo.bit(t, *k, m);
                    v.bits[b] = true;
                }
            }
        }
        Ok(v)
    }

    /// Inverse of [`SelectionVector::vectorize`] (transmitters with no
    /// selected modality are omitted).
    pub fn to_sets(&self) -> SelectionSets {
        (0..self.topo.receivers())
            .map(|t| {
                (0..self.topo.transmitters())
                    .filter_map(|k| {
                        let mods: Vec<usize> =
                            (0..self.topo.modalities(k)).filter(|&m| self.get(t, k, m)).collect();
                        (!mods.is_empty()).then_some((k, mods))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topo
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, t: usize, k: usize, m: usize) -> bool {
        self.bits[self.topo.bit(t, k, m)]
    }

    pub fn set(&mut self, t: usize, k: usize, m: usize, on: bool) {
        let b = self.topo.bit(t, k, m);
        self.bits[b] = on;
    }

    /// Receiver `t`'s block, one bit per `(k, m)`.
    pub fn receiver_bits(&self, t: usize) -> &[bool] {
        let per = self.topo.slots_per_receiver();
        &self.bits[t * per..(t + 1) * per]
    }

    /// Receiver view: transmitter `k` is linked to `t` iff any of its
    /// modalities serves `t`.
    pub fn receiver_view(&self, t: usize) -> Vec<bool> {
        (0..self.topo.transmitters())
            .map(|k| (0..self.topo.modalities(k)).any(|m| self.get(t, k, m)))
            .collect()
    }

    pub fn receiver_links(&self, t: usize) -> usize {
        self.receiver_view(t).into_iter().filter(|b| *b).count()
    }

    /// Number of modality-task slots transmitter `k` serves over all receivers.
    pub fn transmitter_load(&self, k: usize) -> usize {
        (0..self.topo.receivers())
            .map(|t| (0..self.topo.modalities(k)).filter(|&m| self.get(t, k, m)).count())
            .sum()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn receiver_count_ones(&self, t: usize) -> usize {
        self.receiver_bits(t).iter().filter(|b| **b).count()
    }

    pub fn check_constraints(&self) -> ConstraintReport {
        let mut violations = Vec::new();
        for t in 0..self.topo.receivers() {
            let links = self.receiver_links(t);
            let budget = self.topo.rx_budget(t);
            if links == 0 {
                violations.push(Violation::ReceiverStarved { t });
            } else if links > budget {
                violations.push(Violation::ReceiverOverBudget { t, links, budget });
            }
        }
        for k in 0..self.topo.transmitters() {
            let slots = self.transmitter_load(k);
            let budget = self.topo.tx_budget(k);
            if slots > budget {
                violations.push(Violation::TransmitterOverBudget { k, slots, budget });
            }
        }
        ConstraintReport { violations }
    }

    pub fn is_regular(&self) -> bool {
        self.check_constraints().regular()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn topo333() -> Arc<Topology> {
        Arc::new(Topology::uniform(vec![3, 3, 3], 3, 2, 4).unwrap())
    }

    #[test]
    fn empty_sets_give_zero_irregular_vector() {
        let v = SelectionVector::vectorize(topo333(), &[]).unwrap();
        assert_eq!(v.count_ones(), 0);
        assert!(!v.is_regular());
    }

    #[test]
    fn single_slot_index() {
        // receiver 0 <- transmitter 2, modality 0
        let v = SelectionVector::vectorize(topo333(), &[vec![(2, vec![0])]]).unwrap();
        let on: Vec<usize> = v.bits().iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
        assert_eq!(on, vec![6]);
    }

    #[test]
    fn all_ones_irregular() {
        let v = SelectionVector::ones(topo333());
        let report = v.check_constraints();
        assert!(!report.regular());
        assert!(report.violations.contains(&Violation::ReceiverOverBudget {
            t: 0,
            links: 3,
            budget: 2
        }));
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(SelectionVector::vectorize(topo333(), &[vec![(3, vec![0])]]).is_err());
        assert!(SelectionVector::vectorize(topo333(), &[vec![(0, vec![3])]]).is_err());
    }

    #[test]
    fn receiver_side_checks() {
        let topo = topo333();
        let v = SelectionVector::vectorize(
            topo.clone(),
            &[vec![(0, vec![0]), (1, vec![2])], vec![], vec![(2, vec![1])]],
        )
        .unwrap();
        assert_eq!(v.receiver_view(0), vec![true, true, false]);
        let report = v.check_constraints();
        assert_eq!(report.violations, vec![Violation::ReceiverStarved { t: 1 }]);
        assert_eq!(report.violations[0].to_string(), "receiver 1 starved");
    }

    #[test]
    fn transmitter_over_budget() {
        let topo = topo333();
        let v = SelectionVector::vectorize(
            topo,
            &[vec![(0, vec![0, 1, 2])], vec![(0, vec![0, 1])], vec![(1, vec![0])]],
        )
        .unwrap();
        let report = v.check_constraints();
        assert_eq!(
            report.violations,
            vec![Violation::TransmitterOverBudget {
                k: 0,
                slots: 5,
                budget: 4
            }]
        );
        assert_eq!(report.violations[0].to_string(), "transmitter 0 over budget (5 slots > 4)");
    }

    proptest! {
        #[test]
        fn sets_roundtrip(bits in proptest::collection::vec(any::<bool>(), 27)) {
            let v = SelectionVector::from_bits(topo333(), bits).unwrap();
            let back = SelectionVector::vectorize(topo333(), &v.to_sets()).unwrap();
            prop_assert_eq!(v, back);
        }
    }
}
