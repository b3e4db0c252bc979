use std::collections::BTreeMap;

use crate::diffcore::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Scale and shift for one modulation slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotModulation<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Channel-wise affine modulation for every slot of a network: one
/// (gamma, beta) pair per channel per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationSet<T: Scalar> {
    slots: Vec<SlotModulation<T>>,
}

pub fn gamma_name(slot: usize) -> String {
    format!("mod.{slot}.gamma")
}

pub fn beta_name(slot: usize) -> String {
    format!("mod.{slot}.beta")
}

impl<T: Scalar> ModulationSet<T> {
    /// gamma = 1 and beta = 0 everywhere.
    pub fn identity(slot_channels: &[usize]) -> Self {
        Self {
            slots: slot_channels
                .iter()
                .map(|&c| SlotModulation {
                    gamma: Tensor::ones(vec![c]),
                    beta: Tensor::zeros(vec![c]),
                })
                .collect(),
        }
    }

    /// Every gamma set to `gamma`, every beta to zero.
    pub fn uniform(slot_channels: &[usize], gamma: T) -> Self {
        let mut set = Self::identity(slot_channels);
        for s in &mut set.slots {
            s.gamma = Tensor::full(vec![s.gamma.len()], gamma);
        }
        set
    }

    pub fn slots(&self) -> &[SlotModulation<T>] {
        &self.slots
    }

    pub fn slot(&self, i: usize) -> Option<&SlotModulation<T>> {
        self.slots.get(i)
    }

    pub fn slot_mut(&mut self, i: usize) -> Option<&mut SlotModulation<T>> {
        self.slots.get_mut(i)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Number of scalar parameters: 2 x total channels.
    pub fn num_params(&self) -> usize {
        self.slots.iter().map(|s| s.gamma.len() + s.beta.len()).sum()
    }

    pub fn is_identity(&self) -> bool {
        self.slots.iter().all(|s| {
            s.gamma.data().iter().all(|&g| g == T::one()) && s.beta.data().iter().all(|&b| b == T::zero())
        })
    }

    /// Fails unless the set has exactly one slot per entry of
    /// `slot_channels` with matching widths.
    pub fn check_fits(&self, slot_channels: &[usize]) -> Result<()> {
        if self.slots.len() != slot_channels.len() {
            return Err(Error::ModulationMismatch(format!(
                "{} slots for a network with {}",
                self.slots.len(),
                slot_channels.len()
            )));
        }
        for (i, (s, &c)) in self.slots.iter().zip(slot_channels).enumerate() {
            if s.gamma.shape() != [c] || s.beta.shape() != [c] {
                return Err(Error::ModulationMismatch(format!(
                    "slot {i}: gamma {:?}, beta {:?}, layer has {c} channels",
                    s.gamma.shape(),
                    s.beta.shape()
                )));
            }
        }
        Ok(())
    }

    /// Parameter names of the enabled slots (all when `mask` is `None`).
    pub fn param_names(&self, mask: Option<&[bool]>) -> Vec<String> {
        (0..self.slots.len())
            .filter(|&i| mask.map_or(true, |m| m.get(i).copied().unwrap_or(false)))
            .flat_map(|i| [gamma_name(i), beta_name(i)])
            .collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor<T>> {
        let mut map = BTreeMap::new();
        for (i, s) in self.slots.iter().enumerate() {
            map.insert(gamma_name(i), s.gamma.clone());
            map.insert(beta_name(i), s.beta.clone());
        }
        map
    }

    /// Looks up a tensor by its parameter name.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let rest = name.strip_prefix("mod.")?;
        let (idx, which) = rest.split_once('.')?;
        let slot = self.slots.get_mut(idx.parse::<usize>().ok()?)?;
        match which {
            "gamma" => Some(&mut slot.gamma),
            "beta" => Some(&mut slot.beta),
            _ => None,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        let rest = name.strip_prefix("mod.")?;
        let (idx, which) = rest.split_once('.')?;
        let slot = self.slots.get(idx.parse::<usize>().ok()?)?;
        match which {
            "gamma" => Some(&slot.gamma),
            "beta" => Some(&slot.beta),
            _ => None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModulationSet<U> {
        ModulationSet {
            slots: self
                .slots
                .iter()
                .map(|s| SlotModulation {
                    gamma: s.gamma.cast(),
                    beta: s.beta.cast(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_counts_and_lookup() {
        let mut m = ModulationSet::<f32>::identity(&[3, 5]);
        assert_eq!(m.num_params(), 16);
        assert!(m.is_identity());
        assert_eq!(m, ModulationSet::identity(&[3, 5]));
        m.get_mut("mod.1.beta").unwrap().data_mut()[4] = 0.5;
        assert!(!m.is_identity());
        assert!(m.get("mod.2.beta").is_none());
        assert!(m.get("mod.0.delta").is_none());
        assert_eq!(m.param_names(Some(&[false, true])), vec!["mod.1.gamma", "mod.1.beta"]);
    }

    #[test]
    fn fit_check() {
        let m = ModulationSet::<f32>::identity(&[3, 5]);
        assert!(m.check_fits(&[3, 5]).is_ok());
        assert!(matches!(m.check_fits(&[3]), Err(Error::ModulationMismatch(_))));
        assert!(m.check_fits(&[3, 4]).is_err());
    }
}
