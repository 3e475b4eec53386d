use std::collections::HashMap;

use crate::error::{contract, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Places every tensor on the graph, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Uses already-placed vars (one per tensor, in set order) as the binding.
    pub fn bind_existing(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.entries.len() {
            return Err(contract(format!("{} vars for {} parameters", vars.len(), self.entries.len())));
        }
        Ok(Bound {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }

    /// 64-bit FNV-1a over names, shapes and the raw bytes of every value.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (name, t) in &self.entries {
            h.write(name.as_bytes());
            for d in t.shape() {
                h.write(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    /// Element-wise mean of parameter sets with identical layout.
    pub fn average(sets: &[ParamSet]) -> Result<ParamSet> {
        let first = sets
            .first()
            .ok_or_else(|| contract("averaging needs at least one parameter set"))?;
        let mut out = first.clone();
        let k = sets.len() as f64;
        for (name, t) in out.iter_mut() {
            // mean = first + Σ(x − first)/k, exact when every set agrees
            let mut acc = vec![0.0; t.numel()];
            for s in sets {
                let other = s
                    .get(name)
                    .filter(|o| o.shape() == t.shape())
                    .ok_or_else(|| contract(format!("parameter {name} missing or reshaped")))?;
                acc.iter_mut()
                    .zip(other.data().iter().zip(t.data()))
                    .for_each(|(a, (v, base))| *a += v - base);
            }
            t.data_mut()
                .iter_mut()
                .zip(acc)
                .for_each(|(dst, delta)| *dst += delta / k);
        }
        Ok(out)
    }
}

/// Graph handles for a bound [`ParamSet`], looked up by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| contract(format!("unknown parameter {name}")))
    }

    /// Vars in parameter-set order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn averaging_equal_sets_is_identity() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![0.1, 0.7, -3.3])).unwrap();
        let avg = ParamSet::average(&[p.clone(), p.clone(), p.clone()]).unwrap();
        assert_eq!(avg.checksum(), p.checksum());
        assert_eq!(avg, p);
    }
}
