//! Compositional latent space: one token set per part, concatenated per asset.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// How part identity embeddings enter the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdInjection {
    /// Added once after the input projection.
    #[default]
    InputOnly,
}

/// `K×C` tokens bound to one part slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PartTokenSet {
    pub tokens: Tensor,
    pub slot: usize,
}

/// An asset's ordered part token sets. Every part has the same `K` and `C`
/// and the slots are exactly `0..N` in list order.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetLatent {
    parts: Vec<PartTokenSet>,
}

impl AssetLatent {
    /// Builds an asset from per-part token matrices; slots follow list order.
    pub fn from_parts(tokens: Vec<Tensor>) -> Result<Self> {
        let first = tokens.first().ok_or_else(|| Error::Domain("asset needs at least one part".into()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 2 {
            return Err(shape_err("AssetLatent", format!("part tokens must be K×C, got {shape:?}")));
        }
        if let Some(bad) = tokens.iter().find(|t| t.shape() != shape.as_slice()) {
            return Err(shape_err("AssetLatent", format!("part shape {:?} differs from {shape:?}", bad.shape())));
        }
        let parts = tokens.into_iter().enumerate().map(|(slot, tokens)| PartTokenSet { tokens, slot }).collect();
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &[PartTokenSet] {
        &self.parts
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn tokens_per_part(&self) -> usize {
        self.parts[0].tokens.rows()
    }

    pub fn width(&self) -> usize {
        self.parts[0].tokens.cols()
    }

    /// Concatenates the parts into one `NK×C` matrix in slot order.
    pub fn concat(&self) -> Tensor {
        let refs: Vec<&Tensor> = self.parts.iter().map(|p| &p.tokens).collect();
        Tensor::concat_rows(&refs).expect("uniform part shapes")
    }

    /// Inverse of [`AssetLatent::concat`].
    pub fn split(z: &Tensor, n: usize, k: usize) -> Result<Self> {
        if n == 0 || k == 0 || z.rows() != n * k {
            return Err(shape_err("split", format!("{} rows cannot hold {n} parts of {k} tokens", z.rows())));
        }
        let tokens = (0..n).map(|i| z.slice_rows(i * k, k)).collect::<Result<Vec<_>>>()?;
        Self::from_parts(tokens)
    }

    /// Reorders parts by `perm` (new position `i` receives old part `perm[i]`)
    /// and reassigns slots `0..N` in the new order.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.parts.len())?;
        Self::from_parts(perm.iter().map(|&i| self.parts[i].tokens.clone()).collect())
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = alloc::vec![false; n];
    if perm.len() != n {
        return Err(Error::Domain(format!("permutation of length {} for {n} parts", perm.len())));
    }
    for &p in perm {
        if p >= n || core::mem::replace(&mut seen[p], true) {
            return Err(Error::Domain(format!("{perm:?} is not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// Slots must be distinct and below `capacity`.
pub(crate) fn check_permutation_of_slots(slots: &[usize], capacity: usize) -> Result<()> {
    let mut seen = alloc::vec![false; capacity];
    for &s in slots {
        if s >= capacity {
            return Err(Error::Capacity { slot: s, capacity });
        }
        if core::mem::replace(&mut seen[s], true) {
            return Err(Error::Domain(format!("slot {s} assigned twice in {slots:?}")));
        }
    }
    Ok(())
}

/// Learnable per-slot identity embeddings, one row per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PartIdentityTable {
    pub embeddings: Tensor,
}

impl PartIdentityTable {
    pub fn capacity(&self) -> usize {
        self.embeddings.rows()
    }

    /// Adds `e_slot` to every token of each part.
    pub fn add_part_ids(&self, asset: &AssetLatent) -> Result<AssetLatent> {
        if self.embeddings.cols() != asset.width() {
            return Err(shape_err(
                "add_part_ids",
                format!("embedding width {} vs token width {}", self.embeddings.cols(), asset.width()),
            ));
        }
        let mut out = asset.clone();
        for part in &mut out.parts {
            if part.slot >= self.capacity() {
                return Err(Error::Capacity { slot: part.slot, capacity: self.capacity() });
            }
            let e = self.embeddings.row(part.slot);
            let c = e.len();
            for row in part.tokens.data_mut().chunks_mut(c) {
                for (v, ev) in row.iter_mut().zip(e) {
                    *v += ev;
                }
            }
        }
        Ok(out)
    }
}

/// Differentiable part-ID addition on an `NK×C` token matrix.
///
/// Block `b` (rows `b*K..(b+1)*K`) receives row `slots[b]` of `table`.
pub fn add_part_ids_on_graph(g: &mut Graph, z: Var, table: Var, slots: &[usize], k: usize) -> Result<Var> {
    let cap = g.value(table).rows();
    if g.value(z).rows() != slots.len() * k {
        return Err(shape_err("add_part_ids", format!("{} rows for {} parts of {k}", g.value(z).rows(), slots.len())));
    }
    let mut blocks = Vec::with_capacity(slots.len());
    for (b, &slot) in slots.iter().enumerate() {
        if slot >= cap {
            return Err(Error::Capacity { slot, capacity: cap });
        }
        let block = g.slice_rows(z, b * k, k)?;
        let e = g.slice_rows(table, slot, 1)?;
        blocks.push(g.add_row(block, e)?);
    }
    g.concat_rows(&blocks)
}

/// Uniformly permutes the parts and reassigns slots in the new order.
pub fn shuffle_parts<R: Rng + ?Sized>(asset: &AssetLatent, rng: &mut R) -> AssetLatent {
    let mut perm: Vec<usize> = (0..asset.num_parts()).collect();
    perm.shuffle(rng);
    asset.permuted(&perm).expect("shuffled indices form a permutation")
}

/// A noise level in `[0, 1]`, shared by every part of an asset.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("noise level {t} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// `t·z0 + (1−t)·eps`, elementwise.
pub fn interpolate(z0: &Tensor, eps: &Tensor, t: NoiseLevel) -> Result<Tensor> {
    crate::tensor::ensure_same_shape("interpolate", z0, eps)?;
    let t = t.get();
    let data = z0.data().iter().zip(eps.data()).map(|(a, e)| t * a + (1.0 - t) * e).collect();
    Tensor::new(z0.shape().to_vec(), data)
}
