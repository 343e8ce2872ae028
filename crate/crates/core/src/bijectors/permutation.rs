use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fixed reordering of coordinates: `y_i = z_{perm[i]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut inverse = vec![usize::MAX; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            if p >= perm.len() || inverse[p] != usize::MAX {
                return Err(Error::Contract(format!("{perm:?} is not a permutation")));
            }
            inverse[p] = i;
        }
        Ok(Self { perm, inverse })
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        Self::new(perm).expect("shuffled indices form a permutation")
    }

    pub fn reverse(dim: usize) -> Self {
        Self::new((0..dim).rev().collect()).expect("reversed indices form a permutation")
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_indices(&self) -> &[usize] {
        &self.inverse
    }

    pub fn forward(&self, z: ArrayView2<'_, f64>) -> Array2<f64> {
        z.select(Axis(1), &self.perm)
    }

    pub fn inverse(&self, y: ArrayView2<'_, f64>) -> Array2<f64> {
        y.select(Axis(1), &self.inverse)
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn rejects_non_permutations() {
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3, 1]).is_err());
    }

    #[test]
    fn forward_then_inverse() {
        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        let z = array![[1.0, 2.0, 3.0]];
        let y = p.forward(z.view());
        assert_eq!(y, array![[3.0, 1.0, 2.0]]);
        assert_eq!(p.inverse(y.view()), z);
    }
}
