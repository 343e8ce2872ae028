use std::ops::Range;

use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

/// Handle to a `rows × cols` row-major block inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRef {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamRef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub param: ParamRef,
}

/// Flat `f64` parameter array plus a layout naming every owned block.
///
/// Blocks are allocated back to back, so the ranges are disjoint and cover
/// the whole array.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    values: Vec<f64>,
    layout: Vec<LayoutEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reserve a zero-filled block.
    pub fn alloc(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamRef {
        let param = ParamRef {
            offset: self.values.len(),
            rows,
            cols,
        };
        self.values.resize(self.values.len() + param.len(), 0.0);
        self.layout.push(LayoutEntry {
            name: name.into(),
            param,
        });
        param
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn get(&self, p: ParamRef) -> &[f64] {
        &self.values[p.range()]
    }

    pub fn get_mut(&mut self, p: ParamRef) -> &mut [f64] {
        &mut self.values[p.range()]
    }

    pub fn view(&self, p: ParamRef) -> ArrayView2<'_, f64> {
        view(&self.values, p)
    }

    pub fn view_mut(&mut self, p: ParamRef) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((p.rows, p.cols), &mut self.values[p.range()])
            .expect("param block shape matches its range")
    }

    /// Replace all values, keeping the layout. Lengths must agree.
    pub fn set_values(&mut self, values: &[f64]) -> crate::Result<()> {
        if values.len() != self.values.len() {
            return Err(crate::Error::shape(
                "ParamStore::set_values",
                self.values.len(),
                values.len(),
            ));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn from_parts(values: Vec<f64>, layout: Vec<LayoutEntry>) -> crate::Result<Self> {
        let mut next = 0;
        for e in &layout {
            if e.param.offset != next {
                return Err(crate::Error::Checkpoint(format!(
                    "layout entry `{}` starts at {} but previous block ends at {next}",
                    e.name, e.param.offset
                )));
            }
            next += e.param.len();
        }
        if next != values.len() {
            return Err(crate::Error::Checkpoint(format!(
                "layout covers {next} values, array holds {}",
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }
}

/// View a block of an arbitrary flat array using the store's layout.
pub fn view(values: &[f64], p: ParamRef) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((p.rows, p.cols), &values[p.range()])
        .expect("param block shape matches its range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_are_disjoint_and_cover() {
        let mut s = ParamStore::new();
        let a = s.alloc("a", 3, 4);
        let b = s.alloc("b", 1, 4);
        let c = s.alloc("empty", 0, 7);
        let d = s.alloc("d", 2, 2);
        assert_eq!(a.range(), 0..12);
        assert_eq!(b.range(), 12..16);
        assert!(c.is_empty());
        assert_eq!(d.range(), 16..20);
        assert_eq!(s.len(), 20);
        let covered: usize = s.layout().iter().map(|e| e.param.len()).sum();
        assert_eq!(covered, s.len());
    }

    #[test]
    fn from_parts_rejects_gaps() {
        let layout = vec![LayoutEntry {
            name: "w".into(),
            param: ParamRef {
                offset: 1,
                rows: 1,
                cols: 2,
            },
        }];
        assert!(ParamStore::from_parts(vec![0.0; 3], layout).is_err());
    }
}
