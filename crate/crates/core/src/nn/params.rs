use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::spec::NetworkSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous slices of a flat parameter array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
}

/// Where the tensors of one linear layer live inside the flat vector.
#[derive(Clone, Debug)]
pub struct LayerSlots {
    pub weight: Range<usize>,
    pub bias: Option<Range<usize>>,
    pub gamma: Option<Range<usize>>,
    pub beta: Option<Range<usize>>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Layout {
    /// Builds a layout from `(name, shape)` pairs laid end to end.
    pub fn from_shapes<I, S>(shapes: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<usize>)>,
        S: Into<String>,
    {
        let mut offset = 0;
        let entries = shapes
            .into_iter()
            .map(|(name, shape)| {
                let e = LayoutEntry { name: name.into(), offset, shape };
                offset += e.len();
                e
            })
            .collect();
        Layout { entries }
    }

    pub fn for_spec(spec: &NetworkSpec) -> Self {
        let mut shapes = Vec::new();
        for l in 0..spec.num_layers() {
            let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
            shapes.push((format!("layer{l}.weight"), vec![fan_out, fan_in]));
            if spec.has_bn(l) {
                shapes.push((format!("layer{l}.bn_gamma"), vec![fan_out]));
                shapes.push((format!("layer{l}.bn_beta"), vec![fan_out]));
            } else {
                shapes.push((format!("layer{l}.bias"), vec![fan_out]));
            }
        }
        Layout::from_shapes(shapes)
    }

    /// Checks that entries tile `0..len` without gaps or overlaps.
    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for e in &self.entries {
            if e.offset != expected {
                return Err(Error::config(format!("layout entry {} is not contiguous", e.name)));
            }
            expected += e.len();
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.entries.last().map(|e| e.offset + e.len()).unwrap_or(0)
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Per-layer slot map for a network layout.
    pub fn layer_slots(&self, spec: &NetworkSpec) -> Result<Vec<LayerSlots>> {
        (0..spec.num_layers())
            .map(|l| {
                let weight = self
                    .get(&format!("layer{l}.weight"))
                    .ok_or(Error::LayoutMismatch)?;
                let want = [spec.layer_sizes[l + 1], spec.layer_sizes[l]];
                if weight.shape != want {
                    return Err(Error::LayoutMismatch);
                }
                let opt = |suffix: &str| self.get(&format!("layer{l}.{suffix}")).map(|e| e.range());
                Ok(LayerSlots {
                    weight: weight.range(),
                    bias: opt("bias"),
                    gamma: opt("bn_gamma"),
                    beta: opt("bn_beta"),
                    fan_in: want[1],
                    fan_out: want[0],
                })
            })
            .collect()
    }
}

/// A point in parameter space: flat values plus the layout that names them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        layout.validate()?;
        if values.len() != layout.total_len() {
            return Err(Error::dim(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(ParameterVector { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total_len();
        ParameterVector { values: vec![0.0; n], layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|e| &self.values[e.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.get(name)?.range();
        Some(&mut self.values[r])
    }

    pub fn same_layout(&self, other: &ParameterVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    fn check(&self, other: &ParameterVector) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &ParameterVector) -> Result<ParameterVector> {
        self.check(other)?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &ParameterVector) -> Result<ParameterVector> {
        self.check(other)?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn scale(&self, c: f64) -> ParameterVector {
        ParameterVector {
            values: self.values.iter().map(|v| v * c).collect(),
            layout: self.layout.clone(),
        }
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &ParameterVector) -> Result<()> {
        self.check(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParameterVector) -> Result<f64> {
        self.check(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self + alpha * (end - self)`, evaluated element-wise as
    /// `(1 - alpha) * a + alpha * b` so that both endpoints are reproduced exactly.
    pub fn lerp(&self, end: &ParameterVector, alpha: f64) -> Result<ParameterVector> {
        self.check(end)?;
        Ok(self.zip_map(end, |a, b| (1.0 - alpha) * a + alpha * b))
    }

    fn zip_map(&self, other: &ParameterVector, f: impl Fn(f64, f64) -> f64) -> ParameterVector {
        ParameterVector {
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
            layout: self.layout.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::{Activation, LossKind};

    fn layout() -> Arc<Layout> {
        Arc::new(Layout::from_shapes([("a", vec![2, 3]), ("b", vec![4])]))
    }

    #[test]
    fn network_layout_covers_all_parameters() {
        let spec = NetworkSpec::new(vec![5, 4, 3, 2], Activation::Relu, LossKind::Mse)
            .with_batch_norm(true);
        let layout = Layout::for_spec(&spec);
        layout.validate().unwrap();
        // 5*4 + 2*4 + 4*3 + 2*3 + 3*2 + 2
        assert_eq!(layout.total_len(), 20 + 8 + 12 + 6 + 6 + 2);
        let slots = layout.layer_slots(&spec).unwrap();
        assert!(slots[0].bias.is_none() && slots[0].gamma.is_some());
        assert!(slots[2].bias.is_some() && slots[2].gamma.is_none());
    }

    #[test]
    fn length_must_match_layout() {
        assert!(ParameterVector::new(vec![0.0; 9], layout()).is_err());
        assert!(ParameterVector::new(vec![0.0; 10], layout()).is_ok());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let a = ParameterVector::zeros(layout());
        let b = ParameterVector::zeros(Arc::new(Layout::from_shapes([("a", vec![10])])));
        assert!(matches!(a.add(&b), Err(Error::LayoutMismatch)));
    }

    #[test]
    fn lerp_hits_endpoints_exactly() {
        let a = ParameterVector::new((0..10).map(|i| i as f64 * 0.1).collect(), layout()).unwrap();
        let b = ParameterVector::new((0..10).map(|i| (i as f64).sin()).collect(), layout()).unwrap();
        assert_eq!(a.lerp(&b, 0.0).unwrap(), a);
        assert_eq!(a.lerp(&b, 1.0).unwrap(), b);
    }
}
