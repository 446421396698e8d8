use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{DiffTensor, Tape};

/// Named, ordered parameter storage shared by both Siamese branches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.names.push(name.into());
        self.shapes.push(shape.to_vec());
        self.values.push(values);
        self.names.len() - 1
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) initialisation.
    pub fn push_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
        self.push(name, shape, values)
    }

    pub fn push_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> usize {
        let n = shape.iter().product();
        self.push(name, shape, vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn values(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn values_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.names
            .iter()
            .zip(&self.shapes)
            .zip(&self.values)
            .map(|((n, s), v)| (n.as_str(), s.as_slice(), v.as_slice()))
    }

    /// Records every parameter as a tracked leaf on `tape`, in order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<DiffTensor<'t>> {
        self.shapes
            .iter()
            .zip(&self.values)
            .map(|(s, v)| tape.param(s, v.clone()).expect("parameter shapes are validated on insert"))
            .collect()
    }

    /// Gradients of bound handles after `backward`; zeros where a parameter
    /// did not take part in the loss.
    pub fn collect_grads(&self, bound: &[DiffTensor<'_>]) -> Vec<Vec<f64>> {
        bound
            .iter()
            .zip(&self.values)
            .map(|(h, v)| h.grad().unwrap_or_else(|| vec![0.0; v.len()]))
            .collect()
    }

    /// Zero-filled gradient buffers matching this set.
    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.values.iter().map(|v| vec![0.0; v.len()]).collect()
    }

    /// Copies values from `other`, which must have the same names and shapes.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names || self.shapes != other.shapes {
            return Err(Error::CheckpointMismatch(describe_mismatch(self, other)));
        }
        self.values.clone_from(&other.values);
        Ok(())
    }
}

fn describe_mismatch(want: &ParamSet, got: &ParamSet) -> String {
    if want.len() != got.len() {
        return format!("expected {} parameter arrays, found {}", want.len(), got.len());
    }
    for i in 0..want.len() {
        if want.names[i] != got.names[i] {
            return format!("parameter {i}: expected `{}`, found `{}`", want.names[i], got.names[i]);
        }
        if want.shapes[i] != got.shapes[i] {
            return format!(
                "parameter `{}`: expected shape {:?}, found {:?}",
                want.names[i], want.shapes[i], got.shapes[i]
            );
        }
    }
    "parameter sets differ".into()
}
