use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Real-valued `H×W` disparity field with a per-pixel validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap<T = f32> {
    width: usize,
    height: usize,
    values: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Real> DisparityMap<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if values.len() != n || valid.len() != n {
            return Err(Error::config(format!(
                "disparity map {}x{} needs {} values and mask entries, got {} and {}",
                width,
                height,
                n,
                values.len(),
                valid.len()
            )));
        }
        Ok(DisparityMap {
            width,
            height,
            values,
            valid,
        })
    }

    /// Every pixel valid.
    pub fn dense(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        Self::new(width, height, values, vec![true; width * height])
    }

    pub fn constant(width: usize, height: usize, value: T) -> Self {
        DisparityMap {
            width,
            height,
            values: vec![value; width * height],
            valid: vec![true; width * height],
        }
    }

    /// Ground truth from raw values: non-finite, negative or `>= max_disp`
    /// entries are marked invalid.
    pub fn from_ground_truth(width: usize, height: usize, values: Vec<T>, max_disp: T) -> Result<Self> {
        let valid = values
            .iter()
            .map(|&d| d.is_finite() && d >= T::zero() && d < max_disp)
            .collect();
        Self::new(width, height, values, valid)
    }

    /// Interprets a `1×H×W` tensor as a dense map.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 1 {
            return Err(Error::config(format!("disparity tensor must have 1 channel, got {c}")));
        }
        Self::dense(w, h, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![1, self.height, self.width], self.values.clone())
            .expect("dimensions are consistent by construction")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_mut(&mut self) -> &mut [bool] {
        &mut self.valid
    }

    pub fn get(&self, u: usize, v: usize) -> T {
        self.values[v * self.width + u]
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    pub fn same_dims<U: Real>(&self, other: &DisparityMap<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn cast<U: Real>(&self) -> DisparityMap<U> {
        DisparityMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| U::lit(v.as_f64())).collect(),
            valid: self.valid.clone(),
        }
    }
}
