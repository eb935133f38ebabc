use crate::error::{Error, Result};

/// Dense row-major `f32` array. The last axis is the fastest-varying one.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("extents must be >= 1, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, data has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor extents must be >= 1, got {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// View a `H×W×C` tensor as a feature map.
    pub fn map_view(&self) -> Result<MapView<'_>> {
        match *self.shape.as_slice() {
            [h, w, c] => Ok(MapView::new(h, w, c, &self.data)),
            _ => Err(Error::shape("map_view", format!("expected H×W×C, got {:?}", self.shape))),
        }
    }

    /// View frame `t` of a `T×H×W×C` tensor.
    pub fn frame(&self, t: usize) -> MapView<'_> {
        let [frames, h, w, c] = *self.shape.as_slice() else {
            panic!("frame() needs a T×H×W×C tensor, got {:?}", self.shape);
        };
        assert!(t < frames, "frame {t} out of range ({frames} frames)");
        let n = h * w * c;
        MapView::new(h, w, c, &self.data[t * n..(t + 1) * n])
    }
}

/// Borrowed `H×W×C` feature map.
#[derive(Clone, Copy, Debug)]
pub struct MapView<'a> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: &'a [f32],
}

impl<'a> MapView<'a> {
    pub fn new(height: usize, width: usize, channels: usize, data: &'a [f32]) -> Self {
        assert_eq!(data.len(), height * width * channels, "map view size mismatch");
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &'a [f32] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    /// Bilinear sample at `(x, y)` with coordinates clamped to the map.
    #[inline]
    pub fn sample_into(&self, x: f32, y: f32, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.channels);
        let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, (self.width - 1) as f32) };
        let y = if y.is_nan() { 0.0 } else { y.clamp(0.0, (self.height - 1) as f32) };
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let (a, b) = (self.cell(y0, x0), self.cell(y0, x1));
        let (c, d) = (self.cell(y1, x0), self.cell(y1, x1));
        let (w00, w01) = ((1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx);
        let (w10, w11) = (fy * (1.0 - fx), fy * fx);
        for (k, o) in out.iter_mut().enumerate() {
            *o = w00 * a[k] + w01 * b[k] + w10 * c[k] + w11 * d[k];
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.channels], self.data.to_vec())
            .expect("view extents are valid")
    }
}
