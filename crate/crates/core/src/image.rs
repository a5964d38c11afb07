//! [`ImageTensor`]: the height × width × channels carrier used for images,
//! decomposition maps and noise fields.

use dr_autograd::{Tensor, Var};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// `data` is row-major `[height, width, channels]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Input(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Input(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Input(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite pixel value {bad}")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_size(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Mean absolute difference; shapes must agree exactly.
    pub fn mean_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::Input(format!("shape mismatch {:?} vs {:?}", self.dims(), other.dims())));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        Ok(s / self.data.len() as f64)
    }

    /// `R · L` with a 1-channel `L` multiplying every channel of `self`.
    pub fn mul_broadcast(&self, l: &ImageTensor) -> Result<ImageTensor> {
        if !self.same_size(l) || l.channels != 1 {
            return Err(Error::Input(format!("cannot broadcast {:?} over {:?}", l.dims(), self.dims())));
        }
        let c = self.channels;
        let data = self.data.iter().enumerate().map(|(i, v)| v * l.data[i / c]).collect();
        Ok(ImageTensor { data, ..self.clone() })
    }

    /// Channel-mean luminance as a 1-channel image.
    pub fn luminance(&self) -> ImageTensor {
        let c = self.channels;
        let data = self.data.chunks_exact(c).map(|p| p.iter().sum::<f64>() / c as f64).collect();
        ImageTensor { height: self.height, width: self.width, channels: 1, data }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageTensor> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Input(format!("crop {h}x{w}+{y0}+{x0} outside {}x{}", self.height, self.width)));
        }
        Self::from_fn(h, w, self.channels, |y, x, c| self.get(y0 + y, x0 + x, c))
    }

    /// Mirror-pads bottom and right edges (without repeating the edge pixel).
    pub fn reflect_pad(&self, bottom: usize, right: usize) -> Result<ImageTensor> {
        if bottom >= self.height.max(2) || right >= self.width.max(2) {
            return Err(Error::Input(format!(
                "image {}x{} too small to reflect-pad by {bottom}x{right}",
                self.height, self.width
            )));
        }
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        Self::from_fn(self.height + bottom, self.width + right, self.channels, |y, x, c| {
            self.get(reflect(y, self.height), reflect(x, self.width), c)
        })
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Self::stack(std::slice::from_ref(self)).expect("single image always stacks")
    }

    pub fn to_var(&self) -> Var {
        Var::constant(self.to_tensor())
    }

    /// Stacks equally-sized images into an `[N, C, H, W]` batch.
    pub fn stack(images: &[ImageTensor]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Input("empty image batch".into()))?;
        let (h, w, c) = first.dims();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dims() != (h, w, c) {
                return Err(Error::Input(format!("batch mixes {:?} and {:?}", first.dims(), img.dims())));
            }
            for ch in 0..c {
                data.extend(img.data.iter().skip(ch).step_by(c));
            }
        }
        Ok(Tensor::new(vec![images.len(), c, h, w], data)?)
    }

    /// Splits an `[N, C, H, W]` batch back into images.
    pub fn unstack(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let (n, c, h, w) = t.dims4()?;
        let plane = h * w;
        (0..n)
            .map(|i| {
                let src = &t.data()[i * c * plane..(i + 1) * c * plane];
                let mut data = vec![0.0; c * plane];
                for ch in 0..c {
                    for p in 0..plane {
                        data[p * c + ch] = src[ch * plane + p];
                    }
                }
                ImageTensor::new(h, w, c, data)
            })
            .collect()
    }

    /// The single image of a batch of one.
    pub fn from_tensor(t: &Tensor) -> Result<ImageTensor> {
        let mut v = Self::unstack(t)?;
        if v.len() != 1 {
            return Err(Error::Input(format!("expected a batch of one, got {}", v.len())));
        }
        Ok(v.remove(0))
    }
}
