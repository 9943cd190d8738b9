//! Small RGB image value type shared by the data generator, the sampler, and
//! the metrics. Pixels are f64 in [0,1], stored row-major, channel-interleaved.

/// An H×W RGB image with f64 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn zeros(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w * Self::CHANNELS],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * Self::CHANNELS, "image buffer length");
        Image { h, w, data }
    }

    /// Converts file pixels (f32 little-endian storage) exactly into f64.
    pub fn from_f32(h: usize, w: usize, data: &[f32]) -> Self {
        assert_eq!(data.len(), h * w * Self::CHANNELS, "image buffer length");
        Image {
            h,
            w,
            data: data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.w + x) * Self::CHANNELS + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.w + x) * Self::CHANNELS + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Image {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// One grayscale plane (Rec.601 luma) as a flat H×W buffer.
    pub fn luma(&self) -> Vec<f64> {
        (0..self.h * self.w)
            .map(|i| {
                0.299 * self.data[i * 3] + 0.587 * self.data[i * 3 + 1] + 0.114 * self.data[i * 3 + 2]
            })
            .collect()
    }
}
