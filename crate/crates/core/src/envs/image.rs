/// 8-bit image stored row-major with interleaved channels (H×W×C).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0; height * width * channels],
        }
    }

    pub fn from_raw(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == height * width * channels).then_some(Self {
            height,
            width,
            channels,
            data,
        })
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, value: &[u8]) {
        let i = (y * self.width + x) * self.channels;
        self.data[i..i + value.len()].copy_from_slice(value);
    }

    /// Appends `other`'s channels after this image's, pixel by pixel.
    pub fn stack_channels(&self, other: &Image) -> Image {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let c = self.channels + other.channels;
        let mut data = Vec::with_capacity(self.height * self.width * c);
        for (a, b) in self
            .data
            .chunks(self.channels)
            .zip(other.data.chunks(other.channels))
        {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        Image {
            height: self.height,
            width: self.width,
            channels: c,
            data,
        }
    }

    /// Channel-major floats in [0,1], i.e. a `[C,H,W]` tensor body.
    pub fn write_chw<T: slotlab_tensor::Scalar>(&self, out: &mut [T]) {
        let plane = self.height * self.width;
        debug_assert_eq!(out.len(), plane * self.channels);
        let inv = T::of(1.0 / 255.0);
        for (p, px) in self.data.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + p] = T::of(v as f64) * inv;
            }
        }
    }
}
