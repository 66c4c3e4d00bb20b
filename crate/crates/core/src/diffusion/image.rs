use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 8;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_SIDE * IMAGE_SIDE * IMAGE_CHANNELS;
const BACKGROUND: f64 = -1.0;

/// An 8×8 RGB image stored channel-last, nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyImage(Vec<f64>);

impl ToyImage {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.len() != IMAGE_LEN {
            return Err(Error::DimensionMismatch(format!("image needs {IMAGE_LEN} values, got {}", data.len())));
        }
        Ok(Self(data))
    }

    pub fn data(&self) -> &[f64] {
        &self.0
    }

    pub fn into_data(self) -> Vec<f64> {
        self.0
    }

    pub fn clamped(&self) -> Self {
        Self(self.0.iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * IMAGE_SIDE + x) * IMAGE_CHANNELS;
        [self.0[i], self.0[i + 1], self.0[i + 2]]
    }

    /// Mean over pixels of the squared RGB distance.
    pub fn mean_sq_pixel_distance(&self, other: &Self) -> f64 {
        let s: f64 = self.0.iter().zip(&other.0).map(|(a, b)| (a - b).powi(2)).sum();
        s / (IMAGE_SIDE * IMAGE_SIDE) as f64
    }

    /// Pixelwise mean of several images.
    pub fn mean(images: &[Self]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidConfig("mean of zero images".into()));
        }
        let mut acc = vec![0.0; IMAGE_LEN];
        for im in images {
            for (a, v) in acc.iter_mut().zip(&im.0) {
                *a += v;
            }
        }
        let n = images.len() as f64;
        Ok(Self(acc.into_iter().map(|a| a / n).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Ring,
    Hbar,
    Vbar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }
}

impl Shape {
    /// Whether local coordinate `(u, v)` of the 6×6 glyph box is inked.
    fn covers(self, u: usize, v: usize) -> bool {
        let inside = u <= 5 && v <= 5;
        inside
            && match self {
                Shape::Square => true,
                Shape::Ring => !((1..=4).contains(&u) && (1..=4).contains(&v)),
                Shape::Hbar => (2..=3).contains(&v),
                Shape::Vbar => (2..=3).contains(&u),
            }
    }
}

/// How a concept is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RenderSpec {
    Glyph { shape: Shape, color: Color },
    /// Uniform mid-gray canvas.
    Blank,
}

/// Offsets of the glyph box: `{1, 2} × {1, 2}`.
pub const JITTERS: [(usize, usize); 4] = [(1, 1), (2, 1), (1, 2), (2, 2)];

impl RenderSpec {
    pub fn render(&self, jitter: (usize, usize)) -> ToyImage {
        let mut data = vec![BACKGROUND; IMAGE_LEN];
        match *self {
            RenderSpec::Blank => data.iter_mut().for_each(|v| *v = 0.0),
            RenderSpec::Glyph { shape, color } => {
                let rgb = color.rgb();
                for y in 0..IMAGE_SIDE {
                    for x in 0..IMAGE_SIDE {
                        if x < jitter.0 || y < jitter.1 {
                            continue;
                        }
                        if shape.covers(x - jitter.0, y - jitter.1) {
                            let i = (y * IMAGE_SIDE + x) * IMAGE_CHANNELS;
                            data[i..i + 3].copy_from_slice(&rgb);
                        }
                    }
                }
            }
        }
        ToyImage(data)
    }

    /// All jittered renderings.
    pub fn variants(&self) -> Vec<ToyImage> {
        JITTERS.iter().map(|&j| self.render(j)).collect()
    }

    /// Mean rendering over jitters.
    pub fn prototype(&self) -> ToyImage {
        ToyImage::mean(&self.variants()).expect("non-empty jitter set")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_stay_in_frame_and_in_range() {
        for shape in [Shape::Square, Shape::Ring, Shape::Hbar, Shape::Vbar] {
            for j in JITTERS {
                let im = RenderSpec::Glyph { shape, color: Color::Red }.render(j);
                assert!(im.data().iter().all(|v| (-1.0..=1.0).contains(v)));
                let inked = (0..64).filter(|i| im.data()[i * 3] > 0.0).count();
                let expect = match shape {
                    Shape::Square => 36,
                    Shape::Ring => 20,
                    Shape::Hbar | Shape::Vbar => 12,
                };
                assert_eq!(inked, expect, "{shape:?} at {j:?}");
            }
        }
    }

    #[test]
    fn blank_is_uniform_gray() {
        assert!(RenderSpec::Blank.render((1, 1)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distance_is_zero_on_self_and_symmetric() {
        let a = RenderSpec::Glyph { shape: Shape::Ring, color: Color::Blue }.prototype();
        let b = RenderSpec::Glyph { shape: Shape::Vbar, color: Color::Yellow }.render((2, 1));
        assert_eq!(a.mean_sq_pixel_distance(&a), 0.0);
        assert_eq!(a.mean_sq_pixel_distance(&b), b.mean_sq_pixel_distance(&a));
    }
}
