//! Dense 2-D deformation fields and the Middlebury `.flo` container.

use std::io::Write;
use std::path::Path;

use ndarray::{Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const FLO_MAGIC: f32 = 202021.25;

/// `2 × H × W` displacement field in pixels, channels `(dx, dy)`.
///
/// Backward convention: a warp with this field produces `out(p) = in(p + F(p))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    data: Array3<T>,
}

impl<T: Real> FlowField<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        if data.dim().0 != 2 {
            return Err(Error::shape("flow channels", 2, data.dim().0));
        }
        Ok(FlowField { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            data: Array3::zeros((2, height, width)),
        }
    }

    pub fn constant(height: usize, width: usize, dx: T, dy: T) -> Self {
        let mut data = Array3::zeros((2, height, width));
        data.index_axis_mut(Axis(0), 0).fill(dx);
        data.index_axis_mut(Axis(0), 1).fill(dy);
        FlowField { data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<T> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    pub fn dx(&self) -> ArrayView2<'_, T> {
        self.data.index_axis(Axis(0), 0)
    }

    pub fn dy(&self) -> ArrayView2<'_, T> {
        self.data.index_axis(Axis(0), 1)
    }

    pub fn at(&self, y: usize, x: usize) -> (T, T) {
        (self.data[[0, y, x]], self.data[[1, y, x]])
    }

    pub fn scaled(&self, factor: T) -> Self {
        FlowField {
            data: self.data.mapv(|v| v * factor),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn magnitudes(&self) -> impl Iterator<Item = T> + '_ {
        self.dx().into_iter().zip(self.dy()).map(|(&a, &b)| a.hypot(b))
    }

    pub fn mean_magnitude(&self) -> T {
        let n = T::of_usize(self.height() * self.width());
        self.magnitudes().sum::<T>() / n
    }

    pub fn max_magnitude(&self) -> T {
        self.magnitudes().fold(T::zero(), T::max)
    }

    pub fn cast<U: Real>(&self) -> FlowField<U> {
        FlowField {
            data: self.data.mapv(|v| U::lit(v.as_f64())),
        }
    }
}

/// Serializes as `.flo`: magic, `i32` width, `i32` height, then row-major `(dx, dy)` `f32` pairs.
pub fn encode_flo<T: Real>(flow: &FlowField<T>) -> Vec<u8> {
    let (h, w) = flow.size();
    let mut out = Vec::with_capacity(12 + h * w * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            out.extend_from_slice(&(dx.as_f64() as f32).to_le_bytes());
            out.extend_from_slice(&(dy.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_flo<T: Real>(bytes: &[u8]) -> Result<FlowField<T>> {
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| [b[0], b[1], b[2], b[3]])
            .ok_or_else(|| Error::Format("truncated .flo header".into()))
    };
    let magic = f32::from_le_bytes(word(0)?);
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!("bad .flo magic {magic}")));
    }
    let w = i32::from_le_bytes(word(1)?);
    let h = i32::from_le_bytes(word(2)?);
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!("invalid .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + w * h * 8;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            ".flo payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let payload = &bytes[12..];
    let mut data = Array3::zeros((2, h, w));
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        let (pix, c) = (i / 2, i % 2);
        data[[c, pix / w, pix % w]] = T::lit(v as f64);
    }
    Ok(FlowField { data })
}

pub fn write_flo<T: Real>(flow: &FlowField<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_flo(flow)).map_err(|e| Error::io(path, e))
}

pub fn read_flo<T: Real>(path: impl AsRef<Path>) -> Result<FlowField<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_built_two_by_two_file() {
        let values: [f32; 8] = [1.5, -2.0, 0.25, 3.0, -0.125, 7.0, 100.5, -1e-3];
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&202021.25f32.to_le_bytes());
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&2i32.to_le_bytes());
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let flow: FlowField<f32> = decode_flo(&bytes).unwrap();
        assert_eq!(flow.at(0, 0), (1.5, -2.0));
        assert_eq!(flow.at(0, 1), (0.25, 3.0));
        assert_eq!(flow.at(1, 0), (-0.125, 7.0));
        assert_eq!(flow.at(1, 1), (100.5, -1e-3));
        assert_eq!(encode_flo(&flow), bytes);
    }

    #[test]
    fn truncated_and_bad_magic_are_rejected() {
        let flow = FlowField::<f32>::constant(3, 4, 1.0, 2.0);
        let bytes = encode_flo(&flow);
        assert!(matches!(decode_flo::<f32>(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(decode_flo::<f32>(&bytes[..6]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(decode_flo::<f32>(&bad), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn flo_round_trip_is_bit_exact(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut state = seed;
            let data = Array3::from_shape_fn((2, h, w), |_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((state >> 32) as u32 & 0x7f7f_ffff) * if state & 1 == 0 { 1.0 } else { -1.0 }
            });
            let flow = FlowField::new(data).unwrap();
            let back: FlowField<f32> = decode_flo(&encode_flo(&flow)).unwrap();
            prop_assert!(flow.data().iter().zip(back.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
