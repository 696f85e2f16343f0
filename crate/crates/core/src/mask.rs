//! Packed binary image masks.

use crate::error::{Error, Result};

/// A `width × height` binary mask stored as packed 64-bit words, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("count", &self.count())
            .finish()
    }
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// Builds a mask from per-pixel flags in row-major order.
    pub fn from_flags(width: usize, height: usize, flags: &[bool]) -> Result<Self> {
        if flags.len() != width * height {
            return Err(Error::invalid(format!(
                "expected {} flags for a {width}x{height} mask, got {}",
                width * height,
                flags.len()
            )));
        }
        let mut m = Self::new(width, height);
        for (i, &b) in flags.iter().enumerate() {
            if b {
                m.set_index(i, true);
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set_index(&mut self, i: usize, value: bool) {
        let bit = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.get_index(y * self.width + x)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.set_index(y * self.width + x, value)
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Row-major indices of set pixels, ascending.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        let n = self.len();
        self.words.iter().enumerate().flat_map(move |(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + b)
            })
            .filter(move |&i| i < n)
        })
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        debug_assert!(self.same_shape(other));
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_count(&self, other: &Mask) -> usize {
        debug_assert!(self.same_shape(other));
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    /// Intersection over union; two empty masks have IoU 1.
    pub fn iou(&self, other: &Mask) -> f64 {
        let u = self.union_count(other);
        if u == 0 {
            return 1.0;
        }
        self.intersection_count(other) as f64 / u as f64
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & !b == 0)
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn intersect_with(&mut self, other: &Mask) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= b;
        }
    }

    pub fn complement(&self) -> Mask {
        let mut m = self.clone();
        for w in &mut m.words {
            *w = !*w;
        }
        m.clear_tail();
        m
    }

    fn clear_tail(&mut self) {
        let n = self.len();
        if n % 64 != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << (n % 64)) - 1;
            }
        }
    }

    /// Square-structuring-element dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        self.morph(radius, true)
    }

    /// Square-structuring-element erosion by `radius` pixels. Pixels outside
    /// the image count as unset.
    pub fn erode(&self, radius: usize) -> Mask {
        self.morph(radius, false)
    }

    fn morph(&self, radius: usize, dilate: bool) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width as isize, self.height as isize);
        let r = radius as isize;
        Mask::from_fn(self.width, self.height, |x, y| {
            let (x, y) = (x as isize, y as isize);
            let mut any = false;
            let mut all = true;
            for yy in y - r..=y + r {
                for xx in x - r..=x + r {
                    let v = xx >= 0 && yy >= 0 && xx < w && yy < h && self.get(xx as usize, yy as usize);
                    any |= v;
                    all &= v;
                }
            }
            if dilate {
                any
            } else {
                all
            }
        })
    }

    /// Row-major bit stream, least-significant bit first, `ceil(W·H/8)` bytes.
    pub fn to_packed_bytes(&self) -> Vec<u8> {
        let n = self.len().div_ceil(8);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push((self.words[i / 8] >> ((i % 8) * 8)) as u8);
        }
        out
    }

    pub fn from_packed_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Mask> {
        let mut m = Mask::new(width, height);
        if bytes.len() != m.len().div_ceil(8) {
            return Err(Error::format(
                "mask",
                format!("expected {} packed bytes, got {}", m.len().div_ceil(8), bytes.len()),
            ));
        }
        for (i, &b) in bytes.iter().enumerate() {
            m.words[i / 8] |= (b as u64) << ((i % 8) * 8);
        }
        m.clear_tail();
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_and_indices_agree() {
        let m = Mask::from_fn(13, 7, |x, y| (x * 3 + y) % 5 == 0);
        let idx: Vec<usize> = m.indices().collect();
        assert_eq!(idx.len(), m.count());
        assert!(idx.iter().all(|&i| m.get_index(i)));
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn complement_does_not_leak_past_the_end() {
        let m = Mask::new(5, 5);
        assert_eq!(m.complement().count(), 25);
    }

    #[test]
    fn packed_round_trip() {
        let m = Mask::from_fn(17, 9, |x, y| (x ^ y) & 1 == 1);
        let back = Mask::from_packed_bytes(17, 9, &m.to_packed_bytes()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn dilate_then_erode_a_square() {
        let m = Mask::from_fn(10, 10, |x, y| (3..6).contains(&x) && (3..6).contains(&y));
        assert_eq!(m.dilate(1).count(), 25);
        assert_eq!(m.erode(1).count(), 1);
        assert_eq!(m.dilate(1).erode(1), m);
    }

    #[test]
    fn iou_basics() {
        let a = Mask::from_fn(4, 4, |x, _| x < 2);
        let b = Mask::from_fn(4, 4, |x, _| x < 3);
        assert!((a.iou(&b) - 8.0 / 12.0).abs() < 1e-12);
        assert!(a.is_subset_of(&b));
        assert_eq!(Mask::new(3, 3).iou(&Mask::new(3, 3)), 1.0);
    }
}
