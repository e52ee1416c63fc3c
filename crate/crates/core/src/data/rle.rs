//! Run-length coding of binary masks.
//!
//! Runs cover the image grid in row-major order and alternate between
//! background and foreground, always starting with a (possibly empty)
//! background run.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tight bounding box `[x0, y0, x1, y1]` with exclusive upper corner.
    pub fn bbox(&self) -> Option<[usize; 4]> {
        let mut bb: Option<[usize; 4]> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let b = bb.get_or_insert([x, y, x + 1, y + 1]);
                    b[0] = b[0].min(x);
                    b[1] = b[1].min(y);
                    b[2] = b[2].max(x + 1);
                    b[3] = b[3].max(y + 1);
                }
            }
        }
        bb
    }

    pub fn encode(&self) -> Rle {
        Rle::encode(&self.bits)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub runs: Vec<u32>,
}

impl Rle {
    pub fn encode(bits: &[bool]) -> Self {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        Self { runs }
    }

    /// Total number of cells covered by the runs.
    pub fn len(&self) -> usize {
        self.runs.iter().map(|&r| r as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of foreground cells.
    pub fn area(&self) -> usize {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as usize).sum()
    }

    /// Decodes onto a `width × height` grid; `None` unless the runs cover the
    /// grid exactly.
    pub fn decode(&self, width: usize, height: usize) -> Option<BinaryMask> {
        if self.len() != width * height {
            return None;
        }
        let mut bits = Vec::with_capacity(width * height);
        for (i, &r) in self.runs.iter().enumerate() {
            let v = i % 2 == 1;
            bits.extend(std::iter::repeat_n(v, r as usize));
        }
        Some(BinaryMask {
            width,
            height,
            bits,
        })
    }

    /// Foreground cell indices, in row-major order.
    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        let mut start = 0usize;
        self.runs.iter().enumerate().flat_map(move |(i, &r)| {
            let s = start;
            start += r as usize;
            let range = if i % 2 == 1 { s..s + r as usize } else { 0..0 };
            range
        })
    }
}
