use rand::seq::SliceRandom;

use super::corpus::ParallelPair;
use super::vocab::PAD;
use crate::error::{Error, Result};
use crate::seed;

/// Right-padded `[rows × width]` id matrix, `PAD` after each row's end.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl Padded {
    pub fn from_rows<R: AsRef<[usize]>>(rows: &[R]) -> Self {
        let lens: Vec<usize> = rows.iter().map(|r| r.as_ref().len()).collect();
        let width = lens.iter().copied().max().unwrap_or(0);
        let mut ids = Vec::with_capacity(lens.len() * width);
        for row in rows {
            let row = row.as_ref();
            ids.extend_from_slice(row);
            ids.extend(std::iter::repeat(PAD).take(width - row.len()));
        }
        Padded { ids, lens, width }
    }

    pub fn rows(&self) -> usize {
        self.lens.len()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.width..b * self.width + self.lens[b]]
    }

    /// Id at `(b, t)`, or `PAD` past the row end.
    pub fn at(&self, b: usize, t: usize) -> usize {
        if t < self.width {
            self.ids[b * self.width + t]
        } else {
            PAD
        }
    }

    /// `true` where a position holds a real token.
    pub fn mask(&self) -> Vec<bool> {
        self.lens
            .iter()
            .flat_map(|&l| (0..self.width).map(move |j| j < l))
            .collect()
    }

    /// Rows `idx`, re-padded to their own maximum width.
    pub fn select(&self, idx: &[usize]) -> Self {
        let rows: Vec<&[usize]> = idx.iter().map(|&b| self.row(b)).collect();
        Self::from_rows(&rows)
    }
}

/// Source and target matrices for a group of pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: Padded,
    pub tgt: Padded,
}

impl Batch {
    pub fn from_pairs(pairs: &[&ParallelPair]) -> Self {
        let src: Vec<&[usize]> = pairs.iter().map(|p| p.source.ids()).collect();
        let tgt: Vec<&[usize]> = pairs.iter().map(|p| p.target.ids()).collect();
        Batch {
            src: Padded::from_rows(&src),
            tgt: Padded::from_rows(&tgt),
        }
    }

    pub fn size(&self) -> usize {
        self.src.rows()
    }
}

/// Shuffles by `seed` and groups into batches; the last batch may be short.
pub fn make_batches(pairs: &[ParallelPair], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Input("batch_size must be at least 1".into()));
    }
    let mut order: Vec<&ParallelPair> = pairs.iter().collect();
    order.shuffle(&mut seed::rng(seed));
    Ok(order.chunks(batch_size).map(Batch::from_pairs).collect())
}

/// Batches in corpus order, for evaluation.
pub fn sequential_batches(pairs: &[ParallelPair], batch_size: usize) -> Vec<Batch> {
    let refs: Vec<&ParallelPair> = pairs.iter().collect();
    refs.chunks(batch_size.max(1)).map(Batch::from_pairs).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Direction, TokenSeq, EOS};

    fn pairs(n: usize) -> Vec<ParallelPair> {
        (0..n)
            .map(|i| ParallelPair {
                source: TokenSeq::new((4..5 + i).collect()).unwrap(),
                target: TokenSeq::new(vec![4 + i]).unwrap(),
                direction: Direction::LowToHigh,
            })
            .collect()
    }

    #[test]
    fn sizes_keep_short_tail() {
        let b = make_batches(&pairs(5), 2, 1).unwrap();
        let sizes: Vec<usize> = b.iter().map(Batch::size).collect();
        assert_eq!(sizes, [2, 2, 1]);
        assert!(make_batches(&pairs(5), 0, 1).is_err());
    }

    #[test]
    fn same_seed_same_order() {
        let p = pairs(9);
        assert_eq!(make_batches(&p, 2, 3).unwrap(), make_batches(&p, 2, 3).unwrap());
    }

    #[test]
    fn masks_match_lengths_and_padding_follows_eos() {
        for batch in make_batches(&pairs(7), 3, 2).unwrap() {
            let src = &batch.src;
            let m = src.mask();
            for b in 0..batch.size() {
                let row = &m[b * src.width..(b + 1) * src.width];
                assert_eq!(row.iter().filter(|&&x| x).count(), src.lens[b]);
                assert_eq!(*src.row(b).last().unwrap(), EOS);
                let full = &src.ids[b * src.width..(b + 1) * src.width];
                assert!(full[src.lens[b]..].iter().all(|&t| t == PAD));
            }
        }
    }
}
