//! Banded LU with partial pivoting for the symmetric-pattern KKT systems
//! produced by stage-stacked programs. A dense system is the special case
//! `kl = ku = n − 1`.

#[derive(Debug, Clone)]
pub(crate) struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
    piv: Vec<usize>,
}

impl BandLu {
    pub(crate) fn new(n: usize, kl: usize, ku: usize) -> Self {
        let kl = kl.min(n.saturating_sub(1));
        let ku = ku.min(n.saturating_sub(1));
        // Row swaps push the upper bandwidth of U up to kl + ku.
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
            piv: vec![0; n],
        }
    }

    pub(crate) fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.width + (j + self.kl - i)
    }

    pub(crate) fn clear(&mut self) {
        self.data.fill(0.0);
    }

    #[inline]
    pub(crate) fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// In-place factorization. Returns `false` on a (numerically) zero pivot.
    pub(crate) fn factor(&mut self) -> bool {
        let n = self.n;
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !scale.is_finite() {
            return false;
        }
        let tiny = scale.max(1.0) * 1e-15;
        for k in 0..n {
            let last_row = (k + self.kl).min(n - 1);
            let last_col = (k + self.kl + self.ku).min(n - 1);
            let mut p = k;
            let mut best = self.data[self.idx(k, k)].abs();
            for i in k + 1..=last_row {
                let a = self.data[self.idx(i, k)].abs();
                if a > best {
                    best = a;
                    p = i;
                }
            }
            if !(best > tiny) {
                return false;
            }
            self.piv[k] = p;
            if p != k {
                for j in k..=last_col {
                    let a = self.idx(k, j);
                    let b = self.idx(p, j);
                    self.data.swap(a, b);
                }
            }
            let pivot = self.data[self.idx(k, k)];
            for i in k + 1..=last_row {
                let ik = self.idx(i, k);
                let l = self.data[ik] / pivot;
                self.data[ik] = l;
                if l != 0.0 {
                    for j in k + 1..=last_col {
                        let kj = self.data[self.idx(k, j)];
                        let ij = self.idx(i, j);
                        self.data[ij] -= l * kj;
                    }
                }
            }
        }
        true
    }

    pub(crate) fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            if bk != 0.0 {
                for i in k + 1..=(k + self.kl).min(n - 1) {
                    b[i] -= self.data[self.idx(i, k)] * bk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for j in k + 1..=(k + self.kl + self.ku).min(n - 1) {
                s -= self.data[self.idx(k, j)] * b[j];
            }
            b[k] = s / self.data[self.idx(k, k)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
    }

    #[test]
    fn banded_solve_matches_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, bw) in &[(1usize, 0usize), (5, 1), (12, 3), (30, 29), (40, 5)] {
            let mut dense = vec![vec![0.0; n]; n];
            let mut lu = BandLu::new(n, bw, bw);
            for i in 0..n {
                for j in 0..n {
                    if i.abs_diff(j) <= bw {
                        // small even-row diagonals force pivoting
                        let v = match (i == j, i % 2) {
                            (true, 0) if bw > 0 => 1e-3,
                            (true, _) => 2.0,
                            _ => rng.gen_range(-1.0..1.0),
                        };
                        dense[i][j] = v;
                        lu.add(i, j, v);
                    }
                }
            }
            let x: Vec<f64> = (0..n).map(|i| i as f64 - 1.5).collect();
            let mut b = dense_matvec(&dense, &x);
            assert!(lu.factor(), "n={n} bw={bw}");
            lu.solve(&mut b);
            for (got, want) in b.iter().zip(&x) {
                assert!((got - want).abs() < 1e-9, "n={n} bw={bw}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut lu = BandLu::new(2, 1, 1);
        lu.add(0, 0, 1.0);
        lu.add(0, 1, 2.0);
        lu.add(1, 0, 2.0);
        lu.add(1, 1, 4.0);
        assert!(!lu.factor());
    }
}
