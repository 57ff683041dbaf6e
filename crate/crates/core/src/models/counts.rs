use std::collections::HashMap;
use std::hash::Hash;

/// Sparse weighted counts for one conditioning context, kept sorted by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Row {
    entries: Vec<(u32, f64)>,
    total: f64,
    discount: f64,
    kept: f64,
}

impl Row {
    /// An empty row that keeps its backoff weight at `discount` up to date.
    pub fn with_discount(discount: f64) -> Self {
        Row {
            discount,
            ..Row::default()
        }
    }

    fn clipped(&self, c: f64) -> f64 {
        (c - self.discount).max(0.0)
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn get(&self, id: u32) -> f64 {
        match self.entries.binary_search_by_key(&id, |e| e.0) {
            Ok(k) => self.entries[k].1,
            Err(_) => 0.0,
        }
    }

    /// Adds `w` (possibly negative) to the count of `id`, clipping at zero.
    pub fn add(&mut self, id: u32, w: f64) {
        match self.entries.binary_search_by_key(&id, |e| e.0) {
            Ok(k) => {
                let old = self.entries[k].1;
                let new = (old + w).max(0.0);
                self.entries[k].1 = new;
                self.total += new - old;
                self.kept += self.clipped(new) - self.clipped(old);
            }
            Err(k) => {
                if w > 0.0 {
                    self.entries.insert(k, (id, w));
                    self.total += w;
                    self.kept += self.clipped(w);
                }
            }
        }
        if self.total < 1e-12 {
            self.recount();
        }
    }

    /// Moves `step` of the row's mass onto `id` (off it when negative,
    /// clipped at zero), then rescales so the total is unchanged.
    pub fn shift(&mut self, id: u32, step: f64) {
        let total = self.total;
        self.add(id, step * total);
        let moved: f64 = self.entries.iter().map(|e| e.1).sum();
        if moved > 0.0 {
            for e in &mut self.entries {
                e.1 *= total / moved;
            }
        }
        self.recount();
    }

    fn recount(&mut self) {
        self.total = self.entries.iter().map(|e| e.1).sum();
        self.kept = self.entries.iter().map(|e| self.clipped(e.1)).sum();
    }

    pub fn is_live(&self) -> bool {
        self.total > 1e-12
    }

    /// Mass left for the lower order after subtracting `discount` from
    /// every count (floored at zero).
    pub fn backoff_weight(&self, discount: f64) -> f64 {
        let kept: f64 = if discount == self.discount {
            self.kept
        } else {
            self.entries.iter().map(|e| (e.1 - discount).max(0.0)).sum()
        };
        (1.0 - kept / self.total).clamp(0.0, 1.0)
    }

    /// Interpolated probability of `id` given the lower-order estimate.
    pub fn interpolate(&self, id: u32, discount: f64, lower: f64) -> f64 {
        let c = (self.get(id) - discount).max(0.0);
        c / self.total + self.backoff_weight(discount) * lower
    }

    /// Applies this row's interpolation to a dense lower-order vector in place.
    pub fn interpolate_dense(&self, discount: f64, dist: &mut [f64]) {
        let gamma = self.backoff_weight(discount);
        for p in dist.iter_mut() {
            *p *= gamma;
        }
        for &(id, c) in &self.entries {
            dist[id as usize] += (c - discount).max(0.0) / self.total;
        }
    }
}

/// A table of count rows keyed by conditioning context.
#[derive(Clone, Debug)]
pub struct Counts<K> {
    rows: HashMap<K, Row>,
    discount: f64,
}

impl<K> Default for Counts<K> {
    fn default() -> Self {
        Counts::with_discount(0.0)
    }
}

impl<K> Counts<K> {
    pub fn with_discount(discount: f64) -> Self {
        Counts {
            rows: HashMap::new(),
            discount,
        }
    }
}

impl<K: Hash + Eq + Clone + Ord> Counts<K> {
    pub fn add(&mut self, key: &K, id: u32, w: f64) {
        if let Some(row) = self.rows.get_mut(key) {
            row.add(id, w);
        } else if w > 0.0 {
            let mut row = Row::with_discount(self.discount);
            row.add(id, w);
            self.rows.insert(key.clone(), row);
        }
    }

    /// [`Row::shift`] on an existing row.
    pub fn shift(&mut self, key: &K, id: u32, step: f64) {
        if let Some(row) = self.rows.get_mut(key) {
            row.shift(id, step);
        }
    }

    pub fn row(&self, key: &K) -> Option<&Row> {
        self.rows.get(key).filter(|r| r.is_live())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows in key order.
    pub fn sorted(&self) -> Vec<(&K, &Row)> {
        let mut v: Vec<_> = self.rows.iter().collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_and_totals() {
        let mut r = Row::default();
        r.add(3, 2.0);
        r.add(1, 1.0);
        assert_eq!(r.entries(), &[(1, 1.0), (3, 2.0)]);
        r.add(3, -5.0);
        assert_eq!(r.get(3), 0.0);
        assert_eq!(r.total(), 1.0);
        r.add(7, -1.0);
        assert_eq!(r.get(7), 0.0);
    }

    #[test]
    fn interpolation_sums_to_one() {
        let mut r = Row::with_discount(0.5);
        r.add(0, 3.0);
        r.add(2, 0.25);
        let lower = [0.2, 0.3, 0.5];
        let total: f64 = (0..3).map(|i| r.interpolate(i, 0.5, lower[i as usize])).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut dense = lower;
        r.interpolate_dense(0.5, &mut dense);
        for i in 0..3 {
            assert!((dense[i] - r.interpolate(i as u32, 0.5, lower[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_moves_mass() {
        let mut r = Row::default();
        r.add(0, 3.0);
        r.add(1, 1.0);
        r.shift(1, 0.5);
        assert_eq!(r.total(), 4.0);
        assert!((r.get(1) - 4.0 / 3.0 * 3.0 / 2.0 * 1.0).abs() < 1e-12);
        r.shift(1, -1.0);
        assert_eq!(r.get(1), 0.0);
        assert_eq!(r.total(), 4.0);
    }

    #[test]
    fn repeated_relative_updates_stay_normalized() {
        let mut r = Row::with_discount(0.5);
        for id in 0..6 {
            r.add(id, 1.0 + id as f64 * 0.37);
        }
        let start = r.total();
        for step in 0..20_000u32 {
            let sign = if step % 3 == 0 { -1.0 } else { 1.0 };
            r.shift(step % 6, sign * 0.2);
        }
        assert!((r.total() - start).abs() < 1e-9 * start);
        let lower = [1.0 / 6.0; 6];
        let total: f64 = (0..6).map(|i| r.interpolate(i, 0.5, lower[i as usize])).sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }
}
