use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{Manifest, Split};
use crate::seed::keyed_order;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.2,
        }
    }
}

/// Train count for a class of `n` records: round half up of `train * n`.
pub fn train_count(n: usize, train: f64) -> usize {
    ((train * n as f64) + 0.5 + 1e-9).floor() as usize
}

/// Assign `train`/`val` per class. Within a class the records are ordered by
/// the keyed hash of `(seed, record_id)` and the first `train_count` become
/// training records, so the result does not depend on record order.
pub fn stratified_split(m: &Manifest, fractions: SplitFractions, seed: u64) -> Result<Manifest> {
    if fractions.train < 0.0
        || fractions.val < 0.0
        || (fractions.train + fractions.val - 1.0).abs() > 1e-9
    {
        return Err(Error::config(format!(
            "split fractions must be non-negative and sum to 1, got {} + {}",
            fractions.train, fractions.val
        )));
    }
    let groups = m.by_class();
    let mut assignment: HashMap<&str, Split> = HashMap::with_capacity(m.len());
    for (ci, group) in groups.iter().enumerate() {
        if group.len() < 2 {
            return Err(Error::data(format!(
                "class '{}' has {} record(s); at least 2 are needed to split",
                m.taxonomy.class_at(ci).class_id,
                group.len()
            )));
        }
        let n_train = train_count(group.len(), fractions.train);
        for (i, id) in keyed_order(seed, group.iter().map(|r| r.record_id.as_str()))
            .into_iter()
            .enumerate()
        {
            assignment.insert(
                id,
                if i < n_train {
                    Split::Train
                } else {
                    Split::Val
                },
            );
        }
    }
    let records = m
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.split = Some(assignment[r.record_id.as_str()]);
            r
        })
        .collect();
    Ok(m.derive("split", records))
}

/// Records of `m` with the given split, as a new manifest.
pub fn select_split(m: &Manifest, split: Split) -> Manifest {
    let mut out = m.clone();
    out.records.retain(|r| r.split == Some(split));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::ImageRecord;
    use crate::taxonomy::ClassTaxonomy;
    use proptest::prelude::*;

    fn fixture(per_class: usize) -> Manifest {
        let t = ClassTaxonomy::skin_default();
        let mut m = Manifest::new(t.clone(), "fixture");
        for c in t.ids() {
            for i in 0..per_class {
                m.records.push(ImageRecord::real(
                    format!("{c}-{i}"),
                    format!("{c}/{i}.png"),
                    c,
                ));
            }
        }
        m
    }

    fn counts(m: &Manifest, class: &str) -> (usize, usize) {
        let rs = m.records.iter().filter(|r| r.label == class);
        let (t, v): (Vec<_>, Vec<_>) = rs.partition(|r| r.split == Some(Split::Train));
        (t.len(), v.len())
    }

    #[test]
    fn ten_records_split_eight_two() {
        let t =
            ClassTaxonomy::new(vec![ClassTaxonomy::skin_default().class_at(0).clone()]).unwrap();
        let mut m = Manifest::new(t, "x");
        for i in 0..10 {
            m.records.push(ImageRecord::real(
                format!("{i}"),
                "p.png",
                "seborrheic_keratosis",
            ));
        }
        let s = stratified_split(&m, SplitFractions::default(), 4).unwrap();
        assert_eq!(counts(&s, "seborrheic_keratosis"), (8, 2));
    }

    #[test]
    fn five_hundred_per_class() {
        let s = stratified_split(&fixture(500), SplitFractions::default(), 11).unwrap();
        for c in s.taxonomy.ids() {
            assert_eq!(counts(&s, c), (400, 100));
        }
    }

    #[test]
    fn too_few_records_names_class() {
        let mut m = fixture(3);
        m.records
            .retain(|r| r.record_id != "lentigo-0" && r.record_id != "lentigo-1");
        let err = stratified_split(&m, SplitFractions::default(), 1).unwrap_err();
        assert!(err.to_string().contains("lentigo"));
    }

    #[test]
    fn only_split_field_changes() {
        let m = fixture(7);
        let s = stratified_split(&m, SplitFractions::default(), 2).unwrap();
        for (a, b) in m.records.iter().zip(&s.records) {
            let mut b = b.clone();
            b.split = None;
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(train_count(2, 0.8), 2);
        assert_eq!(train_count(3, 0.8), 2);
        assert_eq!(train_count(5, 0.5), 3);
        assert_eq!(train_count(10, 0.8), 8);
    }

    proptest! {
        #[test]
        fn split_ignores_record_order(per_class in 2usize..20, seed in any::<u64>(), rot in 0usize..100) {
            let m = fixture(per_class);
            let mut shuffled = m.clone();
            let k = rot % shuffled.records.len();
            shuffled.records.rotate_left(k);
            let a = stratified_split(&m, SplitFractions::default(), seed).unwrap();
            let b = stratified_split(&shuffled, SplitFractions::default(), seed).unwrap();
            let mut sa: Vec<_> = a.records.iter().map(|r| (r.record_id.clone(), r.split)).collect();
            let mut sb: Vec<_> = b.records.iter().map(|r| (r.record_id.clone(), r.split)).collect();
            sa.sort_by(|x, y| x.0.cmp(&y.0));
            sb.sort_by(|x, y| x.0.cmp(&y.0));
            prop_assert_eq!(sa, sb);
            for c in m.taxonomy.ids() {
                let (t, v) = counts(&a, c);
                prop_assert_eq!(t, train_count(per_class, 0.8));
                prop_assert_eq!(t + v, per_class);
            }
        }
    }
}
