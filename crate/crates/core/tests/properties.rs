mod common;

use std::collections::BTreeMap;

use common::{oracle_reward, FIELDS};
use kbq_core::dialog::EntitySet;
use kbq_core::kb::{execute, parse_query, Clause, KnowledgeBase, Query};
use kbq_core::{clip_buffer_probs, reward, BufferPair, RewardValue};
use proptest::prelude::*;

const POOLS: [&[&str]; 4] = [
    &["r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7"],
    &["thai", "greek", "french", "indian"],
    &["cheap", "moderate", "expensive"],
    &["north", "south", "centre"],
];

fn kb_strategy() -> impl Strategy<Value = KnowledgeBase> {
    prop::collection::vec((0..4usize, 0..3usize, 0..3usize), 1..8).prop_map(|rows| {
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(i, (f, p, a))| {
                vec![
                    format!("r{i}"),
                    POOLS[1][f].into(),
                    POOLS[2][p].into(),
                    POOLS[3][a].into(),
                ]
            })
            .collect();
        KnowledgeBase::new(FIELDS.map(String::from).to_vec(), rows).unwrap()
    })
}

fn clauses_strategy() -> impl Strategy<Value = BTreeMap<usize, usize>> {
    prop::collection::btree_map(0..4usize, 0..8usize, 0..=3)
}

fn to_query(clauses: &BTreeMap<usize, usize>) -> Query {
    let cs = clauses
        .iter()
        .map(|(&f, &v)| Clause::new(FIELDS[f], POOLS[f][v % POOLS[f].len()]))
        .collect();
    Query::new(cs).unwrap()
}

/// A KB, a query over its schema, and a non-empty entity set mostly drawn
/// from one row.
fn triple() -> impl Strategy<Value = (KnowledgeBase, Query, EntitySet)> {
    (
        kb_strategy(),
        clauses_strategy(),
        any::<u64>(),
        prop::bool::weighted(0.1),
    )
        .prop_map(|(kb, cs, bits, extra)| {
            let row = &kb.rows()[(bits % kb.rows().len() as u64) as usize];
            let mut es: EntitySet = row
                .iter()
                .enumerate()
                .filter(|(i, _)| bits >> (8 + i) & 1 == 1)
                .map(|(_, v)| v.clone())
                .collect();
            if es.is_empty() {
                es.insert(row[0].clone());
            }
            if extra {
                es.insert("unlisted".into());
            }
            (kb, to_query(&cs), es)
        })
}

fn retrieved(q: &Query, kb: &KnowledgeBase) -> EntitySet {
    execute(q, kb).unwrap().entities.into_iter().map(String::from).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn reward_matches_definition((kb, q, es) in triple()) {
        let r = reward(&q, &es, &kb).unwrap().get();
        prop_assert!((r - oracle_reward(&q, &es, &kb)).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn recall_gate((kb, q, es) in triple()) {
        let r = reward(&q, &es, &kb).unwrap();
        let ea = retrieved(&q, &kb);
        prop_assert_eq!(r.is_positive(), !ea.is_empty() && es.is_subset(&ea));
    }

    #[test]
    fn adding_a_clause_that_keeps_recall_never_lowers_reward(
        (kb, q, es) in triple(),
        pick in 0..4usize,
        value in 0..8usize,
    ) {
        let free: Vec<usize> = (0..4).filter(|&f| q.clauses().iter().all(|c| c.field != FIELDS[f])).collect();
        let field = free[pick % free.len()];
        let extra = Clause::new(FIELDS[field], POOLS[field][value % POOLS[field].len()]);
        let mut cs = q.clauses().to_vec();
        cs.push(extra);
        let longer = Query::new(cs).unwrap();
        let (short_r, long_r) = (reward(&q, &es, &kb).unwrap(), reward(&longer, &es, &kb).unwrap());
        if long_r.is_positive() {
            prop_assert!(short_r.is_positive());
            prop_assert!(long_r.get() >= short_r.get());
        }
    }

    #[test]
    fn reward_ignores_clause_order((kb, q, es) in triple(), rot in 0..4usize) {
        let mut cs = q.clauses().to_vec();
        if !cs.is_empty() {
            let k = rot % cs.len();
            cs.rotate_left(k);
            cs.reverse();
        }
        let shuffled = Query::new(cs).unwrap();
        prop_assert_eq!(shuffled.canonicalize(), q.canonicalize());
        prop_assert_eq!(reward(&shuffled, &es, &kb).unwrap(), reward(&q.canonicalize(), &es, &kb).unwrap());
        prop_assert_eq!(parse_query(&shuffled.serialize()).unwrap(), q.canonicalize());
    }
}

proptest! {
    #[test]
    fn kb_json_round_trip(kb in kb_strategy()) {
        let back = KnowledgeBase::from_json_str(&kb.to_json_string()).unwrap();
        prop_assert_eq!(back.fields(), kb.fields());
        prop_assert_eq!(back.rows(), kb.rows());
    }

    #[test]
    fn clipped_masses_stay_in_the_simplex(
        h in 0.0..=1.0f64,
        o in 0.0..=1.0f64,
        ah in 0.0..=1.0f64,
        ao in 0.0..=1.0f64,
    ) {
        let (ch, co) = clip_buffer_probs(h, o, ah, ao).unwrap();
        prop_assert!(ch >= h && ch >= ah && ch <= 1.0);
        prop_assert!(co >= 0.0 && ch + co <= 1.0 + 1e-15);
        if o <= 1.0 - ch && o >= (1.0 - ch) * ao {
            prop_assert_eq!(co, o);
        }
    }

    #[test]
    fn buffer_split_tracks_the_best_reward(
        inserts in prop::collection::vec((clauses_strategy(), 1..6u32), 1..30),
    ) {
        let mut b = BufferPair::new();
        let mut best = 0.0f64;
        let mut seen = std::collections::BTreeSet::new();
        for (cs, r) in &inserts {
            let q = to_query(cs).canonicalize();
            // a query keeps its first reward
            let r = if seen.insert(q.clone()) { *r as f64 / 8.0 } else { continue };
            b.insert(q, RewardValue::new(r).unwrap()).unwrap();
            best = best.max(r);
            prop_assert!(b.check_invariants().is_ok());
        }
        prop_assert_eq!(b.best_reward(), best);
        prop_assert_eq!(b.len(), seen.len());
        for (q, r) in b.high().iter() {
            prop_assert!(seen.contains(q));
            prop_assert_eq!(r, best);
        }
        for (_, r) in b.other().iter() {
            prop_assert!(r < best);
        }
    }
}
