//! Property tests over invariants that span modules.

use std::collections::BTreeSet;

use proptest::prelude::*;

use eventpipe::ingest::{enqueue, ingest_file, parse_line, IngestConfig, SourceTables};
use eventpipe::kvstore::{RowRange, ScanSpec, Store, StoreConfig};
use eventpipe::query::{estimate_density, run_batches, update_batch, BatchParams, BatchState, QueryContext};
use eventpipe::schema::{ShardConfig, Timestamp, HOUR_MILLIS};

fn params() -> impl Strategy<Value = BatchParams> {
    (1.0..100.0f64, 1.01..4.0f64, 0.001..5.0f64, 1.0..20.0f64).prop_map(|(k0, c, t_min, spread)| BatchParams {
        k0,
        c,
        t_min,
        t_max: t_min * spread,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn windows_tile_the_range(
        p in params(),
        t_start in 0u64..1_000_000,
        span in 0u64..50_000_000,
        b0 in 1u64..10_000_000,
        outcomes in prop::collection::vec((0.0001..100.0f64, 0u64..5_000), 1..64),
    ) {
        let t_stop = t_start + span;
        let state = BatchState::new(p, t_start, t_stop, b0).unwrap();
        let mut i = 0;
        let stats = run_batches(state, |_, _| {
            let o = outcomes[i % outcomes.len()];
            i += 1;
            Ok(o)
        }).unwrap();
        let w = &stats.per_batch;
        prop_assert_eq!(w[0].start, t_start);
        prop_assert_eq!(w.last().unwrap().stop, t_stop);
        for pair in w.windows(2) {
            prop_assert_eq!(pair[1].start, pair[0].stop + 1);
        }
        prop_assert!(w.iter().all(|x| x.start <= x.stop));
    }

    #[test]
    fn in_band_batches_grow_by_c(
        p in params(),
        k in 1.0..1_000.0f64,
        b in 1u64..1_000_000,
        r in 1u64..100_000,
    ) {
        // choose the runtime so the grown target lands mid-band
        let target = (p.t_min + p.t_max) / 2.0;
        let t = target * r as f64 / (p.c * k);
        let s = BatchState { p: 0, b, k, t_stop: u64::MAX / 2, params: p };
        let n = update_batch(&s, t, r).unwrap();
        prop_assert!((n.k - p.c * k).abs() <= 1e-9 * n.k.max(1.0));
        let ideal = n.k * b as f64 / r as f64;
        prop_assert!(n.b as f64 <= ideal + 1e-6 && (n.b as f64 > ideal - 1.0 || n.b == 1));
        prop_assert_eq!(n.p, b + 1);
    }

    #[test]
    fn batch_size_is_positive_and_bounded(
        p in params(),
        k in 1.0..1_000.0f64,
        b in 1u64..1_000_000,
        pos in 0u64..1_000_000,
        remaining in 0u64..1_000_000,
        t in 0.0001..1_000.0f64,
        r in 0u64..100_000,
    ) {
        let s = BatchState { p: pos, b, k, t_stop: pos + remaining, params: p };
        let n = update_batch(&s, t, r).unwrap();
        prop_assert!(n.b >= 1);
        prop_assert!(n.b <= remaining.max(1));
        prop_assert!(n.k >= 1.0);
    }
}

const T0: u64 = 400_000 * HOUR_MILLIS;

fn line(ts: u64, domain: u8, status: u16) -> String {
    format!(r#"{{"ts":{ts},"domain":"d{domain}","status":{status}}}"#)
}

fn load(lines: &[String]) -> (tempfile::TempDir, Store) {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path().join("db"), StoreConfig::unthrottled()).unwrap();
    SourceTables::create(&store, "webproxy", ShardConfig::default()).unwrap();
    let p = dir.path().join("in.jsonl");
    std::fs::write(&p, lines.join("\n")).unwrap();
    ingest_file(&store, &enqueue(&p, "webproxy", 1).unwrap(), &IngestConfig::default()).unwrap();
    (dir, store)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn densities_are_fractions(
        events in prop::collection::vec((0u64..3 * HOUR_MILLIS, 0u8..6, prop::sample::select(vec![200u16, 404, 500])), 1..200),
        a in 0u64..3 * HOUR_MILLIS,
        len in 0u64..3 * HOUR_MILLIS,
    ) {
        let lines: Vec<String> = events.iter().map(|&(t, d, s)| line(T0 + t, d, s)).collect();
        let (_dir, store) = load(&lines);
        let ctx = QueryContext::new(&store, "event_webproxy", ShardConfig::default()).unwrap();
        let (start, stop) = (Timestamp::new(T0 + a).unwrap(), Timestamp::new(T0 + a + len).unwrap());
        let mut sum = 0.0;
        for d in 0..7u8 {
            let x = estimate_density(&ctx, "domain", &format!("d{d}"), start, stop).unwrap();
            prop_assert!((0.0..=1.0).contains(&x));
            sum += x;
        }
        // every event has exactly one domain, so densities over its values
        // sum to one whenever the buckets hold any events
        prop_assert!(sum == 0.0 || (sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn each_parsed_line_is_stored_once(
        events in prop::collection::vec((0u64..HOUR_MILLIS, 0u8..4, prop::sample::select(vec![200u16, 404])), 0..150),
        garbage in prop::collection::vec(prop::sample::select(vec!["{", "[]", "{\"ts\":-1}", "{\"domain\":\"x\"}", "null"]), 0..10),
        dupes in 0usize..10,
    ) {
        let mut lines: Vec<String> = events.iter().map(|&(t, d, s)| line(T0 + t, d, s)).collect();
        let n = lines.len();
        for i in 0..dupes.min(n) {
            lines.push(lines[i].clone());
        }
        lines.extend(garbage.iter().map(|g| g.to_string()));
        let (_dir, store) = load(&lines);
        let distinct: BTreeSet<String> = lines
            .iter()
            .filter(|l| parse_line(l.as_bytes()).is_ok())
            .cloned()
            .collect();
        let rows: BTreeSet<_> = store
            .scan(ScanSpec::new("event_webproxy", RowRange::all()))
            .unwrap()
            .map(|e| e.row)
            .collect();
        prop_assert_eq!(rows.len(), distinct.len());
        let totals: u64 = store
            .scan(ScanSpec::new("agg_webproxy", RowRange::prefix(b"")))
            .unwrap()
            .filter(|e| e.row.windows(9).any(|w| w == b"__total__"))
            .map(|e| std::str::from_utf8(&e.value).unwrap().parse::<u64>().unwrap())
            .sum();
        // counts include duplicates: every parsed line is one event occurrence
        prop_assert_eq!(totals, (n + dupes.min(n)) as u64);
    }
}
