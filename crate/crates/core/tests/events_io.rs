use std::collections::HashMap;

use evrep::events_io::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_stream(rng: &mut impl Rng, w: u32, h: u32, max_len: usize) -> EventStream {
    let n = rng.random_range(0..=max_len);
    let mut t = rng.random_range(0..1000u64);
    let events = (0..n)
        .map(|_| {
            t += rng.random_range(0..50);
            Event::new(rng.random_range(0..w), rng.random_range(0..h), t, rng.random())
        })
        .collect();
    EventStream::new(events, w, h).unwrap()
}

/// Independent decoder for one 5-byte record.
fn decode_record(r: &[u8]) -> (u32, u32, u64, i8) {
    let t = ((r[2] as u64 & 0x7f) << 16) + (r[3] as u64) * 256 + r[4] as u64;
    (r[0] as u32, r[1] as u32, t, if r[2] >= 128 { 1 } else { -1 })
}

#[test]
fn thousand_stream_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let s = random_stream(&mut rng, 34, 34, 200);
        let bytes = encode_nmnist_bin(&s).unwrap();
        assert_eq!(bytes.len(), 5 * s.len());
        for (e, rec) in s.events().iter().zip(bytes.chunks(5)) {
            if decode_record(rec) != (e.x, e.y, e.t, e.p) {
                mismatches += 1;
            }
        }
        if parse_nmnist_bin(&bytes).unwrap() != s {
            mismatches += 1;
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn documented_record() {
    let s = parse_nmnist_bin(&[0x02, 0x03, 0x80, 0x00, 0x64]).unwrap();
    assert_eq!(s.events(), &[Event::new(2, 3, 100, true)]);
    assert_eq!((s.width(), s.height()), (34, 34));
}

#[test]
fn split_sizes_and_disjointness() {
    let mut samples = Vec::new();
    let sizes = [("a", 6), ("b", 13), ("c", 20)];
    for (label, n) in sizes {
        for i in 0..n {
            samples.push(Sample {
                id: format!("{label}{i}"),
                events_path: format!("{label}/{i}.bin").into(),
                label: label.into(),
                rgb_path: None,
            });
        }
    }
    let index = DatasetIndex::from_samples(samples).unwrap();
    for seed in 0..5 {
        let (train, test) = split_dataset(&index, seed).unwrap();
        let mut per_class: HashMap<&str, usize> = HashMap::new();
        for s in test.samples() {
            *per_class.entry(s.label.as_str()).or_default() += 1;
        }
        for (label, n) in sizes {
            assert_eq!(per_class[label], n / 6);
        }
        let mut ids: Vec<&str> = train.samples().iter().chain(test.samples()).map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        let mut all: Vec<&str> = index.samples().iter().map(|s| s.id.as_str()).collect();
        all.sort_unstable();
        assert_eq!(ids, all);
        assert_eq!(train.len() + test.len(), index.len());
        assert_eq!(split_dataset(&index, seed).unwrap().1.samples(), test.samples());
    }
}

#[test]
fn directory_layout_and_class_file() {
    let dir = tempfile::tempdir().unwrap();
    for (label, n) in [("dog", 2), ("cat", 1)] {
        std::fs::create_dir_all(dir.path().join(label)).unwrap();
        for i in 0..n {
            std::fs::write(dir.path().join(label).join(format!("{i}.csv")), "1,0,0,1\n").unwrap();
        }
    }
    let index = DatasetIndex::open(dir.path()).unwrap();
    assert_eq!(index.class_list(), ["cat", "dog"]);
    assert_eq!(index.len(), 3);
    std::fs::write(dir.path().join("classes.txt"), "dog\ncat\n").unwrap();
    assert_eq!(DatasetIndex::open(dir.path()).unwrap().class_list(), ["dog", "cat"]);
}

#[test]
fn csv_unsorted_needs_sort_flag() {
    let text = "t,x,y,p\n200,1,1,1\n100,2,2,0\n";
    assert!(matches!(parse_csv_events(text, 4, 4), Err(EventsError::UnsortedTimestamps { .. })));
    let s = parse_csv_events_with(text, 4, 4, CsvOptions { sort: true }).unwrap();
    assert_eq!(s.events()[0], Event::new(2, 2, 100, false));
}

proptest! {
    #[test]
    fn windows_compose(seed in 0u64..10_000, a in 0u64..3000, b in 0u64..3000, c in 0u64..3000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_stream(&mut rng, 16, 16, 100);
        let mut v = [a, b, c];
        v.sort_unstable();
        let [t0, t1, t2] = v;
        let left = window_events(&s, t0, t1).unwrap();
        let right = window_events(&s, t1, t2).unwrap();
        let whole = window_events(&s, t0, t2).unwrap();
        let joined: Vec<Event> = left.events().iter().chain(right.events()).copied().collect();
        prop_assert_eq!(joined.as_slice(), whole.events());
        let brute: Vec<Event> = s.events().iter().filter(|e| e.t >= t0 && e.t < t2).copied().collect();
        prop_assert_eq!(brute.as_slice(), whole.events());
    }

    #[test]
    fn csv_round_trip(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_stream(&mut rng, 20, 10, 50);
        let text: String = s
            .events()
            .iter()
            .map(|e| format!("{},{},{},{}\n", e.t, e.x, e.y, u8::from(e.p > 0)))
            .collect();
        prop_assert_eq!(parse_csv_events(&text, 20, 10).unwrap(), s);
    }
}
