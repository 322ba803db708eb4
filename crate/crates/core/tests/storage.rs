use mil_core::bagio::{read_all, write_bags, write_bags_to, BagReader, Encoding, HEADER_LEN};
use mil_core::{Bag, Label, MilError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bags whose samples are exactly representable in `f32`.
pub fn random_bags(n: usize, h: usize, w: usize, seed: u64) -> Vec<Bag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = Label::from_bool(rng.gen_bool(0.5));
            let count = rng.gen_range(1..=9);
            let instances = (0..count)
                .map(|_| {
                    let data = (0..h * w).map(|_| rng.gen_range(-50.0f32..150.0) as f64).collect();
                    Tensor::new(vec![1, h, w], data).unwrap()
                })
                .collect();
            let truth = match (rng.gen_bool(0.7), label) {
                (false, _) => None,
                (true, Label::Negative) => Some(vec![false; count]),
                (true, Label::Positive) => Some((0..count).map(|_| rng.gen_bool(0.4)).collect()),
            };
            let id: String = (0..rng.gen_range(0..20)).map(|_| rng.gen_range('a'..='z')).collect();
            Bag::new(format!("{id}-{i}"), label, instances, truth).unwrap()
        })
        .collect()
}

fn bits(bags: &[Bag]) -> Vec<u64> {
    bags.iter()
        .flat_map(|b| b.instances.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())))
        .collect()
}

#[test]
fn f32_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bags.milb");
    let bags = random_bags(100, 6, 5, 42);
    let summary = write_bags(&bags, &path, Encoding::F32).unwrap();
    assert_eq!(summary.bag_count, 100);
    let back = read_all(&path).unwrap();
    assert_eq!(back, bags);
    assert_eq!(bits(&back), bits(&bags));
}

#[test]
fn f16_rewrite_is_idempotent() {
    let bags = random_bags(30, 4, 4, 7);
    let mut first = Vec::new();
    write_bags_to(&bags, &mut first, Encoding::F16).unwrap();
    let once: Vec<Bag> = BagReader::new(first.as_slice(), "mem").unwrap().collect::<Result<_, _>>().unwrap();
    let mut second = Vec::new();
    write_bags_to(&once, &mut second, Encoding::F16).unwrap();
    assert_eq!(first, second);
    let twice: Vec<Bag> = BagReader::new(second.as_slice(), "mem").unwrap().collect::<Result<_, _>>().unwrap();
    assert_eq!(bits(&once), bits(&twice));
    // labels, ids and truth flags are not quantized
    for (a, b) in bags.iter().zip(&once) {
        assert_eq!((&a.id, a.label, &a.instance_truth), (&b.id, b.label, &b.instance_truth));
    }
}

#[test]
fn streaming_reader_reports_each_bag_in_order() {
    let bags = random_bags(5, 3, 3, 1);
    let mut buf = Vec::new();
    write_bags_to(&bags, &mut buf, Encoding::F32).unwrap();
    let reader = BagReader::new(buf.as_slice(), "mem").unwrap();
    assert_eq!(reader.header().bag_count, 5);
    let ids: Vec<String> = reader.map(|b| b.unwrap().id).collect();
    assert_eq!(ids, bags.iter().map(|b| b.id.clone()).collect::<Vec<_>>());
}

#[test]
fn cut_file_is_truncated_not_garbage() {
    let bags = random_bags(3, 3, 3, 2);
    let mut buf = Vec::new();
    write_bags_to(&bags, &mut buf, Encoding::F32).unwrap();
    for cut in [HEADER_LEN + 1, buf.len() / 2, buf.len() - 1] {
        let results: Vec<_> = BagReader::new(&buf[..cut], "mem").unwrap().collect();
        let err = results.into_iter().find_map(|r| r.err()).expect("an error");
        assert!(matches!(err, MilError::Truncated { .. }), "{err}");
    }
}
