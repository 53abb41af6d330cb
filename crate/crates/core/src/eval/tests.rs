use proptest::prelude::*;

use super::*;
use crate::network::NetworkConfig;
use crate::synthetic::{generate_sample, PhantomSpec};

fn mask(bits: &[u8]) -> Tensor<f32> {
    Tensor::new(&[bits.len()], bits.iter().map(|&b| b as f32).collect()).unwrap()
}

#[test]
fn dice_examples() {
    let p = mask(&[1, 1, 0, 1, 0, 0, 1, 0]);
    assert_eq!(dice_score(&p, &p).unwrap(), 1.0);
    let q = mask(&[0, 0, 1, 0, 1, 1, 0, 1]);
    assert_eq!(dice_score(&p, &q).unwrap(), 0.0);
    let t = mask(&[1, 0, 0, 1, 1, 1, 0, 0]);
    assert_eq!(dice_score(&p, &t).unwrap(), 0.5);
    let empty = mask(&[0; 8]);
    assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
    assert_eq!(dice_score(&empty, &p).unwrap(), 0.0);
}

#[test]
fn dice_rejects_invalid_masks() {
    let p = mask(&[1, 0, 1]);
    let soft = Tensor::new(&[3], vec![1.0, 0.3, 0.0]).unwrap();
    assert!(matches!(dice_score(&soft, &p), Err(Error::NonBinary { .. })));
    assert!(matches!(dice_score(&p, &soft), Err(Error::NonBinary { .. })));
    assert!(matches!(dice_score(&p, &mask(&[1, 0])), Err(Error::ShapeMismatch { .. })));
}

proptest! {
    #[test]
    fn dice_symmetric_and_reflexive(a in prop::collection::vec(0u8..2, 1..64), seed in any::<u64>()) {
        let b: Vec<u8> = a.iter().enumerate().map(|(i, &v)| v ^ ((seed >> (i % 64)) & 1) as u8).collect();
        let (pa, pb) = (mask(&a), mask(&b));
        let ab = dice_score(&pa, &pb).unwrap();
        prop_assert_eq!(ab, dice_score(&pb, &pa).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        if a.contains(&1) {
            prop_assert_eq!(dice_score(&pa, &pa).unwrap(), 1.0);
        }
    }
}

#[test]
fn subsets_follow_table_order() {
    let subsets = enumerate_subsets();
    assert_eq!(subsets.len(), 15);
    assert!(subsets.last().unwrap().is_full());
    assert!(subsets.iter().all(|s| s.count() >= 1));
    let counts: Vec<usize> = subsets.iter().map(ModalitySubset::count).collect();
    assert_eq!(counts, [1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 3, 3, 3, 3, 4]);
    let unique: std::collections::HashSet<_> = subsets.iter().collect();
    assert_eq!(unique.len(), 15);
    let codes: Vec<String> = subsets
        .iter()
        .map(|s| s.present().iter().map(|&p| if p { '1' } else { '0' }).collect())
        .collect();
    let expected = [
        "0001", "0010", "0100", "1000", "0011", "0110", "1100", "0101", "1001", "1010", "1110", "1101", "1011", "0111", "1111",
    ];
    assert_eq!(codes, expected);
    assert_eq!(subsets[4].to_string(), "t1c+t2");
    assert!(ModalitySubset::new([false; 4]).is_err());
    assert_eq!(ModalitySubset::without(&[Modality::Flair]).unwrap().present(), [false, true, true, true]);
}

fn tiny() -> (SegNetwork, Vec<Sample>) {
    let config = NetworkConfig {
        input_size: 8,
        base_channels: 2,
        ..NetworkConfig::default()
    };
    let net = SegNetwork::new(config, 4).unwrap();
    let spec = PhantomSpec { size: 8, ..PhantomSpec::default() };
    let test = (0..3).map(|i| generate_sample(&spec, i).unwrap()).collect();
    (net, test)
}

#[test]
fn constant_predictor_scores_full_volume() {
    let (mut net, test) = tiny();
    // Zero head weights and small positive biases: probs = sigmoid(3 * 0.01) > 0.5 everywhere.
    for (w, b) in net.head_params() {
        let store = net.params_mut();
        let id = store.id(&w).unwrap();
        store.get_mut(id).tensor.data_mut().fill(0.0);
        let id = store.id(&b).unwrap();
        store.get_mut(id).tensor.data_mut().fill(0.01);
    }
    let report = evaluate(&net, &test, 0.5).unwrap();
    let ones = Tensor::full(test[0].labels.shape(), 1.0f32);
    let mut expect = [0.0; 3];
    for s in &test {
        for (e, d) in expect.iter_mut().zip(region_dice(&ones, &s.labels).unwrap()) {
            *e += d / test.len() as f64;
        }
    }
    for row in &report.rows {
        assert_eq!(row.dice, expect);
    }
}

#[test]
fn full_row_matches_direct_count() {
    let (net, test) = tiny();
    let report = evaluate(&net, &test, 0.5).unwrap();
    let full = report.reference_row();
    assert!(full.subset.is_full());
    let mut expect = [0.0; 3];
    for s in &test {
        let probs = net.predict(&s.volumes, [true; 4]).unwrap();
        for r in 0..3 {
            let (mut i, mut np, mut nt) = (0.0, 0.0, 0.0);
            for (&p, &y) in probs.channel(r).iter().zip(s.labels.channel(r)) {
                let p = (p >= 0.5) as u8 as f64;
                i += p * y as f64;
                np += p;
                nt += y as f64;
            }
            expect[r] += if np + nt == 0.0 { 1.0 } else { 2.0 * i / (np + nt) } / test.len() as f64;
        }
    }
    for r in 0..3 {
        assert!((full.dice[r] - expect[r]).abs() < 1e-12);
    }
}

#[test]
fn evaluation_has_no_hidden_state() {
    let (net, test) = tiny();
    let before = evaluate_subset(&net, &test, ModalitySubset::full(), 0.5).unwrap();
    let report = evaluate(&net, &test, 0.5).unwrap();
    let after = evaluate_subset(&net, &test, ModalitySubset::full(), 0.5).unwrap();
    assert_eq!(before, after);
    assert_eq!(&before, report.reference_row());
    assert_eq!(report, evaluate(&net, &test, 0.5).unwrap());
}

#[test]
fn evaluate_rejects_bad_input() {
    let (net, test) = tiny();
    assert!(matches!(evaluate(&net, &[], 0.5), Err(Error::Empty(_))));
    assert!(evaluate(&net, &test, 1.0).is_err());
    assert!(evaluate(&net, &test, 0.0).is_err());
}

#[test]
fn report_round_trip() {
    let (net, test) = tiny();
    let report = evaluate(&net, &test, 0.5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    write_report(&report, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data[0], REPORT_HEADER);
    assert_eq!(data.len(), 16);

    let path2 = dir.path().join("again.csv");
    write_report(&evaluate(&net, &test, 0.5).unwrap(), &path2).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());

    let back = EvalReport::read(&path).unwrap();
    assert_eq!(back.reference, report.reference);
    for (a, b) in back.rows.iter().zip(&report.rows) {
        assert_eq!(a.subset, b.subset);
        for r in 0..3 {
            assert!((a.dice[r] - b.dice[r]).abs() <= 5e-5);
        }
    }
}

#[test]
fn parse_rejects_malformed() {
    assert!(EvalReport::parse_csv("a,b\n").is_err());
    let bad_flag = format!("{REPORT_HEADER}\nx,2,0,0,1,0.1,0.2,0.3\n");
    assert!(EvalReport::parse_csv(&bad_flag).is_err());
    let no_full = format!("{REPORT_HEADER}\nt2,0,0,0,1,0.1,0.2,0.3\n");
    assert!(EvalReport::parse_csv(&no_full).is_err());
}
