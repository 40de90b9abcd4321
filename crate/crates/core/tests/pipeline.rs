use dplda_core::data::{ScoreSet, Trial, TrialLabel};
use dplda_core::pipeline::{
    evaluate_scores, read_scores, split_three, within_domain_trials, write_scores,
};
use dplda_core::synth::{generate, SynthSpec};

fn scores(with_llr: bool) -> ScoreSet {
    let labels = [Some(TrialLabel::Target), Some(TrialLabel::Impostor), None];
    let trials = (0..3)
        .map(|i| Trial {
            enroll_id: format!("e{i}"),
            test_id: format!("t{i}"),
            label: labels[i],
        })
        .collect();
    ScoreSet {
        trials,
        raw_score: vec![0.1, -1e-300, 123456.789],
        llr: with_llr.then(|| vec![1.0 / 3.0, -2.5, f64::MIN_POSITIVE]),
    }
}

#[test]
fn score_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for with_llr in [true, false] {
        let p = dir.path().join("s.tsv");
        let s = scores(with_llr);
        write_scores(&p, &s).unwrap();
        assert_eq!(read_scores(&p).unwrap(), s);
    }
}

#[test]
fn score_file_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.tsv");
    std::fs::write(
        &p,
        "enroll_id\ttest_id\traw_score\tllr\tlabel\na\tb\t1\t-\ttgt\na\tc\tNaN\t-\timp\n",
    )
    .unwrap();
    let e = read_scores(&p).unwrap_err().to_string();
    assert!(e.contains("line 3"), "{e}");
}

#[test]
fn all_zero_llrs_evaluate_to_one_bit() {
    let mut s = scores(true);
    s.llr = Some(vec![0.0; 3]);
    let r = evaluate_scores(&s).unwrap();
    assert!((r.actual_cllr - 1.0).abs() < 1e-12);
}

#[test]
fn within_domain_trials_stay_in_domain() {
    let ds = generate(&SynthSpec::mismatch5(60, 2)).unwrap();
    let groups = within_domain_trials(&ds);
    assert_eq!(groups.len(), 5);
    for (dom, trials) in &groups {
        for t in trials {
            let a = ds.get(&t.enroll_id).unwrap();
            let b = ds.get(&t.test_id).unwrap();
            assert!(a.domain == *dom && b.domain == *dom);
            assert_ne!(a.session_id, b.session_id);
        }
    }
}

#[test]
fn three_way_split_partitions_speakers() {
    let ds = generate(&SynthSpec::mismatch5(100, 3)).unwrap();
    let s = split_three(&ds, [0.6, 0.2, 0.2]).unwrap();
    assert_eq!(s.train.len() + s.dev.len() + s.test.len(), ds.len());
    assert!(s.train.speakers().is_disjoint(&s.test.speakers()));
    assert!(s.dev.speakers().is_disjoint(&s.test.speakers()));
    assert_eq!(s.test.domains().len(), 5);
}
