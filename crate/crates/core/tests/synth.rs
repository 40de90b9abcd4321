use dplda_core::synth::{generate, split_by_speaker, Spectrum, SynthSpec};
use dplda_core::Dataset;

fn per_dim_variance(ds: &Dataset) -> Vec<f64> {
    let n = ds.len() as f64;
    (0..ds.dim())
        .map(|k| {
            let m = ds.records().iter().map(|r| r.embedding[k]).sum::<f64>() / n;
            ds.records()
                .iter()
                .map(|r| (r.embedding[k] - m).powi(2))
                .sum::<f64>()
                / (n - 1.0)
        })
        .collect()
}

fn spec(scale: f64) -> SynthSpec {
    let mut s = SynthSpec::single_domain(6, 500, 21);
    s.between = Spectrum::Values(vec![2.0, 1.0, 0.5, 0.3, 0.2, 0.1]);
    s.within = Spectrum::Constant(0.4);
    s.domains[0].scale = scale;
    s
}

#[test]
fn moments_match_the_generating_model() {
    let ds = generate(&spec(1.0)).unwrap();
    assert_eq!(ds.len(), 2000);
    let b = [2.0, 1.0, 0.5, 0.3, 0.2, 0.1];
    for (k, v) in per_dim_variance(&ds).into_iter().enumerate() {
        let want = b[k] + 0.4;
        assert!((v / want - 1.0).abs() < 0.1, "dim {k}: {v} vs {want}");
    }
    // Pooled within-speaker variance.
    let by = ds.by_speaker();
    for k in 0..6 {
        let mut acc = 0.0;
        let mut dof = 0.0;
        for idx in by.values() {
            let v: Vec<f64> = idx.iter().map(|&i| ds.records()[i].embedding[k]).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            acc += v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
            dof += v.len() as f64 - 1.0;
        }
        assert!(
            (acc / dof / 0.4 - 1.0).abs() < 0.1,
            "dim {k}: {}",
            acc / dof
        );
    }
}

#[test]
fn scale_two_quadruples_total_covariance() {
    let one = per_dim_variance(&generate(&spec(1.0)).unwrap());
    let two = per_dim_variance(&generate(&spec(2.0)).unwrap());
    for (a, b) in one.iter().zip(&two) {
        assert!((b / a - 4.0).abs() < 1e-9, "{a} {b}");
    }
}

#[test]
fn mismatch5_shares_and_labels() {
    let ds = generate(&SynthSpec::mismatch5(1000, 3)).unwrap();
    assert_eq!(ds.dim(), 50);
    let mut per_dom = std::collections::BTreeMap::new();
    let mut labels = std::collections::BTreeSet::new();
    for r in ds.records() {
        *per_dom.entry(r.domain.clone()).or_insert(0) += 1;
        labels.insert(r.condition_label.clone().unwrap());
    }
    let counts: Vec<usize> = per_dom.values().map(|c| c / 4).collect();
    assert_eq!(counts, vec![530, 250, 110, 60, 40]);
    assert_eq!(labels.len(), 1 + 8 + 4 + 2 + 3);
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let s = SynthSpec::mismatch5(100, 9);
    assert_eq!(
        generate(&s).unwrap().records(),
        generate(&s).unwrap().records()
    );
    let mut t = s.clone();
    t.seed = 10;
    assert_ne!(
        generate(&s).unwrap().records(),
        generate(&t).unwrap().records()
    );
}

#[test]
fn splits_are_speaker_disjoint() {
    let ds = generate(&SynthSpec::mismatch5(200, 1)).unwrap();
    let parts = split_by_speaker(&ds, &[0.6, 0.2, 0.2]).unwrap();
    assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), ds.len());
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(parts[i].speakers().is_disjoint(&parts[j].speakers()));
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = spec(1.0);
    s.domains[0].scale = 0.0;
    assert!(generate(&s).is_err());
    let mut s = spec(1.0);
    s.between = Spectrum::Values(vec![1.0; 3]);
    assert!(generate(&s).is_err());
}
