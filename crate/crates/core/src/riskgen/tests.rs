use super::*;

fn catalog(n: usize) -> BTreeSet<String> {
    (0..n).map(|i| format!("i{i:03}")).collect()
}

fn pool_with(pops: &[(&str, u64)]) -> ItemPool {
    let cat: BTreeSet<String> = pops.iter().map(|(i, _)| i.to_string()).collect();
    let counts: HashMap<String, u64> = pops.iter().map(|(i, c)| (i.to_string(), *c)).collect();
    ItemPool::new(&cat, &counts)
}

fn schema(attrs: &[(&str, &[&str])]) -> AttributeSchema {
    attrs
        .iter()
        .map(|(a, vs)| (a.to_string(), vs.iter().map(|v| v.to_string()).collect()))
        .collect()
}

#[test]
fn config_validation() {
    let bad = GeneratorConfig { fef_probability: 1.5, ..Default::default() };
    assert!(matches!(bad.validate(), Err(GenerationError::Config(_))));
    let bad = GeneratorConfig { popularity_temperature: -1.0, ..Default::default() };
    assert!(bad.validate().is_err());
    let mut skew = BTreeMap::new();
    skew.insert("gender".to_string(), BTreeMap::from([("M".to_string(), 0.0)]));
    let bad = GeneratorConfig { attribute_skew: skew, ..Default::default() };
    assert!(bad.validate().is_err());
    let greedy = GeneratorConfig { popularity_temperature: f64::INFINITY, ..Default::default() };
    assert!(greedy.validate().is_ok());
}

// -- augmentation ---------------------------------------------------------

fn augmentation_fixture(users: usize) -> (Vec<Interaction>, AttributeTable) {
    let mut attrs = AttributeTable::empty(crate::SubjectKind::Item);
    attrs.insert("warm", "genre", "Drama").unwrap();
    attrs.insert("coldA", "genre", "Drama").unwrap();
    attrs.insert("coldB", "genre", "Horror").unwrap();
    let rows = (0..users)
        .map(|u| Interaction::new(format!("u{u:03}"), "warm", u as u64))
        .collect();
    (rows, attrs)
}

#[test]
fn greedy_augmentation_picks_preferred_item() {
    let (rows, attrs) = augmentation_fixture(50);
    let cfg = GeneratorConfig { popularity_temperature: f64::INFINITY, ..Default::default() };
    let cold = vec!["coldA".to_string(), "coldB".to_string()];
    let out = augment_interactions(&cfg, &rows, &attrs, &cold, 3, 99).unwrap();
    assert_eq!(out.len(), 150);
    assert!(out.iter().all(|x| x.item == "coldA" && x.timestamp == 99));
}

#[test]
fn uniform_augmentation_is_a_fair_coin() {
    let (rows, attrs) = augmentation_fixture(100);
    let cfg = GeneratorConfig { popularity_temperature: 0.0, seed: 3, ..Default::default() };
    let cold = vec!["coldA".to_string(), "coldB".to_string()];
    let out = augment_interactions(&cfg, &rows, &attrs, &cold, 100, 0).unwrap();
    assert_eq!(out.len(), 10_000);
    let share = out.iter().filter(|x| x.item == "coldA").count() as f64 / 10_000.0;
    assert!((share - 0.5).abs() <= 0.02, "{share}");
}

#[test]
fn one_pair_per_user_counts() {
    let (rows, attrs) = augmentation_fixture(100);
    let cold: Vec<String> = vec!["coldA".into(), "coldB".into(), "coldC".into()];
    let out = augment_interactions(&GeneratorConfig::default(), &rows, &attrs, &cold, 1, 0).unwrap();
    assert_eq!(out.len(), 100);
}

#[test]
fn augmentation_errors() {
    let (rows, attrs) = augmentation_fixture(3);
    let cfg = GeneratorConfig::default();
    assert!(matches!(
        augment_interactions(&cfg, &rows, &attrs, &["coldA".into()], 1, 0),
        Err(GenerationError::Augmentation(_))
    ));
    assert!(matches!(
        augment_interactions(&cfg, &rows, &attrs, &["coldA".into(), "warm".into()], 1, 0),
        Err(GenerationError::Augmentation(_))
    ));
}

// -- profiles -------------------------------------------------------------

#[test]
fn concentrated_skew_emits_that_value() {
    let s = schema(&[("gender", &["Male", "Female"])]);
    let cfg = GeneratorConfig {
        attribute_skew: BTreeMap::from([(
            "gender".to_string(),
            BTreeMap::from([("Female".to_string(), 1.0)]),
        )]),
        ..Default::default()
    };
    for u in 0..50 {
        let p = infer_profile(&cfg, &format!("u{u}"), &[], &s, 0).unwrap();
        assert_eq!(p.attributes["gender"], ["Female"]);
        assert!(p.fabricated.values().all(|f| !f));
        assert_eq!(p.provenance, Provenance::Generated);
    }
}

#[test]
fn certain_fabrication_flags_every_attribute() {
    let s = schema(&[("gender", &["M", "F"]), ("age", &["18", "25"])]);
    let cfg = GeneratorConfig { fef_probability: 1.0, ..Default::default() };
    let p = infer_profile(&cfg, "u", &[], &s, 0).unwrap();
    assert!(p.fabricated.values().all(|f| *f));
    assert!(p.attributes.values().all(|v| is_fabricated(&v[0])));
}

#[test]
fn fabricated_fraction_matches_probability() {
    let attrs: Vec<String> = (0..8).map(|a| format!("a{a}")).collect();
    let s: AttributeSchema = attrs
        .iter()
        .map(|a| (a.clone(), ["x", "y", "z"].iter().map(|v| v.to_string()).collect()))
        .collect();
    let cfg = GeneratorConfig { fef_probability: 0.25, seed: 5, ..Default::default() };
    let mut flagged = 0usize;
    for u in 0..5_000 {
        let p = infer_profile(&cfg, &format!("u{u}"), &[], &s, 0).unwrap();
        flagged += p.fabricated.values().filter(|f| **f).count();
    }
    let share = flagged as f64 / 40_000.0;
    assert!((share - 0.25).abs() <= 0.01, "{share}");
}

#[test]
fn history_drives_profile_without_skew() {
    let s = schema(&[("genre", &["Drama", "Horror"])]);
    let item = BTreeMap::from([("genre".to_string(), vec!["Horror".to_string()])]);
    let cfg = GeneratorConfig::default();
    let p = infer_profile(&cfg, "u", &[&item, &item], &s, 0).unwrap();
    assert_eq!(p.attributes["genre"], ["Horror"]);
}

#[test]
fn empty_schema_is_usage_error() {
    assert!(matches!(
        infer_profile(&GeneratorConfig::default(), "u", &[], &AttributeSchema::new(), 0),
        Err(GenerationError::Usage(_))
    ));
}

#[test]
fn profile_flags_are_sound() {
    let s = schema(&[("g", &["a", "b"]), ("h", &["c"])]);
    for seed in 0..200 {
        let cfg = GeneratorConfig { fef_probability: 0.5, seed, ..Default::default() };
        let p = infer_profile(&cfg, "u", &[], &s, seed).unwrap();
        for (attr, values) in &p.attributes {
            assert_eq!(p.fabricated[attr], !s[attr].contains(&values[0]));
        }
    }
}

// -- decision role ----------------------------------------------------------

#[test]
fn greedy_rerank_sorts_by_popularity() {
    let pool = pool_with(&[("a", 5), ("b", 9), ("c", 5), ("d", 1)]);
    let cfg = GeneratorConfig { popularity_temperature: f64::INFINITY, ..Default::default() };
    let cands: RankedList = vec!["d".into(), "c".into(), "a".into(), "b".into()].into();
    let out = rerank_or_generate(&cfg, "u", Some(&cands), 4, &pool, 0).unwrap();
    assert_eq!(out.0, ["b", "a", "c", "d"]);
}

#[test]
fn rerank_argument_errors() {
    let pool = pool_with(&[("a", 1)]);
    let cfg = GeneratorConfig::default();
    let cands: RankedList = vec!["a".into()].into();
    assert!(matches!(rerank_or_generate(&cfg, "u", Some(&cands), 2, &pool, 0), Err(GenerationError::Usage(_))));
    assert!(matches!(rerank_or_generate(&cfg, "u", None, 0, &pool, 0), Err(GenerationError::Usage(_))));
    let empty = ItemPool::new(&BTreeSet::new(), &HashMap::new());
    assert!(matches!(rerank_or_generate(&cfg, "u", None, 1, &empty, 0), Err(GenerationError::Generation(_))));
}

#[test]
fn open_generation_without_fabrication_stays_in_catalog() {
    let cat = catalog(30);
    let pool = ItemPool::new(&cat, &HashMap::new());
    let cfg = GeneratorConfig { fef_probability: 0.0, ..Default::default() };
    for u in 0..200 {
        let list = rerank_or_generate(&cfg, &format!("u{u}"), None, 10, &pool, 0).unwrap();
        assert_eq!(list.len(), 10);
        assert!(list.iter().all(|i| pool.contains(i)));
        assert_eq!(list.iter().collect::<BTreeSet<_>>().len(), 10);
    }
}

#[test]
fn open_generation_fabrication_rate() {
    let cat = catalog(50);
    let pool = ItemPool::new(&cat, &HashMap::new());
    let cfg = GeneratorConfig { fef_probability: 0.074, seed: 1, ..Default::default() };
    let mut fabricated = 0usize;
    for u in 0..44_000 {
        let list = rerank_or_generate(&cfg, &format!("u{u}"), None, 10, &pool, 0).unwrap();
        for i in list.iter() {
            // flag soundness: reserved prefix exactly when outside the catalog
            assert_eq!(is_fabricated(i), !pool.contains(i));
            fabricated += usize::from(is_fabricated(i));
        }
    }
    let rate = fabricated as f64 / 440_000.0;
    assert!((rate - 0.074).abs() <= 0.003, "{rate}");
}

/// Exact expected 1-based rank per item under Plackett-Luce sampling without
/// replacement, by enumerating every permutation.
fn exact_expected_ranks(weights: &[f64]) -> Vec<f64> {
    fn permute(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, w: &[f64], p: f64, acc: &mut Vec<f64>) {
        if rest.is_empty() {
            for (rank, &i) in prefix.iter().enumerate() {
                acc[i] += p * (rank + 1) as f64;
            }
            return;
        }
        let total: f64 = rest.iter().map(|&i| w[i]).sum();
        for k in 0..rest.len() {
            let i = rest.remove(k);
            prefix.push(i);
            permute(prefix, rest, w, p * w[i] / total, acc);
            prefix.pop();
            rest.insert(k, i);
        }
    }
    let mut acc = vec![0.0; weights.len()];
    permute(&mut Vec::new(), &mut (0..weights.len()).collect(), weights, 1.0, &mut acc);
    acc
}

#[test]
fn expected_rank_is_monotone_in_popularity() {
    let pops = [("a", 0u64), ("b", 1), ("c", 3), ("d", 7), ("e", 15)];
    let pool = pool_with(&pops);
    let beta = 1.0;
    let weights: Vec<f64> = pops.iter().map(|(_, p)| (1.0 + *p as f64).powf(beta)).collect();
    let exact = exact_expected_ranks(&weights);
    assert!(exact.windows(2).all(|w| w[0] >= w[1]), "{exact:?}");

    let cfg = GeneratorConfig { popularity_temperature: beta, seed: 9, ..Default::default() };
    let cands: RankedList = pops.iter().map(|(i, _)| i.to_string()).collect();
    let trials = 20_000;
    let mut mean = vec![0.0; pops.len()];
    for t in 0..trials {
        let list = rerank_or_generate(&cfg, "u", Some(&cands), 5, &pool, t).unwrap();
        for (rank, item) in list.iter().enumerate() {
            let idx = pops.iter().position(|(i, _)| i == item).unwrap();
            mean[idx] += (rank + 1) as f64 / trials as f64;
        }
    }
    for (m, e) in mean.iter().zip(&exact) {
        assert!((m - e).abs() < 0.03, "monte carlo {mean:?} vs exact {exact:?}");
    }
}

#[test]
fn outputs_are_seed_determined() {
    let pool = ItemPool::new(&catalog(40), &HashMap::new());
    let cfg = GeneratorConfig { fef_probability: 0.3, seed: 77, ..Default::default() };
    let a = rerank_or_generate(&cfg, "u1", None, 8, &pool, 2).unwrap();
    assert_eq!(a, rerank_or_generate(&cfg, "u1", None, 8, &pool, 2).unwrap());
    assert_ne!(a, rerank_or_generate(&cfg, "u1", None, 8, &pool, 3).unwrap());
    assert_ne!(a, rerank_or_generate(&cfg, "u2", None, 8, &pool, 2).unwrap());
}

// -- repeated invocation ----------------------------------------------------

fn vocab_schema(n: usize) -> AttributeSchema {
    BTreeMap::from([("v".to_string(), (0..n).map(|i| format!("{i:03}")).collect())])
}

fn lc_share(q: f64, subjects: usize, seed: u64) -> f64 {
    let s = vocab_schema(100);
    let cfg = GeneratorConfig { lc_flip_probability: q, seed, ..Default::default() };
    let differ = (0..subjects)
        .filter(|u| {
            let user = format!("u{u}");
            let gen = |inv| infer_profile(&cfg, &user, &[], &s, inv).unwrap();
            let first = repeat_invocation(&cfg, GeneratorRole::Representer, &user, 1, gen);
            let second = repeat_invocation(&cfg, GeneratorRole::Representer, &user, 2, gen);
            first != second
        })
        .count();
    differ as f64 / subjects as f64
}

#[test]
fn zero_flip_probability_replays() {
    assert_eq!(lc_share(0.0, 1_000, 1), 0.0);
}

#[test]
fn certain_flip_differs_almost_always() {
    // collision probability on a uniform 100-value vocabulary is 0.01
    assert!(lc_share(1.0, 1_000, 2) >= 0.95);
}

#[test]
fn partial_flip_matches_analytic_expectation() {
    let expected = 0.21 * (1.0 - 0.01);
    let observed = lc_share(0.21, 5_400, 3);
    assert!((observed - expected).abs() <= 0.02, "{observed} vs {expected}");
}

#[test]
fn generated_record_json_shape() {
    let s = schema(&[("g", &["a"])]);
    let p = infer_profile(&GeneratorConfig::default(), "u1", &[], &s, 0).unwrap();
    let rec = GeneratedRecord::profile(2, 1, &p);
    let v: serde_json::Value = serde_json::to_value(&rec).unwrap();
    assert_eq!(
        v,
        serde_json::json!({"period": 2, "role": "representer", "subject": "u1",
                           "output": {"g": ["a"]}, "fabricated": {"g": false}, "trial": 1})
    );
    let back: GeneratedRecord = serde_json::from_value(v).unwrap();
    assert_eq!(back, rec);

    let list = GeneratedRecord::items(1, GeneratorRole::Decision, 2, "u", &["i1".into(), "FAB::item::0".into()], |i| !is_fabricated(i));
    let v = serde_json::to_value(&list).unwrap();
    assert_eq!(v["fabricated"], serde_json::json!([false, true]));
    assert_eq!(serde_json::from_value::<GeneratedRecord>(v).unwrap(), list);
}
