use batsel::data::Dataset;
use batsel::harness::{compare_surrogates, generate_task, run_comparison, sweep_gamma, sweep_sample_ratio, Arm, ReportRow, TaskSpec};
use batsel::rng::hash_str;
use batsel::stats::{mean, stderr};
use batsel::SelectionConfig;

fn checksum(rows: &[batsel::LabeledExample]) -> u64 {
    let mut buf = Vec::new();
    Dataset::new(rows.to_vec()).unwrap().write_jsonl(&mut buf).unwrap();
    hash_str(std::str::from_utf8(&buf).unwrap())
}

#[test]
fn s1_fixture_checksums_are_pinned() {
    let data = generate_task(&TaskSpec::s1(), 1).unwrap();
    assert_eq!((data.adaptation.len(), data.pool.len(), data.test.len()), (60, 600, 2000));
    let sums = [checksum(&data.adaptation), checksum(&data.pool), checksum(&data.test)];
    assert_eq!(sums, S1_SEED1_CHECKSUMS);
}

const S1_SEED1_CHECKSUMS: [u64; 3] = [4103276555764555498, 2052920954105760690, 5776652363027088590];

fn small() -> TaskSpec {
    TaskSpec {
        n_adaptation: 30,
        pool_size: 120,
        n_test: 200,
        ..TaskSpec::s1()
    }
}

fn quick() -> SelectionConfig {
    SelectionConfig {
        surrogate_steps: 80,
        adapter_steps: 80,
        ..SelectionConfig::default()
    }
}

fn losses<'a>(rows: impl Iterator<Item = &'a ReportRow>) -> Vec<Option<f64>> {
    rows.map(|r| r.heldout_logloss).collect()
}

#[test]
fn full_ratio_sweep_matches_comparison() {
    let seeds = [1, 2, 3];
    let cmp = run_comparison(&small(), &quick(), &seeds).unwrap();
    let sweep = sweep_sample_ratio(&small(), &quick(), &[1.0], &seeds).unwrap();
    assert_eq!(losses(sweep.rows_for(Arm::Bat)), losses(cmp.rows_for(Arm::Bat)));
}

#[test]
fn repeated_ratios_give_identical_rows() {
    let sweep = sweep_sample_ratio(&small(), &quick(), &[0.5, 0.5], &[4, 5]).unwrap();
    let l = losses(sweep.rows.iter());
    assert_eq!(l.len(), 4);
    assert_eq!(l[..2], l[2..]);
}

#[test]
fn zero_quota_gamma_row_is_the_baseline() {
    let seeds = [1, 2];
    // round(30 · 0.01 / 0.99) = 0; round(30 · 0.5 / 0.5) = 30 > 24 candidates at ratio 0.2
    let cfg = SelectionConfig {
        sample_ratio: 0.2,
        ..quick()
    };
    let rep = sweep_gamma(&small(), &cfg, &[0.5, 0.99], &seeds).unwrap();
    let base = losses(rep.rows_for(Arm::None));
    let degenerate: Vec<&ReportRow> = rep.rows_for(Arm::Bat).filter(|r| r.gamma == 0.99).collect();
    assert!(degenerate.iter().all(|r| r.quota == 0));
    assert_eq!(losses(degenerate.into_iter()), base);

    let pressured: Vec<&ReportRow> = rep.rows_for(Arm::Bat).filter(|r| r.gamma == 0.5).collect();
    assert!(pressured.iter().all(|r| r.notices.iter().any(|n| n.contains("clamped"))));
}

#[test]
fn full_strength_surrogate_is_standard_bat() {
    let seeds = [6, 7];
    let cmp = run_comparison(&small(), &quick(), &seeds).unwrap();
    let rep = compare_surrogates(&small(), &quick(), &[1.0, 0.5], &seeds).unwrap();
    let full = rep.rows_for(Arm::Bat).filter(|r| r.surrogate_fraction == 1.0);
    assert_eq!(losses(full), losses(cmp.rows_for(Arm::Bat)));
    assert_eq!(losses(rep.rows_for(Arm::None)), losses(cmp.rows_for(Arm::None)));
}

#[test]
fn arms_share_data_and_initialization() {
    let cfg = SelectionConfig {
        quota_override: Some(0),
        ..quick()
    };
    let rep = run_comparison(&small(), &cfg, &[1, 2, 3]).unwrap();
    let none = losses(rep.rows_for(Arm::None));
    assert_eq!(losses(rep.rows_for(Arm::Random)), none);
    assert_eq!(losses(rep.rows_for(Arm::Bat)), none);
}

#[test]
#[ignore = "known failure: the gradient-quadratic score favours informative high-gradient points even on an unshifted pool"]
fn null_task_bat_is_neutral() {
    let seeds: Vec<u64> = (1..=20).collect();
    let rep = run_comparison(&TaskSpec::null_task(), &SelectionConfig::default(), &seeds).unwrap();
    let bat: Vec<f64> = rep.rows_for(Arm::Bat).map(|r| r.heldout_logloss.unwrap()).collect();
    let rnd: Vec<f64> = rep.rows_for(Arm::Random).map(|r| r.heldout_logloss.unwrap()).collect();
    let diffs: Vec<f64> = bat.iter().zip(&rnd).map(|(b, r)| b - r).collect();
    let (d, se) = (mean(&diffs), stderr(&diffs));
    println!("bat - random = {d:.4} (se {se:.4})");
    assert!(d.abs() <= 2.0 * se);
}
