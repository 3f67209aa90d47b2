//! Acceptance suite. Prints one PASS/FAIL line per criterion at its pinned
//! tolerance; a FAIL is a measured outcome, not a test error. Runtime errors
//! still fail the test.
//!
//! `ACCEPTANCE_PRESET=smoke` runs the benchmark criteria at toy scale to
//! exercise the plumbing; the numbers are then meaningless.

mod common;

use std::io::Write;
use std::path::PathBuf;

use aftermath::classifier::Variant;
use aftermath::experiment::{write_json, Benchmark, BenchmarkConfig, Column, Protocol, TransferReport};

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn verdict(id: &str, ok: bool, detail: &str) -> bool {
    say(&format!("acceptance {id}: {} ({detail})", if ok { "PASS" } else { "FAIL" }));
    ok
}

fn points(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn property_suite() -> bool {
    let checks: [(&str, fn() -> common::Check); 7] = [
        ("locality, 1000 cases", || common::check_locality(1000)),
        ("masks, 10000 samples, offset frequency 1/9 +- 0.02", || common::check_masks(10_000)),
        ("quantizer vs brute force, 1000 vectors", || common::check_quantize(1000)),
        ("AUPRC vs oracle, 500 instances, 1e-9, 3 transforms", || common::check_auprc(500)),
        ("BCE gradient vs finite differences, 1e-4", common::check_bce_gradient),
        ("stage-2 and adapter freezing, byte equality", common::check_freeze),
        ("determinism of rendering, synthesis and training", common::check_determinism),
    ];
    let mut all = true;
    for (name, f) in checks {
        match f() {
            Ok(d) => say(&format!("  ok   {name}: {d}")),
            Err(e) => {
                say(&format!("  FAIL {name}: {e}"));
                all = false;
            }
        }
    }
    all
}

fn out_dir() -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn config() -> BenchmarkConfig {
    match std::env::var("ACCEPTANCE_PRESET").as_deref() {
        Ok("smoke") => BenchmarkConfig { replicates: 3, ..BenchmarkConfig::smoke() },
        _ => BenchmarkConfig::default(),
    }
}

fn col(v: Variant) -> Column {
    Column::Variant(v)
}

fn keep(name: &str, report: &TransferReport) {
    let dir = out_dir();
    write_json(&dir.join(format!("{name}.json")), report).unwrap();
    std::fs::write(dir.join(format!("{name}.txt")), format!("{}\n{}", report.table(), report.ablation_table())).unwrap();
}

#[test]
fn acceptance() {
    let mut passed = 0;
    let mut total = 0;
    let mut tally = |ok: bool| {
        total += 1;
        passed += ok as usize;
    };

    say("acceptance 1: property suite");
    let ok = property_suite();
    tally(verdict("1", ok, "all exact properties"));

    let cfg = config();
    let cache = out_dir().join("cache");
    let mut bench = Benchmark::new(&cfg, Some(&cache)).expect("benchmark prepares");

    let columns = [col(Variant::R0), col(Variant::R1), col(Variant::R2), col(Variant::R3), col(Variant::R4), Column::R4Finetuned];
    let multi = bench.run_transfer_matrix(Protocol::MultiSource, &[], &columns).expect("multi-source matrix runs");
    keep("multi_source", &multi);
    say(&multi.table());
    say(&multi.ablation_table());
    let avg = |c| multi.average(c);
    let (r0, r1, r2, r4) = (avg(col(Variant::R0)), avg(col(Variant::R1)), avg(col(Variant::R2)), avg(col(Variant::R4)));
    tally(verdict(
        "2",
        r4 >= r0 + 0.05,
        &format!("multi-source R4 {} vs R0 {} + 5 over {} targets, {} seeds", points(r4), points(r0), multi.settings.len(), multi.seeds.len()),
    ));
    tally(verdict(
        "3",
        r4 >= r2 && r4 >= r1 && r4 >= r0 + 0.05,
        &format!("R4 {} vs R2 {}, R1 {}, R0 {} + 5", points(r4), points(r2), points(r1), points(r0)),
    ));

    let sweep = bench.volume_sweep(&[0.25, 0.5, 1.0], &[]).expect("volume sweep runs");
    write_json(&out_dir().join("volume.json"), &sweep).unwrap();
    say(&sweep.table());
    let grew = sweep.series.iter().filter(|s| s.points.last().unwrap().mean >= s.points[0].mean).count();
    tally(verdict(
        "4",
        grew >= 3 && sweep.nested,
        &format!("AUPRC at 100% >= at 25% for {grew} of {} targets, nested subsets {}", sweep.series.len(), sweep.nested),
    ));

    let three: Vec<String> = aftermath::toyworld::benchmark_domains().iter().take(3).map(|d| d.name.clone()).collect();
    let single = bench
        .run_transfer_matrix(Protocol::SingleSource, &three, &[col(Variant::R0), col(Variant::R4)])
        .expect("single-source matrix runs");
    keep("single_source", &single);
    say(&single.table());
    let gain = single.delta(col(Variant::R4));
    tally(verdict(
        "5",
        single.settings.len() == 6 && gain > 0.0,
        &format!("{} single-source cells, mean R4 - R0 = {}", single.settings.len(), points(gain)),
    ));

    let lower = multi.generator_checks.iter().filter(|g| g.finetuned_ce < g.base_ce).count();
    let detail: Vec<String> =
        multi.generator_checks.iter().map(|g| format!("{} {:.4}->{:.4}", g.target, g.base_ce, g.finetuned_ce)).collect();
    tally(verdict(
        "6",
        !multi.generator_checks.is_empty() && lower == multi.generator_checks.len(),
        &format!("held-out masked-token CE {}; R4-ft avg {}", detail.join(", "), points(avg(Column::R4Finetuned))),
    ));

    say(&format!("acceptance summary: {passed} of {total} criteria pass; reports in {}", out_dir().display()));
}
